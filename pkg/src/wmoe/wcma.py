"""Wavelet-enhanced cross-modal attention.

Patch grids are split with an undecimated one-level Haar transform, the
high-frequency part is reweighted by a learned gate, the text embeddings
attend over the resulting patches, and per-layer anomaly maps are read off
as a two-way cosine softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InputError
from .params import LinearParams, NamedParamSet, uniform_init
from .tensor import (Tensor, as_tensor, gap, l2_normalize, matmul, mean, pointwise_conv, relu,
                     reshape, sigmoid, softmax, stack, swapaxes, take)

DEFAULT_TAU = 0.07


@dataclass
class WaveletBands:
    F_L: Tensor
    F_LH: Tensor
    F_HL: Tensor
    F_HH: Tensor


class WcmaParams:
    """Frequency gate (W_1, W_2, pointwise conv) and attention projections, shared across layers."""

    def __init__(self, params: NamedParamSet, C: int, rng: np.random.Generator,
                 tau: float = DEFAULT_TAU, prefix: str = "wcma"):
        self.C = C
        self.tau = tau
        self.w1 = LinearParams(params, f"{prefix}.w1", C, C, rng)
        self.w2 = LinearParams(params, f"{prefix}.w2", C, C, rng)
        self.pconv = LinearParams(params, f"{prefix}.pconv", C, C, rng)
        self.w_q = params.add(f"{prefix}.w_q", Tensor(uniform_init(rng, (C, C), C)))
        self.w_k = params.add(f"{prefix}.w_k", Tensor(uniform_init(rng, (C, C), C)))
        self.w_v = params.add(f"{prefix}.w_v", Tensor(uniform_init(rng, (C, C), C)))


def haar_decompose(F) -> WaveletBands:
    """Stride-1 Haar split of an [..., H, W, C] grid with replicate padding.

    For the 2x2 neighbourhood a=F[i,j], b=F[i,j+1], c=F[i+1,j], d=F[i+1,j+1]:
    L=(a+b+c+d)/4, LH=(a-b+c-d)/4, HL=(a+b-c-d)/4, HH=(a-b-c+d)/4.
    The four bands sum back to ``a``.
    """
    F = as_tensor(F)
    if F.ndim < 3:
        raise InputError(f"haar_decompose expects [..., H, W, C], got {F.shape}")
    H, W = F.shape[-3], F.shape[-2]
    if H < 2 or W < 2:
        raise InputError(f"haar_decompose needs H, W >= 2, got {H}x{W}")
    down = np.minimum(np.arange(H) + 1, H - 1)
    right = np.minimum(np.arange(W) + 1, W - 1)
    a = F
    b = take(F, right, axis=-2)
    c = take(F, down, axis=-3)
    d = take(c, right, axis=-2)
    ab, cd = a + b, c + d
    a_b, c_d = a - b, c - d
    return WaveletBands(
        F_L=(ab + cd) * 0.25,
        F_LH=(a_b + c_d) * 0.25,
        F_HL=(ab - cd) * 0.25,
        F_HH=(a_b - c_d) * 0.25,
    )


def high_freq_aggregate(bands: WaveletBands) -> Tensor:
    return bands.F_LH + bands.F_HL + bands.F_HH


def frequency_attention(params: WcmaParams, F_L, F_H) -> Tensor:
    """Gate the high-frequency band and add it back onto the low band.

    W_h = sigmoid(W_1 relu(GAP(F_L + F_H)) + W_2 relu(pconv(F_L + F_H)));
    the pooled channel term broadcasts over every pixel.
    """
    F_L, F_H = as_tensor(F_L), as_tensor(F_H)
    S = F_L + F_H
    g = params.w1(relu(gap(S)))
    loc = params.w2(relu(pointwise_conv(S, params.pconv.weight, params.pconv.bias)))
    gate = sigmoid(reshape(g, g.shape[:-1] + (1, 1, g.shape[-1])) + loc)
    return F_H * gate + F_L


def _flatten_grid(F: Tensor) -> Tensor:
    H, W, C = F.shape[-3:]
    return reshape(F, F.shape[:-3] + (H * W, C))


def cross_attend(params: WcmaParams, F_T, F_p, return_attention: bool = False):
    """Text rows attend over patch rows: softmax(F_T W_q (P W_k)^T / sqrt(C)) P W_v."""
    F_T, F_p = as_tensor(F_T), as_tensor(F_p)
    C = F_p.shape[-1]
    if F_T.shape[-1] != C:
        raise InputError(f"text dim {F_T.shape[-1]} != patch dim {C}")
    P = _flatten_grid(F_p)
    Q = matmul(F_T, params.w_q)
    K = matmul(P, params.w_k)
    V = matmul(P, params.w_v)
    attn = softmax(matmul(Q, swapaxes(K, -1, -2)) * (1.0 / math.sqrt(C)), axis=-1)
    out = matmul(attn, V)
    return (out, attn) if return_attention else out


def anomaly_map(F_T, F_p, tau: float = DEFAULT_TAU) -> Tensor:
    """Abnormal probability per patch from cosine similarity to the two text rows."""
    if tau <= 0:
        raise InputError("temperature must be positive")
    F_T, F_p = as_tensor(F_T), as_tensor(F_p)
    H, W = F_p.shape[-3], F_p.shape[-2]
    P = l2_normalize(_flatten_grid(F_p), axis=-1)
    T = l2_normalize(F_T, axis=-1)
    sims = matmul(P, swapaxes(T, -1, -2))           # [..., HW, 2]
    prob = take(softmax(sims * (1.0 / tau), axis=-1), [1], axis=-1)
    return reshape(prob, prob.shape[:-2] + (H, W))


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """[n_out, n_in] interpolation weights under the align-corners convention."""
    A = np.zeros((n_out, n_in))
    if n_in == 1:
        A[:, 0] = 1.0
        return A
    if n_out == 1:
        A[0, 0] = 1.0
        return A
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    A[np.arange(n_out), lo] = 1.0 - frac
    A[np.arange(n_out), lo + 1] += frac
    return A


def upsample_bilinear(M, target: tuple[int, int]) -> Tensor:
    """Resize the last two axes of ``M`` to ``target``."""
    M = as_tensor(M)
    H, W = M.shape[-2:]
    Ah = Tensor(bilinear_matrix(H, target[0]))
    AwT = Tensor(bilinear_matrix(W, target[1]).T)
    return matmul(matmul(Ah, M), AwT)


def fuse_maps(maps, target: tuple[int, int]) -> Tensor:
    """Upsample every per-layer map to ``target`` and average them.

    ``maps`` is a list of [..., H, W] tensors or one tensor whose axis -3 indexes layers.
    """
    if isinstance(maps, (list, tuple)):
        if not maps:
            raise ContractError("fuse_maps needs at least one map")
        maps = stack(list(maps), axis=-3)
    maps = as_tensor(maps)
    if maps.ndim < 3 or maps.shape[-3] == 0:
        raise ContractError("fuse_maps needs at least one map")
    return mean(upsample_bilinear(maps, target), axis=-3)


@dataclass
class AnomalyOutput:
    per_layer: Tensor         # [..., L, H, W]
    fused: Tensor             # [..., h, w]
    refined_text: Tensor | None  # [..., L, 2, C]


def wcma_forward(params: WcmaParams | None, F_T, grids, image_size: tuple[int, int],
                 tau: float = DEFAULT_TAU) -> AnomalyOutput:
    """Per-layer maps for grids [..., L, H, W, C] and text embeddings [..., 2, C].

    With ``params`` None the map is taken directly from the raw grids and the
    unrefined text embeddings.
    """
    grids = as_tensor(grids)
    F_T = as_tensor(F_T)
    T = reshape(F_T, F_T.shape[:-2] + (1,) + F_T.shape[-2:])  # broadcast over layers
    if params is None:
        per_layer = anomaly_map(T, grids, tau)
        refined = None
    else:
        bands = haar_decompose(grids)
        F_p = frequency_attention(params, bands.F_L, high_freq_aggregate(bands))
        refined = cross_attend(params, T, F_p)
        per_layer = anomaly_map(refined, F_p, tau)
    return AnomalyOutput(per_layer, fuse_maps(per_layer, image_size), refined)
