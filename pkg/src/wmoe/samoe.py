"""Semantic-aware mixture of experts: adapter pooling, top-k routing and image scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .params import LinearParams, NamedParamSet, uniform_init
from .tensor import (Tensor, amax, as_tensor, concat, gap, l2_normalize, linear, matmul, relu,
                     reshape, softmax, swapaxes, take, take_along_axis, tsum)


class Experts:
    """N two-layer C->C->C experts with weights stacked along a leading expert axis."""

    def __init__(self, params: NamedParamSet, C: int, N: int, rng: np.random.Generator,
                 prefix: str = "samoe.experts"):
        self.N, self.C = N, C
        self.w1 = params.add(f"{prefix}.w1", Tensor(uniform_init(rng, (N, C, C), C)))
        self.b1 = params.add(f"{prefix}.b1", Tensor(uniform_init(rng, (N, C), C)))
        self.w2 = params.add(f"{prefix}.w2", Tensor(uniform_init(rng, (N, C, C), C)))
        self.b2 = params.add(f"{prefix}.b2", Tensor(uniform_init(rng, (N, C), C)))

    def all_outputs(self, x_a) -> Tensor:
        """Every expert applied to x_a [..., C] -> [..., N, C]."""
        x_a = as_tensor(x_a)
        N, C = self.N, self.C
        x = reshape(x_a, x_a.shape[:-1] + (1, 1, C))
        h = relu(matmul(x, swapaxes(self.w1, -1, -2)) + reshape(self.b1, (N, 1, C)))
        o = matmul(h, swapaxes(self.w2, -1, -2)) + reshape(self.b2, (N, 1, C))
        return reshape(o, x_a.shape[:-1] + (N, C))

    def single(self, n: int, x_a) -> Tensor:
        """Expert ``n`` alone, computed from its own weight slices."""
        h = relu(linear(x_a, take(self.w1, [n], 0).reshape(self.C, self.C),
                        take(self.b1, [n], 0).reshape(self.C)))
        return linear(h, take(self.w2, [n], 0).reshape(self.C, self.C),
                      take(self.b2, [n], 0).reshape(self.C))


class MoeParams:
    def __init__(self, params: NamedParamSet, C: int, L: int, N: int, k: int,
                 rng: np.random.Generator, prefix: str = "samoe"):
        if L < 1 or C % L:
            raise ConfigError(f"C={C} must be divisible by the number of tapped layers L={L}", "C")
        if not 1 <= k <= N:
            raise ConfigError(f"need 1 <= k <= N, got k={k}, N={N}", "k")
        self.C, self.L, self.N, self.k = C, L, N, k
        self.adapters = [LinearParams(params, f"{prefix}.adapter{i}", C, C // L, rng)
                         for i in range(L)]
        self.gate = LinearParams(params, f"{prefix}.gate", C, N, rng)
        self.experts = Experts(params, C, N, rng, f"{prefix}.experts")


@dataclass
class RouterOutput:
    scores: Tensor          # [..., N]
    selected: np.ndarray    # [..., k] expert indices, highest score first
    weights: Tensor         # [..., k]


def adapter_pool(adapters: list[LinearParams], layer_grids) -> Tensor:
    """Project each layer to C/L channels per patch, concatenate, then spatially average.

    ``layer_grids`` is a list of [..., H, W, C] grids or one [..., L, H, W, C] tensor.
    """
    if not isinstance(layer_grids, (list, tuple)):
        g = as_tensor(layer_grids)
        layer_grids = [take(g, [i], axis=-4).reshape(g.shape[:-4] + g.shape[-3:])
                       for i in range(g.shape[-4])]
    if len(layer_grids) != len(adapters):
        raise InputError(f"{len(layer_grids)} grids for {len(adapters)} adapters")
    projected = [ad(as_tensor(g)) for ad, g in zip(adapters, layer_grids)]
    return gap(concat(projected, axis=-1))


def select_topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis; ties go to the lower index."""
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


def route(gate: LinearParams, x_a, N: int, k: int) -> RouterOutput:
    if not 1 <= k <= N:
        raise InputError(f"need 1 <= k <= N, got k={k}, N={N}")
    s = gate(as_tensor(x_a))
    if s.shape[-1] != N:
        raise InputError(f"gate produced {s.shape[-1]} scores, expected N={N}")
    sel = select_topk(s.data, k)
    w = softmax(take_along_axis(s, sel, axis=-1), axis=-1)
    return RouterOutput(s, sel, w)


def moe_aggregate(experts: Experts, routing: RouterOutput, x_a) -> Tensor:
    """x_p = sum_k w_k E_k(x_a) over the selected experts only."""
    outs = experts.all_outputs(x_a)                                    # [..., N, C]
    chosen = take_along_axis(outs, routing.selected[..., None], axis=-2)  # [..., k, C]
    w = reshape(routing.weights, routing.weights.shape + (1,))
    return tsum(chosen * w, axis=-2)


def load_balance_loss(routing: RouterOutput) -> Tensor:
    """Switch-style auxiliary loss N * sum_n f_n P_n (off unless enabled in the config)."""
    N = routing.scores.shape[-1]
    probs = softmax(routing.scores, axis=-1)
    P = reshape(probs, (-1, N)).mean(axis=0)
    counts = np.bincount(routing.selected.reshape(-1), minlength=N).astype(np.float64)
    f = counts / counts.sum()
    return tsum(P * Tensor(f)) * float(N)


def image_score(x_p, x_c, F_T, tau: float) -> Tensor:
    """Abnormal probability of ``x_p + x_c`` (or ``x_c`` when ``x_p`` is None) against F_T."""
    if tau <= 0:
        raise InputError("temperature must be positive")
    x_c = as_tensor(x_c)
    x_cls = x_c if x_p is None else as_tensor(x_p) + x_c
    u = l2_normalize(x_cls, axis=-1)
    T = l2_normalize(as_tensor(F_T), axis=-1)
    sims = tsum(reshape(u, u.shape[:-1] + (1, u.shape[-1])) * T, axis=-1)  # [..., 2]
    prob = softmax(sims * (1.0 / tau), axis=-1)
    return reshape(take(prob, [1], axis=-1), prob.shape[:-1])


def final_score(s_txt, M) -> tuple[Tensor, Tensor]:
    """(s_txt + max M, (s_txt + max M) / 2); M is [..., h, w]."""
    s_txt, M = as_tensor(s_txt), as_tensor(M)
    flat = reshape(M, M.shape[:-2] + (-1,))
    raw = s_txt + amax(flat, axis=-1)
    return raw, raw * 0.5
