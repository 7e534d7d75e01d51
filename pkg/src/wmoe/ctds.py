"""Class-token distribution sampling: a small VAE over the class token whose
decoded samples are added onto the learnable prompt slots."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .encoders import TextEncoder, TokenSequence
from .errors import ContractError, DimensionError, InputError
from .params import MLP, NamedParamSet
from .tensor import Tensor, concat, exp, linear, stack, swapaxes, tsum

NORMAL_TEMPLATE = ("a", "photo", "of", "a", "good")
ABNORMAL_TEMPLATE = ("a", "photo", "of", "a", "damaged")


class VaeParams:
    """Encoder MLP, mean/log-variance heads and decoder MLP, all under ``ctds.``."""

    def __init__(self, params: NamedParamSet, C: int, latent_dim: int | None,
                 rng: np.random.Generator, prefix: str = "ctds"):
        self.C = C
        self.latent_dim = latent_dim if latent_dim is not None else C // 2
        if self.latent_dim < 1:
            raise InputError("latent dim must be >= 1")
        lat = self.latent_dim
        bound = 1.0 / np.sqrt(C)
        self.mlp = MLP(params, f"{prefix}.mlp", C, C, C, rng)
        self.w_mu = params.add(f"{prefix}.w_mu", Tensor(rng.uniform(-bound, bound, (lat, C))))
        self.w_sigma = params.add(f"{prefix}.w_sigma", Tensor(rng.uniform(-bound, bound, (lat, C))))
        self.decoder = MLP(params, f"{prefix}.decoder", lat, C, C, rng)


@dataclass
class LatentDraw:
    mu: Tensor
    log_var: Tensor
    samples: Tensor  # [m, ..., latent]
    recon: Tensor    # [m, ..., C]

    @property
    def m(self) -> int:
        return self.samples.shape[0]


class PromptState:
    """m learnable normal and m learnable abnormal slot vectors plus the fixed templates."""

    def __init__(self, params: NamedParamSet, C: int, m: int, rng: np.random.Generator,
                 prefix: str = "prompt", init_std: float = 0.02):
        if m < 1:
            raise InputError("prompt length m must be >= 1")
        self.m = m
        self.v_n = params.add(f"{prefix}.v_n", Tensor(rng.normal(0.0, init_std, (m, C))))
        self.v_a = params.add(f"{prefix}.v_a", Tensor(rng.normal(0.0, init_std, (m, C))))
        self.template_n = NORMAL_TEMPLATE
        self.template_a = ABNORMAL_TEMPLATE


def encode_sample(params: VaeParams, x_c, m: int, mode: Literal["train", "eval"] = "eval",
                  rng: np.random.Generator | None = None) -> LatentDraw:
    """Posterior parameters of ``x_c`` and ``m`` reparameterised draws, decoded back to C.

    In eval mode every draw is the posterior mean.
    """
    x_c = x_c if isinstance(x_c, Tensor) else Tensor(x_c)
    if x_c.shape[-1] != params.C:
        raise DimensionError(f"class token dim {x_c.shape[-1]} != {params.C}")
    if m < 1:
        raise InputError("m must be >= 1")
    h = params.mlp(x_c)
    mu = linear(h, params.w_mu)
    log_var = linear(h, params.w_sigma)
    shape = (m,) + mu.shape
    if mode == "train":
        if rng is None:
            raise ContractError("train-mode sampling needs a seeded rng")
        eps = rng.standard_normal(shape)
        samples = mu + Tensor(eps) * exp(log_var * 0.5)
    elif mode == "eval":
        samples = mu + Tensor(np.zeros(shape))
    else:
        raise InputError(f"unknown mode {mode!r}")
    return LatentDraw(mu, log_var, samples, params.decoder(samples))


def kl_loss(mu, log_var) -> Tensor:
    """KL(N(mu, exp(log_var)) || N(0, I)), summed over latent dims, averaged over the batch."""
    mu = mu if isinstance(mu, Tensor) else Tensor(mu)
    log_var = log_var if isinstance(log_var, Tensor) else Tensor(log_var)
    if mu.shape != log_var.shape:
        raise DimensionError(f"kl_loss: {mu.shape} vs {log_var.shape}")
    per = tsum(1.0 + log_var - mu * mu - exp(log_var), axis=-1) * -0.5
    return per.mean()


def rec_loss(r, x_c) -> Tensor:
    """Squared L2 distance, averaged over every leading axis (draws, batch)."""
    r = r if isinstance(r, Tensor) else Tensor(r)
    x_c = x_c if isinstance(x_c, Tensor) else Tensor(x_c)
    if r.shape[-1] != x_c.shape[-1]:
        raise DimensionError(f"rec_loss: {r.shape} vs {x_c.shape}")
    d = r - x_c
    return tsum(d * d, axis=-1).mean()


def build_prompts(prompt: PromptState, draw: LatentDraw | None,
                  text: TextEncoder) -> tuple[TokenSequence, TokenSequence]:
    """Fill each template's m slots with ``r_i + v_i`` (or raw ``v_i`` when ``draw`` is None).

    With a batched draw the sequences carry a leading batch axis: [B, n_tok, C].
    """
    m = prompt.m
    if draw is None:
        slots_n, slots_a = prompt.v_n, prompt.v_a
    else:
        if draw.m != m:
            raise ContractError(f"draw has {draw.m} samples but prompt expects m={m}")
        r = draw.recon
        if r.ndim > 2:
            r = swapaxes(r, 0, -2)  # [m, B, C] -> [B, m, C]
        slots_n = r + prompt.v_n
        slots_a = r + prompt.v_a

    def seq(words, slots: Tensor) -> TokenSequence:
        tmpl = text.template(list(words)).data
        lead = slots.shape[:-2]
        if lead:
            tmpl = np.broadcast_to(tmpl, lead + tmpl.shape)
        toks = concat([Tensor(tmpl), slots], axis=-2)
        return TokenSequence(toks, [False] * len(words) + [True] * m)

    return seq(prompt.template_n, slots_n), seq(prompt.template_a, slots_a)


def text_embeddings(text: TextEncoder, seq_n: TokenSequence, seq_a: TokenSequence) -> Tensor:
    """Stack normal (row 0) and abnormal (row 1) embeddings: [..., 2, C]."""
    return stack([text(seq_n.tokens), text(seq_a.tokens)], axis=-2)
