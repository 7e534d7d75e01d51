"""Full detector: frozen encoders + prompt learning + the three optional modules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .config import RunConfig
from .ctds import LatentDraw, PromptState, VaeParams, build_prompts, encode_sample, text_embeddings
from .encoders import ImageEncoder, TextEncoder
from .params import NamedParamSet
from .samoe import MoeParams, RouterOutput, adapter_pool, final_score, image_score, moe_aggregate, route
from .tensor import Tensor, no_grad
from .wcma import AnomalyOutput, WcmaParams, wcma_forward

# independent init streams so toggling one module leaves the others' init unchanged
_STREAMS = {"prompt": 10, "ctds": 11, "wcma": 12, "samoe": 13}


@dataclass
class ModelOutput:
    text: Tensor                 # F_T [B, 2, C] (or [2, C] when prompts are image-independent)
    maps: AnomalyOutput
    s_txt: Tensor                # [B]
    s_hat_raw: Tensor            # [B]
    s_hat_norm: Tensor           # [B]
    draw: LatentDraw | None = None
    routing: RouterOutput | None = None


class AnomalyModel:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        spec = cfg.encoder_spec()
        self.image_encoder = ImageEncoder(spec)
        self.text = TextEncoder(spec)
        self.params = NamedParamSet()

        def rng(name):
            return np.random.default_rng([cfg.seed, _STREAMS[name]])

        self.prompt = PromptState(self.params, cfg.C, cfg.m, rng("prompt"))
        mods = cfg.modules
        self.vae = VaeParams(self.params, cfg.C, cfg.latent, rng("ctds")) if mods["ctds"] else None
        self.wcma = WcmaParams(self.params, cfg.C, rng("wcma"), cfg.tau) if mods["wcma"] else None
        self.moe = (MoeParams(self.params, cfg.C, cfg.L, cfg.N, cfg.k, rng("samoe"))
                    if mods["samoe"] else None)

    def encode(self, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Frozen features for a stack of images: (x_c [B, C], grids [B, L, H, W, C])."""
        return self.image_encoder.encode_batch(pixels)

    def forward(self, x_c, grids, mode: Literal["train", "eval"] = "eval",
                rng: np.random.Generator | None = None) -> ModelOutput:
        cfg = self.cfg
        x_c = x_c if isinstance(x_c, Tensor) else Tensor(x_c)
        grids = grids if isinstance(grids, Tensor) else Tensor(grids)
        draw = encode_sample(self.vae, x_c, cfg.m, mode, rng) if self.vae is not None else None
        seq_n, seq_a = build_prompts(self.prompt, draw, self.text)
        F_T = text_embeddings(self.text, seq_n, seq_a)
        maps = wcma_forward(self.wcma, F_T, grids, cfg.image_size, cfg.tau)
        routing = x_p = None
        if self.moe is not None:
            x_a = adapter_pool(self.moe.adapters, grids)
            routing = route(self.moe.gate, x_a, cfg.N, cfg.k)
            x_p = moe_aggregate(self.moe.experts, routing, x_a)
        s_txt = image_score(x_p, x_c, F_T, cfg.tau)
        raw, norm = final_score(s_txt, maps.fused)
        return ModelOutput(F_T, maps, s_txt, raw, norm, draw, routing)

    def predict(self, x_c: np.ndarray, grids: np.ndarray, chunk: int = 64
                ) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode image scores (s_hat_raw) and fused maps, no tape."""
        scores, maps = [], []
        with no_grad():
            for i in range(0, len(x_c), chunk):
                out = self.forward(x_c[i:i + chunk], grids[i:i + chunk], "eval")
                scores.append(out.s_hat_raw.data)
                maps.append(out.maps.fused.data)
        return np.concatenate(scores), np.concatenate(maps)

    def frozen_weights(self) -> dict[str, np.ndarray]:
        out = {f"image.{k}": v for k, v in self.image_encoder.weights().items()}
        out.update({f"text.{k}": v for k, v in self.text.weights().items()})
        return out
