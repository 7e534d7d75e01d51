"""Run configuration: a strict JSON schema with documented defaults."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .encoders import EncoderSpec
from .errors import ConfigError

LOSS_TERMS = ("global", "focal", "dice", "kl", "rec")
MODULES = ("ctds", "wcma", "samoe")


@dataclass
class RunConfig:
    seed: int = 0
    encoder_seed: int = 1234
    C: int = 64
    grid: tuple[int, int] = (8, 8)
    taps: int = 4
    image_size: tuple[int, int] = (64, 64)
    m: int = 2
    N: int = 8
    k: int = 2
    tau: float = 0.07
    latent_dim: int | None = None
    gamma: float = 2.0
    alpha: float = 0.25
    smooth: float = 1.0
    loss_weights: dict[str, float] = field(default_factory=lambda: {t: 1.0 for t in LOSS_TERMS})
    load_balance: float = 0.0
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    epochs: int = 20
    batch: int = 32
    modules: dict[str, bool] = field(default_factory=lambda: {m: True for m in MODULES})
    train_families: list[str] | None = None
    eval_families: list[str] | None = None
    data: str | None = None
    out: str | None = None

    def __post_init__(self):
        self.grid = tuple(self.grid)
        self.image_size = tuple(self.image_size)
        self.validate()

    # -- derived ---------------------------------------------------------
    @property
    def L(self) -> int:
        return self.taps

    @property
    def latent(self) -> int:
        return self.latent_dim if self.latent_dim is not None else self.C // 2

    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec(seed=self.encoder_seed, C=self.C, grid=self.grid,
                           n_tap_layers=self.taps, image_size=self.image_size)

    # -- validation ------------------------------------------------------
    def validate(self) -> None:
        def need(cond: bool, name: str, msg: str):
            if not cond:
                raise ConfigError(f"{name}: {msg}", name)

        for name in ("seed", "encoder_seed", "C", "taps", "m", "N", "k", "epochs", "batch"):
            v = getattr(self, name)
            need(isinstance(v, int) and not isinstance(v, bool), name, "must be an integer")
        need(self.C >= 8, "C", "must be >= 8")
        need(len(self.grid) == 2 and all(isinstance(v, int) and v >= 2 for v in self.grid),
             "grid", "must be two integers >= 2")
        need(len(self.image_size) == 2 and all(isinstance(v, int) and v >= 1 for v in self.image_size),
             "image_size", "must be two positive integers")
        need(self.image_size[0] % self.grid[0] == 0 and self.image_size[1] % self.grid[1] == 0,
             "image_size", "must be divisible by grid")
        need(self.taps >= 1, "taps", "must be >= 1")
        need(self.C % self.taps == 0, "C", f"must be divisible by taps={self.taps}")
        need(self.m >= 1, "m", "must be >= 1")
        need(1 <= self.k <= self.N, "k", "need 1 <= k <= N")
        need(self.tau > 0, "tau", "must be positive")
        need(self.latent_dim is None or (isinstance(self.latent_dim, int) and self.latent_dim >= 1),
             "latent_dim", "must be null or a positive integer")
        need(self.gamma >= 0, "gamma", "must be >= 0")
        need(0 <= self.alpha <= 1, "alpha", "must lie in [0, 1]")
        need(self.smooth > 0, "smooth", "must be positive")
        need(isinstance(self.loss_weights, dict) and set(self.loss_weights) <= set(LOSS_TERMS),
             "loss_weights", f"keys must be among {LOSS_TERMS}")
        self.loss_weights = {t: float(self.loss_weights.get(t, 1.0)) for t in LOSS_TERMS}
        need(self.load_balance >= 0, "load_balance", "must be >= 0")
        need(self.lr > 0, "lr", "must be positive")
        need(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "beta1", "betas must lie in [0, 1)")
        need(self.eps_adam > 0, "eps_adam", "must be positive")
        need(self.epochs >= 1, "epochs", "must be >= 1")
        need(self.batch >= 1, "batch", "must be >= 1")
        need(isinstance(self.modules, dict) and set(self.modules) <= set(MODULES),
             "modules", f"keys must be among {MODULES}")
        self.modules = {mod: bool(self.modules.get(mod, True)) for mod in MODULES}
        for name in ("train_families", "eval_families"):
            v = getattr(self, name)
            need(v is None or (isinstance(v, list) and all(isinstance(s, str) for s in v)),
                 name, "must be null or a list of family names")

    # -- (de)serialisation -------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["grid"] = list(self.grid)
        d["image_size"] = list(self.image_size)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}", unknown[0])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_json(text)

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        d.update(changes)
        return RunConfig.from_dict(d)


DESK_OVERRIDES = {"batch": 16, "epochs": 20, "lr": 5e-4}


def desk_config(**overrides) -> RunConfig:
    """Desk-scale preset: batch 16, 20 epochs, lr 5e-4; everything else at the full-scale defaults.

    With ~200 training images the run has only a few hundred optimiser steps,
    so the learning rate is raised over the full-scale 2e-4.
    """
    base = dict(DESK_OVERRIDES)
    base.update(overrides)
    return RunConfig.from_dict(base)
