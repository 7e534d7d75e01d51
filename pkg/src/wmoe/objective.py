"""Training objective (image BCE + per-layer focal/dice + KL + reconstruction) and loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import LOSS_TERMS, RunConfig
from .ctds import kl_loss, rec_loss
from .errors import NumericError, TrainingError
from .model import AnomalyModel, ModelOutput
from .params import Adam
from .samoe import load_balance_loss
from .tensor import Tensor, as_tensor, clamp, log, mean, power, take, tsum

logger = logging.getLogger(__name__)

P_MIN = 1e-7
LOG_HEADER = ("epoch", "step", "global", "focal", "dice", "kl", "rec", "total")


def bce(s_gt, p) -> Tensor:
    """Binary cross-entropy, predictions clamped to [1e-7, 1 - 1e-7], mean over the batch."""
    y = np.asarray(s_gt.data if isinstance(s_gt, Tensor) else s_gt, dtype=np.float64)
    p = clamp(as_tensor(p), P_MIN, 1.0 - P_MIN)
    return mean(-(log(p) * y + log(1.0 - p) * (1.0 - y)))


def focal(M_l, M_gt, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Pixel-mean focal loss; alpha weights positives, 1 - alpha negatives."""
    y = np.asarray(M_gt.data if isinstance(M_gt, Tensor) else M_gt, dtype=np.float64)
    p = clamp(as_tensor(M_l), P_MIN, 1.0 - P_MIN)
    p_t = p * (2.0 * y - 1.0) + (1.0 - y)
    a_t = alpha * y + (1.0 - alpha) * (1.0 - y)
    return mean(-(power(1.0 - p_t, gamma) * log(p_t)) * a_t)


def dice(M_l, M_gt, smooth: float = 1.0) -> Tensor:
    """Soft Dice loss over the last two axes, averaged over any leading axes."""
    y = np.asarray(M_gt.data if isinstance(M_gt, Tensor) else M_gt, dtype=np.float64)
    M = as_tensor(M_l)
    y = np.broadcast_to(y, M.shape)
    inter = tsum(M * y, axis=(-2, -1))
    denom = tsum(M, axis=(-2, -1)) + (y.sum(axis=(-2, -1)) + smooth)
    return mean(1.0 - (inter * 2.0 + smooth) / denom)


def downsample_mask(mask: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """[..., h, w] binary mask -> [..., H, W]; a cell is positive if any covered pixel is."""
    mask = np.asarray(mask)
    h, w = mask.shape[-2:]
    H, W = grid
    blocks = mask.reshape(mask.shape[:-2] + (H, h // H, W, w // W))
    return (blocks.max(axis=(-3, -1)) > 0).astype(np.float64)


@dataclass
class LossReport:
    global_: float = 0.0
    local_focal: float = 0.0
    local_dice: float = 0.0
    kl: float = 0.0
    rec: float = 0.0
    total: float = 0.0
    aux: float = 0.0

    def row(self) -> dict[str, float]:
        return {"global": self.global_, "focal": self.local_focal, "dice": self.local_dice,
                "kl": self.kl, "rec": self.rec, "total": self.total}


def total_loss(out: ModelOutput, x_c, labels, masks_ds, cfg: RunConfig) -> tuple[Tensor, LossReport]:
    """Unweighted (by default) sum of the five terms; focal and dice are summed over layers.

    ``masks_ds`` are ground-truth masks already at map resolution, shape [B, H, W].
    """
    wts = cfg.loss_weights
    labels = np.asarray(labels, dtype=np.float64)
    gt = np.asarray(masks_ds, dtype=np.float64)
    maps = out.maps.per_layer  # [B, L, H, W]
    L = maps.shape[-3]
    terms: dict[str, Tensor] = {"global": bce(labels, out.s_hat_norm)}
    f_terms, d_terms = [], []
    for l in range(L):
        M_l = take(maps, [l], axis=-3).reshape(maps.shape[:-3] + maps.shape[-2:])
        f_terms.append(focal(M_l, gt, cfg.gamma, cfg.alpha))
        d_terms.append(dice(M_l, gt, cfg.smooth))
    terms["focal"] = _sum(f_terms)
    terms["dice"] = _sum(d_terms)
    if out.draw is not None:
        terms["kl"] = kl_loss(out.draw.mu, out.draw.log_var)
        terms["rec"] = rec_loss(out.draw.recon, x_c)
    aux = None
    if cfg.load_balance > 0 and out.routing is not None:
        aux = load_balance_loss(out.routing) * cfg.load_balance

    values = {}
    total: Tensor | None = None
    for name in LOSS_TERMS:
        if name not in terms:
            values[name] = 0.0
            continue
        t = terms[name] * wts[name] if wts[name] != 1.0 else terms[name]
        v = float(t.data)
        if not math.isfinite(v):
            raise TrainingError("non-finite loss component", component=name)
        values[name] = v
        total = t if total is None else total + t
    if aux is not None:
        total = total + aux
    report = LossReport(values["global"], values["focal"], values["dice"], values["kl"],
                        values["rec"], float(total.data), float(aux.data) if aux is not None else 0.0)
    return total, report


def _sum(ts: Sequence[Tensor]) -> Tensor:
    acc = ts[0]
    for t in ts[1:]:
        acc = acc + t
    return acc


@dataclass
class TrainResult:
    model: AnomalyModel
    log: list[dict[str, float]] = field(default_factory=list)


def train(cfg: RunConfig, samples: Sequence, model: AnomalyModel | None = None,
          features: tuple[np.ndarray, np.ndarray] | None = None,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam over all trainable parameters for ``cfg.epochs`` passes over ``samples``.

    Data order, reparameterisation noise and initialisation all derive from
    ``cfg.seed``. ``features`` may carry precomputed frozen encoder outputs
    aligned with ``samples``.
    """
    if not samples:
        raise TrainingError("training set is empty")
    model = model if model is not None else AnomalyModel(cfg)
    if features is None:
        features = model.encode(np.stack([s.pixels for s in samples]))
    x_c_all, grids_all = features
    labels_all = np.array([s.label for s in samples], dtype=np.float64)
    masks_all = downsample_mask(np.stack([s.mask for s in samples]), cfg.grid)

    opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_adam)
    order_rng = np.random.default_rng([cfg.seed, 20])
    noise_rng = np.random.default_rng([cfg.seed, 21])
    n = len(samples)
    steps = math.ceil(n / cfg.batch)
    log_rows: list[dict[str, float]] = []
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(n)
        for step in range(steps):
            idx = perm[step * cfg.batch:(step + 1) * cfg.batch]
            try:
                out = model.forward(x_c_all[idx], grids_all[idx], "train", noise_rng)
                loss, rep = total_loss(out, x_c_all[idx], labels_all[idx], masks_all[idx], cfg)
            except TrainingError as exc:
                raise TrainingError(exc.reason, epoch=epoch, step=step, component=exc.component) from None
            except NumericError as exc:
                raise TrainingError(f"non-finite forward pass: {exc}", epoch=epoch, step=step) from None
            if not math.isfinite(rep.total):
                raise TrainingError("non-finite total loss", epoch=epoch, step=step)
            loss.backward()
            opt.step()
            row = {"epoch": epoch, "step": step, **rep.row()}
            log_rows.append(row)
            if on_step is not None:
                on_step(row)
        logger.info("epoch %d total=%.5f", epoch, log_rows[-1]["total"])
    return TrainResult(model, log_rows)


def write_loss_csv(rows: Sequence[dict], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(LOG_HEADER), extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow(r)
