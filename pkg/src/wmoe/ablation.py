"""Module-toggle ablation: the five standard rows trained and scored under shared seeds."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .metrics import evaluate
from .model import AnomalyModel
from .objective import train

ABLATION_ROWS: tuple[tuple[str, dict[str, bool]], ...] = (
    ("baseline", {"ctds": False, "wcma": False, "samoe": False}),
    ("+CTDS", {"ctds": True, "wcma": False, "samoe": False}),
    ("+CTDS+WCMA", {"ctds": True, "wcma": True, "samoe": False}),
    ("+CTDS+SA-MoE", {"ctds": True, "wcma": False, "samoe": True}),
    ("full", {"ctds": True, "wcma": True, "samoe": True}),
)


@dataclass
class AblationRow:
    name: str
    modules: dict[str, bool]
    image_auroc: list[float] = field(default_factory=list)
    pixel_auroc: list[float] = field(default_factory=list)

    @property
    def mean_image(self) -> float:
        return float(np.mean(self.image_auroc))

    @property
    def mean_pixel(self) -> float:
        return float(np.mean(self.pixel_auroc))


def run_ablation(cfg: RunConfig, train_samples: Sequence, eval_samples: Sequence,
                 seeds: Sequence[int], log: Callable[[str], None] | None = None) -> list[AblationRow]:
    """Train and evaluate every row for every seed; frozen features are computed once."""
    probe = AnomalyModel(cfg.replace(modules={"ctds": False, "wcma": False, "samoe": False}))
    tr_feats = probe.encode(np.stack([s.pixels for s in train_samples]))
    ev_feats = probe.encode(np.stack([s.pixels for s in eval_samples]))
    rows = [AblationRow(name, dict(mods)) for name, mods in ABLATION_ROWS]
    for seed in seeds:
        for row in rows:
            run_cfg = cfg.replace(seed=int(seed), modules=row.modules)
            result = train(run_cfg, train_samples, features=tr_feats)
            report, _, _ = evaluate(result.model, eval_samples, ev_feats)
            row.image_auroc.append(report.image_auroc)
            row.pixel_auroc.append(report.pixel_auroc)
            if log is not None:
                log(f"seed {seed} {row.name}: I-AUROC {report.image_auroc:.4f} "
                    f"P-AUROC {report.pixel_auroc:.4f}")
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        wr = csv.writer(fh)
        n = len(rows[0].image_auroc) if rows else 0
        wr.writerow(["row", "ctds", "wcma", "samoe", "image_auroc", "pixel_auroc"]
                    + [f"image_auroc_seed{i}" for i in range(n)]
                    + [f"pixel_auroc_seed{i}" for i in range(n)])
        for r in rows:
            wr.writerow([r.name, int(r.modules["ctds"]), int(r.modules["wcma"]), int(r.modules["samoe"]),
                         r.mean_image, r.mean_pixel] + r.image_auroc + r.pixel_auroc)
