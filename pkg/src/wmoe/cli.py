"""``wmoe`` command-line entry point.

Exit codes: 0 success, 2 usage/config/data error, 3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import run_ablation, write_ablation_csv
from .checkpoint import check_compatible, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import FamilySpec, generate, read_dataset, write_dataset, write_pgm, zero_shot_split
from .encoders import FeatureBundle, ImageEncoder, save_features
from .errors import NumericError, TrainingError, WmoeError
from .metrics import compute_report, write_metrics_csv
from .objective import train, write_loss_csv
from .tensor import Tensor

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("wmoe")


class UsageError(WmoeError):
    pass


def _prepare_out(path: str, force: bool = False, must_be_empty: bool = False) -> Path:
    out = Path(path)
    if must_be_empty and out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"{out}: output directory exists and is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_samples(path: str):
    d = Path(path)
    if not d.is_dir():
        raise UsageError(f"{d}: data directory does not exist")
    samples = read_dataset(d)
    if not samples:
        raise UsageError(f"{d}: dataset is empty")
    return samples


def _select(samples, families, what: str):
    if families is None:
        return list(samples)
    chosen = [s for s in samples if s.family in set(families)]
    if not chosen:
        raise UsageError(f"no samples of {what} families {families} in dataset")
    return chosen


def _family_specs(path: str) -> list[FamilySpec]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read spec {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON: {exc}") from None
    entries = doc.get("families", [doc]) if isinstance(doc, dict) else doc
    if not isinstance(entries, list) or not entries or not all(isinstance(e, dict) for e in entries):
        raise UsageError(f"{path}: expected a family object, a list of them, or {{\"families\": [...]}}")
    specs = [FamilySpec.from_dict(e) for e in entries]
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise UsageError(f"{path}: duplicate family names {names}")
    return specs


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    specs = _family_specs(args.spec)
    out = _prepare_out(args.out, args.force, must_be_empty=True)
    samples = []
    for spec in specs:
        samples.extend(generate(spec, args.n, args.seed))
    write_dataset(samples, out)
    for spec in specs:
        fam = [s for s in samples if s.family == spec.name]
        n_pos = sum(s.label for s in fam)
        print(f"{spec.name}: {len(fam)} images ({len(fam) - n_pos} normal, {n_pos} anomalous)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    samples = _load_samples(args.data)
    if cfg.train_families is not None and cfg.eval_families is not None:
        samples, _ = zero_shot_split(samples, cfg.train_families, cfg.eval_families)
    samples = _select(samples, cfg.train_families, "train")
    out = _prepare_out(args.out)
    result = train(cfg, samples)
    save_checkpoint(result.model, out / "checkpoint.wmoe")
    write_loss_csv(result.log, out / "loss.csv")
    print(f"trained on {len(samples)} images; final total loss {result.log[-1]['total']:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    expect = RunConfig.load(args.config) if args.config else None
    model = load_checkpoint(args.checkpoint)
    if expect is not None:
        check_compatible(model.cfg, expect)
    samples = _select(_load_samples(args.data), model.cfg.eval_families, "eval")
    out = _prepare_out(args.out)
    x_c, grids = model.encode(np.stack([s.pixels for s in samples]))
    scores, maps = model.predict(x_c, grids)
    labels = np.array([s.label for s in samples])
    masks = np.stack([s.mask for s in samples])
    rows = []
    families = sorted({s.family for s in samples})
    for fam in families:
        idx = np.array([i for i, s in enumerate(samples) if s.family == fam])
        rows.append(("eval", fam, compute_report(scores[idx], labels[idx], maps[idx], masks[idx])))
    if len(families) > 1:
        rows.append(("eval", "all", compute_report(scores, labels, maps, masks)))
    write_metrics_csv(rows, out / "metrics.csv")
    if args.dump_maps:
        dump_maps(samples, maps, out / "maps")
    for _, fam, rep in rows:
        print(f"{fam}: image AUROC {_fmt(rep.image_auroc)}  pixel AUROC {_fmt(rep.pixel_auroc)}")
    return EXIT_OK


def dump_maps(samples, maps: np.ndarray, directory: Path) -> None:
    """One 8-bit heatmap per image (round(255 M)) and the input beside it."""
    directory.mkdir(parents=True, exist_ok=True)
    for s, m in zip(samples, maps):
        heat = np.round(255.0 * np.clip(m, 0.0, 1.0)).astype(np.uint8)
        img = np.round(255.0 * np.clip(s.pixels, 0.0, 1.0)).astype(np.uint8)
        write_pgm(directory / f"{s.id}_map.pgm", heat, 255)
        write_pgm(directory / f"{s.id}_side.pgm", np.concatenate([img, heat], axis=1), 255)


def cmd_ablate(args) -> int:
    cfg = RunConfig.load(args.config)
    if cfg.train_families is None or cfg.eval_families is None:
        raise UsageError("ablate needs train_families and eval_families in the config")
    train_s, eval_s = zero_shot_split(_load_samples(args.data), cfg.train_families, cfg.eval_families)
    if not train_s or not eval_s:
        raise UsageError("train or eval split is empty for the configured families")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed + i for i in range(3)]
    out = _prepare_out(args.out)
    rows = run_ablation(cfg, train_s, eval_s, seeds, log=log.info)
    write_ablation_csv(rows, out / "ablation.csv")
    for r in rows:
        print(f"{r.name:14s} I-AUROC {r.mean_image:.4f}  P-AUROC {r.mean_pixel:.4f}")
    return EXIT_OK


def cmd_export_features(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    samples = _load_samples(args.data)
    out = _prepare_out(args.out)
    enc = ImageEncoder(cfg.encoder_spec())
    x_c, grids = enc.encode_batch(np.stack([s.pixels for s in samples]))
    for s, xc, g in zip(samples, x_c, grids):
        bundle = FeatureBundle(Tensor(xc), [(i + 1, Tensor(layer)) for i, layer in enumerate(g)], "stub")
        save_features(bundle, out / f"{s.id}.wmfeat")
    print(f"wrote {len(samples)} feature files to {out}")
    return EXIT_OK


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wmoe", description="Zero-shot anomaly detection on synthetic textures.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--spec", required=True, help="JSON family spec (object, list, or {\"families\": [...]})")
    g.add_argument("--n", type=int, required=True, help="images per family")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write a checkpoint plus loss log")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a dataset with a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config", help="check structural compatibility against this config")
    e.add_argument("--dump-maps", action="store_true", help="write PGM heatmaps of the fused maps")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and score the five module-toggle rows")
    a.add_argument("--config", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", help="comma-separated seeds (default: seed, seed+1, seed+2)")
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export-features", help="dump frozen encoder features per image")
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--config")
    x.set_defaults(func=cmd_export_features)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TrainingError, NumericError) as exc:
        print(f"wmoe: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except WmoeError as exc:
        print(f"wmoe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
