"""Synthetic textured-defect images, the on-disk dataset layout and the zero-shot split."""

from __future__ import annotations

import csv
import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import FormatError, ProtocolError, SpecError

TEXTURES = ("sinusoid-grating", "checkerboard", "filtered-noise")
DEFECTS = ("blob", "scratch", "patch-swap")
AREA_BOUNDS = (0.002, 0.10)
POLARITIES = {"dark": (-1.0,), "bright": (1.0,), "both": (-1.0, 1.0)}
INDEX_HEADER = ("id", "family", "label", "pixels_path", "mask_path")


@dataclass
class ImageSample:
    pixels: np.ndarray        # [h, w] float64 in [0, 1]
    mask: np.ndarray          # [h, w] uint8 in {0, 1}
    label: int
    family: str
    seed: int | None = None
    id: str = ""

    def __post_init__(self):
        positive = bool(np.any(self.mask))
        if bool(self.label) != positive:
            raise FormatError(f"sample {self.id or '?'}: label {self.label} inconsistent with mask")


@dataclass(frozen=True)
class FamilySpec:
    """Texture family with its defect menu.

    ``intensity`` is the defect amplitude range; ``polarity`` picks whether a
    defect darkens the texture, brightens it, or either with equal odds.
    """

    name: str
    texture: str
    period: tuple[float, float] = (6.0, 12.0)
    angle: tuple[float, float] = (0.0, math.pi)
    smoothing: tuple[float, float] = (1.5, 3.0)
    defects: tuple[str, ...] = ("blob", "scratch")
    intensity: tuple[float, float] = (0.3, 0.6)
    polarity: str = "both"
    anomaly_rate: float = 0.5
    defect_scale: tuple[float, float] = (4.0, 16.0)
    noise: float = 0.02
    image_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        for f in ("period", "angle", "smoothing", "intensity", "defect_scale", "image_size"):
            object.__setattr__(self, f, tuple(getattr(self, f)))
        object.__setattr__(self, "defects", tuple(self.defects))
        if self.texture not in TEXTURES:
            raise SpecError(f"unknown texture {self.texture!r}; expected one of {TEXTURES}")
        bad = [d for d in self.defects if d not in DEFECTS]
        if bad or not self.defects:
            raise SpecError(f"invalid defect menu {self.defects!r}; choose from {DEFECTS}")
        if not 0.0 <= self.anomaly_rate < 1.0:
            raise SpecError(f"anomaly_rate must lie in [0, 1), got {self.anomaly_rate}")
        for f in ("period", "angle", "smoothing", "intensity", "defect_scale"):
            lo, hi = getattr(self, f)
            if lo > hi:
                raise SpecError(f"{f}: lower bound exceeds upper bound")
        if not 0.0 < self.intensity[0] <= self.intensity[1] <= 1.0:
            raise SpecError(f"intensity {self.intensity} must satisfy 0 < lo <= hi <= 1")
        if self.polarity not in POLARITIES:
            raise SpecError(f"unknown polarity {self.polarity!r}; expected one of {tuple(POLARITIES)}")
        h, w = self.image_size
        if self.defect_scale[0] <= 0 or self.defect_scale[1] > min(h, w):
            raise SpecError(f"defect_scale {self.defect_scale} does not fit a {h}x{w} image")
        if self.period[0] <= 0 or self.smoothing[0] <= 0:
            raise SpecError("period and smoothing must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "FamilySpec":
        d = dict(d)
        base = d.pop("preset", None)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise SpecError(f"unknown family keys {unknown}")
        if base is not None:
            if base not in PRESETS:
                raise SpecError(f"unknown preset family {base!r}; known: {sorted(PRESETS)}")
            merged = {f.name: getattr(PRESETS[base], f.name) for f in fields(cls)}
            merged.update(d)
            d = merged
        try:
            return cls(**d)
        except TypeError as exc:
            raise SpecError(str(exc)) from None


PRESETS: dict[str, FamilySpec] = {
    "grating": FamilySpec("grating", "sinusoid-grating", period=(6.0, 12.0)),
    "checkerboard": FamilySpec("checkerboard", "checkerboard", period=(8.0, 16.0)),
    "noise": FamilySpec("noise", "filtered-noise", smoothing=(1.0, 2.5)),
}


def preset(name: str) -> FamilySpec:
    if name not in PRESETS:
        raise SpecError(f"unknown family {name!r}; known: {sorted(PRESETS)}")
    return PRESETS[name]


# ---------------------------------------------------------------------------
# textures and defects
# ---------------------------------------------------------------------------

def _texture(kind: str, spec: FamilySpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "sinusoid-grating":
        period = rng.uniform(*spec.period)
        theta = rng.uniform(*spec.angle)
        phase = rng.uniform(0, 2 * math.pi)
        u = xx * math.cos(theta) + yy * math.sin(theta)
        return 0.5 + 0.3 * np.sin(2 * math.pi * u / period + phase)
    if kind == "checkerboard":
        size = rng.uniform(*spec.period) / 2.0
        ox, oy = rng.uniform(0, 2 * size, size=2)
        sx = np.sin(math.pi * (xx + ox) / size)
        sy = np.sin(math.pi * (yy + oy) / size)
        # soft edges keep the pattern band-limited
        return 0.5 + 0.25 * np.tanh(3.0 * sx * sy)
    sigma = rng.uniform(*spec.smoothing)
    field_ = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    field_ = (field_ - field_.mean()) / (field_.std() + 1e-12)
    return 0.5 + 0.12 * field_


def _signed_amplitude(spec: FamilySpec, rng: np.random.Generator) -> float:
    amp = rng.uniform(*spec.intensity)
    signs = POLARITIES[spec.polarity]
    return amp * (signs[0] if len(signs) == 1 else rng.choice(signs))


def _blob(img, spec, rng):
    h, w = img.shape
    lo, hi = spec.defect_scale
    sigma = rng.uniform(max(lo, 1.0), max(lo, 1.0) + (hi - lo) / 4.0)
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    yy, xx = np.mgrid[0:h, 0:w]
    bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    amp = _signed_amplitude(spec, rng)
    mask = bump >= 0.3
    return img + amp * bump * mask, mask


def _scratch(img, spec, rng):
    h, w = img.shape
    lo, hi = spec.defect_scale
    length = rng.uniform(max(lo, 2.0) * 2, hi * 2.5)
    width = rng.uniform(1.0, 3.0)
    theta = rng.uniform(0, math.pi)
    cy, cx = rng.uniform(0.2 * h, 0.8 * h), rng.uniform(0.2 * w, 0.8 * w)
    dy, dx = math.sin(theta) * length / 2, math.cos(theta) * length / 2
    p0, p1 = np.array([cy - dy, cx - dx]), np.array([cy + dy, cx + dx])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    d = p1 - p0
    t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / (d @ d), 0.0, 1.0)
    dist = np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))
    cover = np.clip(width / 2.0 + 0.5 - dist, 0.0, 1.0)
    target = 0.5 + _signed_amplitude(spec, rng) * 1.5
    return img * (1 - cover) + target * cover, cover > 0


def _patch_swap(img, spec, rng):
    h, w = img.shape
    lo, hi = spec.defect_scale
    ph = int(round(rng.uniform(max(lo, 3.0), hi)))
    pw = int(round(rng.uniform(max(lo, 3.0), hi)))
    y0 = int(rng.integers(0, h - ph + 1))
    x0 = int(rng.integers(0, w - pw + 1))
    other = rng.choice([t for t in TEXTURES if t != spec.texture])
    donor = _texture(str(other), spec, rng)
    mask = np.zeros((h, w), dtype=bool)
    mask[y0:y0 + ph, x0:x0 + pw] = True
    return np.where(mask, donor, img), mask


_DEFECT_FNS = {"blob": _blob, "scratch": _scratch, "patch-swap": _patch_swap}


def _sample_seed(seed: int, family: str, i: int) -> int:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(family.encode()), i])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _make_sample(spec: FamilySpec, sample_seed: int, label: int, sid: str) -> ImageSample:
    rng = np.random.default_rng(sample_seed)
    img = _texture(spec.texture, spec, rng)
    h, w = spec.image_size
    mask = np.zeros((h, w), dtype=bool)
    if label:
        lo_area, hi_area = AREA_BOUNDS[0] * h * w, AREA_BOUNDS[1] * h * w
        for _ in range(200):
            kind = str(rng.choice(spec.defects))
            cand, m = _DEFECT_FNS[kind](img, spec, rng)
            if lo_area <= m.sum() <= hi_area:
                img, mask = cand, m
                break
        else:
            raise SpecError(f"family {spec.name}: could not place a defect within area bounds")
    img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return ImageSample(np.clip(img, 0.0, 1.0), mask.astype(np.uint8), int(label), spec.name,
                       sample_seed, sid)


def worker_count(default: int | None = None) -> int:
    env = os.environ.get("WMOE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return default if default is not None else (os.cpu_count() or 1)


def generate(spec: FamilySpec, n: int, seed: int) -> list[ImageSample]:
    """``n`` samples of one family; exactly ``round(n * anomaly_rate)`` are anomalous."""
    if n < 1:
        raise SpecError("n must be >= 1")
    label_rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(spec.name.encode()), 7])
    n_anom = int(round(n * spec.anomaly_rate))
    labels = np.zeros(n, dtype=int)
    labels[label_rng.permutation(n)[:n_anom]] = 1
    jobs = [(spec, _sample_seed(seed, spec.name, i), int(labels[i]), f"{spec.name}_{i:05d}")
            for i in range(n)]
    workers = worker_count()
    if workers == 1 or n < 32:
        return [_make_sample(*j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda j: _make_sample(*j), jobs))


def zero_shot_split(samples: Sequence[ImageSample], train_families: Iterable[str],
                    eval_families: Iterable[str]) -> tuple[list[ImageSample], list[ImageSample]]:
    """Partition samples by family; overlapping family sets are rejected."""
    tr, ev = set(train_families), set(eval_families)
    overlap = tr & ev
    if overlap:
        raise ProtocolError(f"train and eval families overlap: {sorted(overlap)}")
    if not tr or not ev:
        raise ProtocolError("both train and eval family sets must be non-empty")
    return ([s for s in samples if s.family in tr], [s for s in samples if s.family in ev])


# Default zero-shot benchmark: two families for training, a disjoint one for evaluation.
BENCHMARK_TRAIN = ("noise", "checkerboard")
BENCHMARK_EVAL = ("grating",)


def benchmark(n_train: int = 200, n_eval: int = 200, seed: int = 0
              ) -> tuple[list[ImageSample], list[ImageSample]]:
    """Train images split evenly over the training families, eval images from the held-out one."""
    per = [n_train // len(BENCHMARK_TRAIN)] * len(BENCHMARK_TRAIN)
    per[0] += n_train - sum(per)
    train = [s for fam, n in zip(BENCHMARK_TRAIN, per) for s in generate(preset(fam), n, seed)]
    evals = [s for fam in BENCHMARK_EVAL for s in generate(preset(fam), n_eval, seed)]
    return zero_shot_split(train + evals, BENCHMARK_TRAIN, BENCHMARK_EVAL)


def iter_batches(samples: Sequence, batch: int, rng: np.random.Generator | None = None):
    order = rng.permutation(len(samples)) if rng is not None else np.arange(len(samples))
    for i in range(0, len(order), batch):
        yield [samples[j] for j in order[i:i + batch]]


# ---------------------------------------------------------------------------
# PGM + index.csv layout
# ---------------------------------------------------------------------------

def write_pgm(path, arr: np.ndarray, maxval: int) -> None:
    arr = np.asarray(arr)
    h, w = arr.shape
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + arr.astype(dtype).tobytes())


def read_pgm(path) -> tuple[np.ndarray, int]:
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read image: {exc.strerror}", path=str(p)) from None
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", offset=pos, path=str(p))
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise FormatError("not a binary PGM (P5)", offset=0, path=str(p))
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise FormatError("malformed PGM header", path=str(p)) from None
    dtype = ">u2" if maxval > 255 else "u1"
    need = w * h * np.dtype(dtype).itemsize
    if len(raw) - pos < need:
        raise FormatError("truncated PGM pixel data", offset=len(raw), path=str(p))
    arr = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return arr.astype(np.int64), maxval


def write_dataset(samples: Sequence[ImageSample], directory) -> None:
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    (d / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        sid = s.id or f"{s.family}_{i:05d}"
        pix_rel = f"images/{sid}.pgm"
        write_pgm(d / pix_rel, np.round(np.clip(s.pixels, 0, 1) * 65535), 65535)
        mask_rel = ""
        if s.label:
            mask_rel = f"masks/{sid}.pgm"
            write_pgm(d / mask_rel, np.asarray(s.mask, dtype=np.uint8) * 255, 255)
        rows.append((sid, s.family, int(s.label), pix_rel, mask_rel))
    with open(d / "index.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(INDEX_HEADER)
        wr.writerows(rows)


def read_dataset(directory) -> list[ImageSample]:
    d = Path(directory)
    if not d.is_dir():
        raise FormatError("dataset directory does not exist", path=str(d))
    index = d / "index.csv"
    if not index.exists():
        if any(d.iterdir()):
            raise FormatError("missing index.csv", path=str(index))
        return []
    out = []
    with open(index, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header is None:
            return []
        if tuple(header) != INDEX_HEADER:
            raise FormatError(f"bad index header {header}", path=str(index))
        for lineno, row in enumerate(rd, start=2):
            if len(row) != len(INDEX_HEADER):
                raise FormatError(f"line {lineno}: expected {len(INDEX_HEADER)} fields", path=str(index))
            sid, family, label_s, pix_rel, mask_rel = row
            if label_s not in ("0", "1"):
                raise FormatError(f"line {lineno}: label must be 0 or 1", path=str(index))
            label = int(label_s)
            pix, maxval = read_pgm(d / pix_rel)
            pixels = pix.astype(np.float64) / maxval
            if label:
                if not mask_rel or not (d / mask_rel).exists():
                    raise FormatError(f"line {lineno}: anomalous row has no mask file",
                                      path=str(d / mask_rel) if mask_rel else str(index))
                m, _ = read_pgm(d / mask_rel)
                mask = (m > 0).astype(np.uint8)
            elif mask_rel:
                m, _ = read_pgm(d / mask_rel)
                mask = (m > 0).astype(np.uint8)
            else:
                mask = np.zeros_like(pix, dtype=np.uint8)
            if mask.shape != pixels.shape:
                raise FormatError(f"line {lineno}: mask and image sizes differ", path=str(index))
            try:
                out.append(ImageSample(pixels, mask, label, family, None, sid))
            except FormatError as exc:
                raise FormatError(f"line {lineno}: {exc}", path=str(index)) from None
    return out
