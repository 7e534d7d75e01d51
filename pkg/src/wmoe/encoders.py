"""Seeded frozen stand-ins for the vision and text towers, plus the feature-dump file format.

The image stub maps an image to a class token and ``n_tap_layers`` patch grids;
the text stub maps a token sequence to a unit-norm embedding and stays
differentiable with respect to its input tokens.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import FormatError, InputError
from .tensor import Tensor, l2_normalize, linear, tanh

FEATURE_MAGIC = b"WMOEFEAT"
FEATURE_VERSION = 1
MAX_TOKENS = 77


@dataclass(frozen=True)
class EncoderSpec:
    seed: int = 0
    C: int = 64
    grid: tuple[int, int] = (8, 8)
    n_tap_layers: int = 4
    image_size: tuple[int, int] = (64, 64)
    channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(v) for v in self.grid))
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        H, W = self.grid
        h, w = self.image_size
        if self.C < 8:
            raise InputError(f"embedding dim C must be >= 8, got {self.C}")
        if H < 1 or W < 1 or h % H or w % W:
            raise InputError(f"image size {self.image_size} not divisible by grid {self.grid}")
        if self.n_tap_layers < 1:
            raise InputError("n_tap_layers must be >= 1")

    @property
    def patch(self) -> tuple[int, int]:
        return self.image_size[0] // self.grid[0], self.image_size[1] // self.grid[1]


@dataclass
class FeatureBundle:
    x_c: Tensor
    layers: list[tuple[int, Tensor]]
    source: Literal["stub", "file"] = "stub"

    def __post_init__(self):
        ids = [lid for lid, _ in self.layers]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise InputError(f"layer ids must be strictly increasing, got {ids}")
        shapes = {t.shape for _, t in self.layers}
        if len(shapes) > 1:
            raise InputError(f"layer grids disagree in shape: {sorted(shapes)}")

    @property
    def grids(self) -> np.ndarray:
        """Layer grids stacked as an [L, H, W, C] array."""
        return np.stack([t.data for _, t in self.layers])


@dataclass
class TokenSequence:
    tokens: Tensor
    slot_mask: list[bool] = field(default_factory=list)

    @property
    def n_slots(self) -> int:
        return sum(self.slot_mask)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, stream])


def _mix3x3(x: np.ndarray) -> np.ndarray:
    """Replicate-padded 3x3 box mean over axes (-3, -2) of [..., H, W, C]."""
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    p = np.pad(x, pad, mode="edge")
    H, W = x.shape[-3], x.shape[-2]
    acc = np.zeros_like(x)
    for di in range(3):
        for dj in range(3):
            acc += p[..., di:di + H, dj:dj + W, :]
    return acc / 9.0


# fixed input normalisation applied before patch embedding
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


class ImageEncoder:
    """Frozen patch embedding followed by ``n_tap_layers`` mix/linear/tanh blocks."""

    def __init__(self, spec: EncoderSpec):
        self.spec = spec
        C = spec.C
        ph, pw = spec.patch
        rng = _rng(spec.seed, 0)
        b = 1.0 / np.sqrt(C)
        self.patch_embed = rng.uniform(-b, b, size=(C, ph * pw * spec.channels))
        self.blocks = [rng.uniform(-b, b, size=(C, C)) for _ in range(spec.n_tap_layers)]
        self.cls_head = rng.uniform(-b, b, size=(C, C))
        for arr in self.weights().values():
            arr.setflags(write=False)

    def weights(self) -> dict[str, np.ndarray]:
        out = {"patch_embed": self.patch_embed, "cls_head": self.cls_head}
        out.update({f"block{i}": w for i, w in enumerate(self.blocks)})
        return out

    def _check(self, pixels: np.ndarray) -> np.ndarray:
        h, w = self.spec.image_size
        ch = self.spec.channels
        if ch == 1 and pixels.shape[-2:] == (h, w):
            pixels = pixels[..., None]
        if pixels.shape[-3:] != (h, w, ch):
            raise InputError(f"expected image of shape {(h, w, ch)}, got {pixels.shape}")
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            raise InputError("pixel values must lie in [0, 1]")
        return pixels

    def encode_batch(self, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised forward: [B, h, w(, ch)] -> (x_c [B, C], grids [B, L, H, W, C])."""
        pixels = self._check(np.asarray(pixels, dtype=np.float64))
        B = pixels.shape[0]
        H, W = self.spec.grid
        ph, pw = self.spec.patch
        ch = self.spec.channels
        patches = (pixels.reshape(B, H, ph, W, pw, ch)
                   .transpose(0, 1, 3, 2, 4, 5)
                   .reshape(B, H, W, ph * pw * ch))
        x = ((patches - PIXEL_MEAN) / PIXEL_STD) @ self.patch_embed.T
        taps = []
        for wblk in self.blocks:
            x = np.tanh(_mix3x3(x) @ wblk.T)
            taps.append(x)
        x_c = x.mean(axis=(1, 2)) @ self.cls_head.T
        return x_c, np.stack(taps, axis=1)


def encode_image(spec: EncoderSpec, pixels, encoder: ImageEncoder | None = None) -> FeatureBundle:
    """Encode one image into a frozen :class:`FeatureBundle`."""
    enc = encoder if encoder is not None else ImageEncoder(spec)
    arr = pixels.data if isinstance(pixels, Tensor) else np.asarray(pixels, dtype=np.float64)
    x_c, grids = enc.encode_batch(arr[None])
    layers = [(i + 1, Tensor(grids[0, i])) for i in range(spec.n_tap_layers)]
    return FeatureBundle(Tensor(x_c[0]), layers, "stub")


class TextEncoder:
    """Frozen text tower: weighted token mean -> linear -> tanh -> linear -> unit norm."""

    def __init__(self, spec: EncoderSpec):
        self.spec = spec
        C = spec.C
        rng = _rng(spec.seed, 1)
        b = 1.0 / np.sqrt(C)
        self.pos_weights = rng.uniform(0.5, 1.5, size=MAX_TOKENS)
        self.w1 = Tensor(rng.uniform(-b, b, size=(C, C)))
        self.b1 = Tensor(rng.uniform(-b, b, size=C))
        self.w2 = Tensor(rng.uniform(-b, b, size=(C, C)))
        self.b2 = Tensor(rng.uniform(-b, b, size=C))
        for arr in self.weights().values():
            arr.setflags(write=False)
        self._words: dict[str, Tensor] = {}

    def weights(self) -> dict[str, np.ndarray]:
        return {"pos_weights": self.pos_weights, "w1": self.w1.data, "b1": self.b1.data,
                "w2": self.w2.data, "b2": self.b2.data}

    def word(self, w: str) -> Tensor:
        """Fixed embedding for a template word, keyed by its spelling."""
        if w not in self._words:
            C = self.spec.C
            rng = _rng(self.spec.seed, 2 + zlib.crc32(w.encode("utf-8")))
            b = 1.0 / np.sqrt(C)
            self._words[w] = Tensor(rng.uniform(-b, b, size=C))
        return self._words[w]

    def template(self, words: list[str]) -> Tensor:
        return Tensor(np.stack([self.word(w).data for w in words]))

    def __call__(self, tokens) -> Tensor:
        tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
        C = self.spec.C
        if tokens.ndim < 2 or tokens.shape[-1] != C:
            raise InputError(f"token dim must be {C}, got shape {tokens.shape}")
        n = tokens.shape[-2]
        if n > MAX_TOKENS:
            raise InputError(f"sequence longer than {MAX_TOKENS} tokens")
        pw = self.pos_weights[:n] / self.pos_weights[:n].sum()
        pooled = (tokens * Tensor(pw[:, None])).sum(axis=-2)
        h = tanh(linear(pooled, self.w1, self.b1))
        return l2_normalize(linear(h, self.w2, self.b2), axis=-1)


def encode_text(spec: EncoderSpec, seq: TokenSequence, encoder: TextEncoder | None = None) -> Tensor:
    enc = encoder if encoder is not None else TextEncoder(spec)
    return enc(seq.tokens)


# ---------------------------------------------------------------------------
# feature dump
# ---------------------------------------------------------------------------

def save_features(bundle: FeatureBundle, path) -> None:
    grids = bundle.grids
    L, H, W, C = grids.shape
    buf = bytearray(FEATURE_MAGIC)
    buf += struct.pack("<5I", FEATURE_VERSION, C, H, W, L)
    buf += np.asarray(bundle.x_c.data, dtype="<f4").tobytes()
    for (lid, t) in bundle.layers:
        buf += struct.pack("<I", lid)
        buf += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_features(path) -> FeatureBundle:
    raw = Path(path).read_bytes()
    p = str(path)

    def need(off: int, n: int, what: str):
        if off + n > len(raw):
            raise FormatError(f"truncated file while reading {what}", offset=off, path=p)

    need(0, 8, "magic")
    if raw[:8] != FEATURE_MAGIC:
        raise FormatError("bad magic", offset=0, path=p)
    need(8, 20, "header")
    version, C, H, W, L = struct.unpack_from("<5I", raw, 8)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported version {version}", offset=8, path=p)
    if C == 0 or H == 0 or W == 0:
        raise FormatError("zero extent in header", offset=12, path=p)
    off = 28
    need(off, 4 * C, "class token")
    x_c = np.frombuffer(raw, dtype="<f4", count=C, offset=off).astype(np.float64)
    off += 4 * C
    layers = []
    prev = None
    n = H * W * C
    for _ in range(L):
        need(off, 4, "layer id")
        (lid,) = struct.unpack_from("<I", raw, off)
        if prev is not None and lid <= prev:
            raise FormatError(f"layer id {lid} not greater than previous {prev}", offset=off, path=p)
        prev = lid
        off += 4
        need(off, 4 * n, f"layer {lid} grid")
        grid = np.frombuffer(raw, dtype="<f4", count=n, offset=off).astype(np.float64)
        layers.append((int(lid), Tensor(grid.reshape(H, W, C))))
        off += 4 * n
    if off != len(raw):
        raise FormatError(f"{len(raw) - off} trailing bytes", offset=off, path=p)
    return FeatureBundle(Tensor(x_c), layers, "file")
