"""Binary checkpoint container.

Layout (little-endian): magic ``WMOECKPT``; version u32; config JSON as u32
length + UTF-8 bytes; tensor count u32; per tensor: path length u16, path
bytes, rank u8, extents u32 each, float64 data; then CRC32 (u32) over every
preceding byte.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import ConfigError, CorruptionError, FormatError
from .model import AnomalyModel

MAGIC = b"WMOECKPT"
VERSION = 1


def encode_checkpoint(cfg: RunConfig, tensors: dict[str, np.ndarray]) -> bytes:
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", VERSION)
    cfg_bytes = cfg.to_json().encode("utf-8")
    buf += struct.pack("<I", len(cfg_bytes)) + cfg_bytes
    buf += struct.pack("<I", len(tensors))
    for path in sorted(tensors):
        arr = np.ascontiguousarray(tensors[path], dtype="<f8")
        pb = path.encode("utf-8")
        buf += struct.pack("<H", len(pb)) + pb
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    return bytes(buf)


def decode_checkpoint(raw: bytes, path: str | None = None) -> tuple[RunConfig, dict[str, np.ndarray]]:
    def need(off, n, what):
        if off + n > len(raw):
            raise FormatError(f"truncated while reading {what}", offset=off, path=path)

    need(0, 12, "header")
    if raw[:8] != MAGIC:
        raise FormatError("bad magic", offset=0, path=path)
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})",
                          offset=8, path=path)
    need(12, 4, "checksum")
    (stored,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored:
        raise CorruptionError("checksum mismatch", offset=len(raw) - 4, path=path)
    end = len(raw) - 4
    off = 12
    need(off, 4, "config length")
    (n_cfg,) = struct.unpack_from("<I", raw, off)
    off += 4
    need(off, n_cfg, "config")
    try:
        cfg = RunConfig.from_json(raw[off:off + n_cfg].decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise FormatError(f"embedded config invalid: {exc}", offset=off, path=path) from None
    off += n_cfg
    need(off, 4, "tensor count")
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(off, 2, "path length")
        (plen,) = struct.unpack_from("<H", raw, off)
        off += 2
        need(off, plen + 1, "path")
        name = raw[off:off + plen].decode("utf-8")
        off += plen
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        need(off, 4 * rank, "extents")
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        need(off, 8 * n, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != end:
        raise FormatError(f"{end - off} unexpected bytes before checksum", offset=off, path=path)
    return cfg, tensors


def save_checkpoint(model: AnomalyModel, path) -> None:
    Path(path).write_bytes(encode_checkpoint(model.cfg, model.params.snapshot()))


def load_checkpoint(path, expect: RunConfig | None = None) -> AnomalyModel:
    """Rebuild a model from its embedded config and restore every parameter.

    With ``expect`` given, structural fields must agree; the first mismatch raises
    :class:`ConfigError` naming the field.
    """
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint: {exc.strerror}", path=str(p)) from None
    cfg, tensors = decode_checkpoint(raw, str(p))
    if expect is not None:
        check_compatible(cfg, expect)
    model = AnomalyModel(cfg)
    if set(tensors) != set(model.params):
        missing = sorted(set(model.params) - set(tensors))
        extra = sorted(set(tensors) - set(model.params))
        raise FormatError(f"parameter set mismatch (missing {missing}, unexpected {extra})", path=str(p))
    for name, arr in tensors.items():
        if arr.shape != model.params[name].shape:
            raise FormatError(f"{name}: shape {arr.shape} != {model.params[name].shape}", path=str(p))
        model.params[name].data = arr
    return model


STRUCTURAL_FIELDS = ("C", "grid", "taps", "image_size", "m", "N", "k", "latent_dim",
                     "encoder_seed", "modules")


def check_compatible(have: RunConfig, want: RunConfig) -> None:
    for f in STRUCTURAL_FIELDS:
        if getattr(have, f) != getattr(want, f):
            raise ConfigError(f"checkpoint {f}={getattr(have, f)!r} but config has "
                              f"{f}={getattr(want, f)!r}", f)
