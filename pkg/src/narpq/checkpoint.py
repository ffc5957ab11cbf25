"""Shared binary checkpoint container for codec and predictor weights.

Layout (little-endian): magic "M6CK", version u32, section tag (u32 length +
utf8), metadata text (u32 length + utf8 key=value lines), tensor count u32,
then per tensor: name (u32 length + utf8), ndim u32, extents u32 each, raw
float32 data. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .numerics import DTYPE

MAGIC = b"M6CK"
VERSION = 1


def _write_str(fh, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_str(fh) -> str:
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def meta_to_text(meta: dict[str, str]) -> str:
    return "\n".join(f"{k}={meta[k]}" for k in sorted(meta))


def meta_from_text(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        k, _, v = line.partition("=")
        out[k] = v
    return out


def save(path, section: str, meta: dict[str, str], tensors: list[tuple[str, np.ndarray]]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_str(fh, section)
        _write_str(fh, meta_to_text(meta))
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            _write_str(fh, name)
            arr = np.asarray(arr)
            fh.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load(path) -> tuple[str, dict[str, str], dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r} in {path}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        section = _read_str(fh)
        meta = meta_from_text(_read_str(fh))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            name = _read_str(fh)
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape).astype(DTYPE)
            tensors[name] = arr
    return section, meta, tensors
