"""Versioned little-endian model checkpoints.

Layout::

    magic  b"PRGCNCKP"
    u32    format version
    u32    tensor count
    u32    metadata length, then UTF-8 metadata (run configuration text)
    per tensor: u16 name length, name, u32 ndim, u32 dims..., float64 row-major data
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PRGCNCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict, metadata: str = "") -> None:
    meta = metadata.encode()
    chunks = [MAGIC, struct.pack("<III", VERSION, len(params), len(meta)), meta]
    for name in sorted(params):
        arr = np.asarray(getattr(params[name], "data", params[name]), dtype="<f8")
        key = name.encode()
        chunks.append(struct.pack("<H", len(key)) + key)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count, meta_len = struct.unpack_from("<III", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} unsupported (expected {VERSION})")
    off = 20
    meta = data[off:off + meta_len].decode()
    off += meta_len
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, off)
            name = data[off + 2:off + 2 + n].decode()
            off += 2 + n
            (ndim,) = struct.unpack_from("<I", data, off)
            shape = struct.unpack_from(f"<{ndim}I", data, off + 4)
            off += 4 + 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 8 * size
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None
    return out, meta


def load_into(params: dict, arrays: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into model parameters, checking names and shapes."""
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if missing or extra:
        raise CheckpointError(
            f"checkpoint version {VERSION}: parameter mismatch (missing {missing[:3]}, unexpected {extra[:3]})"
        )
    for name, p in params.items():
        if p.data.shape != arrays[name].shape:
            raise CheckpointError(
                f"checkpoint version {VERSION}: {name} has shape {arrays[name].shape}, model expects {p.data.shape}"
            )
        p.data = arrays[name].copy()
