"""Parameter container: an ordered list of named float64 arrays.

Binary layout (all integers little-endian)::

    magic    8 bytes  b"MOAECKPT"
    version  u32      1
    count    u32      number of entries
    entry * count:
        name_len u16, name (utf-8)
        ndim     u8,  dims u32 * ndim
        values   float64 little-endian, row-major, prod(dims) of them

Round-trips are bit-exact and the file bytes depend only on the arrays.
"""
from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

MAGIC = b"MOAECKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path, named) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(named))]
    for name, arr in named:
        arr = np.asarray(arr, dtype="<f8")  # tobytes() is row-major; keeps 0-d shape
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    atomic_write(path, b"".join(chunks))


def load_arrays(path) -> list[tuple[str, np.ndarray]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a parameter container")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos, out = 16, []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2:pos + 2 + nlen].decode()
        pos += 2 + nlen
        ndim = buf[pos]
        shape = struct.unpack_from(f"<{ndim}I", buf, pos + 1)
        pos += 1 + 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
        out.append((name, arr))
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def save_module(path, module) -> None:
    save_arrays(path, [(n, p.data) for n, p in module.named_parameters()])


def load_module(path, module) -> None:
    """Copy stored arrays into ``module``; names and shapes must match exactly."""
    stored = load_arrays(path)
    params = list(module.named_parameters())
    names = [n for n, _ in params]
    if [n for n, _ in stored] != names:
        raise CheckpointError(f"{path}: parameter names differ from the model")
    for (name, p), (_, arr) in zip(params, stored):
        if arr.shape != p.shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, model expects {p.shape}")
        p.data[...] = arr


def atomic_write(path, data: bytes | str) -> None:
    path = os.fspath(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
