"""Flat binary container of named tensors with a key=value text header.

Layout (all integers little-endian)::

    b"VMSEGCKPT\\n"
    u32 header length, header bytes (UTF-8 key=value lines)
    u32 tensor count
    per tensor:
        u16 name length, name bytes (UTF-8)
        2 bytes dtype tag (b"f4" or b"f8")
        u8 ndim, ndim x u64 dims
        raw little-endian data, C order
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .vmunet import VMUNet, VMUNetConfig

MAGIC = b"VMSEGCKPT\n"
_TAGS = {np.dtype("<f4"): b"f4", np.dtype("<f8"): b"f8"}
_DTYPES = {v: k for k, v in _TAGS.items()}


class CheckpointError(IOError):
    pass


def write_tensors(path, tensors: dict[str, np.ndarray], header: str = "") -> None:
    hb = header.encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(hb)), hb, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<")
        if le not in _TAGS:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        parts += [struct.pack("<H", len(nb)), nb, _TAGS[le], struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape),
                  np.ascontiguousarray(arr, dtype=le).tobytes()]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def read_tensors(path) -> tuple[str, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (hlen,) = take("<I")
    header = buf[pos:pos + hlen].decode("utf-8")
    pos += hlen
    (count,) = take("<I")
    out = {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        dtype = _DTYPES.get(buf[pos:pos + 2])
        if dtype is None:
            raise CheckpointError(f"{name}: unknown dtype tag {buf[pos:pos + 2]!r}")
        pos += 2
        (ndim,) = take("<B")
        shape = take(f"<{ndim}Q")
        n = int(np.prod(shape)) * dtype.itemsize
        out[name] = np.frombuffer(buf, dtype=dtype, count=n // dtype.itemsize,
                                  offset=pos).reshape(shape).copy()
        pos += n
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return header, out


def save_checkpoint(path, model: VMUNet, extra: dict | None = None) -> None:
    header = model.cfg.to_text()
    for k, v in (extra or {}).items():
        header += f"meta.{k}={v}\n"
    write_tensors(path, model.state_dict(), header)


def load_checkpoint(path) -> tuple[VMUNet, dict[str, str]]:
    if not Path(path).exists():
        raise CheckpointError(f"checkpoint {path} not found")
    header, tensors = read_tensors(path)
    cfg = VMUNetConfig.from_text(header)
    model = VMUNet(cfg)
    model.load_state_dict(tensors)
    meta = {}
    for line in header.splitlines():
        if line.startswith("meta."):
            k, v = line[5:].split("=", 1)
            meta[k] = v
    return model, meta
