"""Binary model checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes   b"NSSMCKPT"
    version      u32       currently 1
    n_config     u32
    n_config x   key: u16 length + UTF-8 bytes, value: u32 length + UTF-8 bytes
    n_tensors    u32
    n_tensors x  name: u16 length + UTF-8 bytes
                 ndim: u8, then ndim x u64 dimension sizes
                 prod(dims) x f64 (IEEE-754 binary64, little-endian, row-major)

Config values are the strings produced by :meth:`ModelConfig.to_items`.
Tensors appear in :meth:`NeuroSsmModel.named_parameters` order; a shared
kernel is written once.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .model import ModelConfig, NeuroSsmModel

MAGIC = b"NSSMCKPT"
VERSION = 1


def _put_str(out: BinaryIO, s: str, fmt: str) -> None:
    raw = s.encode("utf-8")
    out.write(struct.pack(fmt, len(raw)))
    out.write(raw)


def _read_exact(src: BinaryIO, n: int) -> bytes:
    raw = src.read(n)
    if len(raw) != n:
        raise ValueError("truncated checkpoint")
    return raw


def _get(src: BinaryIO, fmt: str):
    return struct.unpack(fmt, _read_exact(src, struct.calcsize(fmt)))[0]


def _get_str(src: BinaryIO, fmt: str) -> str:
    return _read_exact(src, _get(src, fmt)).decode("utf-8")


def write(model: NeuroSsmModel, out: BinaryIO) -> None:
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    items = model.config.to_items()
    out.write(struct.pack("<I", len(items)))
    for k, v in items.items():
        _put_str(out, k, "<H")
        _put_str(out, v, "<I")
    params = model.named_parameters()
    out.write(struct.pack("<I", len(params)))
    for name, p in params.items():
        _put_str(out, name, "<H")
        out.write(struct.pack("<B", p.ndim))
        out.write(struct.pack(f"<{p.ndim}Q", *p.shape))
        out.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read(src: BinaryIO) -> NeuroSsmModel:
    if src.read(len(MAGIC)) != MAGIC:
        raise ValueError("not a NeuroSSM checkpoint (bad magic)")
    version = _get(src, "<I")
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    items = {}
    for _ in range(_get(src, "<I")):
        key = _get_str(src, "<H")
        items[key] = _get_str(src, "<I")
    model = NeuroSsmModel.init(ModelConfig.from_items(items))
    params = model.named_parameters()
    count = _get(src, "<I")
    if count != len(params):
        raise ValueError(f"checkpoint holds {count} tensors, config implies {len(params)}")
    for _ in range(count):
        name = _get_str(src, "<H")
        ndim = _get(src, "<B")
        shape = struct.unpack(f"<{ndim}Q", _read_exact(src, 8 * ndim))
        if name not in params or params[name].shape != tuple(shape):
            raise ValueError(f"unexpected tensor {name} with shape {shape}")
        n = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(_read_exact(src, 8 * n), dtype="<f8").reshape(shape)
        params[name].data[...] = data
    return model


def save(model: NeuroSsmModel, path) -> None:
    with open(Path(path), "wb") as fh:
        write(model, fh)


def load(path) -> NeuroSsmModel:
    with open(Path(path), "rb") as fh:
        return read(fh)
