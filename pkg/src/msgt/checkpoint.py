"""Binary checkpoints.

Layout (all integers little-endian): magic bytes ``MSGT``, version u32,
tensor count u32, then per tensor: name length u16, UTF-8 name, rank u8,
one u32 extent per axis, then 32-bit little-endian float values. Loading
rebuilds the model from its architecture config and validates every
name/shape before accepting values.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError
from .model import ArchConfig, Model, build_model

MAGIC = b"MSGT"
VERSION = 1


def save_checkpoint(model: Model, path: str) -> None:
    params = model.named_parameters()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(params)))
        for name, tensor in params:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", tensor.data.ndim))
            f.write(struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape))
            f.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())


def _read(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path: str, cfg: ArchConfig, msg_policy: str = "learnable") -> Model:
    """Rebuild a model for ``cfg`` and fill it from the checkpoint at ``path``."""
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise FormatError(f"{path}: not a checkpoint (bad magic)")
        version, count = struct.unpack("<II", _read(f, 8, "header"))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        entries: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read(f, 2, "name length"))
            name = _read(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read(f, 1, f"rank of {name}"))
            shape = struct.unpack(f"<{rank}I", _read(f, 4 * rank, f"extents of {name}"))
            size = int(np.prod(shape)) if rank else 1
            raw = _read(f, 4 * size, f"values of {name}")
            entries[name] = np.frombuffer(raw, dtype="<f4").reshape(shape)

    model = build_model(cfg, seed=0, msg_policy=msg_policy)
    for name, tensor in model.named_parameters():
        if name not in entries:
            raise FormatError(f"checkpoint missing tensor {name!r}")
        stored = entries.pop(name)
        if stored.shape != tensor.data.shape:
            raise FormatError(
                f"checkpoint tensor {name!r} has shape {stored.shape}, "
                f"model expects {tensor.data.shape}"
            )
        tensor.data = stored.astype(model.dtype, copy=True)
    if entries:
        raise FormatError(f"checkpoint contains unknown tensor {next(iter(entries))!r}")
    return model
