"""Binary checkpoint format.

Layout, all integers little-endian::

    b"DFFT"                       magic
    u32   version                 (= 1)
    u32   len, bytes              config JSON (utf-8, sorted keys)
    u32   epoch                   completed epochs
    u64   step                    optimizer steps taken
    u32   record count
    records:
        u32 len, bytes            name (utf-8)
        u32 ndim, u32 * ndim      shape
        f32 * prod(shape)         row-major payload

Parameter records are named ``param/<name>``; AdamW moments are
``optim/exp_avg/<name>`` and ``optim/exp_avg_sq/<name>``.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DFFTError

MAGIC = b"DFFT"
VERSION = 1


class CheckpointError(DFFTError):
    pass


@dataclass
class Checkpoint:
    config_json: str
    epoch: int
    step: int
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    def params(self) -> dict[str, torch.Tensor]:
        return {k[6:]: v for k, v in self.tensors.items() if k.startswith("param/")}

    def optim(self, kind: str) -> dict[str, torch.Tensor]:
        prefix = f"optim/{kind}/"
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    cfg = ckpt.config_json.encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<IQI", ckpt.epoch, ckpt.step, len(ckpt.tensors)))
    for name, t in ckpt.tensors.items():
        raw = name.encode()
        arr = np.asarray(t.detach().cpu().numpy(), dtype="<f4")  # keeps 0-d shape
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def from_bytes(data: bytes) -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, cfg_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config_json = bytes(take(cfg_len)).decode()
    epoch, step, count = struct.unpack("<IQI", take(16))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        arr = np.frombuffer(take(4 * math.prod(shape)), dtype="<f4").reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(view):
        raise CheckpointError("trailing bytes after last record")
    return Checkpoint(config_json, epoch, step, tensors)


def save(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
