"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DQLR" | u32 version | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | u32 dims[rank] | float32 data
    u32 text length | UTF-8 text (config keys, then a ``[state]`` section)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dqlr import config as cfgmod
from dqlr.config import TrainConfig
from dqlr.errors import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from dqlr.models import Params
from dqlr.quantizer import Codebook
from dqlr.tensor import Tensor

MAGIC = b"DQLR"
VERSION = 1
_STATE_MARKER = "[state]"


@dataclass
class Checkpoint:
    config: TrainConfig
    tensors: dict[str, np.ndarray]
    epoch: int = 0
    losses: dict[str, float] = field(default_factory=dict)
    version: int = VERSION

    def model_params(self, requires_grad: bool = False) -> Params:
        return {
            name: Tensor(arr, requires_grad=requires_grad)
            for name, arr in self.tensors.items()
            if not name.startswith("codebook.")
        }

    def codebook(self) -> Codebook | None:
        if "codebook.codes" not in self.tensors:
            return None
        t = self.tensors
        return Codebook(
            codes=Tensor(t["codebook.codes"]),
            usage=t["codebook.usage"].astype(np.int64),
            ema_count=t["codebook.ema_count"].astype(np.float64),
            ema_sum=t["codebook.ema_sum"].astype(np.float64),
        )


def snapshot_tensors(params: Params, codebook: Codebook | None) -> dict[str, np.ndarray]:
    out = {name: np.array(p.data, dtype=np.float32) for name, p in params.items()}
    if codebook is not None:
        count = codebook.ema_count if codebook.ema_count is not None else np.ones(codebook.k)
        total = codebook.ema_sum if codebook.ema_sum is not None else codebook.codes.data * count[:, None]
        out["codebook.codes"] = np.array(codebook.codes.data, dtype=np.float32)
        out["codebook.usage"] = np.asarray(codebook.usage, dtype=np.float32)
        out["codebook.ema_count"] = np.asarray(count, dtype=np.float32)
        out["codebook.ema_sum"] = np.asarray(total, dtype=np.float32)
    return out


def to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    state = [f"epoch = {ckpt.epoch}"] + [f"{k} = {v!r}" for k, v in ckpt.losses.items()]
    text = (cfgmod.to_text(ckpt.config) + _STATE_MARKER + "\n" + "\n".join(state) + "\n").encode("utf-8")
    parts.append(struct.pack("<I", len(text)))
    parts.append(text)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str, tensor: str | None = None) -> bytes:
        if self.pos + n > len(self.buf):
            where = f" in tensor {tensor!r}" if tensor else ""
            raise CheckpointTruncatedError(f"checkpoint truncated while reading {what}{where}", tensor)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str, tensor: str | None = None):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what, tensor))


def from_bytes(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CheckpointMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    r = _Reader(buf)
    r.pos = 4
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {VERSION}")
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        label = f"#{i}"
        (nlen,) = r.unpack("<H", "name length", label)
        name = r.take(nlen, "name", label).decode("utf-8")
        (rank,) = r.unpack("<B", "rank", name)
        dims = r.unpack(f"<{rank}I", "dims", name) if rank else ()
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        data = r.take(nbytes, "data", name)
        tensors[name] = np.frombuffer(data, dtype="<f4").reshape(dims).astype(np.float32)
    (tlen,) = r.unpack("<I", "config length", "config")
    text = r.take(tlen, "config block", "config").decode("utf-8")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    if _STATE_MARKER not in text:
        raise CheckpointError("config block lacks a [state] section")
    cfg_text, state_text = text.split(_STATE_MARKER + "\n", 1)
    state = cfgmod.parse_text(state_text)
    epoch = int(state.pop("epoch", "0"))
    losses = {k: float(v) for k, v in state.items()}
    return Checkpoint(cfgmod.from_text(cfg_text), tensors, epoch, losses, version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
