"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"LCNN"  u32 version  u64 meta_len  meta_len bytes of UTF-8 JSON
    then for each tensor named in the metadata, in order:
    u32 name_len  name  u32 rank  rank x u32 dims  float32 data (C order)
"""

from __future__ import annotations

import io
import json
import os
import struct

import numpy as np

from .model import LoadCNNConfig, LoadCNNParams
from .training import Checkpoint, TrainConfig

MAGIC = b"LCNN"
VERSION = 1


class CheckpointError(ValueError):
    """The file is not a readable checkpoint."""


class UnsupportedVersionError(CheckpointError):
    pass


def _metadata(ckpt: Checkpoint) -> dict:
    return {
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "loss_best": ckpt.loss_best,
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "tensors": ckpt.params.names(),
        "extra": ckpt.metadata,
    }


def dumps(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(_metadata(ckpt), sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(meta)))
    buf.write(meta)
    for name in ckpt.params.names():
        arr = ckpt.params[name]
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic bytes; not a LoadCNN checkpoint")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    (meta_len,) = r.unpack("<Q", "metadata length")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
        config = LoadCNNConfig.from_dict(meta["model_config"])
        train_config = TrainConfig(**meta["train_config"])
        names = list(meta["tensors"])
    except CheckpointError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt metadata: {exc}") from exc

    tensors = {}
    for expected in names:
        (nlen,) = r.unpack("<I", "tensor name length")
        name = r.take(nlen, "tensor name").decode("utf-8", errors="replace")
        if name != expected:
            raise CheckpointError(f"tensor {name!r} found where {expected!r} was expected")
        (rank,) = r.unpack("<I", f"rank of {name}")
        shape = r.unpack(f"<{rank}I", f"dims of {name}")
        count = int(np.prod(shape)) if rank else 1
        raw = r.take(4 * count, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last tensor")
    try:
        params = LoadCNNParams(config, tensors)
    except ValueError as exc:
        raise CheckpointError(f"tensors do not match embedded config: {exc}") from exc
    return Checkpoint(params=params, train_config=train_config, loss_best=float(meta["loss_best"]),
                      step=int(meta["step"]), epoch=int(meta["epoch"]), metadata=dict(meta.get("extra", {})))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    data = dumps(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads(fh.read())
