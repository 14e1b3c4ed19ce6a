"""Versioned binary checkpoints: named parameter tensors, optimizer state,
schedule position, and the full canonical config text (whose hash identifies
the run). Round trips are bit-exact; unknown versions and truncated files are
refused."""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, parameter

MAGIC = b"WSCKPT\x00"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated, or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    config_text: str
    stage_index: int  # position in the mode's stage schedule
    epoch: int  # epochs completed within that stage
    params: dict[str, np.ndarray]
    velocities: dict[str, np.ndarray]

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.config_text.encode("utf-8")).hexdigest()

    def to_store(self) -> ParamStore:
        store = ParamStore()
        for name, data in self.params.items():
            store.add(name, parameter(data.copy(), name))
        return store


def _pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(arrays))]
    for name, data in arrays.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes, path: str):
        self.raw = raw
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        end = self.off + n
        if end > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated file")
        chunk = self.raw[self.off : end]
        self.off = end
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def arrays(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = self.unpack("<H")
            name = self.take(name_len).decode("utf-8")
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}I")
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(self.take(8 * size), dtype="<f8").reshape(shape).copy()
            out[name] = data
        return out


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    config_bytes = ckpt.config_text.encode("utf-8")
    payload = b"".join(
        [
            MAGIC,
            struct.pack("<H", VERSION),
            struct.pack("<I", len(config_bytes)),
            config_bytes,
            struct.pack("<HI", ckpt.stage_index, ckpt.epoch),
            _pack_arrays(ckpt.params),
            _pack_arrays(ckpt.velocities),
        ]
    )
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    reader = _Reader(raw, path)
    reader.take(len(MAGIC))
    (version,) = reader.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (config_len,) = reader.unpack("<I")
    config_text = reader.take(config_len).decode("utf-8")
    stage_index, epoch = reader.unpack("<HI")
    params = reader.arrays()
    velocities = reader.arrays()
    if reader.off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - reader.off} trailing bytes")
    return Checkpoint(config_text, stage_index, epoch, params, velocities)
