"""Binary checkpoint container.

Little-endian layout::

    b"SONN"  u32 version=1  u32 n_entries
    n_entries x { u32 name_len, name (utf-8), u32 rank, u64 x rank extents,
                  f64 x prod(extents) payload }
    u32 meta_len, meta (utf-8 JSON: config, epoch, validation_psnr)

Non-finite PSNR values are written as the JSON strings ``"inf"``, ``"-inf"``
or ``"nan"``.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CheckpointFormatError, CheckpointTruncatedError, CheckpointVersionError
from .layers import LayerState, NetworkConfig

MAGIC = b"SONN"
VERSION = 1


@dataclass
class Checkpoint:
    entries: list[tuple[str, np.ndarray]] = field(default_factory=list)
    config: NetworkConfig | None = None
    epoch: int = 0
    validation_psnr: float = float("nan")

    def tensor(self, name: str) -> np.ndarray:
        for key, value in self.entries:
            if key == name:
                return value
        raise KeyError(name)

    def states(self) -> list[LayerState]:
        if self.config is None:
            raise ValueError("checkpoint carries no network config")
        return [
            LayerState(
                self.tensor(f"layers.{i}.weight").copy(),
                self.tensor(f"layers.{i}.bias").copy(),
                self.tensor(f"layers.{i}.shifts").copy(),
            )
            for i in range(len(self.config.layers))
        ]

    @classmethod
    def from_states(
        cls,
        config: NetworkConfig,
        states: Sequence[LayerState],
        epoch: int = 0,
        validation_psnr: float = float("nan"),
    ) -> "Checkpoint":
        entries = []
        for i, s in enumerate(states):
            entries.append((f"layers.{i}.weight", s.weight.copy()))
            entries.append((f"layers.{i}.bias", s.bias.copy()))
            entries.append((f"layers.{i}.shifts", s.shifts.copy()))
        return cls(entries, config, int(epoch), float(validation_psnr))


def _encode_real(x: float):
    return x if math.isfinite(x) else str(x)


def _decode_real(x) -> float:
    return float(x)


def dumps(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(ckpt.entries)))
    for name, arr in ckpt.entries:
        raw_name = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    meta = {
        "config": ckpt.config.to_dict() if ckpt.config is not None else None,
        "epoch": int(ckpt.epoch),
        "validation_psnr": _encode_real(float(ckpt.validation_psnr)),
    }
    raw_meta = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(raw_meta)))
    buf.write(raw_meta)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"file ends at byte {len(self.data)} while reading {what} "
                f"({n} bytes needed at offset {self.pos})"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(data: bytes) -> Checkpoint:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}, expected {VERSION}")
    (count,) = r.unpack("<I", "entry count")
    entries = []
    for i in range(count):
        (name_len,) = r.unpack("<I", f"entry {i} name length")
        try:
            name = r.take(name_len, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"entry {i} name is not valid UTF-8") from exc
        (rank,) = r.unpack("<I", f"entry {name!r} rank")
        extents = r.unpack(f"<{rank}Q", f"entry {name!r} extents")
        size = math.prod(extents)
        payload = r.take(8 * size, f"entry {name!r} payload")
        arr = np.frombuffer(payload, dtype="<f8").reshape(extents).astype(np.float64)
        entries.append((name, arr))
    (meta_len,) = r.unpack("<I", "metadata length")
    raw_meta = r.take(meta_len, "metadata")
    if r.pos != len(data):
        raise CheckpointFormatError(f"{len(data) - r.pos} trailing bytes after metadata")
    try:
        meta = json.loads(raw_meta.decode("utf-8"))
        config = NetworkConfig.from_dict(meta["config"]) if meta.get("config") else None
        return Checkpoint(entries, config, int(meta["epoch"]), _decode_real(meta["validation_psnr"]))
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"malformed metadata block: {exc}") from exc


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    """Write atomically: a failed write never leaves a partial file at ``path``."""
    path = Path(path)
    data = dumps(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads(fh.read())
