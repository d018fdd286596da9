"""Versioned binary snapshots of model, optimizer, and RNG state.

Layout (all integers little-endian, payloads little-endian float32):

    magic 'ESPN' | version u32 | epoch u32 | seed u64
    | arch: u32 length + utf-8
    | n_modes u32 | { name: u32 len + utf-8, mode u8 } ...
    | n_tensors u32 | tensor records ...
    | n_velocities u32 | tensor records ...

Tensor record: u32 name length, utf-8 name, u8 dtype code (0 = f32),
u32 rank, u32 extents, raw payload. Write -> read -> write is
byte-identical; a version mismatch is a hard error.

The stored seed is the complete RNG state: every random stream in a run
is derived from it deterministically, which is what makes rewinding to
an epoch snapshot exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Mode, Model, build_model
from .tensor import Tensor

MAGIC = b"ESPN"
VERSION = 1

_MODE_CODES = {Mode.DENSE: 0, Mode.MASK_LEARNING: 1, Mode.FROZEN_MASK: 2}
_CODE_MODES = {v: k for k, v in _MODE_CODES.items()}
_DTYPE_F32 = 0


class CheckpointError(ValueError):
    """Unreadable, corrupt, or version-incompatible snapshot."""


@dataclass
class Checkpoint:
    epoch: int
    seed: int
    arch: str
    modes: dict[str, Mode]
    tensors: dict[str, np.ndarray]
    velocities: dict[str, np.ndarray] = field(default_factory=dict)


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    if arr.dtype != np.float32:
        raise CheckpointError(f"{name}: only float32 tensors are stored, got {arr.dtype}")
    head = _pack_str(name) + struct.pack("<BI", _DTYPE_F32, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def tensor(self) -> tuple[str, np.ndarray]:
        name = self.string()
        dtype = self.u8()
        if dtype != _DTYPE_F32:
            raise CheckpointError(f"{self.path}: unknown dtype code {dtype}")
        rank = self.u32()
        shape = struct.unpack(f"<{rank}I", self.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape)
        return name, arr.astype(np.float32)


def save_checkpoint(
    path: str | Path,
    model: Model,
    *,
    epoch: int,
    seed: int,
    velocities: dict[str, np.ndarray] | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<IIQ", VERSION, epoch, seed), _pack_str(model.arch)]

    modes = list(model.masked.items())
    chunks.append(struct.pack("<I", len(modes)))
    for name, p in modes:
        chunks.append(_pack_str(name) + struct.pack("<B", _MODE_CODES[p.mode]))

    records: list[tuple[str, np.ndarray]] = []
    for name, p in model.masked.items():
        records.append((name, p.w.data))
        records.append((name + ".mask", p.c.data))
    for name, b in model.biases.items():
        records.append((name, b.data))
    chunks.append(struct.pack("<I", len(records)))
    for name, arr in records:
        chunks.append(_pack_tensor(name, arr))

    velocities = velocities or {}
    chunks.append(struct.pack("<I", len(velocities)))
    for name in velocities:
        chunks.append(_pack_tensor(name, np.asarray(velocities[name], dtype=np.float32)))

    path.write_bytes(b"".join(chunks))
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    epoch = r.u32()
    seed = r.u64()
    arch = r.string()
    modes = {}
    for _ in range(r.u32()):
        name = r.string()
        modes[name] = _CODE_MODES[r.u8()]
    tensors = dict(r.tensor() for _ in range(r.u32()))
    velocities = dict(r.tensor() for _ in range(r.u32()))
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return Checkpoint(epoch, seed, arch, modes, tensors, velocities)


def restore_model(ckpt: Checkpoint) -> Model:
    """Rebuild the architecture and load parameters, masks, and modes."""
    model = build_model(ckpt.arch, seed=ckpt.seed)
    for name, p in model.masked.items():
        w = ckpt.tensors.get(name)
        c = ckpt.tensors.get(name + ".mask")
        if w is None or c is None:
            raise CheckpointError(f"missing tensor {name!r} in checkpoint")
        if w.shape != p.w.shape:
            raise CheckpointError(f"{name}: shape {w.shape} vs model {p.w.shape}")
        p.w.data[:] = w
        mode = ckpt.modes.get(name, Mode.DENSE)
        p.c = Tensor(c.copy(), requires_grad=mode is Mode.MASK_LEARNING)
        p.mode = mode
    for name, b in model.biases.items():
        arr = ckpt.tensors.get(name)
        if arr is None:
            raise CheckpointError(f"missing tensor {name!r} in checkpoint")
        if arr.shape != b.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} vs model {b.shape}")
        b.data[:] = arr
    return model
