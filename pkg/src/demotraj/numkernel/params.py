"""Parameter storage, AdamW with cosine annealing, and binary checkpoints."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import MissingGradient, Tensor

CKPT_MAGIC = b"DEMOCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Named parameters plus the optimizer's per-parameter moment buffers.

    ``buffers`` hold fitted, non-trainable arrays (input statistics).  They
    are checkpointed with the parameters but never touched by the optimizer.
    """

    def __init__(self, seed: int = 0) -> None:
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.rng = np.random.default_rng(seed)
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, data) -> Tensor:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def add_buffer(self, name: str, data) -> np.ndarray:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(data, dtype=np.float64)
        self.buffers[name] = arr
        return arr

    def set_buffer(self, name: str, data) -> None:
        """Overwrite a buffer in place so holders of the array see the update."""
        self.buffers[name][...] = data

    def uniform(self, name: str, shape: tuple[int, ...], bound: float) -> Tensor:
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def constant(self, name: str, shape: tuple[int, ...], value: float) -> Tensor:
        return self.add(name, np.full(shape, value, dtype=np.float64))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def num_scalars(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = np.zeros_like(p.data)

    def clear_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}


@dataclass
class CosineSchedule:
    """Cosine annealing from ``lr_init`` to ``lr_min`` over ``t_max`` steps."""

    lr_init: float = 1e-3
    lr_min: float = 1e-5
    t_max: int = 1000

    def lr(self, step: int) -> float:
        t = min(step, self.t_max)
        return self.lr_min + 0.5 * (self.lr_init - self.lr_min) * (1.0 + math.cos(math.pi * t / self.t_max))


def optimizer_step(
    store: ParamStore,
    lr: float = 1e-3,
    weight_decay: float = 1e-2,
    schedule: CosineSchedule | None = None,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    max_grad_norm: float | None = None,
) -> float:
    """One AdamW update; returns the learning rate that was applied.

    Weight decay is decoupled: it shrinks the parameter directly and never
    enters the moment estimates.
    """
    if schedule is not None:
        lr = schedule.lr(store.step)
    for name, p in store.params.items():
        if p.grad is None:
            raise MissingGradient(name)
    scale = 1.0
    if max_grad_norm is not None:
        total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in store.params.values()))
        if total > max_grad_norm:
            scale = max_grad_norm / (total + 1e-12)
    store.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1**store.step
    c2 = 1.0 - b2**store.step
    for name, p in store.params.items():
        g = p.grad * scale
        m = store.m[name]
        v = store.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return lr


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(store: ParamStore, path: str | Path) -> None:
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    arrays = {name: p.data for name, p in store.params.items()}
    arrays.update(store.buffers)
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        data = np.ascontiguousarray(arr, dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        chunks.append(data.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointError("bad magic")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return out


def load_checkpoint(store: ParamStore, path: str | Path) -> None:
    """Copy checkpoint values into an already-built store; names and shapes must agree."""
    arrays = read_checkpoint(path)
    names = set(store.params) | set(store.buffers)
    if set(arrays) != names:
        missing = sorted(names - set(arrays))
        extra = sorted(set(arrays) - names)
        raise CheckpointError(f"parameter names differ (missing={missing[:5]}, extra={extra[:5]})")
    for name, arr in arrays.items():
        current = store.params[name].data if name in store.params else store.buffers[name]
        if arr.shape != current.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != {current.shape}")
    for name, arr in arrays.items():
        if name in store.params:
            store.params[name].data = arr.copy()
        else:
            store.set_buffer(name, arr)
