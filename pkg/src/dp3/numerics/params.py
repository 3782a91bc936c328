"""Named parameter storage, Adam, and the flat binary checkpoint format.

Checkpoint layout (all integers little-endian u32)::

    b"DP3CKPT1"
    repeated until EOF:
        name_len, name (UTF-8), rank, extent * rank, float64 LE payload

Adam state is saved alongside the parameters under the reserved prefixes
``adam.m/``, ``adam.v/`` and the single entry ``adam.step``.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import Tensor

CHECKPOINT_MAGIC = b"DP3CKPT1"


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Ordered mapping from parameter name to leaf tensor, plus Adam moments."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        t.grad = np.zeros_like(t.data)
        self._params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def grad_vector(self) -> np.ndarray:
        return np.concatenate([t.grad.reshape(-1) for t in self._params.values()])

    # serialization ---------------------------------------------------------

    def state_dict(self, with_optimizer: bool = True) -> dict[str, np.ndarray]:
        state = {name: t.data for name, t in self._params.items()}
        if with_optimizer:
            for name in self._params:
                state[f"adam.m/{name}"] = self.m[name]
                state[f"adam.v/{name}"] = self.v[name]
            state["adam.step"] = np.array([float(self.step)])
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = [n for n in self._params if n not in state]
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters: {missing[:5]}")
        for name, t in self._params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise CheckpointError(f"{name}: shape {arr.shape} != expected {t.shape}")
            t.data = arr.copy()
            self.m[name] = np.array(state.get(f"adam.m/{name}", np.zeros_like(arr)))
            self.v[name] = np.array(state.get(f"adam.v/{name}", np.zeros_like(arr)))
        self.step = int(state["adam.step"][0]) if "adam.step" in state else 0
        self.zero_grad()


def adam_step(
    params: ParamStore,
    lr: float = 1e-4,
    beta1: float = 0.95,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update using the gradients currently stored."""
    params.step += 1
    c1 = 1.0 - beta1**params.step
    c2 = 1.0 - beta2**params.step
    for name, t in params.items():
        g = t.grad
        m = params.m[name]
        v = params.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_linear(
    store: ParamStore, rng: np.random.Generator, prefix: str, fan_in: int, fan_out: int
) -> tuple[Tensor, Tensor]:
    W = store.add(f"{prefix}.weight", uniform_fan_in(rng, fan_in, (fan_in, fan_out)))
    b = store.add(f"{prefix}.bias", uniform_fan_in(rng, fan_in, (fan_out,)))
    return W, b


def add_layer_norm(store: ParamStore, prefix: str, dim: int) -> tuple[Tensor, Tensor]:
    g = store.add(f"{prefix}.gain", np.ones(dim))
    b = store.add(f"{prefix}.bias", np.zeros(dim))
    return g, b


# checkpoint file -------------------------------------------------------------

def checkpoint_bytes(state: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    for name, arr in state.items():
        arr = np.asarray(arr, dtype="<f8")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def parse_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a DP3 checkpoint (bad magic)")
    pos = 8
    state: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape))
            if pos + 8 * count > len(blob):
                raise CheckpointError(f"truncated payload for {name!r}")
            state[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    return state


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return parse_checkpoint(Path(path).read_bytes())
