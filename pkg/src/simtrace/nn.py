"""Layers, parameter registry helpers and the checkpoint archive format.

Parameters live in a flat name -> Tensor dict; names are the canonical
identity used by checkpoints and by the data-parallel gradient exchange
(sorted name order on every worker).

Checkpoint archive (versioned, little-endian):
  magic 'NTA1' | u16 version | u32 tensor count
  per tensor:  name (u32 len + UTF-8) | u32 ndim | dims as u32 | f64 data
  optional:    magic 'META' | u32 len | UTF-8 JSON
"""

from __future__ import annotations

import io
import json
import struct
from typing import Optional

import numpy as np

from . import tensor as T

ARCHIVE_MAGIC = b"NTA1"
META_MAGIC = b"META"
ARCHIVE_VERSION = 1


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   gain: float = 1.0) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    if len(shape) > 2:  # conv kernels: (K, C, kd, kh, kw)
        receptive = int(np.prod(shape[2:]))
        fan_in = shape[1] * receptive
        fan_out = shape[0] * receptive
    a = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


class ParamStore:
    """Flat named-parameter registry with deterministic ordering."""

    def __init__(self):
        self._params: dict[str, T.Tensor] = {}

    def create(self, name: str, data: np.ndarray) -> T.Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        t = T.Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> T.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def zero_grads(self):
        for _, p in self.items():
            p.zero_grad()

    def parameter_count(self) -> int:
        return sum(p.size for p in self._params.values())

    def layout_hash(self) -> int:
        """64-bit hash of (name, shape) pairs in canonical order."""
        from .trace import fnv1a_64
        h = 0xCBF29CE484222325
        for name, p in self.items():
            h = fnv1a_64(name.encode("utf-8"), h)
            for d in p.shape:
                h = fnv1a_64(int(d).to_bytes(4, "little"), h)
        return h

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.items()}

    def load_state(self, arrays: dict[str, np.ndarray]):
        for n, p in self.items():
            if n not in arrays:
                raise KeyError(f"checkpoint missing parameter {n!r}")
            src = arrays[n]
            if src.shape != p.shape:
                raise ValueError(f"shape mismatch for {n!r}: {src.shape} vs {p.shape}")
            p.data = np.array(src, dtype=np.float64)


class Linear:
    def __init__(self, store: ParamStore, rng: np.random.Generator,
                 n_in: int, n_out: int, name: str):
        self.W = store.create(f"{name}.W", xavier_uniform(rng, (n_in, n_out)))
        self.b = store.create(f"{name}.b", np.zeros(n_out))

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.add(T.matmul(x, self.W), self.b)


class MLP:
    """relu-activated hidden layers, linear output."""

    def __init__(self, store, rng, sizes: list[int], name: str):
        self.layers = [Linear(store, rng, sizes[i], sizes[i + 1], f"{name}.{i}")
                       for i in range(len(sizes) - 1)]

    def __call__(self, x: T.Tensor) -> T.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = T.relu(x)
        return x


class LSTM:
    def __init__(self, store, rng, n_in: int, hidden: int, name: str):
        self.hidden = hidden
        self.W = store.create(f"{name}.W", xavier_uniform(rng, (n_in, 4 * hidden)))
        self.U = store.create(f"{name}.U", xavier_uniform(rng, (hidden, 4 * hidden)))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget-gate bias
        self.b = store.create(f"{name}.b", b)

    def initial_state(self, batch: int) -> tuple[T.Tensor, T.Tensor]:
        return (T.Tensor(np.zeros((batch, self.hidden))),
                T.Tensor(np.zeros((batch, self.hidden))))

    def step(self, x: T.Tensor, state) -> tuple[T.Tensor, tuple[T.Tensor, T.Tensor]]:
        h, c = state
        h2, c2 = T.lstm_cell(x, h, c, self.W, self.U, self.b)
        return h2, (h2, c2)


class Conv3dLayer:
    def __init__(self, store, rng, c_in: int, c_out: int, k: int, name: str,
                 stride: int = 1, padding: int = 0):
        self.kernel = store.create(f"{name}.kernel",
                                   xavier_uniform(rng, (c_out, c_in, k, k, k)))
        self.bias = store.create(f"{name}.bias", np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: T.Tensor) -> T.Tensor:
        y = T.conv3d(x, self.kernel, stride=self.stride, padding=self.padding)
        return T.add(y, T.reshape(self.bias, (1, -1, 1, 1, 1)))


class Conv3dEmbedder:
    """Volumetric feature extractor for grid observations.

    The 'paper' preset is the published stack
    Conv(1,64,3)-Conv(64,64,3)-Pool-Conv(64,128,3)-Conv(128,128,3)-
    Conv(128,128,3)-Pool-FC(2048->out); 'desk' is the same shape of
    pipeline at desk-scale channel counts for small grids.
    """

    def __init__(self, store, rng, grid: tuple[int, int, int], out_dim: int,
                 name: str, preset: str = "desk"):
        self.grid = tuple(grid)
        self.layers: list = []
        if preset == "desk":
            chans = [(1, 4), (4, 4)]
            for i, (ci, co) in enumerate(chans):
                self.layers.append(Conv3dLayer(store, rng, ci, co, 3,
                                               f"{name}.conv{i}", padding=1))
            pooled = tuple(d // 2 for d in self.grid)
            flat = 4 * int(np.prod(pooled))
        elif preset == "paper":
            chans = [(1, 64), (64, 64)]
            for i, (ci, co) in enumerate(chans):
                self.layers.append(Conv3dLayer(store, rng, ci, co, 3,
                                               f"{name}.conv{i}", padding=1))
            chans2 = [(64, 128), (128, 128), (128, 128)]
            self._second = []
            for i, (ci, co) in enumerate(chans2):
                self._second.append(Conv3dLayer(store, rng, ci, co, 3,
                                                f"{name}.conv{i + 2}", padding=1))
            pooled = tuple(d // 4 for d in self.grid)
            flat = 128 * int(np.prod(pooled))
        else:
            raise ValueError(f"unknown conv preset {preset!r}")
        self.preset = preset
        self.fc = Linear(store, rng, flat, out_dim, f"{name}.fc")

    def __call__(self, obs: T.Tensor) -> T.Tensor:
        # obs: (B, prod(grid)) flattened voxels
        batch = obs.shape[0]
        x = T.reshape(obs, (batch, 1) + self.grid)
        for layer in self.layers:
            x = T.relu(layer(x))
        x = T.maxpool3d(x, 2)
        if self.preset == "paper":
            for layer in self._second:
                x = T.relu(layer(x))
            x = T.maxpool3d(x, 2)
        x = T.reshape(x, (batch, -1))
        return T.relu(self.fc(x))


# ---------------------------------------------------------------------------
# archive I/O

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


def save_archive(path, tensors: dict[str, np.ndarray], meta: Optional[dict] = None):
    with open(path, "wb") as f:
        f.write(ARCHIVE_MAGIC)
        f.write(_U16.pack(ARCHIVE_VERSION))
        f.write(_U32.pack(len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype=np.float64)
            raw = name.encode("utf-8")
            f.write(_U32.pack(len(raw)))
            f.write(raw)
            f.write(_U32.pack(arr.ndim))
            for d in arr.shape:
                f.write(_U32.pack(d))
            f.write(arr.astype("<f8").tobytes())
        if meta is not None:
            blob = json.dumps(meta, sort_keys=True).encode("utf-8")
            f.write(META_MAGIC)
            f.write(_U32.pack(len(blob)))
            f.write(blob)


def load_archive(path) -> tuple[dict[str, np.ndarray], Optional[dict]]:
    with open(path, "rb") as f:
        data = f.read()
    buf = io.BytesIO(data)
    if buf.read(4) != ARCHIVE_MAGIC:
        raise ValueError("not a tensor archive")
    version = _U16.unpack(buf.read(2))[0]
    if version != ARCHIVE_VERSION:
        raise ValueError(f"unsupported archive version {version}")
    count = _U32.unpack(buf.read(4))[0]
    tensors = {}
    for _ in range(count):
        n = _U32.unpack(buf.read(4))[0]
        name = buf.read(n).decode("utf-8")
        ndim = _U32.unpack(buf.read(4))[0]
        shape = tuple(_U32.unpack(buf.read(4))[0] for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf.read(8 * size), dtype="<f8").astype(np.float64)
        tensors[name] = arr.reshape(shape)
    meta = None
    tag = buf.read(4)
    if tag == META_MAGIC:
        n = _U32.unpack(buf.read(4))[0]
        meta = json.loads(buf.read(n).decode("utf-8"))
    return tensors, meta
