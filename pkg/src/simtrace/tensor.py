"""Dense float64 tensors with tape-based reverse-mode differentiation.

Sized for the proposal network: matmul, broadcasting elementwise ops, the
usual nonlinearities, softmax/logsumexp, concatenation and narrowing,
embedding lookup, valid/padded 3D convolution, max-pooling, and a normal
CDF primitive for truncated-normal densities.

Ops record onto the innermost active Tape; with no tape active they are
plain forward computations. Gradients accumulate in reverse tape order, so
backward passes are deterministic and bit-identical across runs.
"""

from __future__ import annotations

import math
import threading
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtr

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}{flag})"

    # operator sugar; scalars are wrapped as constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("output", "inputs", "vjp")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], vjp):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp  # grad_out -> tuple of grads aligned with inputs (None allowed)


class _TapeStack(threading.local):
    def __init__(self):
        self.stack: list["Tape"] = []


_ACTIVE = _TapeStack()


class Tape:
    """Execution-ordered record of primitive ops for one backward pass.

    Tapes nest per thread; a tape is owned by the thread that opened it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _ACTIVE.stack.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor):
        backward(self, loss)


def _record(output: Tensor, inputs: tuple[Tensor, ...], vjp):
    stack = _ACTIVE.stack
    if stack and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        stack[-1].nodes.append(_Node(output, inputs, vjp))
    return output


def backward(tape: Tape, loss: Tensor):
    """Populate .grad of every requires_grad tensor reachable from `loss`."""
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    # clear intermediate grads from any previous pass over this tape
    for node in tape.nodes:
        node.output.grad = None
    loss.grad = np.ones_like(loss.data)
    seen_loss = False
    for node in reversed(tape.nodes):
        g = node.output.grad
        if node.output is loss:
            seen_loss = True
        if g is None:
            continue
        grads = node.vjp(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            inp.accumulate_grad(gi)
    if not seen_loss and tape.nodes:
        raise ShapeError("loss tensor is not on this tape")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                           _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g / b.data, a.shape),
                                           _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return _record(Tensor(-a.data), (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _record(out, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.array_split(g, splits, axis=axis))

    return _record(out, tuple(tensors), vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(a.data[index])

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    return _record(out, (a,), lambda g: (g * (a.data > 0),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record(Tensor(y), (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record(Tensor(y), (a,), lambda g: (g * y * (1.0 - y),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.where(x > 30.0, x, np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0))
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _record(Tensor(y), (a,), lambda g: (g * s,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _record(Tensor(y), (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return _record(Tensor(np.log(a.data)), (a,), lambda g: (g / a.data,))


def square(a: Tensor) -> Tensor:
    return _record(Tensor(a.data * a.data), (a,), lambda g: (2.0 * g * a.data,))


def normal_cdf(a: Tensor) -> Tensor:
    """Standard normal CDF; derivative is the standard normal PDF."""
    y = ndtr(a.data)

    def vjp(g):
        return (g * _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data),)

    return _record(Tensor(y), (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(Tensor(y), (a,), vjp)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    y = m + np.log(s)
    soft = e / s

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (gg * soft,)

    return _record(Tensor(y if keepdims else np.squeeze(y, axis=axis)), (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# lookup, convolution, pooling


def embedding(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(table.data[idx])

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record(out, (table,), vjp)


def conv3d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[N,C,D,H,W] with kernel[K,C,kd,kh,kw]."""
    if x.data.ndim != 5 or kernel.data.ndim != 5:
        raise ShapeError(f"conv3d needs 5-D input and kernel, got {x.shape}, {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"channel mismatch: input {x.shape[1]}, kernel {kernel.shape[1]}")
    kd, kh, kw = kernel.shape[2:]
    xp = x.data
    if padding > 0:
        xp = np.pad(xp, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    if any(xp.shape[2 + i] < kernel.shape[2 + i] for i in range(3)):
        raise ShapeError(f"input {xp.shape} smaller than kernel {kernel.shape}")
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    if stride > 1:
        win = win[:, :, ::stride, ::stride, ::stride]
    out = Tensor(np.einsum("ncdhwijl,ocijl->nodhw", win, kernel.data, optimize=True))

    def vjp(g):
        gk = np.einsum("nodhw,ncdhwijl->ocijl", g, win, optimize=True)
        gx_pad = np.zeros_like(xp)
        n_d, n_h, n_w = g.shape[2:]
        for i in range(kd):
            for j in range(kh):
                for l in range(kw):
                    contrib = np.einsum("nodhw,oc->ncdhw", g, kernel.data[:, :, i, j, l],
                                        optimize=True)
                    gx_pad[:, :,
                           i:i + stride * n_d:stride,
                           j:j + stride * n_h:stride,
                           l:l + stride * n_w:stride] += contrib
        if padding > 0:
            gx = gx_pad[:, :, padding:-padding, padding:-padding, padding:-padding]
        else:
            gx = gx_pad
        return (gx, gk)

    return _record(out, (x, kernel), vjp)


def maxpool3d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing remainders are cropped."""
    if x.data.ndim != 5:
        raise ShapeError(f"maxpool3d needs 5-D input, got {x.shape}")
    n, c, d, h, w = x.shape
    do, ho, wo = d // size, h // size, w // size
    if do == 0 or ho == 0 or wo == 0:
        raise ShapeError(f"input {x.shape} smaller than pool size {size}")
    xc = x.data[:, :, :do * size, :ho * size, :wo * size]
    r = xc.reshape(n, c, do, size, ho, size, wo, size)
    r = r.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, do, ho, wo, size ** 3)
    arg = r.argmax(axis=-1)
    out = Tensor(np.take_along_axis(r, arg[..., None], axis=-1)[..., 0])

    def vjp(g):
        gr = np.zeros((n, c, do, ho, wo, size ** 3))
        np.put_along_axis(gr, arg[..., None], g[..., None], axis=-1)
        gr = gr.reshape(n, c, do, ho, wo, size, size, size)
        gr = gr.transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(n, c, do * size, ho * size, wo * size)
        gx = np.zeros_like(x.data)
        gx[:, :, :do * size, :ho * size, :wo * size] = gr
        return (gx,)

    return _record(out, (x,), vjp)


# ---------------------------------------------------------------------------
# recurrent cell


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, W: Tensor, U: Tensor,
              b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step with gate order (input, forget, cell, output).

    x: (B, I), h, c: (B, H); W: (I, 4H), U: (H, 4H), b: (4H,).
    """
    hidden = h.shape[-1]
    gates = add(add(matmul(x, W), matmul(h, U)), b)
    i = sigmoid(narrow(gates, 1, 0, hidden))
    f = sigmoid(narrow(gates, 1, hidden, hidden))
    g = tanh(narrow(gates, 1, 2 * hidden, hidden))
    o = sigmoid(narrow(gates, 1, 3 * hidden, hidden))
    c_next = add(mul(f, c), mul(i, g))
    h_next = mul(o, tanh(c_next))
    return h_next, c_next
