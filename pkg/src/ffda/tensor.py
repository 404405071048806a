"""Dense tensors with tape-based reverse-mode autodiff.

Every op is a plain function that computes its result with numpy and, when a
:class:`Tape` is active and at least one input requires a gradient, records a
closure that maps the output gradient to input gradients.  Nothing is recorded
outside a tape, so inference paths never build a graph.

Broadcasting is deliberately limited to tensor-scalar arithmetic and adding a
row vector to every row of a matrix.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_DTYPES = {"f32": np.float32, "f64": np.float64}


class _State(threading.local):
    def __init__(self):
        self.dtype = np.float32
        self.tapes: list[Tape] = []
        self.debug = False


_state = _State()


def default_dtype():
    return _state.dtype


@contextmanager
def precision(name: str):
    """Temporarily switch the dtype used for new tensors ("f32" or "f64")."""
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}")
    prev = _state.dtype
    _state.dtype = _DTYPES[name]
    try:
        yield
    finally:
        _state.dtype = prev


def set_debug(flag: bool) -> None:
    """Check every op output for NaN/Inf when enabled."""
    _state.debug = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _state.dtype)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division is only defined by a scalar")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None) -> Tensor:
        return sum(self, axis)

    def mean(self, axis=None) -> Tensor:
        return mean(self, axis)


def _not_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; ops executed inside the block are appended in
    execution order, which is a valid topological order by construction.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> Tape:
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], fn: Callable) -> None:
        self.nodes.append(_Node(out, tuple(inputs), fn))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        produced = {id(n.out) for n in self.nodes}
        if id(loss) not in produced and not loss.requires_grad:
            raise ContractError("loss is not connected to the tape")
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = t
        if loss.requires_grad and id(loss) not in produced:
            leaves[id(loss)] = loss
        for key, t in leaves.items():
            g = grads.get(key)
            if g is not None:
                t.grad = g.astype(t.data.dtype, copy=False).reshape(t.shape)


def active_tape() -> Optional[Tape]:
    return _state.tapes[-1] if _state.tapes else None


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``.grad`` on every leaf that requires a gradient.

    Leaf gradients are overwritten, not accumulated: one tape per step.
    """
    tape = tape or active_tape()
    if tape is None:
        raise ContractError("backward called without a tape")
    tape.backward(loss)


def _make(data: np.ndarray, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    if _state.debug and not np.all(np.isfinite(data)):
        raise NumericError("non-finite values produced by a forward op")
    out = Tensor(data, dtype=data.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, fn)
    return out


def _scalar_like(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b) -> Tensor:
    if _scalar_like(b):
        return _make(a.data + b, (a,), lambda g: (g,))
    b = as_tensor(b)
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim == 2 and a.shape[1] == b.shape[0]:
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b) -> Tensor:
    if _scalar_like(b):
        return add(a, -b)
    return add(a, neg(as_tensor(b)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if _scalar_like(b):
        return scale(a, b)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis but the first."""
    return reshape(a, (a.shape[0], -1))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, fn)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start + length)`` along ``axis``."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def fn(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), fn)


def gather_rows(a: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)

    def fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), fn)


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = a.data.sum(axis=axis)

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), fn)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis), 1.0 / float(n))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"log_softmax_rows expects a matrix, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def cross_entropy(logits: Tensor, labels, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits).

    Rows labelled ``ignore_index`` contribute nothing; an all-ignored batch has loss 0.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    rows = np.flatnonzero(labels != ignore_index)
    cols = labels[rows]
    if np.any((cols < 0) | (cols >= logits.shape[1])):
        raise ShapeError(f"cross_entropy: labels out of range for {logits.shape[1]} classes")
    n = max(rows.size, 1)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -logp[rows, cols].sum() / n

    def fn(g):
        d = np.zeros_like(logp)
        d[rows] = np.exp(logp[rows])
        d[rows, cols] -= 1.0
        return (d * (g / n),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), fn)


# ---------------------------------------------------------------- convolution
#
# Convolution, pooling and batch norm run channels-last internally: im2col then
# copies contiguous runs of C floats instead of k floats.  With
# ``channels_last=False`` (the default) inputs and outputs are NCHW.


def _to_nhwc(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1))


def _to_nchw(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 3, 1, 2))


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, channels_last: bool = False) -> Tensor:
    """2-d cross-correlation with an (out, in, k, k) weight."""
    cin = x.shape[3] if channels_last else x.shape[1]
    if x.ndim != 4 or weight.ndim != 4 or cin != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    xd = x.data if channels_last else _to_nhwc(x.data)
    n, h, w, c = xd.shape
    o, _, k, _ = weight.shape
    p = padding
    xp = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0))) if p else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1:3]
    # win is (n, ho, wo, c, k, k); columns ordered (ki, kj, c)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(k * k * c, o)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o)
    if not channels_last:
        out = _to_nchw(out)

    def fn(g):
        g2 = (g if channels_last else _to_nhwc(g)).reshape(-1, o)
        dw = None
        if weight.requires_grad:
            dw = (cols.T @ g2).reshape(k, k, c, o).transpose(3, 2, 0, 1)
        db = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, ho, wo, k, k, c)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, i, j]
            dx = dxp[:, p:p + h, p:p + w] if p else dxp
            if not channels_last:
                dx = _to_nchw(dx)
        return (dx, dw, db) if bias is not None else (dx, dw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, inputs, fn)


def max_pool2d(x: Tensor, size: int = 2, channels_last: bool = False) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first maximum
    in row-major window order."""
    xd = x.data if channels_last else _to_nhwc(x.data)
    n, h, w, c = xd.shape
    if h % size or w % size:
        raise ShapeError(f"max_pool2d: spatial size {(h, w)} not divisible by {size}")
    parts = [xd[:, i::size, j::size] for i in range(size) for j in range(size)]
    out = parts[0].copy()
    for part in parts[1:]:
        np.maximum(out, part, out=out)
    result = out if channels_last else _to_nchw(out)

    def fn(g):
        g = g if channels_last else _to_nhwc(g)
        dx = np.zeros_like(xd)
        taken = np.zeros(out.shape, dtype=bool)
        for idx, part in enumerate(parts):
            hit = (part == out) & ~taken
            taken |= hit
            i, j = divmod(idx, size)
            dx[:, i::size, j::size] = g * hit
        return (dx if channels_last else _to_nchw(dx),)

    return _make(result, (x,), fn)


# ---------------------------------------------------------------- normalization


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
               mean: Optional[np.ndarray] = None, var: Optional[np.ndarray] = None,
               stat_rows: Optional[int] = None, channels_last: bool = False):
    """Per-channel normalization of an image batch.

    With ``mean``/``var`` given they are treated as constants (inference).
    Otherwise statistics are taken from the first ``stat_rows`` examples (all
    by default) and applied to the whole batch; gradients flow through the
    statistics.  Returns ``(out, batch_mean, batch_var)`` where the batch
    statistics are ``None`` in the constant case; the variance is biased.
    """
    ch_axis = x.ndim - 1 if channels_last else 1
    if x.ndim != 4 or x.shape[ch_axis] != gamma.shape[0]:
        raise ShapeError(f"batch_norm: input {x.shape} vs {gamma.shape[0]} channels")
    axes = tuple(a for a in range(4) if a != ch_axis)
    shp = [1, 1, 1, 1]
    shp[ch_axis] = -1
    shp = tuple(shp)
    xd = x.data
    if mean is not None:
        inv = 1.0 / np.sqrt(np.asarray(var, dtype=xd.dtype) + eps)
        xhat = (xd - np.asarray(mean, dtype=xd.dtype).reshape(shp)) * inv.reshape(shp)
        out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

        def fn_const(g):
            return (g * (gamma.data * inv).reshape(shp),
                    (g * xhat).sum(axis=axes),
                    g.sum(axis=axes))

        return _make(out, (x, gamma, beta), fn_const), None, None

    m = xd.shape[0] if stat_rows is None else stat_rows
    if m < 1:
        raise ContractError("batch_norm needs at least one statistics row")
    sx = xd[:m]
    mu = sx.mean(axis=axes)
    v = sx.var(axis=axes)
    inv = 1.0 / np.sqrt(v + eps)
    centered = xd - mu.reshape(shp)
    xhat = centered * inv.reshape(shp)
    out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)
    count = sx.size // sx.shape[ch_axis]

    def fn(g):
        dxhat = g * gamma.data.reshape(shp)
        dx = dxhat * inv.reshape(shp)
        d_inv = (dxhat * centered).sum(axis=axes)
        d_mu = -(dxhat.sum(axis=axes) * inv)
        d_var = d_inv * (-0.5) * inv ** 3
        dx[:m] += (d_mu / count).reshape(shp) + (2.0 * d_var / count).reshape(shp) * centered[:m]
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(out, (x, gamma, beta), fn), mu, v


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of a matrix over its last axis, then apply the affine map."""
    if x.ndim != 2 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"layer_norm: input {x.shape} vs width {gamma.shape[0]}")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered ** 2).mean(axis=1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def fn(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _make(out, (x, gamma, beta), fn)
