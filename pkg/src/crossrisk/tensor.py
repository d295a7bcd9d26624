"""Dense float64 tensors plus a reverse-mode differentiation tape.

Values are immutable once constructed (the underlying numpy buffer is marked
read-only); every operation returns a fresh Tensor. While a Tape is active
(``with Tape() as tape:``) each primitive appends one node holding a closure
that maps the output gradient to input gradients. ``backward(tape, loss)``
replays the nodes in reverse and accumulates gradients for every recorded
leaf. Composite layers elsewhere in the package are built purely from the
primitives here, so no layer needs its own adjoint code.

Layout is row-major with explicit shape metadata; reshape/permute copy (no
strided views are exposed). Everything is 64-bit: the test suite is
tolerance-based and the scale is small, so precision beats speed.
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ChannelMismatchError,
    FullyMaskedRowError,
    NonScalarLossError,
    ShapeMismatchError,
)

LAYERNORM_EPS = 1e-5

_tensor_ids = itertools.count(1)
_active_tape = None


class Tensor:
    """Immutable dense float64 array with an identity used by the tape."""

    __slots__ = ("data", "tid")

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64)
        if 0 in arr.shape:
            raise ShapeMismatchError(f"tensor extents must all be >= 1, got {arr.shape}")
        arr.setflags(write=False)
        self.data = arr
        self.tid = next(_tensor_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, id={self.tid})"


def _wrap(arr: np.ndarray) -> Tensor:
    """Adopt a freshly computed array without copying."""
    t = object.__new__(Tensor)
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    t.data = arr
    t.tid = next(_tensor_ids)
    return t


def zeros(shape) -> Tensor:
    return _wrap(np.zeros(shape))


def ones(shape) -> Tensor:
    return _wrap(np.ones(shape))


def scalar(value: float) -> Tensor:
    return _wrap(np.asarray(float(value)))


class Tape:
    """Ordered record of primitive applications plus gradients after backward.

    Single-owner: one tape per forward pass, never shared across threads.
    Nodes are appended in execution order, so inputs always precede use
    (topological by construction).
    """

    def __init__(self):
        self.nodes = []  # (out_tid, in_tids, in_shapes, vjp)
        self.gradients = {}  # tid -> Tensor, filled by backward()
        self._prev = None

    def __enter__(self):
        global _active_tape
        self._prev = _active_tape
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = self._prev
        self._prev = None
        return False


def _record(out: Tensor, inputs, vjp) -> None:
    tape = _active_tape
    if tape is not None:
        tape.nodes.append(
            (out.tid, tuple(t.tid for t in inputs), tuple(t.data.shape for t in inputs), vjp)
        )


def backward(tape: Tape, loss: Tensor) -> dict:
    """Reverse-accumulate gradients of a scalar loss over the tape.

    Returns a map tid -> gradient Tensor covering every leaf recorded on the
    tape (leaves unreachable from the loss get zeros). The same map is stored
    on ``tape.gradients``.
    """
    if loss.data.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")
    grads = {loss.tid: np.ones_like(loss.data)}
    produced = set()
    leaf_shapes = {}
    for out_tid, in_tids, in_shapes, _ in tape.nodes:
        produced.add(out_tid)
        for tid, shp in zip(in_tids, in_shapes):
            if tid not in produced:
                leaf_shapes[tid] = shp
    for out_tid, in_tids, _, vjp in reversed(tape.nodes):
        g_out = grads.get(out_tid)
        if g_out is None:
            continue
        for tid, g_in in zip(in_tids, vjp(g_out)):
            if g_in is None:
                continue
            acc = grads.get(tid)
            grads[tid] = g_in if acc is None else acc + g_in
    result = {}
    for tid, shp in leaf_shapes.items():
        g = grads.get(tid)
        result[tid] = _wrap(g.copy()) if g is not None else zeros(shp)
    for tid, g in grads.items():
        if tid not in result and tid != loss.tid:
            result[tid] = _wrap(g)
    tape.gradients = result
    return result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the pre-broadcast shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; both operands 2-D, or stacked with identical leading dims."""
    av, bv = a.data, b.data
    ok = (
        av.ndim >= 2
        and av.ndim == bv.ndim
        and av.shape[:-2] == bv.shape[:-2]
        and av.shape[-1] == bv.shape[-2]
    )
    if not ok:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = _wrap(av @ bv)

    def vjp(g):
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    _record(out, (a, b), vjp)
    return out


def conv2d_3x3(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1: (C_in,W,H) -> (C_out,W,H).

    A leading batch axis is also accepted: (B,C_in,W,H) -> (B,C_out,W,H),
    applying the same kernel to every image.
    """
    xv, kv, bv = x.data, kernel.data, bias.data
    batched = xv.ndim == 4
    if xv.ndim not in (3, 4) or kv.ndim != 4 or kv.shape[2:] != (3, 3):
        raise ShapeMismatchError(
            f"conv2d_3x3: need x (C_in,W,H) and kernel (C_out,C_in,3,3), got {x.shape} and {kernel.shape}"
        )
    if kv.shape[1] != xv.shape[-3]:
        raise ChannelMismatchError(
            f"conv2d_3x3: kernel expects {kv.shape[1]} input channels, input has {xv.shape[-3]}"
        )
    if bv.shape != (kv.shape[0],):
        raise ShapeMismatchError(f"conv2d_3x3: bias shape {bias.shape} != ({kv.shape[0]},)")
    w, h = xv.shape[-2:]
    xb = xv if batched else xv[None]
    xp = np.pad(xb, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (B, C_in, W, H, 3, 3)
    res = np.einsum("ockl,bcwhkl->bowh", kv, win) + bv[:, None, None]
    out = _wrap(res if batched else res[0])

    def vjp(g):
        gb = g if batched else g[None]
        db = gb.sum(axis=(0, 2, 3))
        dk = np.einsum("bowh,bcwhkl->ockl", gb, win)
        dxp = np.zeros_like(xp)
        for di in range(3):
            for dj in range(3):
                dxp[:, :, di : di + w, dj : dj + h] += np.einsum("oc,bowh->bcwh", kv[:, :, di, dj], gb)
        dx = dxp[:, :, 1 : w + 1, 1 : h + 1]
        return dx if batched else dx[0], dk, db

    _record(out, (x, kernel, bias), vjp)
    return out


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Row softmax along the last axis, numerically stabilized by max-subtraction.

    ``mask`` (same shape, True = participates) restricts each row to its
    unmasked entries: masked outputs are exactly 0 and the unmasked entries
    of each row sum to 1. Raises FullyMaskedRowError if any row has no True.
    """
    xv = x.data
    if mask is None:
        shifted = xv - xv.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        keep = mask.data.astype(bool) if isinstance(mask, Tensor) else np.asarray(mask, dtype=bool)
        if keep.shape != xv.shape:
            raise ShapeMismatchError(f"softmax_rows: mask shape {keep.shape} != input {x.shape}")
        if not keep.any(axis=-1).all():
            raise FullyMaskedRowError("softmax_rows: a row is fully masked")
        neg = np.where(keep, xv, -np.inf)
        shifted = neg - neg.max(axis=-1, keepdims=True)
        e = np.exp(shifted)  # exp(-inf) == 0.0 exactly
    s = e.sum(axis=-1, keepdims=True)
    y = e / s
    out = _wrap(y)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    _record(out, (x,), vjp)
    return out


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Standardize each vector along the last axis, then scale/shift."""
    xv = x.data
    d = xv.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatchError(
            f"layernorm: gamma/beta must be ({d},), got {gamma.shape} and {beta.shape}"
        )
    mu = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    out = _wrap(gamma.data * xhat + beta.data)

    def vjp(g):
        dgamma = (g * xhat).reshape(-1, d).sum(axis=0)
        dbeta = g.reshape(-1, d).sum(axis=0)
        dxh = g * gamma.data
        dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True) - xhat * (dxh * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    _record(out, (x, gamma, beta), vjp)
    return out


def relu(x: Tensor) -> Tensor:
    xv = x.data
    out = _wrap(np.maximum(xv, 0.0))

    def vjp(g):
        return (g * (xv > 0.0),)

    _record(out, (x,), vjp)
    return out


def sigmoid(x: Tensor) -> Tensor:
    xv = x.data
    e = np.exp(-np.abs(xv))  # overflow-free for any magnitude
    y = np.where(xv >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = _wrap(y)

    def vjp(g):
        return (g * y * (1.0 - y),)

    _record(out, (x,), vjp)
    return out


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = _wrap(y)

    def vjp(g):
        return (g * y,)

    _record(out, (x,), vjp)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    try:
        out = _wrap(a.data + b.data)
    except ValueError:
        raise ShapeMismatchError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    ash, bsh = a.data.shape, b.data.shape

    def vjp(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    _record(out, (a, b), vjp)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    av, bv = a.data, b.data
    try:
        out = _wrap(av * bv)
    except ValueError:
        raise ShapeMismatchError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    _record(out, (a, b), vjp)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant (not a tape leaf)."""
    c = float(c)
    out = _wrap(x.data * c)

    def vjp(g):
        return (g * c,)

    _record(out, (x,), vjp)
    return out


def concat_last_axis(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeMismatchError(f"concat_last_axis: shapes {a.shape} and {b.shape} disagree off the last axis")
    na = a.data.shape[-1]
    out = _wrap(np.concatenate([a.data, b.data], axis=-1))

    def vjp(g):
        return g[..., :na], g[..., na:]

    _record(out, (a, b), vjp)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeMismatchError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.data.shape
    out = _wrap(x.data.reshape(shape))

    def vjp(g):
        return (g.reshape(old),)

    _record(out, (x,), vjp)
    return out


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeMismatchError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = np.argsort(axes)
    out = _wrap(np.transpose(x.data, axes))

    def vjp(g):
        return (np.transpose(g, inv),)

    _record(out, (x,), vjp)
    return out


def select(x: Tensor, axis: int, index: int) -> Tensor:
    """Take one slice along ``axis`` (the axis is removed)."""
    xv = x.data
    axis = int(axis)
    index = int(index)
    if not (0 <= axis < xv.ndim and 0 <= index < xv.shape[axis]):
        raise ShapeMismatchError(f"select: axis {axis} index {index} out of range for {x.shape}")
    out = _wrap(np.take(xv, index, axis=axis))
    shp = xv.shape

    def vjp(g):
        dx = np.zeros(shp)
        sl = [slice(None)] * len(shp)
        sl[axis] = index
        dx[tuple(sl)] = g
        return (dx,)

    _record(out, (x,), vjp)
    return out


def stack(tensors, axis: int = 0) -> Tensor:
    """Stack equal-shape tensors along a new axis."""
    tensors = list(tensors)
    base = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape != base:
            raise ShapeMismatchError(f"stack: shapes {base} and {t.shape} differ")
    out = _wrap(np.stack([t.data for t in tensors], axis=axis))

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    _record(out, tuple(tensors), vjp)
    return out


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    shp = x.data.shape
    out = _wrap(np.asarray(x.data.sum()))

    def vjp(g):
        return (np.broadcast_to(g, shp).copy() if g.shape != shp else g.copy(),)

    _record(out, (x,), vjp)
    return out
