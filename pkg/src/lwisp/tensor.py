"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable op builds a :class:`Node` carrying a monotonically
increasing sequence number. The set of nodes reachable from a loss, ordered
by that number, is the tape: replaying it backwards visits each node once and
only after all of its consumers.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np

_seq = itertools.count()
_grad_enabled = True
_kink_log: list | None = None


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def record_kinks():
    """Collect the branch pattern of every non-smooth op evaluated in the block.

    Two forward passes with equal logs took the same smooth branch everywhere,
    so a finite difference between them does not straddle a kink.
    """
    global _kink_log
    prev = _kink_log
    _kink_log = []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def _log_kink(pattern: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(pattern)


class Node:
    """One tape entry: the op that produced a tensor and how to differentiate it."""

    __slots__ = ("op", "inputs", "backward", "seq")

    def __init__(self, op: str, inputs: tuple, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.seq = next(_seq)

    def __repr__(self) -> str:
        return f"Node({self.op}, seq={self.seq})"


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    # ------------------------------------------------------------------ basics
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
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # --------------------------------------------------------------- autodiff
    def backward(self) -> None:
        """Backpropagate from this scalar into every reachable leaf's ``.grad``.

        Leaf gradients accumulate across calls until reset with ``zero_grad``.
        The graph is released afterwards; a second call on the same loss raises.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor requiring grad")
        if self.node is None:
            self.grad = np.ones_like(self.data) if self.grad is None else self.grad + 1.0
            return
        if self.node.backward is None:
            raise RuntimeError("graph already released by a previous backward()")

        tape: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            t = stack.pop()
            n = t.node
            if n is None or n.seq in tape:
                continue
            if n.backward is None:
                raise RuntimeError("graph already released by a previous backward()")
            tape[n.seq] = t
            stack.extend(i for i in n.inputs if i.requires_grad)

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        leaves: dict[int, Tensor] = {}
        for seq in sorted(tape, reverse=True):
            out = tape[seq]
            fn, out.node.backward = out.node.backward, None
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, ig in zip(out.node.inputs, fn(g)):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if inp.node is None:
                    leaves[key] = inp
                grads[key] = grads[key] + ig if key in grads else ig
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g

    # ------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap ``data`` as an op output, recording a tape node when needed."""
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    return make_result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)

    return make_result(out, (a, b), backward, "div")


def power(x: Tensor, exponent: float) -> Tensor:
    xd = x.data
    out = xd**exponent

    def backward(g):
        return (g * exponent * xd ** (exponent - 1),)

    return make_result(out, (x,), backward, "pow")


def square(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g):
        return (2.0 * g * xd,)

    return make_result(xd * xd, (x,), backward, "square")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so neither branch overflows
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return make_result(out, (x,), backward, "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data >= 0
    _log_kink(mask)

    def backward(g):
        return (g * mask,)

    return make_result(x.data * mask, (x,), backward, "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data >= 0
    _log_kink(mask)
    scale = np.where(mask, 1.0, slope).astype(x.dtype)

    def backward(g):
        return (g * scale,)

    return make_result(x.data * scale, (x,), backward, "leaky_relu")


def tabs(x: Tensor) -> Tensor:
    # right-subgradient: d|x|/dx = +1 at 0
    sign = np.where(x.data >= 0, 1.0, -1.0).astype(x.dtype)
    _log_kink(sign > 0)

    def backward(g):
        return (g * sign,)

    return make_result(np.abs(x.data), (x,), backward, "abs")


def clip_min(x: Tensor, floor: float) -> Tensor:
    mask = x.data >= floor
    _log_kink(mask)

    def backward(g):
        return (g * mask,)

    return make_result(np.maximum(x.data, floor), (x,), backward, "clip_min")


# ----------------------------------------------------------- reductions/shape
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    count = int(np.prod([shape[a] for a in axes])) if axes else 1

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return make_result(np.mean(x.data, axis=axes, keepdims=keepdims), (x,), backward, "mean")


def amax(x: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    """Max along one axis; ties route the gradient to the first maximal index."""
    idx = np.argmax(x.data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    _log_kink(idx)
    out = np.take_along_axis(x.data, idx_k, axis=axis)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, idx_k, g, axis=axis)
        return (gx,)

    return make_result(out if keepdims else np.squeeze(out, axis), (x,), backward, "amax")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    orig = x.shape

    def backward(g):
        return (g.reshape(orig),)

    return make_result(x.data.reshape(shape), (x,), backward, "reshape")


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    orig = x.shape

    def backward(g):
        return (unbroadcast(g, orig),)

    return make_result(np.broadcast_to(x.data, shape).copy(), (x,), backward, "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        for d in range(len(ref)):
            if d != axis % len(ref) and t.shape[d] != ref[d]:
                raise ValueError(
                    f"concat: dimension {d} differs ({ref[d]} vs {t.shape[d]}) "
                    f"for shapes {ref} and {t.shape}"
                )
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=1)


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice ``[start, stop)`` along ``axis``."""
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[index] = g
        return (gx,)

    return make_result(x.data[index].copy(), (x,), backward, "narrow")

