"""Minimal float64 n-d tensor with reverse-mode automatic differentiation.

Every differentiable operation builds the graph by attaching a backward
closure and parent references to its output tensor.  `backward()` replays
the recorded ops once, in reverse topological order, and then drops the
graph, so each forward pass owns a fresh tape.  Values are validated to be
finite at every op boundary.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class NonFiniteError(ValueError):
    """Raised when a NaN or Inf crosses an op boundary."""


class _ThreadState(threading.local):
    # Tensors and tapes are confined to one thread; independent model
    # instances (e.g. cross-validation folds) may run concurrently, so the
    # recording flag and flop meter are per-thread.
    grad_enabled = True
    meter = None


_state = _ThreadState()


class no_grad:
    """Context manager that suspends graph recording (eval-mode forwards)."""

    def __enter__(self):
        self._prev = _state.grad_enabled
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class FlopMeter:
    """Accumulates multiply-accumulate counts from matmul/conv kernels."""

    def __init__(self):
        self.macs = 0

    def add(self, macs: int):
        self.macs += int(macs)

    @property
    def flops(self) -> int:
        return 2 * self.macs


class count_macs:
    """Context manager routing MAC counts of matmul/conv ops into a meter."""

    def __init__(self, meter: FlopMeter):
        self.meter = meter

    def __enter__(self):
        self._prev = _state.meter
        _state.meter = self.meter
        return self.meter

    def __exit__(self, *exc):
        _state.meter = self._prev
        return False


def _meter_add(macs: int):
    if _state.meter is not None:
        _state.meter.add(macs)


def _check_finite(arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """Row-major float64 array plus optional gradient and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        _check_finite(arr, "tensor data")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing ------------------------------------------------

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.data.shape))
        else:
            self.grad += g

    def backward(self):
        backward(self)

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def abs(self):
        return abs_(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def make_op(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Create an op output, recording the backward rule when grads are live.

    `backward_fn(g)` receives the upstream gradient and must accumulate
    into each parent via `parent._accumulate(...)`.
    """
    out = Tensor(data)
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def backward(loss: Tensor):
    """Populate `.grad` on every requires_grad tensor reachable from `loss`.

    Gradients from multiple uses of a tensor accumulate by summation.  The
    recorded graph is discarded afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    # Execution already ordered parents before children; an iterative DFS
    # recovers that order without recursion-depth limits.
    tape: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            tape.append(node)
            continue
        if id(node) in visited or node._backward is None:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._backward is not None and id(p) not in visited:
                stack.append((p, False))
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(tape):
        node._backward(node.grad)
        node._parents = ()
        node._backward = None


# -- unbroadcast helper -----------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ops ---------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    out_data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad or a._backward is not None:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad or b._backward is not None:
            b._accumulate(_unbroadcast(g, b.shape))

    return make_op(out_data, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    out_data = a.data - b.data

    def backward_fn(g):
        if a.requires_grad or a._backward is not None:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad or b._backward is not None:
            b._accumulate(_unbroadcast(-g, b.shape))

    return make_op(out_data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    out_data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad or a._backward is not None:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad or b._backward is not None:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return make_op(out_data, (a, b), backward_fn)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward_fn(g):
        x._accumulate(c * g)

    return make_op(x.data * c, (x,), backward_fn)


def abs_(x: Tensor) -> Tensor:
    # sign(0) = 0: the subgradient choice that keeps |L - b| + b defined at L == b.
    sign = np.sign(x.data)

    def backward_fn(g):
        x._accumulate(g * sign)

    return make_op(np.abs(x.data), (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward_fn(g):
        x._accumulate(g * mask)

    return make_op(np.where(mask, x.data, 0.0), (x,), backward_fn)


# -- reductions --------------------------------------------------------


def _axis_tuple(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    norm = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for ndim {ndim}")
        norm.append(ax % ndim)
    return tuple(sorted(set(norm)))


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, x.ndim)
    out_data = x.data.sum(axis=axes, keepdims=keepdims)

    def backward_fn(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        x._accumulate(np.broadcast_to(gg, x.shape).copy())

    return make_op(out_data, (x,), backward_fn)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, x.ndim)
    n = int(np.prod([x.shape[ax] for ax in axes])) if axes else 1
    if n == 0:
        raise ShapeError(f"mean over empty axes {axes} of shape {x.shape}")
    out_data = x.data.mean(axis=axes, keepdims=keepdims)

    def backward_fn(g):
        gg = g / n
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        x._accumulate(np.broadcast_to(gg, x.shape).copy())

    return make_op(out_data, (x,), backward_fn)


# -- shape ops ---------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elems) to {shape}")
    orig = x.shape

    def backward_fn(g):
        x._accumulate(g.reshape(orig))

    return make_op(x.data.reshape(shape), (x,), backward_fn)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for ndim {x.ndim}")
    inv = np.argsort(axes)

    def backward_fn(g):
        x._accumulate(np.ascontiguousarray(g.transpose(inv)))

    return make_op(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward_fn)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    axis = axis % tensors[0].ndim
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad or t._backward is not None:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return make_op(out_data, tuple(tensors), backward_fn)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    axis = axis % x.ndim
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] outside axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward_fn(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        x._accumulate(full)

    return make_op(np.ascontiguousarray(x.data[idx]), (x,), backward_fn)


# -- matmul ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports 2-d x 2-d, n-d x 2-d (shared weight), and
    stacked n-d x n-d with identical leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    if a.ndim != b.ndim and b.ndim != 2:
        raise ShapeError(f"unsupported matmul shapes {a.shape} x {b.shape}")
    if a.ndim == b.ndim and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading dims differ: {a.shape} x {b.shape}")
    out_data = a.data @ b.data
    _meter_add(out_data.size * a.shape[-1])

    def backward_fn(g):
        if a.requires_grad or a._backward is not None:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad or b._backward is not None:
            if b.ndim == 2 and a.ndim > 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                b._accumulate(a2.T @ g2)
            else:
                b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return make_op(out_data, (a, b), backward_fn)


# -- softmax family ----------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _axis_tuple(axis, x.ndim)[0]
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        x._accumulate(s * (g - dot))

    return make_op(s, (x,), backward_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _axis_tuple(axis, x.ndim)[0]
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    ls = shifted - lse

    def backward_fn(g):
        x._accumulate(g - np.exp(ls) * g.sum(axis=axis, keepdims=True))

    return make_op(ls, (x,), backward_fn)


# -- gradient checking -------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_index: tuple[int, ...]
    passed: bool
    tol: float


def grad_check(f, x: Tensor, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare autodiff gradients of `sum(f(x))` against central differences.

    Relative error per element is |a - n| / max(|a|, |n|, 1e-6); the caller
    is responsible for keeping x away from relu/abs kinks by more than h.
    """
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    loss = reduce_sum(out) if out.size != 1 else out
    backward(loss)
    auto = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.copy().ravel()
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(flat.reshape(x.shape))).data.sum())
            flat[i] = orig - h
            fm = float(f(Tensor(flat.reshape(x.shape))).data.sum())
            flat[i] = orig
            numeric.ravel()[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(auto), np.abs(numeric)), 1e-6)
    rel = np.abs(auto - numeric) / denom
    worst = int(np.argmax(rel))
    idx = np.unravel_index(worst, x.shape) if x.ndim else ()
    max_err = float(rel.ravel()[worst]) if rel.size else 0.0
    return GradCheckReport(max_err, tuple(int(i) for i in idx), max_err <= tol, tol)
