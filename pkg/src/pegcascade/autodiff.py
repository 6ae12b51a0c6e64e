"""Dense reverse-mode automatic differentiation on top of numpy.

Operations are recorded on the innermost active :class:`Tape` while it is
entered as a context manager.  Outside a tape nothing is recorded, which is
how inference runs.  The tape is rebuilt on every forward pass.

Broadcasting is deliberately narrow: elementwise binary ops accept either two
tensors of identical shape or one operand with a single element.  Anything
else must go through :func:`expand`.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class _Node:
    out: "Tensor"
    inputs: tuple
    backward: Callable


class Tape:
    """Append-only record of operations; backward sweeps it in reverse."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: "Tensor", inputs: tuple, backward: Callable) -> None:
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: "Tensor") -> None:
        backward(loss, self)


class Tensor:
    """A numpy array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_leaf")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        self.data = np.require(arr, requirements="C")
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.require(data, requirements="C")
    out.name = None
    out._leaf = False
    out.grad = None
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    else:
        out.requires_grad = False
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every tensor on ``tape`` reachable from ``loss``.

    Leaf gradients accumulate into whatever is already in ``.grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss._leaf:
        if loss.requires_grad:
            loss.grad = loss.grad + seed
        return
    pending = {id(loss): seed}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._leaf:
                inp.grad = inp.grad + gi
            else:
                key = id(inp)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi


# ---------------------------------------------------------------- helpers


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if (a.size == 1 and a.ndim <= b.ndim) or (b.size == 1 and b.ndim <= a.ndim):
        return
    raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}; use expand() to broadcast")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.sum(g).reshape(t.shape)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a), _unbroadcast(g, b)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a), _unbroadcast(-g, b)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a), _unbroadcast(-g * out / b.data, b)

    return _make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid_np(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.logaddexp(0.0, x.data), (x,), lambda g: (g * _sigmoid_np(x.data),))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


# -------------------------------------------------------------- reductions


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise ValueError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    ez = np.exp(z)
    y = ez / np.sum(ez, axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


# ------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0] or a.ndim > 2 or b.ndim > 2:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        if a.ndim == 1 and b.ndim == 1:
            return g * b.data, g * a.data
        if a.requires_grad:
            if b.ndim == 1:
                ga = np.multiply.outer(g, b.data)
            else:
                ga = g @ b.data.T
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.multiply.outer(a.data, g)
            else:
                gb = a.data.T @ g
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.T, (x,), lambda g: (g.T,))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def expand(x, shape) -> Tensor:
    """Explicit numpy-style broadcast; gradient is summed back."""
    x = as_tensor(x)
    shape = tuple(shape)
    out = np.broadcast_to(x.data, shape).copy()
    lead = len(shape) - x.ndim

    def bw(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        axes = tuple(i for i, n in enumerate(x.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(out, (x,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat: empty input")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ValueError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}")
    offsets = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        grads = []
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _make(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), bw)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)

    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), bw)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, np.integer)) or p is Ellipsis for p in parts)


def take(x, idx, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate gradient."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(x.data)
        if axis == 0:
            np.add.at(full, idx, g)
        else:
            np.add.at(np.moveaxis(full, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(np.take(x.data, idx, axis=axis), (x,), bw)


def segment_sum(x, segments, num_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``num_segments`` buckets given per-row ids."""
    x = as_tensor(x)
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape[0] != x.shape[0]:
        raise ValueError(f"segment_sum: {seg.shape[0]} ids for {x.shape[0]} rows")
    out = np.zeros((num_segments,) + x.shape[1:], dtype=x.data.dtype)
    np.add.at(out, seg, x.data)
    return _make(out, (x,), lambda g: (g[seg],))


def segment_softmax(x, segments, num_segments: int) -> Tensor:
    """Softmax of a 1-d score vector within each segment.

    Built from primitives; the per-segment max is a constant shift.
    """
    x = as_tensor(x)
    seg = np.asarray(segments, dtype=np.int64)
    smax = np.full(num_segments, -np.inf)
    np.maximum.at(smax, seg, x.data)
    ex = exp(x - constant(smax[seg]))
    den = segment_sum(ex, seg, num_segments)
    return ex / take(den, seg)


# -------------------------------------------------------------- composites


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with the bias broadcast over rows."""
    y = matmul(x, weight)
    if bias is None:
        return y
    if y.ndim == 1:
        return y + bias
    return y + expand(bias, y.shape)


def outer_mask(col: np.ndarray, x: Tensor) -> Tensor:
    """Rows of ``x`` (broadcast if 1-d) scaled by a constant per-row factor."""
    n = col.shape[0]
    if x.ndim == 1:
        x = expand(reshape(x, (1, x.shape[0])), (n, x.shape[0]))
    return x * constant(np.repeat(col[:, None], x.shape[1], axis=1))


# ---------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    n_checked: int
    worst: tuple | None = None  # (leaf index, coordinate)
    worst_values: tuple | None = None  # (analytic, numeric)
    details: list = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = ""
        if self.worst is not None:
            where = f" worst leaf={self.worst[0]} coord={self.worst[1]}"
        return f"{status} max_rel_err={self.max_rel_error:.3e} (tol {self.tol:g}, n={self.n_checked}){where}"


def finite_difference_check(
    f: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    h: float = 1e-6,
    tol: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` against central differences.

    The relative error at a coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps coordinates whose true gradient is ~0 from dividing
    round-off by round-off.  ``max_coords`` subsamples coordinates per leaf.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    for leaf in leaves:
        leaf.zero_grad()
    with Tape() as tape:
        out = f()
    backward(out, tape)
    analytic = [leaf.grad.copy() for leaf in leaves]

    worst, worst_vals, max_err, n = None, None, 0.0, 0
    for li, leaf in enumerate(leaves):
        flat = leaf.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a_flat = analytic[li].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = f().item()
            flat[c] = orig - h
            fm = f().item()
            flat[c] = orig
            num = (fp - fm) / (2.0 * h)
            a = a_flat[c]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            n += 1
            if worst is None or err > max_err:
                max_err = err
                worst = (li, tuple(int(i) for i in np.unravel_index(int(c), leaf.shape)))
                worst_vals = (float(a), float(num))
    return GradCheckReport(max_err, max_err <= tol, tol, n, worst, worst_vals)
