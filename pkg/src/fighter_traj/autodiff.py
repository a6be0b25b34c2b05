"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation on a :class:`Tensor` that involves a gradient-requiring input
records a node holding its parents and a local backward rule. Nodes carry a
monotonically increasing creation index, so the creation order of the nodes
reachable from a root is a valid topological order; :func:`backward` walks it
in reverse exactly once.

Inside :func:`no_grad` nothing is recorded, which is what inference uses.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_counter = itertools.count()
_state = threading.local()


def _recording() -> bool:
    return not getattr(_state, "no_grad", False)


@contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = getattr(_state, "no_grad", False)
    _state.no_grad = True
    try:
        yield
    finally:
        _state.no_grad = prev


class ShapeError(ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """A float64 array that can take part in a recorded computation.

    ``grad`` is allocated lazily (zeros of the value's shape) the first time a
    gradient reaches the tensor or it is read.
    """

    __slots__ = ("data", "_grad", "requires_grad", "parents", "op", "_backward", "seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr is data:
            arr = arr.copy()
        self.data = arr
        self._grad = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.op = "leaf"
        self._backward: Callable[[np.ndarray], None] | None = None
        self.seq = next(_counter)

    # construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str,
              backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out._grad = None
        out.seq = next(_counter)
        if _recording() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.parents = tuple(parents)
            out.op = op
            out._backward = backward
        else:
            out.requires_grad = False
            out.parents = ()
            out.op = op
            out._backward = None
        return out

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = value

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self._grad is None:
            self._grad = np.array(g, dtype=np.float64, copy=True).reshape(self.data.shape)
        else:
            self._grad += g

    def zero_grad(self) -> None:
        self._grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def backward(self) -> None:
        backward(self)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(as_tensor(other), self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, idx) -> "Tensor":
        return getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def tanh(self) -> "Tensor":
        return unary(self, "tanh")

    def sigmoid(self) -> "Tensor":
        return unary(self, "sigmoid")

    def relu(self) -> "Tensor":
        return unary(self, "relu")

    def exp(self) -> "Tensor":
        return unary(self, "exp")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return Tensor._make(a.data + b.data, (a, b), "add", _bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(-g, b.shape))

    return Tensor._make(a.data - b.data, (a, b), "sub", _bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return Tensor._make(a.data * b.data, (a, b), "mul", _bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_UNARY = {
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "sigmoid": (_sigmoid, lambda x, y: y * (1.0 - y)),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64)),
    "exp": (np.exp, lambda x, y: y),
    "identity": (lambda x: x.copy(), lambda x, y: np.ones_like(x)),
}


def unary(x: Tensor, kind: str) -> Tensor:
    """Apply ``kind`` in {tanh, sigmoid, relu, exp, identity} elementwise."""
    try:
        fn, dfn = _UNARY[kind]
    except KeyError:
        raise ValueError(f"unknown unary op {kind!r}; expected one of {sorted(_UNARY)}") from None
    y = fn(x.data)

    def _bw(g):
        x._accum(g * dfn(x.data, y))

    return Tensor._make(y, (x,), kind, _bw)


# ---------------------------------------------------------------------------
# linear algebra and shape

def matmul(a, b) -> Tensor:
    """Matrix product. ``a`` may carry leading batch axes when ``b`` is 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def _bw(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            if a.ndim == 1:
                b._accum(np.outer(a.data, g))
            else:
                k = a.shape[-1]
                b._accum(a.data.reshape(-1, k).T @ g.reshape(-1, b.shape[1]))

    return Tensor._make(out, (a, b), "matmul", _bw)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")

    def _bw(g):
        x._accum(g.T)

    return Tensor._make(x.data.T, (x,), "transpose", _bw)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def _bw(g):
        x._accum(g.reshape(src))

    return Tensor._make(x.data.reshape(shape), (x,), "reshape", _bw)


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing; the gradient is written back into the slice."""
    out = x.data[idx]

    def _bw(g):
        full = np.zeros_like(x.data)
        full[idx] += g
        x._accum(full)

    return Tensor._make(np.array(out, copy=True), (x,), "getitem", _bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in ts)
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from exc
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def _bw(g):
        for t, piece in zip(ts, np.split(g, cuts, axis=axis)):
            t._accum(piece)

    return Tensor._make(out, ts, "concat", _bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def _bw(g):
        for k, t in enumerate(ts):
            t._accum(np.take(g, k, axis=axis))

    return Tensor._make(out, ts, "stack", _bw)


def tsum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)

    def _bw(g):
        if axis is None:
            x._accum(np.broadcast_to(g, x.shape))
        else:
            x._accum(np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return Tensor._make(np.asarray(out, dtype=np.float64), (x,), "sum", _bw)


def softmax(e: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    z = e.data - e.data.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    y = ez / ez.sum(axis=axis, keepdims=True)

    def _bw(g):
        e._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return Tensor._make(y, (e,), "softmax", _bw)


# ---------------------------------------------------------------------------
# reverse pass

@dataclass
class Tape:
    """Nodes reachable from a root, in creation order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.parents)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def backward(self, root: Tensor) -> None:
        # intermediate grads are rebuilt per call; leaves accumulate
        for node in self.nodes:
            if node._backward is not None:
                node._grad = None
        root._grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node._backward is not None and node._grad is not None:
                node._backward(node._grad)


def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every tensor reachable from the scalar ``root``.

    Leaf gradients accumulate across calls; zero them between optimisation
    steps (calling twice without zeroing doubles them).
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward called on a tensor that does not require grad")
    Tape.from_root(root).backward(root)


# ---------------------------------------------------------------------------
# finite-difference check

@dataclass
class GradCheckReport:
    max_rel_err: float
    rel_err: list[np.ndarray]
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def grad_check(f: Callable, x: Tensor | Iterable[Tensor], h: float = 1e-5,
               tol: float = 1e-4, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare taped gradients of ``f`` against central differences.

    ``x`` is a tensor or a list of tensors; ``f(x)`` must return a scalar
    tensor. With ``max_coords`` only that many randomly chosen coordinates
    per tensor are probed.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.zero_grad()
    out = f(x)
    backward(out)
    analytic = [t.grad.copy() for t in xs]
    rng = rng or np.random.default_rng(0)

    rel_errs, numerics = [], []
    for t, a in zip(xs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        num = np.full(flat.size, np.nan)
        with no_grad():
            for c in coords:
                orig = flat[c]
                flat[c] = orig + h
                fp = f(x).item()
                flat[c] = orig - h
                fm = f(x).item()
                flat[c] = orig
                num[c] = (fp - fm) / (2 * h)
        a_flat = a.reshape(-1)
        err = np.full(flat.size, 0.0)
        den = np.maximum(np.maximum(np.abs(a_flat[coords]), np.abs(num[coords])), 1e-8)
        err[coords] = np.abs(a_flat[coords] - num[coords]) / den
        rel_errs.append(err.reshape(t.shape))
        numerics.append(num.reshape(t.shape))
    worst = max((float(e.max()) for e in rel_errs if e.size), default=0.0)
    return GradCheckReport(worst, rel_errs, analytic, numerics, tol)
