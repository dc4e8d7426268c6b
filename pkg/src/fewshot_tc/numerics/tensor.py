"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable op records a node holding its inputs and a backward
rule. Backward rules are themselves written with Tensor ops, so running
them with recording enabled (``create_graph=True``) yields gradients that
live on the graph and can be differentiated again. MAML relies on this.

Nodes carry a global, monotonically increasing sequence number; sorting by
it gives a valid reverse topological order without an explicit DFS order.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractViolation, NumericError

_SEQ = itertools.count()
_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def set_grad_enabled(mode: bool):
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, bool(mode)
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Node:
    __slots__ = ("op", "parents", "backward", "seq")

    def __init__(self, op: str, parents: tuple, backward: Callable):
        self.op = op
        self.parents = parents
        self.backward = backward
        self.seq = next(_SEQ)


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self._node: Node | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self._node.op}" if self._node else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    __hash__ = object.__hash__

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar --------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        grads = backward(self)
        for leaf, g in grads.items():
            leaf.grad = g if leaf.grad is None else Tensor(leaf.grad.data + g.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, data: np.ndarray) -> None:
    # a sum is non-finite whenever any entry is; only then pay for the exact count
    if np.isfinite(np.sum(data)):
        return
    if not np.isfinite(data).all():
        bad = int(np.size(data) - np.isfinite(data).sum())
        raise NumericError(op, f"{bad} of {np.size(data)} entries")


def _record(op: str, data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    _check_finite(op, data)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(op, parents, backward)
    return out


def _broadcast_shape(op: str, *shapes) -> tuple:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ContractViolation(f"{op}: shapes {shapes} do not broadcast") from None


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def sum_to(x: Tensor, shape: tuple) -> Tensor:
    """Sum ``x`` down to ``shape`` (the adjoint of broadcasting)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    in_shape = x.shape
    return _record("sum_to", data.reshape(shape), (x,),
                   lambda g: (broadcast_to(g, in_shape),))


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    in_shape = x.shape
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ContractViolation(f"broadcast_to: {in_shape} -> {shape}") from None
    return _record("broadcast_to", data, (x,), lambda g: (sum_to(g, in_shape),))


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    in_shape = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ContractViolation(f"reshape: {in_shape} -> {shape}") from None
    return _record("reshape", data, (x,), lambda g: (reshape(g, in_shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", x.data.transpose(axes), (x,),
                   lambda g: (transpose(g, inv),))


def swapaxes(x: Tensor, a: int = -1, b: int = -2) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def gather(x: Tensor, flat_index: np.ndarray) -> Tensor:
    """out[...] = x.ravel()[flat_index[...]]; the building block of indexing."""
    x = as_tensor(x)
    flat_index = np.asarray(flat_index, dtype=np.intp)
    in_shape = x.shape
    data = x.data.reshape(-1)[flat_index]
    return _record("gather", data, (x,),
                   lambda g: (scatter_add(g, flat_index, in_shape),))


def scatter_add(g: Tensor, flat_index: np.ndarray, shape: tuple) -> Tensor:
    """Adjoint of :func:`gather`: accumulate ``g`` into a zero array of ``shape``."""
    size = int(np.prod(shape, dtype=np.int64))
    data = np.bincount(flat_index.reshape(-1), weights=g.data.reshape(-1),
                       minlength=size).reshape(shape)
    return _record("scatter_add", data, (g,), lambda gg: (gather(gg, flat_index),))


def getitem(x: Tensor, key) -> Tensor:
    x = as_tensor(x)
    try:
        flat = np.arange(x.size, dtype=np.intp).reshape(x.shape)[key]
    except (IndexError, ValueError) as exc:
        raise ContractViolation(f"index {key!r} on shape {x.shape}: {exc}") from None
    return gather(x, np.asarray(flat))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ContractViolation(f"concat: {exc}") from None
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(sl)))
        return tuple(out)

    return _record("concat", data, tuple(tensors), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = as_tensor(t)
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else len(shape) + axis + 1, 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)


def pad(x: Tensor, pad_width: Sequence[tuple]) -> Tensor:
    """Zero padding; ``pad_width`` as in :func:`numpy.pad`."""
    x = as_tensor(x)
    pad_width = tuple((int(a), int(b)) for a, b in pad_width)
    data = np.pad(x.data, pad_width)
    key = tuple(slice(a, a + n) for (a, _), n in zip(pad_width, x.shape))
    return _record("pad", data, (x,), lambda g: (getitem(g, key),))


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (sum_to(g, sa), sum_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (sum_to(g, sa), sum_to(neg(g), sb)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    def bw(g):
        ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", a.data * b.data, (a, b), bw)


def scale(a, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    a = as_tensor(a)
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (scale(g, c),))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a.shape, b.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def bw(g):
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = (sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
              if b.requires_grad else None)
        return ga, gb

    return _record("div", data, (a, b), bw)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data ** p
    if p == 1.0:
        return _record("pow", data, (a,), lambda g: (g,))
    return _record("pow", data, (a,),
                   lambda g: (mul(g, scale(power(a, p - 1.0), p)),))


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    out = None

    def bw(g):
        return (mul(g, out),)

    out = _record("exp", data, (a,), bw)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _record("log", data, (a,), lambda g: (div(g, a),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _record("relu", a.data * mask, (a,), lambda g: (mul(g, mask),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = None

    def bw(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _record("sigmoid", data, (a,), bw)
    return out


# ---------------------------------------------------------------------------
# reductions and contractions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    in_shape = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(in_shape))
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        return (broadcast_to(reshape(g, kept), in_shape),)

    return _record("sum", data, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum_(a, axis, keepdims), 1.0 / max(n, 1))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul: {a.shape} @ {b.shape}")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])

    def bw(g):
        ga = sum_to(matmul(g, swapaxes(b)), a.shape) if a.requires_grad else None
        gb = sum_to(matmul(swapaxes(a), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def _topo(roots: Iterable[Tensor]) -> list[Tensor]:
    seen: set[int] = set()
    order: list[Tensor] = []
    stack_ = [r for r in roots if r._node is not None]
    while stack_:
        t = stack_.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        order.append(t)
        for p in t._node.parents:
            if p._node is not None and p.requires_grad and id(p) not in seen:
                stack_.append(p)
    order.sort(key=lambda t: t._node.seq, reverse=True)
    return order


def _propagate(output: Tensor, seed: Tensor, create_graph: bool) -> dict[int, tuple]:
    """Return {id(tensor): (tensor, grad)} for every grad-requiring tensor reached."""
    grads: dict[int, tuple] = {id(output): (output, seed)}
    with set_grad_enabled(create_graph):
        for t in _topo([output]):
            entry = grads.get(id(t))
            if entry is None:
                continue
            g = entry[1]
            parent_grads = t._node.backward(g)
            for p, pg in zip(t._node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = (p, pg if prev is None else add(prev[1], pg))
    return grads


def _scalar_seed(output: Tensor, op: str) -> Tensor:
    if output.size != 1:
        raise ContractViolation(f"{op} needs a scalar loss, got shape {output.shape}")
    return Tensor(np.ones_like(output.data))


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False,
         allow_unused: bool = True) -> list[Tensor]:
    """d(output)/d(inputs) for a scalar ``output``.

    With ``create_graph`` the returned gradients are themselves recorded,
    so a loss built from them can be differentiated again.
    """
    seed = _scalar_seed(output, "grad")
    if not output.requires_grad:
        raise ContractViolation("grad: output was not built with gradient recording")
    grads = _propagate(output, seed, create_graph)
    out = []
    for x in inputs:
        entry = grads.get(id(x))
        if entry is None:
            if not allow_unused:
                raise ContractViolation("grad: an input does not reach the output")
            out.append(Tensor(np.zeros_like(x.data)))
        else:
            out.append(entry[1])
    return out


def backward(loss: Tensor) -> dict[Tensor, Tensor]:
    """Gradients of a scalar loss for every grad-enabled leaf on its graph."""
    seed = _scalar_seed(loss, "backward")
    if not loss.requires_grad:
        raise ContractViolation("backward: loss does not depend on any grad-enabled tensor")
    grads = _propagate(loss, seed, create_graph=False)
    return {t: g for t, g in grads.values() if t.is_leaf and t.requires_grad}


def higher_order_grad(outer_loss_builder: Callable[[Sequence[Tensor]], Tensor],
                      params: Sequence[Tensor]) -> list[Tensor]:
    """Exact gradient of a loss that internally differentiates through ``params``.

    ``outer_loss_builder(params)`` must build its inner gradients with
    ``grad(..., create_graph=True)``; the term through those inner
    gradients is then included in the result.
    """
    if not _GRAD_ENABLED:
        raise ContractViolation("higher_order_grad called with gradient recording disabled")
    loss = outer_loss_builder(params)
    if not loss.requires_grad:
        raise ContractViolation("higher_order_grad: outer loss is not on a recording tape")
    return grad(loss, params)
