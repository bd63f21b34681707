"""Dense linear algebra helpers, a small reverse-mode autodiff tape and Adam.

Everything is float64.  Arrays are batch-first: a batch of row vectors has
shape ``(B, k)`` and layer weights are stored as ``(in, out)`` so an affine
map reads ``x @ W + b``.

Ops accept either :class:`Node` objects or plain ndarrays.  When no input is
a Node the op just returns an ndarray, which gives a free no-grad path for
evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "Tape",
    "Node",
    "matmul",
    "add",
    "sub",
    "mul",
    "affine",
    "sigmoid",
    "tanh",
    "relu",
    "identity",
    "activate",
    "ACTIVATIONS",
    "concat",
    "normalize_rows",
    "reshape",
    "take_cols",
    "batched_matvec",
    "square",
    "sum_all",
    "mean_all",
    "value_of",
    "grad",
    "Adam",
]


class ContractError(ValueError):
    """Raised when an operation's preconditions are violated."""


class Node:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("value", "parents", "vjps", "tape", "index", "name")

    def __init__(self, value, parents, vjps, tape, index, name=None):
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.tape = tape
        self.index = index
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.value.shape}, index={self.index})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    """Ordered record of primitive ops.

    Nodes are appended in evaluation order, so the list is already a
    topological order and the backward pass is a single reverse sweep.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name: str | None = None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        return self._push(value, (), (), name)

    def _push(self, value, parents, vjps, name=None) -> Node:
        node = Node(value, parents, vjps, self, len(self.nodes), name)
        self.nodes.append(node)
        return node


def value_of(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Node):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractError("operands belong to different tapes")
    return tape


def _record(value, inputs, vjps):
    """Record ``value`` with a vjp for every input that is a Node."""
    tape = _tape_of(*inputs)
    if tape is None:
        return value
    parents, fns = [], []
    for x, fn in zip(inputs, vjps):
        if isinstance(x, Node):
            parents.append(x)
            fns.append(fn)
    return tape._push(value, tuple(parents), tuple(fns))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# primitive ops
# --------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product ``a @ b`` for 2-D operands (a may carry a batch of rows)."""
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ContractError(f"matmul expects 2-D operands, got {av.shape} and {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise ContractError(f"matmul dimension mismatch: {av.shape} @ {bv.shape}")
    out = av @ bv
    return _record(out, (a, b), (lambda g: g @ bv.T, lambda g: av.T @ g))


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    sa, sb = np.shape(av), np.shape(bv)
    return _record(out, (a, b), (lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(g, sb)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    sa, sb = np.shape(av), np.shape(bv)
    return _record(out, (a, b), (lambda g: _unbroadcast(g, sa), lambda g: -_unbroadcast(g, sb)))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    sa, sb = np.shape(av), np.shape(bv)
    return _record(
        out,
        (a, b),
        (lambda g: _unbroadcast(g * bv, sa), lambda g: _unbroadcast(g * av, sb)),
    )


def affine(x, W, b):
    """``x @ W + b`` as one node.  ``x`` is (B, in), ``W`` (in, out), ``b`` (out,)."""
    xv, Wv, bv = value_of(x), value_of(W), value_of(b)
    if xv.shape[-1] != Wv.shape[0] or Wv.shape[1] != bv.shape[-1]:
        raise ContractError(f"affine shape mismatch: x{xv.shape} W{Wv.shape} b{bv.shape}")
    out = xv @ Wv + bv
    return _record(
        out,
        (x, W, b),
        (lambda g: g @ Wv.T, lambda g: xv.T @ g, lambda g: g.sum(axis=0)),
    )


def sigmoid(x):
    xv = value_of(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * xv))
    return _record(out, (x,), (lambda g: g * out * (1.0 - out),))


def tanh(x):
    out = np.tanh(value_of(x))
    return _record(out, (x,), (lambda g: g * (1.0 - out * out),))


def relu(x):
    xv = value_of(x)
    mask = xv > 0
    return _record(np.where(mask, xv, 0.0), (x,), (lambda g: g * mask,))


def identity(x):
    return x


ACTIVATIONS: dict[str, Callable] = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "identity": identity,
}


def activate(name: str, x):
    try:
        fn = ACTIVATIONS[name]
    except KeyError:
        raise ContractError(f"unknown activation {name!r}") from None
    return fn(x)


def concat(xs: Sequence, axis: int = -1):
    vals = [value_of(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def make(i):
        lo, hi = bounds[i], bounds[i + 1]
        return lambda g: np.take(g, np.arange(lo, hi), axis=axis)

    return _record(out, tuple(xs), tuple(make(i) for i in range(len(xs))))


def normalize_rows(x, eps: float = 1e-8):
    """Scale each row to unit L2 norm; rows with norm below ``eps`` are divided by ``eps``."""
    xv = value_of(x)
    norm = np.sqrt(np.sum(xv * xv, axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = xv / denom
    active = norm > eps

    def vjp(g):
        # below the guard the map is linear (x / eps)
        radial = np.sum(g * out, axis=-1, keepdims=True)
        return np.where(active, (g - out * radial) / denom, g / denom)

    return _record(out, (x,), (vjp,))


def reshape(x, shape):
    xv = value_of(x)
    orig = xv.shape
    return _record(xv.reshape(shape), (x,), (lambda g: g.reshape(orig),))


def take_cols(x, start: int, stop: int):
    """Columns ``start:stop`` of a (B, k) array."""
    xv = value_of(x)
    out = xv[..., start:stop]

    def vjp(g):
        full = np.zeros_like(xv)
        full[..., start:stop] = g
        return full

    return _record(out, (x,), (vjp,))


def batched_matvec(A, v):
    """``out[b] = A[b] @ v[b]`` for A of shape (B, m, n) and v of shape (B, n)."""
    Av, vv = value_of(A), value_of(v)
    if Av.shape[-1] != vv.shape[-1]:
        raise ContractError(f"batched_matvec mismatch: {Av.shape} x {vv.shape}")
    out = np.einsum("bij,bj->bi", Av, vv)
    return _record(
        out,
        (A, v),
        (
            lambda g: g[:, :, None] * vv[:, None, :],
            lambda g: np.einsum("bij,bi->bj", Av, g),
        ),
    )


def square(x):
    xv = value_of(x)
    return _record(xv * xv, (x,), (lambda g: 2.0 * xv * g,))


def sum_all(x):
    xv = value_of(x)
    shape = xv.shape
    return _record(np.asarray(xv.sum()), (x,), (lambda g: np.broadcast_to(g, shape).copy(),))


def mean_all(x):
    xv = value_of(x)
    shape, size = xv.shape, xv.size
    return _record(
        np.asarray(xv.mean()), (x,), (lambda g: np.broadcast_to(g / size, shape).copy(),)
    )


# --------------------------------------------------------------------------
# backward pass
# --------------------------------------------------------------------------


def grad(loss: Node, params: Sequence[Node]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each node in ``params``.

    Parameters the loss does not depend on get an all-zero gradient.
    """
    if not isinstance(loss, Node):
        # a constant loss carries no dependence on anything
        return [np.zeros_like(p.value) for p in params]
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    tape = loss.tape
    adj: list[np.ndarray | None] = [None] * (loss.index + 1)
    adj[loss.index] = np.ones_like(loss.value)
    for i in range(loss.index, -1, -1):
        g = adj[i]
        if g is None:
            continue
        node = tape.nodes[i]
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            j = parent.index
            adj[j] = contrib if adj[j] is None else adj[j] + contrib
    out = []
    for p in params:
        if p.tape is not tape:
            raise ContractError("parameter not on the loss tape")
        g = adj[p.index] if p.index <= loss.index else None
        out.append(np.zeros_like(p.value) if g is None else np.array(g, dtype=np.float64))
    return out


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


@dataclass
class Adam:
    """Adaptive moment estimation over a dict of named parameter blocks."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        for name, g in grads.items():
            if params[name].shape != g.shape:
                raise ContractError(
                    f"gradient shape {g.shape} does not match parameter {name!r} {params[name].shape}"
                )
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter block {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
