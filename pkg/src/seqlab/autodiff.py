"""Tape-based reverse-mode differentiation over dense float64 numpy arrays.

A :class:`Tape` records every operation applied to its :class:`Node` objects.
Parameters enter the tape as named leaves via :meth:`Tape.param`; calling
:func:`backward` on a scalar node returns one gradient per named leaf.

Only the handful of operations needed by the sequence models are provided.
Everything works on batched arrays; binary elementwise ops broadcast the way
numpy does and reduce gradients back to the operand shapes.
"""
from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """An operation was applied outside its mathematical domain."""


class ContractError(RuntimeError):
    """A caller broke a documented precondition."""


class Node:
    __slots__ = ("tape", "value", "parents", "backward_fn", "requires_grad", "op", "name")

    def __init__(self, tape, value, parents=(), backward_fn=None, requires_grad=False, op="leaf", name=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.value.shape})"

    def __add__(self, other):
        return self.tape.add(self, other)

    def __radd__(self, other):
        return self.tape.add(other, self)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    def __rmul__(self, other):
        return self.tape.mul(other, self)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __neg__(self):
        return self.tape.neg(self)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


class Tape:
    """Append-only record of operations.

    ``Tape(grad=False)`` evaluates values only, for decoding.

    Nodes are stored in creation order, which is already a topological order
    because every op's inputs exist before its output.
    """

    OPS = (
        "matmul", "add", "sub", "mul", "concat", "tanh", "sigmoid", "softmax",
        "log_softmax", "log", "exp", "leaky_relu", "embedding", "dropout", "sum",
        "neg", "logsumexp", "pick", "slice", "stack", "reshape", "transpose",
    )

    def __init__(self, grad: bool = True):
        self.grad = grad
        self.nodes: List[Node] = []
        self.params: Dict[str, Node] = {}
        # per-tape cache for derived nodes (e.g. transposed weights)
        self.memo: Dict[object, Node] = {}

    # leaves -----------------------------------------------------------------

    def _record(self, value, parents, backward_fn, op) -> Node:
        needs = self.grad and any(p.requires_grad for p in parents)
        node = Node(self, value, parents if needs else (), backward_fn if needs else None, needs, op)
        self.nodes.append(node)
        return node

    def param(self, name: str, array: np.ndarray) -> Node:
        """Leaf for a trainable array; one node per name per tape."""
        node = self.params.get(name)
        if node is None:
            node = Node(self, array, requires_grad=self.grad, op="param", name=name)
            self.nodes.append(node)
            self.params[name] = node
        return node

    def constant(self, array) -> Node:
        node = Node(self, np.asarray(array, dtype=DTYPE), op="const")
        self.nodes.append(node)
        return node

    def detach(self, x: Node) -> Node:
        """Same value as ``x`` with gradient flow blocked."""
        node = Node(self, x.value, op="detach")
        self.nodes.append(node)
        return node

    def _lift(self, x) -> Node:
        return x if isinstance(x, Node) else self.constant(x)

    # generic dispatch -------------------------------------------------------

    def apply(self, op: str, *inputs, **kwargs) -> Node:
        if op not in self.OPS:
            raise ContractError(f"unknown op {op!r}")
        return getattr(self, op)(*inputs, **kwargs)

    # binary ops -------------------------------------------------------------

    def matmul(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        if av.ndim < 1 or bv.ndim != 2 or av.shape[-1] != bv.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
        out = av @ bv

        def back(g):
            ga = g @ bv.T
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return self._record(out, (a, b), back, "matmul")

    def add(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        _broadcast_shape("add", a.value, b.value)
        sa, sb = a.value.shape, b.value.shape
        return self._record(a.value + b.value, (a, b),
                            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")

    def sub(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        _broadcast_shape("sub", a.value, b.value)
        sa, sb = a.value.shape, b.value.shape
        return self._record(a.value - b.value, (a, b),
                            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")

    def mul(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        _broadcast_shape("mul", a.value, b.value)
        av, bv = a.value, b.value
        return self._record(av * bv, (a, b),
                            lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")

    # unary ops --------------------------------------------------------------

    def neg(self, x) -> Node:
        x = self._lift(x)
        return self._record(-x.value, (x,), lambda g: (-g,), "neg")

    def tanh(self, x: Node) -> Node:
        y = np.tanh(x.value)
        return self._record(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")

    def sigmoid(self, x: Node) -> Node:
        v = x.value
        # stable for large |v|
        e = np.exp(-np.abs(v))
        y = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return self._record(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")

    def exp(self, x: Node) -> Node:
        y = np.exp(x.value)
        return self._record(y, (x,), lambda g: (g * y,), "exp")

    def log(self, x: Node) -> Node:
        v = x.value
        if np.any(v <= 0):
            raise DomainError(f"log: non-positive input (min {v.min()!r})")
        return self._record(np.log(v), (x,), lambda g: (g / v,), "log")

    def leaky_relu(self, x: Node, slope: float = 0.01) -> Node:
        v = x.value
        scale = np.where(v > 0, 1.0, slope)
        return self._record(v * scale, (x,), lambda g: (g * scale,), "leaky_relu")

    def softmax(self, x: Node, axis: int = -1) -> Node:
        v = x.value
        e = np.exp(v - v.max(axis=axis, keepdims=True))
        y = e / e.sum(axis=axis, keepdims=True)

        def back(g):
            return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

        return self._record(y, (x,), back, "softmax")

    def log_softmax(self, x: Node, axis: int = -1) -> Node:
        v = x.value
        shifted = v - v.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        y = shifted - lse

        def back(g):
            return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

        return self._record(y, (x,), back, "log_softmax")

    def logsumexp(self, x: Node, axis: int = -1) -> Node:
        v = x.value
        m = v.max(axis=axis, keepdims=True)
        s = np.log(np.exp(v - m).sum(axis=axis, keepdims=True)) + m
        y = np.squeeze(s, axis=axis)
        w = np.exp(v - s)

        def back(g):
            return (np.expand_dims(g, axis) * w,)

        return self._record(y, (x,), back, "logsumexp")

    def dropout(self, x: Node, mask: Optional[np.ndarray]) -> Node:
        """Multiply by a pre-scaled keep mask; ``None`` means inference."""
        if mask is None:
            return x
        if mask.shape != x.value.shape:
            raise ShapeError(f"dropout: mask shape {mask.shape} != input shape {x.value.shape}")
        return self._record(x.value * mask, (x,), lambda g: (g * mask,), "dropout")

    def sum(self, x: Node, axis: Optional[int] = None) -> Node:
        v = x.value
        shape = v.shape
        if axis is None:
            return self._record(np.asarray(v.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
        y = v.sum(axis=axis)
        return self._record(y, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),), "sum")

    # structural ops ---------------------------------------------------------

    def embedding(self, table: Node, ids) -> Node:
        ids = np.asarray(ids, dtype=np.int64)
        n = table.value.shape[0]
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            raise ShapeError(f"embedding: index out of range [0, {n}) in ids of shape {ids.shape}")
        shape = table.value.shape

        def back(g):
            out = np.zeros(shape, dtype=DTYPE)
            np.add.at(out, ids.reshape(-1), g.reshape((-1,) + shape[1:]))
            return (out,)

        return self._record(table.value[ids], (table,), back, "embedding")

    def pick(self, x: Node, ids) -> Node:
        """``out[..., ] = x[..., ids[...]]`` along the last axis."""
        ids = np.asarray(ids, dtype=np.int64)
        v = x.value
        if ids.shape != v.shape[:-1]:
            raise ShapeError(f"pick: index shape {ids.shape} does not match {v.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= v.shape[-1]):
            raise ShapeError(f"pick: index out of range [0, {v.shape[-1]})")
        y = np.take_along_axis(v, ids[..., None], axis=-1)[..., 0]

        def back(g):
            out = np.zeros_like(v)
            np.put_along_axis(out, ids[..., None], g[..., None], axis=-1)
            return (out,)

        return self._record(y, (x,), back, "pick")

    def concat(self, xs: Sequence[Node], axis: int = -1) -> Node:
        xs = [self._lift(x) for x in xs]
        try:
            y = np.concatenate([x.value for x in xs], axis=axis)
        except ValueError:
            raise ShapeError(f"concat: incompatible shapes {[x.value.shape for x in xs]}") from None
        sizes = np.cumsum([x.value.shape[axis] for x in xs])[:-1]

        def back(g):
            return tuple(np.split(g, sizes, axis=axis))

        return self._record(y, tuple(xs), back, "concat")

    def slice(self, x: Node, start: int, stop: int, axis: int = -1) -> Node:
        v = x.value
        index = [slice(None)] * v.ndim
        index[axis] = slice(start, stop)
        index = tuple(index)

        def back(g):
            out = np.zeros_like(v)
            out[index] = g
            return (out,)

        return self._record(v[index], (x,), back, "slice")

    def stack(self, xs: Sequence[Node], axis: int = 0) -> Node:
        xs = [self._lift(x) for x in xs]
        try:
            y = np.stack([x.value for x in xs], axis=axis)
        except ValueError:
            raise ShapeError(f"stack: incompatible shapes {[x.value.shape for x in xs]}") from None

        def back(g):
            return tuple(np.moveaxis(g, axis, 0))

        return self._record(y, tuple(xs), back, "stack")

    def transpose(self, x: Node) -> Node:
        if x.value.ndim != 2:
            raise ShapeError(f"transpose: expected a matrix, got shape {x.value.shape}")
        return self._record(x.value.T, (x,), lambda g: (g.T,), "transpose")

    def reshape(self, x: Node, shape: Tuple[int, ...]) -> Node:
        old = x.value.shape
        try:
            y = x.value.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
        return self._record(y, (x,), lambda g: (g.reshape(old),), "reshape")


def backward(tape: Tape, loss: Node) -> Dict[str, np.ndarray]:
    """Gradients of ``loss`` with respect to every parameter leaf on ``tape``.

    Parameters the loss does not depend on get zero arrays.
    """
    if loss.tape is not tape:
        raise ContractError("loss node belongs to a different tape")
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    grads: Dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.value)
        start = len(tape.nodes) - 1
        while tape.nodes[start] is not loss:
            start -= 1
        for node in reversed(tape.nodes[: start + 1]):
            g = grads.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    out = {}
    for name, node in tape.params.items():
        g = grads.get(id(node))
        out[name] = np.zeros_like(node.value) if g is None else np.asarray(g, dtype=DTYPE).reshape(node.value.shape)
    return out


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Dict[str, np.ndarray]:
    """Rescale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ContractError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def numerical_grad(f: Callable[[], float], array: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``f`` with respect to ``array`` (mutated in place, then restored)."""
    out = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Largest entrywise ``|a - n| / max(|a| + |n|, floor)``; scales tolerance by magnitude."""
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(build_loss: Callable[[Tape], Node], params: Dict[str, np.ndarray],
                    names: Optional[Iterable[str]] = None, eps: float = 1e-5) -> Dict[str, float]:
    """Compare tape gradients of ``build_loss`` to central differences.

    ``build_loss`` must register the arrays in ``params`` on the tape it is
    given. Returns the max relative error per parameter name.
    """
    tape = Tape()
    loss = build_loss(tape)
    analytic = backward(tape, loss)

    def f():
        return float(build_loss(Tape()).value)

    errors = {}
    for name in (names if names is not None else params):
        numeric = numerical_grad(f, params[name], eps)
        errors[name] = max_relative_error(analytic[name], numeric)
    return errors
