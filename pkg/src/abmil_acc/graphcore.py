"""Dense float64 tensors with a countable reverse-mode tape.

Tensors are plain ``numpy.ndarray`` values of dtype float64. A :class:`Var`
wraps a tensor and, when it lives on a :class:`Tape`, the index of the node
that produced it. Operations record themselves on the tape of their inputs
and keep exactly the forward values their backward rule reads; the sum of
those kept values is ``Tape.retained_scalars``.

Retention policy (the unit of memory accounting):

============  ==========================================================
op            retained forward values
============  ==========================================================
matmul        ``b`` if ``a`` needs a gradient, ``a`` if ``b`` does
mul           the other operand, for each operand that needs a gradient
add, scale    nothing (shapes only)
tanh          output
relu          output
sigmoid       output
softmax       output
sum, mean     nothing
concat        nothing (split sizes only)
transpose     nothing
batchnorm     normalized output and per-feature inverse std
bce           clamped score
============  ==========================================================

Nodes whose inputs need no gradient are recorded but keep nothing.
``retained_scalars`` counts every kept value. The per-scope counters used to
attribute memory to a sub-network (``Tape.scope``) count activations only:
a kept value that is itself a Parameter leaf is excluded.
"""
from __future__ import annotations

import enum
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Tensor = np.ndarray

__all__ = [
    "Tensor",
    "ShapeError",
    "LeafKind",
    "Var",
    "Tape",
    "backward",
    "peak_retained_scalars",
    "tensor",
    "matmul",
    "add",
    "mul",
    "scale",
    "tanh",
    "relu",
    "sigmoid",
    "softmax",
    "sum",
    "mean",
    "concat",
    "transpose",
    "batchnorm",
    "bce",
    "tensor_op",
]


class ShapeError(ValueError):
    pass


class LeafKind(enum.Enum):
    PARAMETER = "parameter"
    INPUT = "differentiable_input"
    CONSTANT = "constant"


def tensor(data) -> Tensor:
    """Coerce ``data`` into a float64 array, checking the shape invariants."""
    arr = np.asarray(data, dtype=np.float64)
    if any(d < 1 for d in arr.shape):
        raise ShapeError(f"tensor shape {arr.shape} has an empty dimension")
    return arr


@dataclass(eq=False)
class Var:
    value: Tensor
    tape: Tape | None = None
    index: int = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None and self.tape.nodes[self.index].requires_grad

    def __repr__(self) -> str:
        where = f"node {self.index}" if self.tape is not None else "untaped"
        return f"Var(shape={self.shape}, {where})"


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[int, ...]
    saved: tuple[Tensor | None, ...]
    attrs: dict
    requires_grad: bool
    scope: str | None
    leaf: LeafKind | None = None


@dataclass(eq=False)
class Tape:
    nodes: list[Node] = field(default_factory=list)
    retained_scalars: int = 0
    peak: int = 0
    retained_by_scope: dict[str, int] = field(default_factory=dict)
    bindings: dict[str, Var] = field(default_factory=dict)
    _leaves: dict[int, Var] = field(default_factory=dict)
    _scope: list[str] = field(default_factory=list)

    def leaf(self, value, kind: LeafKind = LeafKind.CONSTANT) -> Var:
        value = tensor(value)
        node = Node("leaf", (), (), {}, kind is not LeafKind.CONSTANT,
                    self.current_scope, leaf=kind)
        self.nodes.append(node)
        var = Var(value, self, len(self.nodes) - 1)
        self._leaves[var.index] = var
        return var

    def parameter(self, value) -> Var:
        return self.leaf(value, LeafKind.PARAMETER)

    def input(self, value) -> Var:
        return self.leaf(value, LeafKind.INPUT)

    def constant(self, value) -> Var:
        return self.leaf(value, LeafKind.CONSTANT)

    def bind(self, name: str, value, kind: LeafKind = LeafKind.PARAMETER) -> Var:
        """Return the leaf registered under ``name``, creating it on first use."""
        var = self.bindings.get(name)
        if var is None:
            var = self.leaf(value, kind)
            self.bindings[name] = var
        return var

    @property
    def current_scope(self) -> str | None:
        return self._scope[-1] if self._scope else None

    @contextmanager
    def scope(self, name: str):
        """Attribute retention of ops recorded inside the block to ``name``."""
        self._scope.append(name)
        try:
            yield self
        finally:
            self._scope.pop()

    def peak_in_scope(self, name: str) -> int:
        """Activation scalars retained by ops recorded under scope ``name``."""
        return self.retained_by_scope.get(name, 0)

    def _record(self, op, inputs: Sequence[Var], out: Tensor, saved, attrs) -> Var:
        needs = tuple(v.requires_grad for v in inputs)
        requires_grad = any(needs)
        if not requires_grad:
            saved = ()
        else:
            saved = tuple(saved(needs)) if callable(saved) else tuple(saved)
        node = Node(op, tuple(v.index for v in inputs), saved, attrs,
                    requires_grad, self.current_scope)
        self.nodes.append(node)
        kept = int(np.sum([s.size for s in saved if s is not None], dtype=np.int64))
        if kept:
            self.retained_scalars += kept
            self.peak = max(self.peak, self.retained_scalars)
        # Scope counters track activations only; parameter tensors are resident anyway.
        params = {id(v.value) for v in inputs if self.nodes[v.index].leaf is LeafKind.PARAMETER}
        activations = int(np.sum([s.size for s in saved if s is not None and id(s) not in params],
                                 dtype=np.int64))
        if activations:
            for name in set(self._scope):
                self.retained_by_scope[name] = self.retained_by_scope.get(name, 0) + activations
        return Var(out, self, len(self.nodes) - 1)


def peak_retained_scalars(tape: Tape) -> int:
    return tape.peak


# ---------------------------------------------------------------- recording


def _common_tape(args: Sequence) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var) and a.tape is not None:
            if tape is not None and a.tape is not tape:
                raise ValueError("operands belong to different tapes")
            tape = a.tape
    return tape


def _vars(args: Sequence, tape: Tape | None) -> list[Var]:
    out = []
    for a in args:
        if isinstance(a, Var):
            if tape is not None and a.tape is None:
                a = tape.constant(a.value)
            out.append(a)
        else:
            value = tensor(a)
            out.append(tape.constant(value) if tape is not None else Var(value))
    return out


def _emit(op: str, args: Sequence, out: Tensor, saved=(), **attrs) -> Var:
    tape = _common_tape(args)
    if tape is None:
        return Var(out)
    return tape._record(op, _vars(args, tape), out, saved, attrs)


def _value(a) -> Tensor:
    return a.value if isinstance(a, Var) else tensor(a)


def _unbroadcast(grad: Tensor, shape: tuple[int, ...]) -> Tensor:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- operations


def matmul(a, b) -> Var:
    av, bv = _value(a), _value(b)
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    out = av @ bv
    return _emit("matmul", (a, b), out,
                 lambda needs: (bv if needs[0] else None, av if needs[1] else None),
                 a_shape=av.shape, b_shape=bv.shape)


def add(a, b) -> Var:
    av, bv = _value(a), _value(b)
    _broadcast_shape("add", av, bv)
    return _emit("add", (a, b), av + bv, a_shape=av.shape, b_shape=bv.shape)


def mul(a, b) -> Var:
    av, bv = _value(a), _value(b)
    _broadcast_shape("mul", av, bv)
    return _emit("mul", (a, b), av * bv,
                 lambda needs: (bv if needs[0] else None, av if needs[1] else None),
                 a_shape=av.shape, b_shape=bv.shape)


def scale(a, factor: float) -> Var:
    return _emit("scale", (a,), _value(a) * factor, factor=float(factor))


def tanh(a) -> Var:
    out = np.tanh(_value(a))
    return _emit("tanh", (a,), out, (out,))


def relu(a) -> Var:
    out = np.maximum(_value(a), 0.0)
    return _emit("relu", (a,), out, (out,))


def sigmoid(a) -> Var:
    x = _value(a)
    # Two-branch form avoids overflow in exp for large |x|.
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return _emit("sigmoid", (a,), out, (out,))


def softmax(a, axis: int = -1) -> Var:
    x = _value(a)
    shifted = np.exp(x - x.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)
    return _emit("softmax", (a,), out, (out,), axis=axis)


def sum(a, axis: int | None = None) -> Var:  # noqa: A001 - mirrors numpy
    x = _value(a)
    return _emit("sum", (a,), np.asarray(x.sum(axis=axis)), axis=axis, shape=x.shape)


def mean(a, axis: int | None = None) -> Var:
    x = _value(a)
    count = x.size if axis is None else x.shape[axis]
    return _emit("mean", (a,), np.asarray(x.mean(axis=axis)), axis=axis,
                 shape=x.shape, count=count)


def concat(parts: Sequence, axis: int = 0) -> Var:
    values = [_value(p) for p in parts]
    if not values:
        raise ShapeError("concat: no inputs")
    ref = list(values[0].shape)
    for v in values[1:]:
        other = list(v.shape)
        if len(other) != len(ref) or any(
            i != axis % len(ref) and x != y for i, (x, y) in enumerate(zip(ref, other))
        ):
            raise ShapeError(f"concat: incompatible shapes {values[0].shape} and {v.shape}")
    if len(parts) == 1:
        return parts[0] if isinstance(parts[0], Var) else Var(values[0])
    out = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    return _emit("concat", tuple(parts), out, axis=axis, sizes=sizes)


def transpose(a) -> Var:
    x = _value(a)
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")
    return _emit("transpose", (a,), x.T.copy())


def batchnorm(a, eps: float = 1e-5) -> tuple[Var, Tensor, Tensor]:
    """Normalize the columns of ``a`` with batch statistics.

    Returns the normalized output together with the batch mean and the
    biased batch variance so the caller can update running statistics.
    The affine part is left to ``mul``/``add``.
    """
    x = _value(a)
    if x.ndim != 2:
        raise ShapeError(f"batchnorm: expected [batch, features], got shape {x.shape}")
    mu = x.mean(axis=0)
    var = x.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    out = (x - mu) * inv_std
    return _emit("batchnorm", (a,), out, (out, inv_std)), mu, var


def bce(score, label: float, clamp: float = 1e-12) -> Var:
    """Binary cross-entropy of a probability ``score`` against ``label``."""
    s = _value(score)
    if s.size != 1:
        raise ShapeError(f"bce: expected a single score, got shape {s.shape}")
    p = np.clip(s.reshape(()), clamp, 1.0 - clamp)
    y = float(label)
    out = np.asarray(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)))
    clipped = bool(s.reshape(()) != p)
    return _emit("bce", (score,), out, (p,), label=y, clipped=clipped, shape=s.shape)


_FORWARD: dict[str, Callable[..., Var]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": scale,
    "tanh": tanh,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "sum": sum,
    "mean": mean,
    "transpose": transpose,
}


def tensor_op(kind: str, *inputs, **kwargs) -> Var:
    """Dispatch an operation by name; ``concat`` takes its parts as inputs."""
    if kind == "concat":
        return concat(inputs, **kwargs)
    if kind == "batchnorm":
        return batchnorm(*inputs, **kwargs)[0]
    try:
        fn = _FORWARD[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- backward rules
# Each rule maps (node, upstream grad) to one gradient per input (None = skip).


def _matmul_grad(node, g):
    b, a = node.saved
    a_shape, b_shape = node.attrs["a_shape"], node.attrs["b_shape"]
    da = db = None
    if b is not None:
        if len(a_shape) == 1 and len(b_shape) == 1:
            da = g * b
        elif len(a_shape) == 1:
            da = b @ g
        elif len(b_shape) == 1:
            da = np.outer(g, b)
        else:
            da = g @ b.T
    if a is not None:
        if len(a_shape) == 1 and len(b_shape) == 1:
            db = g * a
        elif len(a_shape) == 1:
            db = np.outer(a, g)
        else:
            db = a.T @ g
    return da, db


def _mul_grad(node, g):
    b, a = node.saved
    da = None if b is None else _unbroadcast(g * b, node.attrs["a_shape"])
    db = None if a is None else _unbroadcast(g * a, node.attrs["b_shape"])
    return da, db


def _reduce_grad(node, g):
    shape, axis = node.attrs["shape"], node.attrs["axis"]
    if axis is not None:
        g = np.expand_dims(g, axis)
    g = np.broadcast_to(g, shape)
    if node.op == "mean":
        g = g / node.attrs["count"]
    return (np.array(g),)


def _concat_grad(node, g):
    edges = np.cumsum(node.attrs["sizes"])[:-1]
    return tuple(np.split(g, edges, axis=node.attrs["axis"]))


def _softmax_grad(node, g):
    (a,) = node.saved
    return (a * (g - np.sum(g * a, axis=node.attrs["axis"], keepdims=True)),)


def _batchnorm_grad(node, g):
    xhat, inv_std = node.saved
    k = g.shape[0]
    dx = inv_std / k * (k * g - g.sum(axis=0) - xhat * np.sum(g * xhat, axis=0))
    return (dx,)


def _bce_grad(node, g):
    (p,) = node.saved
    if node.attrs["clipped"]:
        return (np.zeros(node.attrs["shape"]),)
    y = node.attrs["label"]
    d = g * (p - y) / (p * (1.0 - p))
    return (np.full(node.attrs["shape"], d),)


BACKWARD: dict[str, Callable[[Node, Tensor], tuple]] = {
    "matmul": _matmul_grad,
    "add": lambda n, g: (_unbroadcast(g, n.attrs["a_shape"]), _unbroadcast(g, n.attrs["b_shape"])),
    "mul": _mul_grad,
    "scale": lambda n, g: (g * n.attrs["factor"],),
    "tanh": lambda n, g: (g * (1.0 - n.saved[0] ** 2),),
    "relu": lambda n, g: (g * (n.saved[0] > 0),),
    "sigmoid": lambda n, g: (g * n.saved[0] * (1.0 - n.saved[0]),),
    "softmax": _softmax_grad,
    "sum": _reduce_grad,
    "mean": _reduce_grad,
    "concat": _concat_grad,
    "transpose": lambda n, g: (g.T,),
    "batchnorm": _batchnorm_grad,
    "bce": _bce_grad,
}


def backward(tape: Tape, loss: Var) -> dict[Var, Tensor]:
    """Reverse sweep from a scalar ``loss``.

    Returns a gradient for every Parameter and DifferentiableInput leaf on
    the tape (zeros when unreachable). Constant leaves are absent. The tape
    is left untouched, so the sweep can be repeated.
    """
    if loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, Tensor] = {loss.index: np.ones_like(loss.value)}
    for idx in range(loss.index, -1, -1):
        g = grads.pop(idx, None) if tape.nodes[idx].leaf is None else grads.get(idx)
        node = tape.nodes[idx]
        if g is None or node.leaf is not None or not node.requires_grad:
            continue
        for src, dg in zip(node.inputs, BACKWARD[node.op](node, g)):
            if dg is None or not tape.nodes[src].requires_grad:
                continue
            grads[src] = grads[src] + dg if src in grads else dg
    out = {}
    for idx, var in tape._leaves.items():
        if tape.nodes[idx].leaf is LeafKind.CONSTANT:
            continue
        g = grads.get(idx)
        out[var] = np.zeros_like(var.value) if g is None else np.asarray(g, dtype=np.float64).reshape(var.shape)
    return out
