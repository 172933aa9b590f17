"""Dense float64 arrays with reverse-mode differentiation.

Tensors are eager: every op computes its value immediately and records its
parents plus a vector-Jacobian product closure.  ``Graph`` wraps a function
of named tensors so it can be evaluated against bindings and differentiated
afterwards.

    >>> g = Graph(lambda x: {"y": x * x})
    >>> ev = evaluate(g, {"x": np.array(3.0)})
    >>> ev["y"]
    array(9.)
    >>> gradients(ev, "y", ["x"])["x"]
    array(6.)
"""
from __future__ import annotations

import inspect
import itertools
from typing import Callable, Iterable, Mapping

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


class NumericalError(FloatingPointError):
    """An op produced a non-finite value."""


class ContractError(RuntimeError):
    """An API precondition was violated (e.g. gradient of a non-scalar)."""


def _check_finite(value: np.ndarray, node: str) -> None:
    if not np.isfinite(value).all():
        raise NumericalError(f"non-finite value produced at node {node}")


class Tensor:
    __slots__ = ("value", "parents", "vjp", "op", "name", "requires_grad", "uid")
    __array_priority__ = 100

    def __init__(self, value, parents=(), vjp=None, op="leaf", name=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.uid = next(_ids)
        self.name = name or f"{op}#{self.uid}"
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        _check_finite(self.value, self.name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        return f"Tensor({self.name}, shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.value

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, negate(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), negate(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, item):
        if isinstance(item, slice):
            return slice_last(self, item.start or 0, item.stop if item.stop is not None else self.shape[-1])
        raise TypeError("only slicing along the last axis is supported")


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, op="const")


def constant(x, name=None) -> Tensor:
    return Tensor(x, op="const", name=name)


def variable(x, name=None) -> Tensor:
    return Tensor(x, op="var", name=name, requires_grad=True)


def _make(value, parents, vjp, op):
    parents = tuple(parents)
    return Tensor(value, parents, vjp if any(p.requires_grad for p in parents) else None, op=op)


def _broadcast_ok(a: tuple, b: tuple) -> bool:
    # equal shapes, scalar operand, or a trailing-shape operand added over a leading batch axis
    return a == b or a == () or b == () or a[1:] == b or b[1:] == a


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.sum(axis=0)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"add: cannot combine {a.shape} and {b.shape} ({a.name}, {b.name})")
    return _make(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"mul: cannot combine {a.shape} and {b.shape} ({a.name}, {b.name})")
    av, bv = a.value, b.value
    return _make(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
        "mul",
    )


def negate(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.value, (a,), lambda g: (-g,), "negate")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape} ({a.name}, {b.name})")
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.value)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.value)
    av = a.value
    return _make(out, (a,), lambda g: (g / av,), "log")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is passed only where the input was inside."""
    a = as_tensor(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _make(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,), "clip")


def stop_gradient(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.value, op="stop_gradient")


def reduce_sum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return _make(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape),), "reduce_sum")
    axis = axis % a.ndim
    return _make(
        a.value.sum(axis=axis),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape),),
        "reduce_sum",
    )


def reduce_mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis), 1.0 / count)


def concat(parts: Iterable, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if axis not in (-1, parts[0].ndim - 1):
        raise ShapeError("concat is only defined along the last axis")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat: leading shapes differ {p.shape} vs {parts[0].shape} ({p.name})")
    widths = [p.shape[-1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[..., bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.value for p in parts], axis=-1), parts, vjp, "concat")


def slice_last(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    width = a.shape[-1]
    if not 0 <= start <= stop <= width:
        raise ShapeError(f"slice [{start}:{stop}] out of range for width {width} ({a.name})")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _make(a.value[..., start:stop], (a,), vjp, "slice")


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.value.max(axis=axis, keepdims=True)
    e = np.exp(a.value - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    soft = e / s
    return _make(out, (a,), lambda g: (np.expand_dims(g, axis) * soft,), "logsumexp")


def log_softmax(a) -> Tensor:
    """Log-probabilities of a softmax over the last axis."""
    a = as_tensor(a)
    m = a.value.max(axis=-1, keepdims=True)
    shifted = a.value - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _make(out, (a,), lambda g: (g - soft * g.sum(axis=-1, keepdims=True),), "log_softmax")


def softmax(a) -> Tensor:
    return exp(log_softmax(a))


def square(a) -> Tensor:
    a = as_tensor(a)
    return mul(a, a)


OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "negate": negate,
    "reduce_sum": reduce_sum,
    "reduce_mean": reduce_mean,
    "concat": concat,
    "slice": slice_last,
    "log_softmax": log_softmax,
    "softmax": softmax,
    "logsumexp": logsumexp,
    "clip": clip,
}


def backward(output: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    Tensors that do not influence ``output`` get zero gradients.
    """
    if output.shape != ():
        raise ContractError(f"gradient requested of non-scalar {output.name} with shape {output.shape}")
    wrt = list(wrt)

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.uid in seen or not node.requires_grad:
            continue
        seen.add(node.uid)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.uid not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {output.uid: np.ones(())}
    for node in reversed(order):
        g = grads.pop(node.uid, None) if node.vjp is not None else grads.get(node.uid)
        if g is None or node.vjp is None:
            continue
        for p, gp in zip(node.parents, node.vjp(g)):
            if not p.requires_grad:
                continue
            if p.uid in grads:
                grads[p.uid] = grads[p.uid] + gp
            else:
                grads[p.uid] = np.array(gp, dtype=np.float64)
    return [grads.get(t.uid, np.zeros(t.shape)) for t in wrt]


class Graph:
    """A differentiable function of named array inputs.

    ``fn`` receives one tensor per parameter name and returns a tensor or a
    dict of named output tensors.
    """

    def __init__(self, fn: Callable, inputs: Iterable[str] | None = None):
        self.fn = fn
        self.inputs = tuple(inputs) if inputs is not None else tuple(inspect.signature(fn).parameters)

    def __repr__(self):
        return f"Graph(inputs={self.inputs})"


class Evaluation(Mapping):
    """Result of running a graph: output arrays plus the recorded tape."""

    def __init__(self, leaves: dict[str, Tensor], outputs: dict[str, Tensor]):
        self.leaves = leaves
        self.outputs = outputs

    def __getitem__(self, key):
        return self.outputs[key].value

    def __iter__(self):
        return iter(self.outputs)

    def __len__(self):
        return len(self.outputs)


def evaluate(graph: Graph, bindings: Mapping[str, np.ndarray]) -> Evaluation:
    missing = [k for k in graph.inputs if k not in bindings]
    if missing:
        raise ShapeError(f"unbound graph inputs: {missing}")
    leaves = {k: variable(np.array(bindings[k], dtype=np.float64), name=k) for k in graph.inputs}
    out = graph.fn(**leaves)
    if isinstance(out, Tensor):
        out = {"out": out}
    return Evaluation(leaves, dict(out))


def gradients(ev: Evaluation, scalar_output: str, wrt: Iterable[str]) -> dict[str, np.ndarray]:
    wrt = list(wrt)
    tensors = [ev.leaves[k] if k in ev.leaves else ev.outputs[k] for k in wrt]
    return dict(zip(wrt, backward(ev.outputs[scalar_output], tensors)))


def finite_difference_check(
    graph: Graph,
    scalar_output: str,
    point: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    wrt: Iterable[str] | None = None,
) -> float:
    """Worst relative error between analytic and central-difference gradients."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    wrt = list(wrt) if wrt is not None else list(graph.inputs)
    point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    analytic = gradients(evaluate(graph, point), scalar_output, wrt)

    def f(bind):
        return float(evaluate(graph, bind)[scalar_output])

    worst = 0.0
    for name in wrt:
        base = point[name]
        flat = base.reshape(-1)
        for i in range(flat.size):
            plus, minus = flat.copy(), flat.copy()
            plus[i] += eps
            minus[i] -= eps
            fp = f({**point, name: plus.reshape(base.shape)})
            fm = f({**point, name: minus.reshape(base.shape)})
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic[name].reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
