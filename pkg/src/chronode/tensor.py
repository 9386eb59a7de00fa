"""Dense 2-D tensors and a small reverse-mode gradient engine.

Values are float64 numpy arrays of shape ``(rows, cols)``. A :class:`Var`
wraps such an array together with the information needed to push gradients
back to its parents. Every differentiable operation in this package is built
from the primitives below, so finite-difference checks on them cover the
whole model zoo.

Broadcasting is deliberately narrow: a column vector ``(rows, 1)`` may be
added to (or subtracted from) a ``(rows, cols)`` matrix, which is how layer
biases act on a batch of column states. Python scalars are accepted by the
arithmetic operators and treated as a constant filled to the other operand's
shape. Everything else must match exactly.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

ACTIVATIONS = ("tanh", "elu", "sigmoid", "identity")

_node_ids = itertools.count()


class _GradMode(threading.local):
    enabled = True


_state = _GradMode()


def is_grad_enabled() -> bool:
    return _state.enabled


@contextmanager
def no_grad():
    """Evaluate without recording parents, for inference and data generation."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


def as_tensor(x) -> np.ndarray:
    """Coerce scalars, 1-D sequences (as columns) and 2-D arrays to float64."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise DimensionError(f"tensors are 2-D, got an array with shape {arr.shape}")
    return arr


class Var:
    """A tensor value plus its place in the gradient graph."""

    __slots__ = ("value", "_grad", "parents", "backward_fn", "node_id", "requires_grad", "op")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.value = as_tensor(value)
        self._grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def rows(self):
        return self.value.shape[0]

    @property
    def cols(self):
        return self.value.shape[1]

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        g = as_tensor(g)
        if g.shape != self.value.shape:
            raise DimensionError(f"grad shape {g.shape} does not match value shape {self.value.shape}")
        self._grad = g

    def zero_grad(self):
        self._grad = None

    def is_leaf(self):
        return not self.parents

    def backward(self):
        backward(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Var(shape={self.shape}, op={self.op!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(x) -> Var:
    return Var(x, requires_grad=False)


def parameter(x) -> Var:
    return Var(np.array(as_tensor(x), copy=True), requires_grad=True)


def _lift(x, like: Var | None = None) -> Var:
    if isinstance(x, Var):
        return x
    if isinstance(x, (int, float)) and like is not None:
        return constant(np.full(like.shape, float(x)))
    return constant(x)


def _node(value, parents, backward_fn, op) -> Var:
    # value is already a 2-D float64 array here, so skip as_tensor
    out = Var.__new__(Var)
    out.value = value
    out._grad = None
    out.node_id = next(_node_ids)
    out.op = op
    if _state.enabled and any(p.requires_grad for p in parents):
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.requires_grad = True
    else:
        out.parents = ()
        out.backward_fn = None
        out.requires_grad = False
    return out


def _shape_str(v: Var) -> str:
    return f"{v.rows}x{v.cols}"


def _broadcast_kind(a: Var, b: Var, opname: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.cols == 1 and a.rows == b.rows:
        return "b_col"
    if a.cols == 1 and a.rows == b.rows:
        return "a_col"
    raise DimensionError(f"{opname}: incompatible shapes {_shape_str(a)} and {_shape_str(b)}")


def _reduce(g: np.ndarray, kind: str, side: str) -> np.ndarray:
    if (kind == "b_col" and side == "b") or (kind == "a_col" and side == "a"):
        return g.sum(axis=1, keepdims=True)
    return g


def matmul(a: Var, b: Var) -> Var:
    a, b = _lift(a), _lift(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul: inner dimensions differ, {_shape_str(a)} @ {_shape_str(b)}")
    av, bv = a.value, b.value

    def backward_fn(g):
        return g @ bv.T, av.T @ g

    return _node(av @ bv, (a, b), backward_fn, "matmul")


def add(a, b) -> Var:
    a = _lift(a, b if isinstance(b, Var) else None)
    b = _lift(b, a)
    kind = _broadcast_kind(a, b, "add")

    def backward_fn(g):
        return _reduce(g, kind, "a"), _reduce(g, kind, "b")

    return _node(a.value + b.value, (a, b), backward_fn, "add")


def sub(a, b) -> Var:
    a = _lift(a, b if isinstance(b, Var) else None)
    b = _lift(b, a)
    kind = _broadcast_kind(a, b, "sub")

    def backward_fn(g):
        return _reduce(g, kind, "a"), -_reduce(g, kind, "b")

    return _node(a.value - b.value, (a, b), backward_fn, "sub")


def hadamard(a: Var, b: Var) -> Var:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shapes differ, {_shape_str(a)} vs {_shape_str(b)}")
    av, bv = a.value, b.value

    def backward_fn(g):
        return g * bv, g * av

    return _node(av * bv, (a, b), backward_fn, "hadamard")


def scale(a: Var, s: float) -> Var:
    a = _lift(a)
    s = float(s)

    def backward_fn(g):
        return (g * s,)

    return _node(a.value * s, (a,), backward_fn, "scale")


def lincomb(coeffs: Sequence[float], terms: Sequence[Var]) -> Var:
    """Weighted sum ``sum_i coeffs[i] * terms[i]`` recorded as a single node.

    Runge-Kutta stage combinations use this to keep tapes short.
    """
    if len(coeffs) != len(terms) or not terms:
        raise ContractError("lincomb needs one coefficient per term and at least one term")
    terms = [_lift(t) for t in terms]
    shape = terms[0].shape
    for t in terms[1:]:
        if t.shape != shape:
            raise DimensionError(f"lincomb: shapes differ, {_shape_str(terms[0])} vs {_shape_str(t)}")
    coeffs = [float(c) for c in coeffs]
    out = coeffs[0] * terms[0].value
    for c, t in zip(coeffs[1:], terms[1:]):
        if c != 0.0:
            out = out + c * t.value

    def backward_fn(g):
        return tuple(g * c for c in coeffs)

    return _node(out, tuple(terms), backward_fn, "lincomb")


def dense(W: Var, x: Var, b: Var, kind: str = "identity", extra: float | None = None) -> Var:
    """Fused ``activation(W x + b)``; one tape node per layer.

    With ``extra`` set, ``x`` is treated as if a constant row filled with
    ``extra`` were appended below it, and the last column of ``W`` multiplies
    that row. The dynamics net feeds time in this way.
    """
    W, x, b = _lift(W), _lift(x), _lift(b)
    n_in = x.rows + (extra is not None)
    if W.cols != n_in:
        raise DimensionError(f"dense: weight {_shape_str(W)} does not take {n_in} inputs")
    if b.shape != (W.rows, 1):
        raise DimensionError(f"dense: bias must be {W.rows}x1, got {_shape_str(b)}")
    Wv, xv = W.value, x.value
    if extra is None:
        pre = Wv @ xv + b.value
    else:
        extra = float(extra)
        pre = Wv[:, :-1] @ xv + Wv[:, -1:] * extra + b.value
    y, deriv = _activate(pre, kind)

    def backward_fn(g):
        gz = g if deriv is None else g * deriv
        if extra is None:
            return gz @ xv.T, Wv.T @ gz, gz.sum(axis=1, keepdims=True)
        gW = np.hstack((gz @ xv.T, gz.sum(axis=1, keepdims=True) * extra))
        return gW, Wv[:, :-1].T @ gz, gz.sum(axis=1, keepdims=True)

    return _node(y, (W, x, b), backward_fn, "dense")


def dense_sum(pairs: Sequence[tuple[Var, Var]], b: Var, kind: str = "identity") -> Var:
    """Fused ``activation(sum_k W_k x_k + b)``, the shape of every gate in a cell."""
    if not pairs:
        raise ContractError("dense_sum needs at least one (W, x) pair")
    pairs = [(_lift(W), _lift(x)) for W, x in pairs]
    b = _lift(b)
    pre = None
    for W, x in pairs:
        if W.cols != x.rows:
            raise DimensionError(f"dense_sum: inner dimensions differ, {_shape_str(W)} @ {_shape_str(x)}")
        if W.rows != b.rows:
            raise DimensionError(f"dense_sum: weight {_shape_str(W)} does not match bias {_shape_str(b)}")
        term = W.value @ x.value
        pre = term if pre is None else pre + term
    if b.cols != 1 or pre.shape[0] != b.rows:
        raise DimensionError(f"dense_sum: bias must be a {pre.shape[0]}x1 column, got {_shape_str(b)}")
    y, deriv = _activate(pre + b.value, kind)
    vals = [(W.value, x.value) for W, x in pairs]

    def backward_fn(g):
        gz = g if deriv is None else g * deriv
        out = []
        for Wv, xv in vals:
            out.append(gz @ xv.T)
            out.append(Wv.T @ gz)
        out.append(gz.sum(axis=1, keepdims=True))
        return tuple(out)

    parents = tuple(v for pair in pairs for v in pair) + (b,)
    return _node(y, parents, backward_fn, "dense_sum")


def _activate(x: np.ndarray, kind: str):
    """Return ``(y, dy/dx)``; the derivative is None for identity."""
    if kind == "identity":
        return x, None
    if kind == "tanh":
        y = np.tanh(x)
        return y, 1.0 - y * y
    if kind == "sigmoid":
        y = _sigmoid(x)
        return y, y * (1.0 - y)
    if kind == "elu":
        y = _elu(x)
        return y, np.where(x > 0, 1.0, y + 1.0)
    raise ContractError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(a: Var, kind: str) -> Var:
    """Elementwise nonlinearity. ``elu`` uses alpha = 1."""
    a = _lift(a)
    y, deriv = _activate(a.value, kind)
    if deriv is None:
        return a

    def backward_fn(g):
        return (g * deriv,)

    return _node(y, (a,), backward_fn, kind)


def tanh(a):
    return activation(a, "tanh")


def elu(a):
    return activation(a, "elu")


def sigmoid(a):
    return activation(a, "sigmoid")


def concat_rows(a: Var, b: Var) -> Var:
    """Stack ``a`` above ``b``. A 0-row operand is a neutral element."""
    a, b = _lift(a), _lift(b)
    if a.rows == 0:
        return b
    if b.rows == 0:
        return a
    if a.cols != b.cols:
        raise DimensionError(f"concat_rows: column counts differ, {_shape_str(a)} vs {_shape_str(b)}")
    split = a.rows

    def backward_fn(g):
        return g[:split], g[split:]

    return _node(np.vstack((a.value, b.value)), (a, b), backward_fn, "concat")


def sum_all(a: Var) -> Var:
    a = _lift(a)
    shape = a.shape

    def backward_fn(g):
        return (np.full(shape, g[0, 0]),)

    return _node(np.array([[a.value.sum()]]), (a,), backward_fn, "sum")


def mse(pred: Var, target) -> Var:
    """Mean of squared differences against a constant target."""
    pred = _lift(pred)
    target = target.value if isinstance(target, Var) else as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: prediction {_shape_str(pred)} vs target {target.shape[0]}x{target.shape[1]}")
    diff = pred.value - target
    count = diff.size

    def backward_fn(g):
        return (g[0, 0] * 2.0 * diff / count,)

    return _node(np.array([[np.mean(diff * diff)]]), (pred,), backward_fn, "mse")


class Tape:
    """Nodes reachable from an output, in topological (creation) order.

    Node ids are handed out monotonically at creation, and a node can only be
    created after its parents, so sorting by id is a valid topological order.
    """

    def __init__(self, nodes: list[Var]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Var) -> "Tape":
        seen = {}
        stack = [out]
        while stack:
            node = stack.pop()
            if node.node_id in seen or not node.requires_grad:
                continue
            seen[node.node_id] = node
            stack.extend(node.parents)
        return cls(sorted(seen.values(), key=lambda v: v.node_id))

    def __len__(self):
        return len(self.nodes)

    def backward(self, seed: np.ndarray):
        """Propagate ``seed`` (d output / d last node) through the recorded nodes."""
        if not self.nodes:
            return
        out = self.nodes[-1]
        local = {out.node_id: seed}
        for node in reversed(self.nodes):
            g = local.pop(node.node_id, None)
            if g is None:
                continue
            if node._grad is None:
                node._grad = g.copy() if node.backward_fn is None else g
            else:
                node._grad = node._grad + g
            if node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if not parent.requires_grad:
                    continue
                prev = local.get(parent.node_id)
                local[parent.node_id] = pg if prev is None else prev + pg


def backward(loss: Var):
    """Accumulate d loss / d v into ``v.grad`` for every reachable ``v``.

    Gradients add up across calls; zero them between optimizer steps.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got {_shape_str(loss)}")
    if not loss.requires_grad:
        return
    Tape.from_output(loss).backward(np.ones((1, 1)))


def zero_grads(params: Iterable[Var]):
    for p in params:
        p.zero_grad()


def value_and_grad(fn: Callable[..., Var], *params: Var):
    """Evaluate ``fn(*params)`` and return its value with fresh gradients."""
    for p in params:
        p.zero_grad()
    out = fn(*params)
    backward(out)
    return float(out.value[0, 0]), [p.grad.copy() for p in params]
