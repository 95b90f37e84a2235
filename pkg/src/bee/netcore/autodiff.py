"""Tape-based reverse-mode differentiation over numpy arrays.

Only the primitives needed by the adaptation losses are provided: affine
maps, GELU, row L2-normalisation, tempered (log-)softmax, cross-entropy
against a fixed target distribution, Shannon entropy, and reductions.
Every node records the name of the primitive that produced it so that
:func:`backward` can refuse graphs built from anything else.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.special import erf

PROB_FLOOR = 1e-12
LOG_PROB_FLOOR = math.log(PROB_FLOOR)
_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

SUPPORTED_OPS = frozenset(
    {
        "leaf",
        "const",
        "affine",
        "matmul",
        "add",
        "scale",
        "gelu",
        "identity",
        "l2_normalize",
        "softmax",
        "log_softmax",
        "cross_entropy",
        "entropy",
        "mean",
        "sum",
        "sum_squares",
    }
)


class UnsupportedPrimitive(ValueError):
    pass


class Var:
    """A node in the computation graph."""

    __slots__ = ("value", "op", "parents", "vjp", "requires_grad", "name")

    def __init__(self, value, op="const", parents=(), vjp=None, requires_grad=False, name=None):
        self.value = value
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.shape}, name={self.name!r})"


def leaf(value, name: str) -> Var:
    return Var(np.asarray(value), op="leaf", requires_grad=True, name=name)


def const(value) -> Var:
    if isinstance(value, Var):
        return value
    return Var(np.asarray(value), op="const")


def _node(value, op, parents, vjp) -> Var:
    if not any(p.requires_grad for p in parents):
        return Var(value, op=op)
    return Var(value, op=op, parents=parents, vjp=vjp, requires_grad=True)


# -- primitives --------------------------------------------------------------


def affine(x: Var, w: Var, b: Var) -> Var:
    out = x.value @ w.value + b.value

    def vjp(g):
        return g @ w.value.T, x.value.T @ g, g.sum(axis=0)

    return _node(out, "affine", (x, w, b), vjp)


def matmul(x: Var, w: Var) -> Var:
    out = x.value @ w.value

    def vjp(g):
        return g @ w.value.T, x.value.T @ g

    return _node(out, "matmul", (x, w), vjp)


def add(a: Var, b: Var) -> Var:
    if np.shape(a.value) != np.shape(b.value):
        raise ValueError(f"add: shape mismatch {np.shape(a.value)} vs {np.shape(b.value)}")
    return _node(a.value + b.value, "add", (a, b), lambda g: (g, g))


def scale(a: Var, c: float) -> Var:
    return _node(a.value * c, "scale", (a,), lambda g: (g * c,))


def gelu(x: Var) -> Var:
    v = x.value
    cdf = 0.5 * (1.0 + erf(v * _SQRT_HALF))
    out = v * cdf

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * v * v)
        return (g * (cdf + v * pdf),)

    return _node(out, "gelu", (x,), vjp)


def identity(x: Var) -> Var:
    return _node(x.value, "identity", (x,), lambda g: (g,))


def l2_normalize(x: Var) -> Var:
    """Scale every row of a 2-D array to unit Euclidean norm."""
    v = x.value
    norms = np.sqrt(np.sum(v * v, axis=1, keepdims=True))
    if np.any(norms == 0.0):
        bad = np.flatnonzero(norms[:, 0] == 0.0)
        raise ValueError(f"cannot L2-normalise zero-norm rows {bad.tolist()}")
    out = v / norms

    def vjp(g):
        return ((g - out * np.sum(g * out, axis=1, keepdims=True)) / norms,)

    return _node(out, "l2_normalize", (x,), vjp)


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax(x: Var, temperature: float = 1.0) -> Var:
    p = softmax_rows(x.value / temperature)

    def vjp(g):
        return ((p * (g - np.sum(g * p, axis=1, keepdims=True))) / temperature,)

    return _node(p, "softmax", (x,), vjp)


def log_softmax(x: Var, temperature: float = 1.0) -> Var:
    z = x.value / temperature
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    out = z - lse

    def vjp(g):
        p = np.exp(out)
        return ((g - p * np.sum(g, axis=1, keepdims=True)) / temperature,)

    return _node(out, "log_softmax", (x,), vjp)


def cross_entropy(target, log_q: Var) -> Var:
    """Mean over rows of ``-sum_m target[m] * log q[m]``.

    ``target`` is a constant distribution (no gradient flows into it);
    log-probabilities are floored at ``log(1e-12)``.
    """
    t = np.asarray(target.value if isinstance(target, Var) else target)
    n = t.shape[0]
    clipped = np.maximum(log_q.value, LOG_PROB_FLOOR)
    out = -np.sum(t * clipped) / n

    def vjp(g):
        live = log_q.value > LOG_PROB_FLOOR
        return (np.where(live, -g * t / n, 0.0),)

    return _node(np.asarray(out), "cross_entropy", (log_q,), vjp)


def entropy(p: Var) -> Var:
    """Mean Shannon entropy (nats) of the rows of ``p``."""
    v = p.value
    n = v.shape[0]
    logp = np.log(np.maximum(v, PROB_FLOOR))
    out = -np.sum(v * logp) / n

    def vjp(g):
        return (-g * (logp + 1.0) / n,)

    return _node(np.asarray(out), "entropy", (p,), vjp)


def mean(x: Var) -> Var:
    size = np.size(x.value)
    return _node(np.asarray(np.mean(x.value)), "mean", (x,), lambda g: (np.full(np.shape(x.value), g / size),))


def total(x: Var) -> Var:
    return _node(np.asarray(np.sum(x.value)), "sum", (x,), lambda g: (np.full(np.shape(x.value), g * 1.0),))


def sum_squares(x: Var) -> Var:
    v = x.value
    return _node(np.asarray(np.sum(v * v)), "sum_squares", (x,), lambda g: (2.0 * g * v,))


def add_scalars(terms: Iterable[Var]) -> Var:
    terms = list(terms)
    if not terms:
        return const(np.asarray(0.0))
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return acc


# -- reverse pass ------------------------------------------------------------


def _topological(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.op not in SUPPORTED_OPS:
            raise UnsupportedPrimitive(f"primitive {node.op!r} is not differentiable here")
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Var, wrt: Mapping[str, Var]) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to the named leaves.

    Leaves that the loss does not depend on get zero gradients.
    """
    if np.size(loss.value) != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {np.shape(loss.value)}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.value, dtype=float)
        for node in reversed(_topological(loss)):
            g = grads.pop(id(node), None) if node.op != "leaf" else grads.get(id(node))
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
    out = {}
    for name, var in wrt.items():
        g = grads.get(id(var))
        out[name] = np.zeros_like(var.value, dtype=float) if g is None else np.asarray(g, dtype=float).reshape(np.shape(var.value))
    return out


def value_and_grad(fn: Callable[[Mapping[str, Var]], Var], params: Mapping[str, np.ndarray], wrt: Iterable[str]):
    """Evaluate ``fn`` with the ``wrt`` entries as leaves; return (loss, grads)."""
    wrt = set(wrt)
    inputs = {k: (leaf(v, k) if k in wrt else const(v)) for k, v in params.items()}
    loss = fn(inputs)
    grads = backward(loss, {k: inputs[k] for k in params if k in wrt})
    return float(loss.value), grads
