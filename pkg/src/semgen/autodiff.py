"""A small reverse-mode autodiff engine over float64 numpy arrays.

Graphs are built eagerly: every op computes its value on construction and
remembers a closure mapping the upstream gradient to its parents' gradients.
Arrays have rank <= 2 and the only broadcasting is the bias add.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .circuit import Circuit
from .semloss import semantic_loss_batch

PROB_CLAMP = 1e-7


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "parents", "op", "backward_fn", "requires_grad", "name")

    def __init__(self, value, parents=(), op="const", backward_fn=None, requires_grad=False, name=None):
        v = np.asarray(value, dtype=np.float64)
        if v.ndim > 2:
            raise ShapeError(f"{op}: rank {v.ndim} arrays are not supported")
        self.value = v
        self.grad: Optional[np.ndarray] = None
        self.parents = tuple(parents)
        self.op = op
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"


def param(value, name=None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name, op="param")


def const(value) -> Tensor:
    return Tensor(value)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _need_rank2(op, *xs):
    for x in xs:
        if x.value.ndim != 2:
            raise ShapeError(f"{op}: expected a rank-2 array, got shape {x.shape}")


# ---------------------------------------------------------------------------
# Primitive ops


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _need_rank2("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    return Tensor(av @ bv, (a, b), "matmul", lambda g: (g @ bv.T, av.T @ g))


def add_bias(x, bias) -> Tensor:
    x, bias = _lift(x), _lift(bias)
    _need_rank2("add_bias", x)
    if bias.value.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise ShapeError(f"add_bias: bias of shape {bias.shape} does not fit {x.shape}")
    return Tensor(x.value + bias.value, (x, bias), "add_bias", lambda g: (g, g.sum(axis=0)))


def tanh(x) -> Tensor:
    x = _lift(x)
    y = np.tanh(x.value)
    return Tensor(y, (x,), "tanh", lambda g: (g * (1.0 - y * y),))


def relu(x) -> Tensor:
    x = _lift(x)
    mask = x.value > 0
    return Tensor(np.where(mask, x.value, 0.0), (x,), "relu", lambda g: (g * mask,))


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = _lift(x)
    y = _sigmoid(x.value)
    return Tensor(y, (x,), "sigmoid", lambda g: (g * y * (1.0 - y),))


def group_softmax(x, group_size: int) -> Tensor:
    """Softmax over consecutive blocks of ``group_size`` columns."""
    x = _lift(x)
    _need_rank2("group_softmax", x)
    n, m = x.shape
    if group_size < 1 or m % group_size:
        raise ShapeError(f"group_softmax: {m} columns do not split into groups of {group_size}")
    z = x.value.reshape(n, m // group_size, group_size)
    e = np.exp(z - z.max(axis=2, keepdims=True))
    y = e / e.sum(axis=2, keepdims=True)

    def back(g):
        g3 = g.reshape(y.shape)
        dot = (g3 * y).sum(axis=2, keepdims=True)
        return ((g3 - dot) * y).reshape(n, m)

    return Tensor(y.reshape(n, m), (x,), "group_softmax", lambda g: (back(g),))


def log(x) -> Tensor:
    x = _lift(x)
    xv = x.value
    if np.any(xv <= 0):
        raise ValueError("log: non-positive input")
    return Tensor(np.log(xv), (x,), "log", lambda g: (g / xv,))


def mean(x) -> Tensor:
    x = _lift(x)
    size = x.value.size
    shape = x.shape
    return Tensor(x.value.mean(), (x,), "mean", lambda g: (np.full(shape, g / size),))


def bce(p, target) -> Tensor:
    """Mean binary cross-entropy of probabilities against 0/1 targets.

    Probabilities are clamped to [1e-7, 1 - 1e-7]; the clamped entries get no
    gradient.
    """
    p = _lift(p)
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), p.shape)
    pc = np.clip(p.value, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (p.value > PROB_CLAMP) & (p.value < 1.0 - PROB_CLAMP)
    size = p.value.size
    val = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc)).mean()

    def back(g):
        return (g * inside * (pc - t) / (pc * (1.0 - pc)) / size,)

    return Tensor(val, (p,), "bce", back)


def bce_logits(z, target) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(z)`` against 0/1 targets.

    Computed from the logits so a saturated discriminator still passes a
    gradient; agrees with ``bce(sigmoid(z), t)`` wherever no clamping occurs.
    """
    z = _lift(z)
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), z.shape)
    zv = z.value
    softplus = np.maximum(zv, 0.0) + np.log1p(np.exp(-np.abs(zv)))
    val = (softplus - t * zv).mean()
    size = zv.size
    return Tensor(val, (z,), "bce_logits", lambda g: (g * (_sigmoid(zv) - t) / size,))


def combine(terms: Sequence, coeffs: Sequence[float], offset: float = 0.0) -> Tensor:
    """Scalar affine combination ``offset + sum_i coeffs[i] * terms[i]``."""
    terms = [_lift(t) for t in terms]
    if len(terms) != len(coeffs):
        raise ShapeError("combine: need one coefficient per term")
    for t in terms:
        if t.value.size != 1:
            raise ShapeError(f"combine: term of shape {t.shape} is not a scalar")
    coeffs = [float(c) for c in coeffs]
    val = offset + sum(c * float(t.value) for c, t in zip(coeffs, terms))
    return Tensor(
        val, terms, "combine", lambda g: tuple(np.full(t.shape, c * g) for c, t in zip(coeffs, terms))
    )


def sl_injection(x, circuit: Circuit, source=None, fixed=None, categorical: bool = False) -> Tensor:
    """Per-row semantic loss of the marginals in ``x`` as an (n, 1) tensor.

    ``source[j]`` names the column of ``x`` feeding circuit variable ``j``, or
    -1 when variable ``j`` takes its value from ``fixed`` (an (n, b) array,
    e.g. clamped code bits).  By default column j feeds variable j.  The
    backward pass hands the circuit gradient to the feeding columns.

    With ``categorical`` the fed columns are one-hot group probabilities and
    the circuit is assumed to require exactly one true literal per group.
    The result is then ``-ln P(valid)`` for a categorical draw per group: each
    probability q enters the circuit as q / (1 + q), which makes the circuit
    count equal ``P(valid) * prod(1 / (1 + q))``, and the product is divided
    back out.
    """
    x = _lift(x)
    _need_rank2("sl_injection", x)
    n, m = x.shape
    b = circuit.num_vars
    src = np.arange(b) if source is None else np.asarray(source, dtype=np.int64)
    if len(src) != b:
        raise ShapeError(f"sl_injection: source map has {len(src)} entries, circuit has {b} variables")
    fed = src >= 0
    if np.any(src[fed] >= m):
        raise ShapeError(f"sl_injection: source column out of range for input of width {m}")
    theta = np.zeros((n, b)) if fixed is None else np.array(np.broadcast_to(fixed, (n, b)), dtype=np.float64)
    if fixed is None and not fed.all():
        raise ShapeError("sl_injection: unfed variables need fixed values")
    q = x.value[:, src[fed]]
    theta[:, fed] = q / (1.0 + q) if categorical else q
    values, grads = semantic_loss_batch(circuit, theta)
    cols = src[fed]
    gfed = grads[:, fed]
    if categorical:
        values = values - np.log1p(q).sum(axis=1)
        gfed = gfed / (1.0 + q) ** 2 - 1.0 / (1.0 + q)

    def back(g):
        gx = np.zeros((n, m))
        np.add.at(gx, (slice(None), cols), g * gfed)
        return (gx,)

    return Tensor(values[:, None], (x,), "sl_injection", back)


# ---------------------------------------------------------------------------
# Reverse pass


def _topo(out: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(out: Tensor, params: Sequence[Tensor] = ()) -> list[np.ndarray]:
    """Accumulate d(out)/d(node) into ``.grad`` for every node that needs it.

    Each node is visited once, in reverse topological order.  Returns the
    gradients of ``params``; a parameter the output does not depend on gets
    an exact zero array.
    """
    if out.value.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {out.shape}")
    order = _topo(out)
    for node in order:
        node.grad = None
    for p in params:
        p.grad = None
    out.grad = np.ones(out.shape)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        for p, g in zip(node.parents, node.backward_fn(node.grad)):
            if not p.requires_grad:
                continue
            g = np.reshape(g, p.shape)
            p.grad = g.copy() if p.grad is None else p.grad + g
    return [np.zeros(p.shape) if p.grad is None else p.grad for p in params]


def relative_error(a, b, floor: float = 1e-3) -> np.ndarray:
    """``|a - b| / max(|a|, |b|, floor)``.

    The floor keeps gradients that are mathematically near zero from turning
    finite-difference round-off into huge ratios.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradient_check(build: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6) -> float:
    """Worst relative error between backward gradients and central differences.

    ``build`` must rebuild the graph from the current parameter values and
    return the scalar output.
    """
    analytic = backward(build(), params)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = float(build().value)
            flat[i] = old - h
            down = float(build().value)
            flat[i] = old
            num[i] = (up - down) / (2 * h)
        if flat.size:
            worst = max(worst, float(relative_error(ga.reshape(-1), num).max()))
    return worst
