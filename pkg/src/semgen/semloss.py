"""Semantic loss, the Lukasiewicz fuzzy baseline, and switchable constraints."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .circuit import Circuit
from .formula import And, Const, Formula, Iff, Node, Not, Or, Var, conj

TRAINING_FLOOR = 1e-30


class InfiniteLoss(ArithmeticError):
    """The constraint has zero probability under the given marginals."""


@dataclass(frozen=True)
class LossValue:
    value: float
    gradient: np.ndarray


def _check_marginals(theta: np.ndarray):
    if np.any(theta < 0) or np.any(theta > 1) or np.any(np.isnan(theta)):
        raise ValueError("marginals must lie in [0, 1]")


def semantic_loss(c: Circuit, theta) -> LossValue:
    """``-ln P(constraint)`` for independent Bernoulli(theta) variables, with
    its exact gradient.  Raises :class:`InfiniteLoss` when the probability is 0.
    """
    theta = np.asarray(theta, dtype=np.float64)
    _check_marginals(theta)
    w, g, under = c.wmc_and_gradient(theta, report_underflow=True)
    if w > 0 and not under:
        return LossValue(-math.log(w), -g / w)
    lw, lg = c.log_wmc_and_gradient(theta)
    if lw == -np.inf:
        raise InfiniteLoss("all probability mass is on infeasible configurations")
    return LossValue(-lw, -lg)


def semantic_loss_batch(c: Circuit, theta, floor: float = TRAINING_FLOOR):
    """Per-row semantic loss and gradient for an (n, b) batch.

    Rows whose probability is exactly zero are reported as ``-ln(floor)`` with
    zero gradient, so the result is always finite.  Rows with a positive but
    tiny probability keep their exact value via the log-space pass.
    """
    t2 = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    w, g, under = c.wmc_and_gradient(t2, report_underflow=True)
    bad = under | (w <= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        values, grads = -np.log(w), -g / w[:, None]
    if bad.any():
        lw, lg = c.log_wmc_and_gradient(t2[bad])
        dead = ~np.isfinite(lw)
        values[bad] = np.where(dead, -math.log(floor), -lw)
        grads[bad] = np.where(dead[:, None], 0.0, -lg)
    return values, grads


# ---------------------------------------------------------------------------
# Lukasiewicz fuzzy logic


def fuzzy_truth(f: Formula, theta) -> float:
    """Lukasiewicz truth value of ``f``.  Only And/Or/Not/Var/Const are
    accepted; run :func:`semgen.formula.desugar` first for the rest."""
    theta = np.asarray(theta, dtype=np.float64)
    if len(theta) != f.num_vars:
        raise ValueError(f"marginal vector has length {len(theta)}, formula has {f.num_vars}")
    env = dict(zip(f.variables, theta.tolist()))

    def go(n: Node) -> float:
        if isinstance(n, Var):
            return env[n.name]
        if isinstance(n, Const):
            return 1.0 if n.value else 0.0
        if isinstance(n, Not):
            return 1.0 - go(n.child)
        if isinstance(n, And):
            acc = go(n.children[0])
            for ch in n.children[1:]:
                acc = max(0.0, acc + go(ch) - 1.0)
            return acc
        if isinstance(n, Or):
            acc = go(n.children[0])
            for ch in n.children[1:]:
                acc = min(1.0, acc + go(ch))
            return acc
        raise ValueError(f"connective {type(n).__name__} must be desugared first")

    return go(f.root)


def fuzzy_loss(f: Formula, theta) -> float:
    """``-ln`` of the Lukasiewicz truth value; raises InfiniteLoss at truth 0."""
    t = fuzzy_truth(f, theta)
    if t <= 0.0:
        raise InfiniteLoss("fuzzy truth value is 0")
    return 0.0 if t >= 1.0 else -math.log(t)


# ---------------------------------------------------------------------------
# Switchable constraints


@dataclass(frozen=True)
class ConditionalSpec:
    """Sub-constraints bound to code bits: ``c_i <-> psi_i`` for each i.

    ``prior`` maps code tuples to probabilities.
    """

    constraints: tuple
    code_names: tuple
    prior: Mapping[tuple, float] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.constraints) != len(self.code_names):
            raise ValueError("need one code name per sub-constraint")
        if len(set(self.code_names)) != len(self.code_names):
            raise ValueError("duplicate code names")
        if self.prior:
            total = sum(self.prior.values())
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"code prior sums to {total}, not 1")
            for code in self.prior:
                if len(code) != len(self.code_names):
                    raise ValueError(f"prior entry {code} has the wrong length")

    @property
    def k(self) -> int:
        return len(self.code_names)


def estimate_prior(codes: Sequence[Sequence[int]]) -> dict[tuple, float]:
    """Empirical frequency table of code vectors."""
    counts = Counter(tuple(int(x) for x in c) for c in codes)
    n = sum(counts.values())
    if n == 0:
        raise ValueError("cannot estimate a prior from no data")
    return {code: counts[code] / n for code in sorted(counts)}


def build_conditional(spec: ConditionalSpec, base: Formula | None = None) -> Formula:
    """``AND_i (c_i <-> psi_i)``, optionally conjoined with an always-on
    ``base`` constraint.

    The variable table lists the code variables first, then the union of the
    sub-constraint (and base) variables in first-occurrence order.
    """
    inner: dict[str, None] = {}
    for f in ([base] if base is not None else []) + list(spec.constraints):
        for name in f.variables:
            inner.setdefault(name, None)
    clash = set(spec.code_names) & set(inner)
    if clash:
        raise ValueError(f"code variables collide with constraint variables: {sorted(clash)}")
    parts = [Iff(Var(c), f.root) for c, f in zip(spec.code_names, spec.constraints)]
    if base is not None:
        parts = [base.root] + parts
    return Formula(conj(parts), tuple(spec.code_names) + tuple(inner))


def clamp_codes(theta, code, code_idx) -> np.ndarray:
    """Copy of ``theta`` with the code variables set to the code bits."""
    t = np.array(theta, dtype=np.float64)
    code = np.asarray(code, dtype=np.float64)
    code_idx = np.asarray(code_idx, dtype=np.int64)
    if code.shape[-1] != len(code_idx):
        raise ValueError(f"code has length {code.shape[-1]}, expected {len(code_idx)}")
    t[..., code_idx] = code
    return t


def conditional_semantic_loss(c: Circuit, theta, code, code_idx) -> LossValue:
    """Semantic loss with the code variables clamped to ``code``.

    The returned gradient covers only the non-code variables, in index order.
    """
    t = clamp_codes(theta, code, code_idx)
    loss = semantic_loss(c, t)
    keep = np.setdiff1d(np.arange(c.num_vars), np.asarray(code_idx))
    return LossValue(loss.value, loss.gradient[keep])
