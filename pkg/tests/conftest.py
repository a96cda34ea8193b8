import sys

import numpy as np
import pytest
from hypothesis import strategies as st

from semgen.formula import And, Const, Formula, Iff, Implies, Not, Or, Var, Xor, truth_table


def random_node(rng, names, depth):
    """Random expression over ``names`` using every connective."""
    if depth == 0 or rng.random() < 0.25:
        if rng.random() < 0.05:
            return Const(bool(rng.integers(2)))
        return Var(names[rng.integers(len(names))])
    kind = rng.integers(6)
    if kind == 0:
        return Not(random_node(rng, names, depth - 1))
    if kind in (1, 2):
        k = int(rng.integers(2, 4))
        parts = tuple(random_node(rng, names, depth - 1) for _ in range(k))
        return And(parts) if kind == 1 else Or(parts)
    cls = (Implies, Iff, Xor)[kind - 3]
    return cls(random_node(rng, names, depth - 1), random_node(rng, names, depth - 1))


def random_formula(rng, max_vars=12, depth=5) -> Formula:
    b = int(rng.integers(1, max_vars + 1))
    names = tuple(f"x{i}" for i in range(b))
    return Formula(random_node(rng, names, depth), names)


def brute_wmc(f: Formula, theta) -> float:
    """Sum over the truth table, one product per satisfying row."""
    from semgen.formula import all_assignments

    theta = np.asarray(theta, dtype=np.float64)
    rows = all_assignments(f.num_vars).astype(np.float64)
    sat = truth_table(f)
    w = np.prod(np.where(rows == 1, theta, 1.0 - theta), axis=1)
    return float(w[sat].sum())


@st.composite
def formulas(draw, max_vars=6, depth=4):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    return random_formula(rng, max_vars, depth)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
