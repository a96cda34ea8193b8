import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semgen.circuit import compile
from semgen.formula import Formula, enumerate_models, parse_dsl
from semgen.semloss import (
    ConditionalSpec,
    InfiniteLoss,
    build_conditional,
    conditional_semantic_loss,
    estimate_prior,
    fuzzy_loss,
    fuzzy_truth,
    semantic_loss,
    semantic_loss_batch,
)

from conftest import brute_wmc, formulas

CNF_XOR = parse_dsl("(x | y) & (!x | !y)")
DNF_XOR = parse_dsl("(x & !y) | (!x & y)")


def test_xor_loss_value():
    c = compile(parse_dsl("x ^ y"))
    loss = semantic_loss(c, [0.3, 0.8])
    assert loss.value == pytest.approx(-math.log(0.62), abs=1e-14)
    assert loss.gradient == pytest.approx([0.6 / 0.62, -0.4 / 0.62], abs=1e-14)


def test_satisfied_deterministically_is_zero():
    c = compile(parse_dsl("x ^ y"))
    assert semantic_loss(c, [1.0, 0.0]).value == 0.0


def test_zero_probability_raises():
    c = compile(parse_dsl("x & y"))
    with pytest.raises(InfiniteLoss):
        semantic_loss(c, [0.0, 0.7])
    with pytest.raises(InfiniteLoss):
        semantic_loss(compile(parse_dsl("x & !x")), [0.5])


def test_marginals_out_of_range():
    c = compile(parse_dsl("x | y"))
    with pytest.raises(ValueError):
        semantic_loss(c, [1.2, 0.3])
    with pytest.raises(ValueError):
        semantic_loss(c, [np.nan, 0.3])


@given(formulas(max_vars=8), st.integers(0, 10_000))
@settings(max_examples=100, deadline=None)
def test_loss_is_minus_log_brute_force(f, seed):
    t = np.random.default_rng(seed).uniform(0.05, 0.95, f.num_vars)
    w = brute_wmc(f, t)
    c = compile(f)
    if w == 0:
        with pytest.raises(InfiniteLoss):
            semantic_loss(c, t)
        return
    loss = semantic_loss(c, t)
    assert loss.value == pytest.approx(-math.log(w), rel=1e-10, abs=1e-12)
    assert loss.value >= -1e-15


@given(formulas(max_vars=7), st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_gradient_matches_finite_differences(f, seed):
    t = np.random.default_rng(seed).uniform(0.1, 0.9, f.num_vars)
    c = compile(f)
    if brute_wmc(f, t) < 1e-6:
        return
    g = semantic_loss(c, t).gradient
    h = 1e-6
    for i in range(f.num_vars):
        up, down = t.copy(), t.copy()
        up[i] += h
        down[i] -= h
        num = (semantic_loss(c, up).value - semantic_loss(c, down).value) / (2 * h)
        assert abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-3) < 1e-5


def test_equivalent_encodings_agree(rng):
    names = ("x", "y")
    a = compile(Formula(CNF_XOR.root, names))
    b = compile(Formula(DNF_XOR.root, names))
    for t in rng.random((100, 2)):
        assert abs(semantic_loss(a, t).value - semantic_loss(b, t).value) <= 1e-12


def test_fuzzy_losses_depend_on_encoding():
    assert fuzzy_truth(CNF_XOR, [0.5, 0.5]) == 1.0
    assert fuzzy_truth(DNF_XOR, [0.5, 0.5]) == 0.0
    assert fuzzy_loss(CNF_XOR, [0.5, 0.5]) == 0.0
    with pytest.raises(InfiniteLoss):
        fuzzy_loss(DNF_XOR, [0.5, 0.5])


def test_fuzzy_truth_examples():
    assert fuzzy_truth(parse_dsl("x & y"), [0.7, 0.6]) == pytest.approx(0.3)
    assert fuzzy_truth(parse_dsl("x | y"), [0.7, 0.6]) == 1.0
    assert fuzzy_truth(parse_dsl("!x"), [0.25]) == 0.75
    with pytest.raises(ValueError, match="desugared"):
        fuzzy_truth(parse_dsl("x ^ y"), [0.5, 0.5])
    with pytest.raises(ValueError):
        fuzzy_truth(parse_dsl("x"), [0.5, 0.5])


def test_fuzzy_agrees_with_boolean_on_corners():
    from semgen.formula import all_assignments, desugar, evaluate

    f = desugar(parse_dsl("(a -> b) & (b <-> !c) | a ^ c"))
    for row in all_assignments(f.num_vars):
        assert fuzzy_truth(f, row) == float(evaluate(f, row))


def test_batch_matches_single(rng):
    c = compile(parse_dsl("(a | b) & (c ^ d)"))
    t = rng.uniform(0.05, 0.95, (12, 4))
    v, g = semantic_loss_batch(c, t)
    for row, vi, gi in zip(t, v, g):
        one = semantic_loss(c, row)
        assert vi == pytest.approx(one.value, abs=1e-13)
        assert np.allclose(gi, one.gradient, atol=1e-12)


def test_batch_dead_rows_are_floored():
    c = compile(parse_dsl("x & y"))
    v, g = semantic_loss_batch(c, [[0.0, 0.5], [0.5, 0.5]], floor=1e-30)
    assert v[0] == pytest.approx(-math.log(1e-30))
    assert np.all(g[0] == 0.0)
    assert v[1] == pytest.approx(math.log(4))


def test_batch_tiny_rows_stay_exact():
    names = tuple(f"v{i}" for i in range(400))
    c = compile(parse_dsl(" & ".join(names)))
    t = np.vstack([np.full(400, 0.1), np.full(400, 0.9)])
    v, g = semantic_loss_batch(c, t)
    assert v[0] == pytest.approx(-400 * math.log(0.1), rel=1e-12)
    assert v[1] == pytest.approx(-400 * math.log(0.9), rel=1e-12)
    assert np.allclose(g[0], -10.0)


def _conditional():
    psi = (parse_dsl("a & b"), parse_dsl("!c"))
    spec = ConditionalSpec(psi, ("k1", "k2"), {(0, 0): 0.5, (1, 1): 0.5})
    return spec, build_conditional(spec)


def test_conditional_formula_layout():
    spec, f = _conditional()
    assert f.variables == ("k1", "k2", "a", "b", "c")
    models = enumerate_models(f)
    for m in models:
        k1, k2, a, b, c = m
        assert k1 == (a and b) and k2 == (not c)
    assert len(models) == 8


def test_conditional_loss_clamps_codes():
    spec, f = _conditional()
    c = compile(f)
    t = np.array([0.5, 0.5, 0.9, 0.8, 0.3])
    on = conditional_semantic_loss(c, t, [1, 1], [0, 1])
    assert on.value == pytest.approx(-math.log(0.72 * 0.7))
    assert on.gradient.shape == (3,)
    off = conditional_semantic_loss(c, t, [0, 0], [0, 1])
    assert off.value == pytest.approx(-math.log(0.28 * 0.3))


def test_conditional_spec_validation():
    psi = (parse_dsl("a"),)
    with pytest.raises(ValueError):
        ConditionalSpec(psi, ("k1", "k2"))
    with pytest.raises(ValueError):
        ConditionalSpec(psi + psi, ("k", "k"))
    with pytest.raises(ValueError, match="sums"):
        ConditionalSpec(psi, ("k",), {(0,): 0.3})
    with pytest.raises(ValueError, match="collide"):
        build_conditional(ConditionalSpec(psi, ("a",)))


def test_estimate_prior():
    prior = estimate_prior([[0, 1], [0, 1], [1, 1], [0, 0]])
    assert prior == {(0, 0): 0.25, (0, 1): 0.5, (1, 1): 0.25}
    with pytest.raises(ValueError):
        estimate_prior([])
