import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semgen.circuit import COUNTERS, Circuit, CompilationBlowup, compile
from semgen.formula import FALSE, TRUE, And, Formula, Var, enumerate_models, evaluate, parse_dsl

from conftest import brute_wmc, formulas


def thetas(b, seed):
    return np.random.default_rng(seed).random(b)


def test_xor_example():
    c = compile(parse_dsl("x ^ y"))
    assert c.node_count == 3
    assert c.model_count() == 2
    w, g = c.wmc_and_gradient([0.3, 0.8])
    assert w == pytest.approx(0.62, abs=1e-15)
    assert g == pytest.approx([-0.6, 0.4], abs=1e-15)


def test_conjunction_and_constants():
    c = compile(parse_dsl("x & y"))
    assert c.node_count == 2
    assert c.wmc([0.5, 0.5]) == pytest.approx(0.25)
    t = compile(Formula(TRUE, ("a", "b")))
    assert t.node_count == 0 and t.model_count() == 4 and t.wmc([0.2, 0.9]) == 1.0
    f = compile(Formula(FALSE, ("a",)))
    assert f.node_count == 0 and f.model_count() == 0 and f.wmc([0.3]) == 0.0
    assert compile(parse_dsl("x & !x")).node_count == 0


def test_node_ids_are_topological():
    c = compile(parse_dsl("(a | b) & (c ^ d) & (a -> d)"))
    ids = np.arange(2, len(c.var))
    assert np.all(c.lo[2:] < ids) and np.all(c.hi[2:] < ids)
    assert c.root == len(c.var) - 1


@given(formulas(max_vars=8))
@settings(max_examples=150, deadline=None)
def test_wmc_matches_truth_table(f):
    c = compile(f)
    for seed in range(3):
        t = thetas(f.num_vars, seed)
        assert abs(c.wmc(t) - brute_wmc(f, t)) <= 1e-12


@given(formulas(max_vars=8))
@settings(max_examples=100, deadline=None)
def test_model_count_and_validity_match_enumeration(f):
    c = compile(f)
    models = set(enumerate_models(f))
    assert c.model_count() == len(models)
    from semgen.formula import all_assignments

    rows = all_assignments(f.num_vars)
    checked = c.check_batch(rows)
    assert checked.tolist() == [tuple(r) in models for r in rows.tolist()]
    for r in rows[:8]:
        assert c.check_validity(r) == evaluate(f, r)


@given(formulas(max_vars=7))
@settings(max_examples=100, deadline=None)
def test_gradient_is_conditioning_difference(f):
    c = compile(f)
    t = thetas(f.num_vars, 7)
    _, g = c.wmc_and_gradient(t)
    for i in range(f.num_vars):
        diff = c.condition(i, 1).wmc(t) - c.condition(i, 0).wmc(t)
        assert abs(g[i] - diff) <= 1e-12


@given(formulas(max_vars=6), st.permutations(range(6)))
@settings(max_examples=80, deadline=None)
def test_order_changes_shape_not_semantics(f, perm):
    order = [p for p in perm if p < f.num_vars]
    a, b = compile(f), compile(f, order=order)
    t = thetas(f.num_vars, 3)
    assert abs(a.wmc(t) - b.wmc(t)) <= 1e-12
    assert a.model_count() == b.model_count()


def test_canonical_form_for_equivalent_formulas():
    names = ("x", "y")
    a = compile(Formula(parse_dsl("x ^ y").root, names))
    b = compile(Formula(parse_dsl("(x | y) & (!x | !y)").root, names))
    c = compile(Formula(parse_dsl("(x & !y) | (!x & y)").root, names))
    assert a == b == c


def test_batch_matches_single(rng):
    f = parse_dsl("(a | b) & (b -> c) & (c ^ d | a)")
    c = compile(f)
    batch = rng.random((20, f.num_vars))
    w, g = c.wmc_and_gradient(batch)
    for row, wi, gi in zip(batch, w, g):
        ws, gs = c.wmc_and_gradient(row)
        assert wi == pytest.approx(ws, abs=1e-15)
        assert np.allclose(gi, gs, atol=1e-15)


@given(formulas(max_vars=8))
@settings(max_examples=80, deadline=None)
def test_log_space_agrees_with_linear(f):
    c = compile(f)
    t = np.clip(thetas(f.num_vars, 11), 0.01, 0.99)
    w, g = c.wmc_and_gradient(t)
    lw, lg = c.log_wmc_and_gradient(t)
    if w == 0:
        assert lw == -np.inf
    else:
        assert lw == pytest.approx(np.log(w), rel=1e-12, abs=1e-12)
        assert np.allclose(lg, g / w, rtol=1e-9, atol=1e-12)


def test_log_space_survives_underflow():
    names = tuple(f"v{i}" for i in range(400))
    f = Formula(And(tuple(Var(n) for n in names)), names)
    c = compile(f)
    t = np.full(400, 0.1)
    assert c.wmc(t) == 0.0
    assert c.underflows(np.full(400, 0.5)) is False
    assert c.underflows(np.full(400, 0.1)) is True
    lw, lg = c.log_wmc_and_gradient(t)
    assert lw == pytest.approx(400 * np.log(0.1), rel=1e-12)
    assert np.allclose(lg, 10.0)


def test_wmc_length_check():
    c = compile(parse_dsl("x | y"))
    with pytest.raises(ValueError, match="length"):
        c.wmc([0.5])
    with pytest.raises(ValueError, match="length"):
        c.check_validity([1])


def test_condition_out_of_range():
    c = compile(parse_dsl("x | y"))
    with pytest.raises(IndexError):
        c.condition(2, 1)


def test_condition_drops_the_variable():
    c = compile(parse_dsl("x & y | z"))
    d = c.condition(0, 1)
    assert 0 not in set(d.var[2:].tolist())
    assert d.wmc([0.0, 0.5, 0.5]) == pytest.approx(0.75)


def test_node_budget():
    f = parse_dsl(" & ".join(f"(a{i} ^ b{i})" for i in range(10)))
    with pytest.raises(CompilationBlowup) as err:
        compile(f, max_nodes=5)
    assert err.value.cap == 5


def test_bad_order_rejected():
    with pytest.raises(ValueError, match="permutation"):
        compile(parse_dsl("x | y"), order=["x", "x"])


@given(formulas(max_vars=8))
@settings(max_examples=60, deadline=None)
def test_serialisation_round_trip(f):
    c = compile(f)
    assert Circuit.loads(c.dumps()) == c


@pytest.mark.parametrize(
    "text",
    [
        "",
        "semgen-circuit 9\nvars 0\nnames \norder \nroot 0\nnodes 0\n",
        "semgen-circuit 1\nvars 1\nnames x\norder 0\nroot 2\nnodes 1\n2 0 3 1\n",
        "semgen-circuit 1\nvars 1\nnames x\norder 0\nroot 2\nnodes 2\n2 0 0 1\n",
    ],
)
def test_malformed_circuit_files(text):
    with pytest.raises(ValueError):
        Circuit.loads(text)


def test_counters_track_work():
    c = compile(parse_dsl("x ^ y"))
    COUNTERS.reset()
    c.wmc_and_gradient([0.2, 0.4])
    c.check_validity([1, 0])
    snap = COUNTERS.snapshot()
    assert snap["wmc_passes"] == 1
    assert snap["forward_visits"] == 3 and snap["backward_visits"] == 3
    assert snap["checks"] == 1 and COUNTERS.total == 2


def test_stats_and_depth():
    c = compile(parse_dsl("a & b & c"))
    assert c.stats() == {"nodes": 3, "variables": 3, "depth": 3, "models": 1}
