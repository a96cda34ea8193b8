import numpy as np
import pytest
from hypothesis import given, settings

from semgen.formula import (
    FALSE,
    TRUE,
    And,
    Formula,
    FormulaSyntaxError,
    Iff,
    Implies,
    MAX_ENUM_VARS,
    Not,
    Or,
    Var,
    Xor,
    all_assignments,
    collect_variables,
    conj,
    desugar,
    disj,
    enumerate_models,
    evaluate,
    evaluate_batch,
    parse_dimacs,
    parse_dsl,
    pretty,
    to_dimacs,
    truth_table,
)

from conftest import formulas

x, y, z = Var("x"), Var("y"), Var("z")


def test_cnf_xor_parses_to_expected_tree():
    f = parse_dsl("(x | y) & (!x | !y)")
    assert f.root == And((Or((x, y)), Or((Not(x), Not(y)))))
    assert f.variables == ("x", "y")


@pytest.mark.parametrize(
    "text, tree",
    [
        ("x | y & z", Or((x, And((y, z))))),
        ("x ^ y | z", Xor(x, Or((y, z)))),
        ("x -> y ^ z", Implies(x, Xor(y, z))),
        ("x <-> y -> z", Iff(x, Implies(y, z))),
        ("x -> y -> z", Implies(x, Implies(y, z))),
        ("x ^ y ^ z", Xor(Xor(x, y), z)),
        ("x <-> y <-> z", Iff(Iff(x, y), z)),
        ("!x & y", And((Not(x), y))),
        ("!!x", Not(Not(x))),
        ("true & false", And((TRUE, FALSE))),
    ],
)
def test_precedence_and_associativity(text, tree):
    assert parse_dsl(text).root == tree


def test_comments_and_newlines():
    f = parse_dsl("# header\nx &  # first\n  y\n")
    assert f.root == And((x, y))


@pytest.mark.parametrize(
    "text, line, column",
    [
        ("x & & y", 1, 5),
        ("x &", 1, 3),
        ("x\n& (y", 2, 3),
        ("x $ y", 1, 3),
        ("x y", 1, 3),
    ],
)
def test_syntax_errors_carry_position(text, line, column):
    with pytest.raises(FormulaSyntaxError) as err:
        parse_dsl(text)
    assert (err.value.line, err.value.column) == (line, column)
    assert f"line {line}, column {column}" in str(err.value)


def test_dangling_operator_message():
    with pytest.raises(FormulaSyntaxError, match="dangling operator '&' at line 1, column 3"):
        parse_dsl("x &")


@pytest.mark.parametrize("text", ["", "   ", "# only a comment\n"])
def test_empty_input_is_an_error(text):
    with pytest.raises(FormulaSyntaxError):
        parse_dsl(text)


@given(formulas())
@settings(max_examples=150, deadline=None)
def test_pretty_round_trip_preserves_semantics(f):
    g = parse_dsl(pretty(f))
    g = Formula(g.root, f.variables)
    assert np.array_equal(truth_table(f), truth_table(g))


def test_pretty_is_fully_parenthesised():
    assert pretty(parse_dsl("x | y & !z")) == "(x | (y & !z))"
    assert pretty(And((x,))) == "x"


def test_dimacs_examples():
    f = parse_dimacs("p cnf 2 2\n1 2 0\n-1 -2 0")
    assert f.root == And((Or((Var("v1"), Var("v2"))), Or((Not(Var("v1")), Not(Var("v2"))))))
    g = parse_dimacs("p cnf 1 1\n1 0")
    assert g.root == Var("v1") and g.variables == ("v1",)


def test_dimacs_declares_all_variables_in_order():
    f = parse_dimacs("c comment\np cnf 4 1\n3 -1 0\n")
    assert f.variables == ("v1", "v2", "v3", "v4")


def test_dimacs_clause_may_span_lines_and_percent_ends_input():
    f = parse_dimacs("p cnf 3 1\n1 2\n3 0\n%\n0\n")
    assert f.root == Or((Var("v1"), Var("v2"), Var("v3")))


def test_dimacs_empty_clause_is_false():
    f = parse_dimacs("p cnf 1 2\n1 0\n0\n")
    assert enumerate_models(f) == []


@pytest.mark.parametrize(
    "text, match",
    [
        ("p cnf 2 1\n1 3 0", "exceeds"),
        ("p cnf 2 2\n1 2 0", "declares 2 clauses"),
        ("1 2 0", "before problem line"),
        ("", "missing problem line"),
        ("p cnf 2 1\n1 -0", "index 0"),
        ("p cnf 2 1\n1 2", "not terminated"),
        ("p cnf x 1\n1 0", "bad problem line"),
        ("p cnf 2 1\n1 a 0", "bad literal"),
    ],
)
def test_dimacs_errors(text, match):
    with pytest.raises(FormulaSyntaxError, match=match):
        parse_dimacs(text)


def test_dimacs_round_trip():
    text = "p cnf 3 3\n1 -2 0\n2 3 0\n-1 -3 0\n"
    f = parse_dimacs(text)
    assert to_dimacs(f) == text
    assert parse_dimacs(to_dimacs(f)) == f


def test_to_dimacs_rejects_non_cnf():
    with pytest.raises(ValueError):
        to_dimacs(parse_dsl("x ^ y"))


def test_evaluate_and_length_check():
    f = parse_dsl("x -> y")
    assert [evaluate(f, a) for a in ([0, 0], [0, 1], [1, 0], [1, 1])] == [True, True, False, True]
    with pytest.raises(ValueError, match="length"):
        evaluate(f, [1])


@given(formulas())
@settings(max_examples=100, deadline=None)
def test_batch_evaluation_matches_scalar(f):
    rows = all_assignments(f.num_vars)
    batch = evaluate_batch(f, rows)
    assert batch.tolist() == [evaluate(f, r) for r in rows]


def test_all_assignments_order():
    assert all_assignments(2).tolist() == [[0, 0], [0, 1], [1, 0], [1, 1]]
    assert all_assignments(0).shape == (1, 0)


def test_enumerate_models_examples():
    assert enumerate_models(parse_dsl("x ^ y")) == [(0, 1), (1, 0)]
    assert enumerate_models(parse_dsl("x & !x")) == []
    assert enumerate_models(Formula(TRUE)) == [()]


def test_equivalent_encodings_have_identical_models():
    cnf = parse_dsl("(x | y) & (!x | !y)")
    xor = parse_dsl("x ^ y")
    dnf = parse_dsl("(x & !y) | (!x & y)")
    assert enumerate_models(cnf) == enumerate_models(xor) == enumerate_models(dnf)


def test_enumeration_guard():
    names = tuple(f"v{i}" for i in range(MAX_ENUM_VARS + 1))
    f = Formula(Var("v0"), names)
    with pytest.raises(ValueError, match="guard"):
        enumerate_models(f)


@given(formulas())
@settings(max_examples=100, deadline=None)
def test_desugar_preserves_models_and_removes_sugar(f):
    d = desugar(f)
    assert np.array_equal(truth_table(f), truth_table(d))

    def plain(n):
        if isinstance(n, (Implies, Iff, Xor)):
            return False
        if isinstance(n, Not):
            return plain(n.child)
        if isinstance(n, (And, Or)):
            return all(plain(c) for c in n.children)
        return True

    assert plain(d.root)


def test_formula_table_checks():
    with pytest.raises(ValueError, match="missing"):
        Formula(And((x, y)), ("x",))
    with pytest.raises(ValueError, match="duplicate"):
        Formula(x, ("x", "x"))
    f = Formula(x, ("a", "x"))
    assert f.num_vars == 2 and f.index() == {"a": 0, "x": 1}


def test_helpers():
    assert conj([]) == TRUE and disj([]) == FALSE
    assert conj([x]) == x
    assert collect_variables(parse_dsl("(b | a) & b & c").root) == ["b", "a", "c"]
