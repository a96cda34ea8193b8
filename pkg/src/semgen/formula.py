"""Propositional formulas: AST, DSL and DIMACS parsers, evaluation and a
brute-force model enumerator.

The enumerator is deliberately naive (a full truth table) so that it can act
as ground truth for the compiled circuits.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

MAX_ENUM_VARS = 24

RESERVED = frozenset({"true", "false"})


class FormulaSyntaxError(ValueError):
    """Raised for malformed DSL or DIMACS input.  Carries 1-based line/column."""

    def __init__(self, message: str, line: int = 0, column: int = 0):
        self.line = line
        self.column = column
        where = f" at line {line}, column {column}" if line else ""
        super().__init__(f"{message}{where}")


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Const:
    value: bool


@dataclass(frozen=True)
class Not:
    child: "Node"


@dataclass(frozen=True)
class And:
    children: tuple

    def __post_init__(self):
        if not self.children:
            raise ValueError("And needs at least one child")


@dataclass(frozen=True)
class Or:
    children: tuple

    def __post_init__(self):
        if not self.children:
            raise ValueError("Or needs at least one child")


@dataclass(frozen=True)
class Implies:
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Iff:
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Xor:
    left: "Node"
    right: "Node"


Node = Union[Var, Const, Not, And, Or, Implies, Iff, Xor]

TRUE = Const(True)
FALSE = Const(False)


def children(node: Node) -> tuple:
    if isinstance(node, (Var, Const)):
        return ()
    if isinstance(node, Not):
        return (node.child,)
    if isinstance(node, (And, Or)):
        return node.children
    return (node.left, node.right)


def conj(parts: Iterable[Node]) -> Node:
    """And over ``parts``; the empty conjunction is ``true``."""
    parts = tuple(parts)
    if not parts:
        return TRUE
    if len(parts) == 1:
        return parts[0]
    return And(parts)


def disj(parts: Iterable[Node]) -> Node:
    """Or over ``parts``; the empty disjunction is ``false``."""
    parts = tuple(parts)
    if not parts:
        return FALSE
    if len(parts) == 1:
        return parts[0]
    return Or(parts)


def collect_variables(node: Node) -> list[str]:
    """Variable names in left-to-right first-occurrence order."""
    seen: dict[str, None] = {}
    done: set[int] = set()
    stack = [node]
    while stack:
        n = stack.pop()
        if isinstance(n, Var):
            seen.setdefault(n.name, None)
            continue
        key = id(n)
        if key in done:
            continue
        done.add(key)
        stack.extend(reversed(children(n)))
    return list(seen)


@dataclass(frozen=True)
class Formula:
    """An expression tree together with its ordered variable table.

    ``variables`` may list names that do not occur in the tree (DIMACS headers
    declare them, grid encodings need every literal), but every name in the
    tree must appear in it exactly once.
    """

    root: Node
    variables: tuple = field(default=None)

    def __post_init__(self):
        used = collect_variables(self.root)
        if self.variables is None:
            object.__setattr__(self, "variables", tuple(used))
            return
        names = tuple(self.variables)
        if len(set(names)) != len(names):
            raise ValueError("duplicate names in variable table")
        missing = set(used) - set(names)
        if missing:
            raise ValueError(f"variables missing from table: {sorted(missing)}")
        object.__setattr__(self, "variables", names)

    @property
    def num_vars(self) -> int:
        return len(self.variables)

    def index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.variables)}

    def __str__(self) -> str:
        return pretty(self)


# ---------------------------------------------------------------------------
# DSL

_TOKEN = re.compile(
    r"(?P<ws>[ \t\r]+)|(?P<nl>\n)|(?P<comment>\#[^\n]*)"
    r"|(?P<op><->|->|[!&|^()])|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
)


def _tokenize(text: str) -> list[tuple[str, int, int]]:
    tokens = []
    line, line_start, pos = 1, 0, 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise FormulaSyntaxError(
                f"unexpected character {text[pos]!r}", line, pos - line_start + 1
            )
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind in ("op", "name"):
            tokens.append((m.group(), line, pos - line_start + 1))
        pos = m.end()
    return tokens


class _Parser:
    # loosest first; each level parses the next tighter one
    _BINARY = ("<->", "->", "^", "|", "&")

    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos][0] if self.pos < len(self.tokens) else None

    def take(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def fail_operand(self):
        if self.pos < len(self.tokens):
            tok, line, col = self.tokens[self.pos]
            raise FormulaSyntaxError(f"expected operand, found {tok!r}", line, col)
        tok, line, col = self.tokens[self.pos - 1]
        raise FormulaSyntaxError(f"dangling operator {tok!r}", line, col)

    def parse(self):
        node = self.level(0)
        if self.pos < len(self.tokens):
            tok, line, col = self.tokens[self.pos]
            raise FormulaSyntaxError(f"unexpected token {tok!r}", line, col)
        return node

    def level(self, depth):
        if depth == len(self._BINARY):
            return self.unary()
        op = self._BINARY[depth]
        left = self.level(depth + 1)
        if op in ("&", "|"):
            parts = [left]
            while self.peek() == op:
                self.take()
                parts.append(self.level(depth + 1))
            if len(parts) == 1:
                return left
            return And(tuple(parts)) if op == "&" else Or(tuple(parts))
        if op == "->":
            if self.peek() == op:
                self.take()
                return Implies(left, self.level(depth))  # right associative
            return left
        cls = Xor if op == "^" else Iff
        while self.peek() == op:
            self.take()
            left = cls(left, self.level(depth + 1))
        return left

    def unary(self):
        tok = self.peek()
        if tok is None:
            self.fail_operand()
        if tok == "!":
            self.take()
            return Not(self.unary())
        if tok == "(":
            _, line, col = self.take()
            node = self.level(0)
            if self.peek() != ")":
                raise FormulaSyntaxError("unclosed parenthesis", line, col)
            self.take()
            return node
        if tok in ("true", "false"):
            self.take()
            return Const(tok == "true")
        if tok[0].isalpha() or tok[0] == "_":
            self.take()
            return Var(tok)
        self.fail_operand()


def parse_dsl(text: str) -> Formula:
    """Parse the constraint DSL.

    Operators by decreasing precedence: ``!``, ``&``, ``|``, ``^``, ``->``,
    ``<->``.  ``->`` associates to the right, ``^`` and ``<->`` to the left.
    ``#`` starts a comment running to the end of the line.
    """
    tokens = _tokenize(text)
    if not tokens:
        raise FormulaSyntaxError("empty input")
    return Formula(_Parser(tokens).parse())


def _pretty(node: Node) -> str:
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Const):
        return "true" if node.value else "false"
    if isinstance(node, Not):
        return "!" + _pretty(node.child)
    if isinstance(node, (And, Or)):
        if len(node.children) == 1:
            return _pretty(node.children[0])
        sep = " & " if isinstance(node, And) else " | "
        return "(" + sep.join(_pretty(c) for c in node.children) + ")"
    sym = {Implies: "->", Iff: "<->", Xor: "^"}[type(node)]
    return f"({_pretty(node.left)} {sym} {_pretty(node.right)})"


def pretty(f: Union[Formula, Node]) -> str:
    """Fully parenthesised DSL text; ``parse_dsl`` inverts it."""
    return _pretty(f.root if isinstance(f, Formula) else f)


# ---------------------------------------------------------------------------
# DIMACS


def parse_dimacs(text: str) -> Formula:
    """Parse DIMACS CNF.  Variable ``i`` becomes ``v<i>``; the table lists all
    declared variables ``v1..vV`` in numeric order."""
    header = None
    clauses: list[list[int]] = []
    current: list[int] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("c"):
            continue
        if line.startswith("%"):
            break
        if line.startswith("p"):
            parts = line.split()
            if header is not None:
                raise FormulaSyntaxError("duplicate problem line", lineno, 1)
            if len(parts) != 4 or parts[1] != "cnf":
                raise FormulaSyntaxError(f"bad problem line {line!r}", lineno, 1)
            try:
                header = (int(parts[2]), int(parts[3]))
            except ValueError:
                raise FormulaSyntaxError(f"bad problem line {line!r}", lineno, 1) from None
            continue
        if header is None:
            raise FormulaSyntaxError("clause before problem line", lineno, 1)
        nvars = header[0]
        for tok in line.split():
            try:
                lit = int(tok)
            except ValueError:
                raise FormulaSyntaxError(f"bad literal {tok!r}", lineno, 1) from None
            if lit == 0:
                if tok.startswith("-"):
                    raise FormulaSyntaxError("literal index 0 inside clause", lineno, 1)
                clauses.append(current)
                current = []
            elif abs(lit) > nvars:
                raise FormulaSyntaxError(
                    f"literal {lit} exceeds declared variable count {nvars}", lineno, 1
                )
            else:
                current.append(lit)
    if header is None:
        raise FormulaSyntaxError("missing problem line")
    if current:
        raise FormulaSyntaxError("last clause not terminated by 0")
    if len(clauses) != header[1]:
        raise FormulaSyntaxError(
            f"header declares {header[1]} clauses, found {len(clauses)}"
        )

    def literal(lit):
        v = Var(f"v{abs(lit)}")
        return v if lit > 0 else Not(v)

    root = conj(disj(literal(l) for l in clause) for clause in clauses)
    return Formula(root, tuple(f"v{i}" for i in range(1, header[0] + 1)))


def to_dimacs(f: Formula) -> str:
    """Write an And-of-Or formula over literals back to DIMACS."""
    idx = {name: i + 1 for i, name in enumerate(f.variables)}
    root = f.root
    clauses = root.children if isinstance(root, And) else (root,)
    lines = []
    for clause in clauses:
        lits = clause.children if isinstance(clause, Or) else (clause,)
        out = []
        for lit in lits:
            if isinstance(lit, Var):
                out.append(idx[lit.name])
            elif isinstance(lit, Not) and isinstance(lit.child, Var):
                out.append(-idx[lit.child.name])
            else:
                raise ValueError("formula is not in CNF")
        lines.append(" ".join(map(str, out + [0])))
    return "\n".join([f"p cnf {f.num_vars} {len(lines)}"] + lines) + "\n"


# ---------------------------------------------------------------------------
# Semantics


def _eval(node: Node, env: dict) -> bool:
    if isinstance(node, Var):
        return env[node.name]
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Not):
        return not _eval(node.child, env)
    if isinstance(node, And):
        return all(_eval(c, env) for c in node.children)
    if isinstance(node, Or):
        return any(_eval(c, env) for c in node.children)
    a, b = _eval(node.left, env), _eval(node.right, env)
    if isinstance(node, Implies):
        return (not a) or b
    if isinstance(node, Iff):
        return a == b
    return a != b


def evaluate(f: Formula, assignment: Sequence[int]) -> bool:
    """Truth value of ``f`` under a total assignment indexed by ``f.variables``."""
    if len(assignment) != f.num_vars:
        raise ValueError(
            f"assignment has length {len(assignment)}, formula has {f.num_vars} variables"
        )
    env = {name: bool(v) for name, v in zip(f.variables, assignment)}
    return _eval(f.root, env)


def _eval_array(node: Node, cols: dict, shape, memo: dict) -> np.ndarray:
    key = id(node)
    if key in memo:
        return memo[key]
    if isinstance(node, Var):
        out = cols[node.name]
    elif isinstance(node, Const):
        out = np.full(shape, node.value)
    elif isinstance(node, Not):
        out = ~_eval_array(node.child, cols, shape, memo)
    elif isinstance(node, (And, Or)):
        parts = [_eval_array(c, cols, shape, memo) for c in node.children]
        out = parts[0].copy()
        for p in parts[1:]:
            if isinstance(node, And):
                out &= p
            else:
                out |= p
    else:
        a = _eval_array(node.left, cols, shape, memo)
        b = _eval_array(node.right, cols, shape, memo)
        if isinstance(node, Implies):
            out = ~a | b
        elif isinstance(node, Iff):
            out = a == b
        else:
            out = a != b
    memo[key] = out
    return out


def evaluate_batch(f: Formula, assignments: np.ndarray) -> np.ndarray:
    """Vectorised ``evaluate`` over the rows of an (n, b) 0/1 array."""
    a = np.asarray(assignments).astype(bool)
    if a.ndim != 2 or a.shape[1] != f.num_vars:
        raise ValueError(f"expected shape (n, {f.num_vars}), got {a.shape}")
    cols = {name: a[:, i] for i, name in enumerate(f.variables)}
    return _eval_array(f.root, cols, (a.shape[0],), {})


def all_assignments(b: int) -> np.ndarray:
    """Every assignment over ``b`` variables, lexicographic (first variable most
    significant), as a (2**b, b) uint8 array."""
    idx = np.arange(2**b, dtype=np.int64)
    shifts = np.arange(b - 1, -1, -1, dtype=np.int64)
    return ((idx[:, None] >> shifts) & 1).astype(np.uint8)


def truth_table(f: Formula) -> np.ndarray:
    if f.num_vars > MAX_ENUM_VARS:
        raise ValueError(
            f"{f.num_vars} variables exceeds the enumeration guard of {MAX_ENUM_VARS}"
        )
    return evaluate_batch(f, all_assignments(f.num_vars))


def enumerate_models(f: Formula) -> list[tuple[int, ...]]:
    """All satisfying assignments in lexicographic order, by brute force."""
    rows = all_assignments(f.num_vars) if f.num_vars <= MAX_ENUM_VARS else None
    if rows is None:
        raise ValueError(
            f"{f.num_vars} variables exceeds the enumeration guard of {MAX_ENUM_VARS}"
        )
    sat = evaluate_batch(f, rows)
    return [tuple(int(x) for x in row) for row in rows[sat]]


def desugar(f: Union[Formula, Node]):
    """Rewrite ``->``, ``<->`` and ``^`` into And/Or/Not.

    Xor and Iff become their two-clause CNF forms.  Returns the same kind of
    object it was given.
    """
    memo: dict[int, Node] = {}

    def go(n):
        key = id(n)
        if key in memo:
            return memo[key]
        if isinstance(n, (Var, Const)):
            out = n
        elif isinstance(n, Not):
            out = Not(go(n.child))
        elif isinstance(n, And):
            out = And(tuple(go(c) for c in n.children))
        elif isinstance(n, Or):
            out = Or(tuple(go(c) for c in n.children))
        else:
            a, b = go(n.left), go(n.right)
            if isinstance(n, Implies):
                out = Or((Not(a), b))
            elif isinstance(n, Iff):
                out = And((Or((Not(a), b)), Or((a, Not(b)))))
            else:
                out = And((Or((a, b)), Or((Not(a), Not(b)))))
        memo[key] = out
        return out

    if isinstance(f, Formula):
        return Formula(go(f.root), f.variables)
    return go(f)
