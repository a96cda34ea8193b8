"""Knowledge compilation into reduced ordered decision diagrams.

A :class:`Circuit` is an immutable, canonically numbered decision diagram.
Node 0 is the false terminal, node 1 the true terminal, and decision nodes
are numbered in post-order so every child id is smaller than its parent's.
Weighted model counting and its gradient run one vectorised step per
variable level, so a batch of marginal vectors costs one pass over the DAG.
"""

from __future__ import annotations

import sys
import threading
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence, Union

import numpy as np

from .formula import And, Const, Formula, Iff, Implies, Not, Or, Var, Xor

DEFAULT_MAX_NODES = 50_000_000
UNDERFLOW = 1e-300
FORMAT_VERSION = 1


class CompilationBlowup(RuntimeError):
    """The diagram outgrew the node budget."""

    def __init__(self, cap: int):
        self.cap = cap
        super().__init__(f"compilation exceeded the node budget of {cap:,} nodes")


class EvalCounters:
    """Process-wide instrumentation of circuit work.

    ``wmc_passes`` counts forward passes, ``forward_visits`` and
    ``backward_visits`` count node evaluations, ``checks`` counts validity
    walks.  Used by tests to prove that sampling never touches a circuit.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.reset()

    def reset(self):
        self.wmc_passes = 0
        self.forward_visits = 0
        self.backward_visits = 0
        self.checks = 0

    def add(self, **kw):
        with self._lock:
            for k, v in kw.items():
                setattr(self, k, getattr(self, k) + v)

    def snapshot(self) -> dict:
        return {
            "wmc_passes": self.wmc_passes,
            "forward_visits": self.forward_visits,
            "backward_visits": self.backward_visits,
            "checks": self.checks,
        }

    @property
    def total(self) -> int:
        return self.wmc_passes + self.checks


COUNTERS = EvalCounters()


# ---------------------------------------------------------------------------
# Compiler


class BDD:
    """Unique table plus apply operations over a fixed variable order.

    Nodes are referred to by integer ids; ids 0 and 1 are the terminals.
    Levels are positions in the order; terminals sit at level ``num_vars``.
    """

    def __init__(self, num_vars: int, order: Sequence[int], max_nodes: int = DEFAULT_MAX_NODES):
        order = list(order)
        if sorted(order) != list(range(num_vars)):
            raise ValueError("order must be a permutation of the variable indices")
        self.num_vars = num_vars
        self.order = tuple(order)
        self.level_of = [0] * num_vars
        for pos, v in enumerate(order):
            self.level_of[v] = pos
        self.max_nodes = max_nodes
        self.lvl = [num_vars, num_vars]
        self.lo = [0, 1]
        self.hi = [0, 1]
        self.unique: dict[tuple, int] = {}
        self._and: dict[tuple, int] = {}
        self._or: dict[tuple, int] = {}
        self._xor: dict[tuple, int] = {}
        self._not: dict[int, int] = {}

    def __len__(self):
        return len(self.lvl) - 2

    def mk(self, level: int, lo: int, hi: int) -> int:
        if lo == hi:
            return lo
        key = (level, lo, hi)
        node = self.unique.get(key)
        if node is None:
            node = len(self.lvl)
            if node - 2 >= self.max_nodes:
                raise CompilationBlowup(self.max_nodes)
            self.lvl.append(level)
            self.lo.append(lo)
            self.hi.append(hi)
            self.unique[key] = node
        return node

    def var(self, index: int) -> int:
        return self.mk(self.level_of[index], 0, 1)

    def neg(self, a: int) -> int:
        if a < 2:
            return 1 - a
        r = self._not.get(a)
        if r is None:
            r = self.mk(self.lvl[a], self.neg(self.lo[a]), self.neg(self.hi[a]))
            self._not[a] = r
        return r

    def conj(self, a: int, b: int) -> int:
        if a == b or b == 1:
            return a
        if a == 1:
            return b
        if a == 0 or b == 0:
            return 0
        if a > b:
            a, b = b, a
        key = (a, b)
        r = self._and.get(key)
        if r is not None:
            return r
        la, lb = self.lvl[a], self.lvl[b]
        if la == lb:
            r = self.mk(la, self.conj(self.lo[a], self.lo[b]), self.conj(self.hi[a], self.hi[b]))
        elif la < lb:
            r = self.mk(la, self.conj(self.lo[a], b), self.conj(self.hi[a], b))
        else:
            r = self.mk(lb, self.conj(a, self.lo[b]), self.conj(a, self.hi[b]))
        self._and[key] = r
        return r

    def disj(self, a: int, b: int) -> int:
        if a == b or b == 0:
            return a
        if a == 0:
            return b
        if a == 1 or b == 1:
            return 1
        if a > b:
            a, b = b, a
        key = (a, b)
        r = self._or.get(key)
        if r is not None:
            return r
        la, lb = self.lvl[a], self.lvl[b]
        if la == lb:
            r = self.mk(la, self.disj(self.lo[a], self.lo[b]), self.disj(self.hi[a], self.hi[b]))
        elif la < lb:
            r = self.mk(la, self.disj(self.lo[a], b), self.disj(self.hi[a], b))
        else:
            r = self.mk(lb, self.disj(a, self.lo[b]), self.disj(a, self.hi[b]))
        self._or[key] = r
        return r

    def xor(self, a: int, b: int) -> int:
        if a == b:
            return 0
        if a == 0:
            return b
        if b == 0:
            return a
        if a == 1:
            return self.neg(b)
        if b == 1:
            return self.neg(a)
        if a > b:
            a, b = b, a
        key = (a, b)
        r = self._xor.get(key)
        if r is not None:
            return r
        la, lb = self.lvl[a], self.lvl[b]
        if la == lb:
            r = self.mk(la, self.xor(self.lo[a], self.lo[b]), self.xor(self.hi[a], self.hi[b]))
        elif la < lb:
            r = self.mk(la, self.xor(self.lo[a], b), self.xor(self.hi[a], b))
        else:
            r = self.mk(lb, self.xor(a, self.lo[b]), self.xor(a, self.hi[b]))
        self._xor[key] = r
        return r

    def _reduce(self, op, parts: list[int]) -> int:
        # sort by top level so neighbours share variables, then combine in a
        # balanced tree: intermediate diagrams stay local until the last rounds
        parts = sorted(parts, key=lambda n: self.lvl[n])
        while len(parts) > 1:
            nxt = [op(parts[i], parts[i + 1]) for i in range(0, len(parts) - 1, 2)]
            if len(parts) % 2:
                nxt.append(parts[-1])
            parts = nxt
        return parts[0]

    def build(self, node, index: dict[str, int], memo: Optional[dict] = None) -> int:
        """Compile an AST node, given the name -> variable index map."""
        memo = {} if memo is None else memo
        key = id(node)
        if key in memo:
            return memo[key][1]
        if isinstance(node, Var):
            r = self.var(index[node.name])
        elif isinstance(node, Const):
            r = int(node.value)
        elif isinstance(node, Not):
            r = self.neg(self.build(node.child, index, memo))
        elif isinstance(node, And):
            r = self._reduce(self.conj, [self.build(c, index, memo) for c in node.children])
        elif isinstance(node, Or):
            r = self._reduce(self.disj, [self.build(c, index, memo) for c in node.children])
        else:
            a = self.build(node.left, index, memo)
            b = self.build(node.right, index, memo)
            if isinstance(node, Implies):
                r = self.disj(self.neg(a), b)
            elif isinstance(node, Iff):
                r = self.neg(self.xor(a, b))
            elif isinstance(node, Xor):
                r = self.xor(a, b)
            else:
                raise TypeError(f"unknown node {node!r}")
        # keep the node alive so id() stays unique for the whole compile
        memo[key] = (node, r)
        return r

    def extract(self, root: int, names: Sequence[str]) -> "Circuit":
        """Freeze the sub-diagram under ``root`` into a canonical Circuit."""
        new_id = {0: 0, 1: 1}
        var, lo, hi = [-1, -1], [0, 1], [0, 1]
        stack = [(root, False)]
        while stack:
            n, expanded = stack.pop()
            if n in new_id:
                continue
            if expanded:
                new_id[n] = len(var)
                var.append(self.order[self.lvl[n]])
                lo.append(new_id[self.lo[n]])
                hi.append(new_id[self.hi[n]])
            else:
                stack.append((n, True))
                stack.append((self.hi[n], False))
                stack.append((self.lo[n], False))
        return Circuit(
            names=tuple(names),
            order=self.order,
            root=new_id[root],
            var=np.array(var, dtype=np.int64),
            lo=np.array(lo, dtype=np.int64),
            hi=np.array(hi, dtype=np.int64),
        )


def _resolve_order(f_vars: Sequence[str], order) -> list[int]:
    b = len(f_vars)
    if order is None:
        return list(range(b))
    index = {n: i for i, n in enumerate(f_vars)}
    out = [index[o] if isinstance(o, str) else int(o) for o in order]
    if sorted(out) != list(range(b)):
        raise ValueError("order must be a permutation of the formula's variables")
    return out


def compile(f: Formula, order=None, max_nodes: int = DEFAULT_MAX_NODES) -> "Circuit":
    """Compile ``f`` into a canonical reduced ordered decision diagram.

    ``order`` lists variable names or indices from the top of the diagram
    down; the default is the formula's own variable table order.
    """
    mgr = BDD(f.num_vars, _resolve_order(f.variables, order), max_nodes)
    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 4 * f.num_vars + 2000))
    try:
        root = mgr.build(f.root, f.index())
    finally:
        sys.setrecursionlimit(limit)
    return mgr.extract(root, f.variables)


# ---------------------------------------------------------------------------
# Compiled circuit


def _as_batch(theta, b: int) -> tuple[np.ndarray, bool]:
    t = np.asarray(theta, dtype=np.float64)
    single = t.ndim == 1
    t2 = t[None, :] if single else t
    if t2.ndim != 2 or t2.shape[1] != b:
        raise ValueError(f"marginal vector has length {t.shape[-1]}, circuit has {b} variables")
    return t2, single


def _underflow_rows(inner: np.ndarray) -> np.ndarray:
    if not inner.size:
        return np.zeros(inner.shape[1], dtype=bool)
    return np.where(inner > 0, inner, np.inf).min(axis=0) < UNDERFLOW


def _scatter_add(target: np.ndarray, plan, rows: np.ndarray):
    order, dest, starts = plan
    target[dest] += np.add.reduceat(rows[order], starts, axis=0)


@dataclass(frozen=True, eq=False)
class Circuit:
    names: tuple
    order: tuple
    root: int
    var: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    @property
    def num_vars(self) -> int:
        return len(self.names)

    @property
    def node_count(self) -> int:
        """Number of decision nodes (terminals excluded)."""
        return len(self.var) - 2

    def __eq__(self, other):
        if not isinstance(other, Circuit):
            return NotImplemented
        return (
            self.names == other.names
            and self.order == other.order
            and self.root == other.root
            and np.array_equal(self.var, other.var)
            and np.array_equal(self.lo, other.lo)
            and np.array_equal(self.hi, other.hi)
        )

    __hash__ = None

    def __repr__(self):
        return f"<Circuit vars={self.num_vars} nodes={self.node_count} root={self.root}>"

    @cached_property
    def position(self) -> np.ndarray:
        pos = np.empty(self.num_vars, dtype=np.int64)
        pos[list(self.order)] = np.arange(self.num_vars)
        return pos

    @cached_property
    def levels(self) -> list[tuple[int, np.ndarray]]:
        """(variable, node ids) per occupied level, top of the order first."""
        ids = np.arange(2, len(self.var))
        if not len(ids):
            return []
        pos = self.position[self.var[2:]]
        srt = np.argsort(pos, kind="stable")
        ids, pos = ids[srt], pos[srt]
        cuts = np.flatnonzero(np.diff(pos)) + 1
        return [(int(self.var[g[0]]), g) for g in np.split(ids, cuts)]

    @cached_property
    def _scatter(self) -> list:
        """Per level, the (order, targets, starts) triples that turn a
        scatter-add into children into one ``np.add.reduceat``."""
        out = []
        for _, idx in self.levels:
            pair = []
            for child in (self.hi[idx], self.lo[idx]):
                order = np.argsort(child, kind="stable")
                srt = child[order]
                starts = np.flatnonzero(np.r_[True, srt[1:] != srt[:-1]])
                pair.append((order, srt[starts], starts))
            out.append(pair)
        return out

    # -- counting ----------------------------------------------------------

    def model_count(self) -> int:
        b = self.num_vars
        pos = [b, b] + [int(p) for p in self.position[self.var[2:]]]
        count = [0, 1]
        lo, hi = self.lo.tolist(), self.hi.tolist()
        for n in range(2, len(self.var)):
            l, h = lo[n], hi[n]
            count.append(
                (count[l] << (pos[l] - pos[n] - 1)) + (count[h] << (pos[h] - pos[n] - 1))
            )
        return count[self.root] << pos[self.root]

    def _forward(self, t2: np.ndarray) -> np.ndarray:
        vals = np.empty((len(self.var), t2.shape[0]))
        vals[0] = 0.0
        vals[1] = 1.0
        visited = 0
        for v, idx in reversed(self.levels):
            t = t2[:, v]
            vals[idx] = t * vals[self.hi[idx]] + (1.0 - t) * vals[self.lo[idx]]
            visited += len(idx)
        COUNTERS.add(wmc_passes=1, forward_visits=visited)
        return vals

    def _backward(self, t2: np.ndarray, vals: np.ndarray) -> np.ndarray:
        n = t2.shape[0]
        adj = np.zeros_like(vals)
        adj[self.root] = 1.0
        grad = np.zeros((n, self.num_vars))
        visited = 0
        for (v, idx), (sh, sl) in zip(self.levels, self._scatter):
            t = t2[:, v]
            a = adj[idx]
            h, l = self.hi[idx], self.lo[idx]
            grad[:, v] += (a * (vals[h] - vals[l])).sum(axis=0)
            _scatter_add(adj, sh, a * t)
            _scatter_add(adj, sl, a * (1.0 - t))
            visited += len(idx)
        COUNTERS.add(backward_visits=visited)
        return grad

    def wmc(self, theta) -> Union[float, np.ndarray]:
        """Probability that independent Bernoulli(theta) variables satisfy the
        circuit.  Accepts one vector or an (n, b) batch."""
        t2, single = _as_batch(theta, self.num_vars)
        out = self._forward(t2)[self.root]
        return float(out[0]) if single else out

    def wmc_and_gradient(self, theta, report_underflow: bool = False):
        """WMC and its exact gradient from one forward and one reverse pass.

        With ``report_underflow`` a third value says whether some node value
        fell below 1e-300 (one flag per row for a batch), in which case the
        log-space variant should be used.
        """
        t2, single = _as_batch(theta, self.num_vars)
        vals = self._forward(t2)
        grad = self._backward(t2, vals)
        w = vals[self.root]
        out = (float(w[0]), grad[0]) if single else (w, grad)
        if report_underflow:
            flags = _underflow_rows(vals[2:])
            out += (bool(flags[0]) if single else flags,)
        return out

    def wmc_gradient(self, theta) -> np.ndarray:
        return self.wmc_and_gradient(theta)[1]

    def underflows(self, theta) -> bool:
        """True if some node value in the linear-space pass is below 1e-300."""
        t2, _ = _as_batch(theta, self.num_vars)
        return bool(_underflow_rows(self._forward(t2)[2:]).any())

    # -- log space ---------------------------------------------------------

    def _log_forward(self, t2: np.ndarray):
        with np.errstate(divide="ignore"):
            lt, l1t = np.log(t2), np.log1p(-t2)
        lv = np.empty((len(self.var), t2.shape[0]))
        lv[0] = -np.inf
        lv[1] = 0.0
        visited = 0
        for v, idx in reversed(self.levels):
            lv[idx] = np.logaddexp(lt[:, v] + lv[self.hi[idx]], l1t[:, v] + lv[self.lo[idx]])
            visited += len(idx)
        COUNTERS.add(wmc_passes=1, forward_visits=visited)
        return lv, lt, l1t

    def log_wmc(self, theta):
        """Natural log of :meth:`wmc`, computed without leaving log space."""
        t2, single = _as_batch(theta, self.num_vars)
        out = self._log_forward(t2)[0][self.root]
        return float(out[0]) if single else out

    def log_wmc_and_gradient(self, theta):
        """``log W`` and ``d log W / d theta``.

        The backward pass propagates the share of the total mass that flows
        through each node, so no quantity ever leaves the range [0, 1] except
        the per-variable derivative itself.
        """
        t2, single = _as_batch(theta, self.num_vars)
        lv, lt, l1t = self._log_forward(t2)
        n = t2.shape[0]
        share = np.zeros_like(lv)
        share[self.root] = 1.0
        grad = np.zeros((n, self.num_vars))
        visited = 0
        with np.errstate(invalid="ignore", over="ignore"):
            for (v, idx), (sh, sl) in zip(self.levels, self._scatter):
                s = share[idx]
                mine = lv[idx]
                h, l = self.hi[idx], self.lo[idx]
                rel_h = np.exp(lv[h] - mine)
                rel_l = np.exp(lv[l] - mine)
                live = s > 0
                g = np.where(live, s * (rel_h - rel_l), 0.0)
                grad[:, v] += g.sum(axis=0)
                _scatter_add(share, sh, np.where(live, s * np.exp(lt[:, v] + lv[h] - mine), 0.0))
                _scatter_add(share, sl, np.where(live, s * np.exp(l1t[:, v] + lv[l] - mine), 0.0))
                visited += len(idx)
        COUNTERS.add(backward_visits=visited)
        lw = lv[self.root]
        if single:
            return float(lw[0]), grad[0]
        return lw, grad

    # -- structure ---------------------------------------------------------

    def condition(self, var: int, value: int) -> "Circuit":
        """Fix variable ``var`` to ``value``; the result no longer depends on it."""
        if not 0 <= var < self.num_vars:
            raise IndexError(f"variable index {var} out of range for {self.num_vars} variables")
        mgr = BDD(self.num_vars, self.order)
        mapped = [0, 1]
        vs, lo, hi = self.var.tolist(), self.lo.tolist(), self.hi.tolist()
        for n in range(2, len(vs)):
            if vs[n] == var:
                mapped.append(mapped[hi[n]] if value else mapped[lo[n]])
            else:
                mapped.append(mgr.mk(mgr.level_of[vs[n]], mapped[lo[n]], mapped[hi[n]]))
        return mgr.extract(mapped[self.root], self.names)

    def check_validity(self, assignment: Sequence[int]) -> bool:
        """Walk from the root following the assignment."""
        if len(assignment) != self.num_vars:
            raise ValueError(
                f"assignment has length {len(assignment)}, circuit has {self.num_vars} variables"
            )
        COUNTERS.add(checks=1)
        n = self.root
        var, lo, hi = self.var, self.lo, self.hi
        while n > 1:
            n = hi[n] if assignment[var[n]] else lo[n]
        return bool(n)

    def check_batch(self, assignments) -> np.ndarray:
        """:meth:`check_validity` for every row of an (n, b) 0/1 array."""
        a = np.asarray(assignments)
        if a.ndim != 2 or a.shape[1] != self.num_vars:
            raise ValueError(f"expected shape (n, {self.num_vars}), got {a.shape}")
        COUNTERS.add(checks=len(a))
        node = np.full(len(a), self.root, dtype=np.int64)
        rows = np.arange(len(a))
        while True:
            live = node > 1
            if not live.any():
                return node == 1
            nl = node[live]
            bit = a[rows[live], self.var[nl]].astype(bool)
            node[live] = np.where(bit, self.hi[nl], self.lo[nl])

    def depth(self) -> int:
        """Longest root-to-terminal path, counted in decision nodes."""
        d = [0, 0]
        lo, hi = self.lo.tolist(), self.hi.tolist()
        for n in range(2, len(self.var)):
            d.append(1 + max(d[lo[n]], d[hi[n]]))
        return d[self.root]

    def stats(self) -> dict:
        return {
            "nodes": self.node_count,
            "variables": self.num_vars,
            "depth": self.depth(),
            "models": self.model_count(),
        }

    # -- persistence -------------------------------------------------------

    def dumps(self) -> str:
        lines = [
            f"semgen-circuit {FORMAT_VERSION}",
            f"vars {self.num_vars}",
            "names " + " ".join(self.names),
            "order " + " ".join(map(str, self.order)),
            f"root {self.root}",
            f"nodes {self.node_count}",
        ]
        for n in range(2, len(self.var)):
            lines.append(f"{n} {self.var[n]} {self.lo[n]} {self.hi[n]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Circuit":
        lines = text.splitlines()
        try:
            magic, version = lines[0].split()
            if magic != "semgen-circuit" or int(version) != FORMAT_VERSION:
                raise ValueError(f"unsupported circuit header {lines[0]!r}")
            head = {}
            for line in lines[1:6]:
                key, _, rest = line.partition(" ")
                head[key] = rest
            b = int(head["vars"])
            names = tuple(head["names"].split()) if b else ()
            order = tuple(int(x) for x in head["order"].split()) if b else ()
            count = int(head["nodes"])
            var, lo, hi = [-1, -1], [0, 1], [0, 1]
            for expect, line in enumerate(lines[6 : 6 + count], start=2):
                i, v, l, h = map(int, line.split())
                if i != expect or not (l < i and h < i) or l == h:
                    raise ValueError(f"malformed node line {line!r}")
                var.append(v)
                lo.append(l)
                hi.append(h)
        except (IndexError, KeyError) as exc:
            raise ValueError(f"truncated circuit file: {exc}") from None
        if len(names) != b or sorted(order) != list(range(b)) or len(var) != count + 2:
            raise ValueError("circuit header inconsistent with body")
        return cls(
            names=names,
            order=order,
            root=int(head["root"]),
            var=np.array(var, dtype=np.int64),
            lo=np.array(lo, dtype=np.int64),
            hi=np.array(hi, dtype=np.int64),
        )
