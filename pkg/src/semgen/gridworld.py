"""Tile-grid levels: pipe constraints, a reachability oracle, synthetic data,
corruption, evaluation metrics and the learned reachability embedding."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .circuit import Circuit, compile
from .formula import Formula, Implies, Not, Or, Var, conj, disj
from .nn import MLP, Adam

TILES = ("E", "S", "TL", "TR", "BL", "BR")
E, S, TL, TR, BL, BR = range(6)
T = len(TILES)
CHARS = ".#LR[]"
PIPE_TILES = (TL, TR, BL, BR)

DEFAULT_H = 8
DEFAULT_W = 8


def var_name(r: int, c: int, tile: int) -> str:
    return f"x{r}_{c}_{TILES[tile]}"


def grid_variables(H: int, W: int) -> tuple:
    """Literal names in circuit order: row-major cells, tiles contiguous."""
    return tuple(var_name(r, c, t) for r in range(H) for c in range(W) for t in range(T))


@dataclass(frozen=True, eq=False)
class GridLevel:
    tiles: np.ndarray  # (H, W) tile indices

    def __post_init__(self):
        t = np.asarray(self.tiles, dtype=np.int8)
        if t.ndim != 2:
            raise ValueError("tile matrix must be 2-d")
        if t.size and (t.min() < 0 or t.max() >= T):
            raise ValueError("tile index out of range")
        t.setflags(write=False)
        object.__setattr__(self, "tiles", t)

    @property
    def H(self) -> int:
        return self.tiles.shape[0]

    @property
    def W(self) -> int:
        return self.tiles.shape[1]

    def __eq__(self, other):
        return isinstance(other, GridLevel) and np.array_equal(self.tiles, other.tiles)

    def __hash__(self):
        return hash((self.tiles.shape, self.tiles.tobytes()))

    def encode(self) -> np.ndarray:
        """One-hot Boolean view, length H*W*6, in :func:`grid_variables` order."""
        return np.eye(T, dtype=np.uint8)[self.tiles.reshape(-1)].reshape(-1)

    @classmethod
    def from_encoding(cls, bits, H: int, W: int) -> "GridLevel":
        b = np.asarray(bits).reshape(H * W, T)
        if not np.all(b.sum(axis=1) == 1):
            raise ValueError("encoding does not have exactly one tile per cell")
        return cls(b.argmax(axis=1).reshape(H, W))

    def render(self, reach: Optional[np.ndarray] = None) -> str:
        """ASCII rows, top first.  With ``reach``, reachable cells print as ``*``
        and the start cell as ``@``."""
        rows = []
        for r in range(self.H):
            chars = [CHARS[t] for t in self.tiles[r]]
            if reach is not None:
                for c in range(self.W):
                    if reach[r, c]:
                        chars[c] = "*"
            rows.append("".join(chars))
        if reach is not None:
            start = find_start(self)
            if start is not None:
                r, c = start
                rows[r] = rows[r][:c] + "@" + rows[r][c + 1 :]
        return "\n".join(rows)

    def pipe_tiles(self) -> int:
        return int(np.isin(self.tiles, PIPE_TILES).sum())


def encode_levels(levels: Sequence[GridLevel]) -> np.ndarray:
    return np.stack([lv.encode() for lv in levels]) if levels else np.zeros((0, 0), np.uint8)


def levels_from_tiles(tiles: np.ndarray, H: int, W: int) -> list[GridLevel]:
    """Rows of per-cell tile indices, shape (n, H*W), to levels."""
    return [GridLevel(np.asarray(row).reshape(H, W)) for row in tiles]


# ---------------------------------------------------------------------------
# Level files


def format_level(level: GridLevel) -> str:
    return f"{level.H} {level.W}\n{level.render()}\n"


def format_levels(levels: Sequence[GridLevel]) -> str:
    return "\n".join(format_level(lv) for lv in levels)


def parse_levels(text: str) -> list[GridLevel]:
    """Parse one or more levels separated by blank lines."""
    blocks, cur = [], []
    for line in text.splitlines():
        if line.strip():
            cur.append(line.rstrip("\r"))
        elif cur:
            blocks.append(cur)
            cur = []
    if cur:
        blocks.append(cur)
    if not blocks:
        raise ValueError("no levels found")
    levels = []
    for block in blocks:
        try:
            H, W = map(int, block[0].split())
        except ValueError:
            raise ValueError(f"bad level header {block[0]!r}") from None
        rows = block[1:]
        if len(rows) != H or any(len(r) != W for r in rows):
            raise ValueError(f"level body does not match header {H} {W}")
        try:
            tiles = [[CHARS.index(ch) for ch in row] for row in rows]
        except ValueError:
            raise ValueError("unknown tile character") from None
        levels.append(GridLevel(np.array(tiles)))
    return levels


# ---------------------------------------------------------------------------
# Pipe constraint


def build_pipe_constraint(H: int, W: int) -> Formula:
    """Local 2x2 pipe well-formedness plus exactly one tile per cell."""
    if H < 2 or W < 2:
        raise ValueError(f"grid {H}x{W} is too small for pipes (need at least 2x2)")

    def x(r, c, t):
        return Var(var_name(r, c, t))

    parts = []
    for r in range(H):
        for c in range(W):
            lits = [x(r, c, t) for t in range(T)]
            parts.append(Or(tuple(lits)))
            for i in range(T):
                for j in range(i + 1, T):
                    parts.append(Or((Not(lits[i]), Not(lits[j]))))
            if c + 1 < W:
                parts.append(Implies(x(r, c, TL), x(r, c + 1, TR)))
                parts.append(Implies(x(r, c, BL), x(r, c + 1, BR)))
            else:
                parts += [Not(x(r, c, TL)), Not(x(r, c, BL))]
            if c > 0:
                parts.append(Implies(x(r, c, TR), x(r, c - 1, TL)))
                parts.append(Implies(x(r, c, BR), x(r, c - 1, BL)))
            else:
                parts += [Not(x(r, c, TR)), Not(x(r, c, BR))]
            if r + 1 < H:
                parts.append(Implies(x(r, c, TL), x(r + 1, c, BL)))
                parts.append(Implies(x(r, c, TR), x(r + 1, c, BR)))
                parts.append(Implies(x(r, c, BL), Or((x(r + 1, c, BL), x(r + 1, c, S)))))
                parts.append(Implies(x(r, c, BR), Or((x(r + 1, c, BR), x(r + 1, c, S)))))
            else:
                parts += [Not(x(r, c, TL)), Not(x(r, c, TR))]
            if r > 0:
                parts.append(Implies(x(r, c, BL), Or((x(r - 1, c, TL), x(r - 1, c, BL)))))
                parts.append(Implies(x(r, c, BR), Or((x(r - 1, c, TR), x(r - 1, c, BR)))))
    return Formula(conj(parts), grid_variables(H, W))


@lru_cache(maxsize=8)
def pipe_circuit(H: int, W: int) -> Circuit:
    return compile(build_pipe_constraint(H, W))


def pipes_valid(levels: Sequence[GridLevel]) -> np.ndarray:
    if not levels:
        return np.zeros(0, dtype=bool)
    H, W = levels[0].H, levels[0].W
    return pipe_circuit(H, W).check_batch(encode_levels(levels))


# ---------------------------------------------------------------------------
# Reachability


@dataclass(frozen=True)
class ReachSpec:
    """Movement rules.  From a standable cell the player may move to any
    passable cell up to ``max_across`` columns sideways and ``max_up`` rows
    higher, then falls until landing on support.  Falling off the bottom edge
    is fatal.  Only the target cell has to be free."""

    max_up: int = 2
    max_across: int = 2


class Reach(NamedTuple):
    cells: np.ndarray  # (H, W) bool
    started: bool


def _standable(tiles: np.ndarray) -> np.ndarray:
    free = tiles == E
    stand = np.zeros_like(free)
    stand[:-1] = free[:-1] & ~free[1:]
    return stand


def find_start(level: GridLevel):
    stand = _standable(level.tiles)
    rows = np.flatnonzero(stand[:, 0])
    if not len(rows):
        return None
    return int(rows[-1]), 0


def reachable_tiles(level: GridLevel, spec: ReachSpec = ReachSpec()) -> Reach:
    """Breadth-first closure of the movement rules from the start cell (the
    lowest standable cell of column 0)."""
    tiles = level.tiles
    H, W = tiles.shape
    free = tiles == E
    stand = _standable(tiles)
    seen = np.zeros((H, W), dtype=bool)
    start = find_start(level)
    if start is None:
        return Reach(seen, False)
    # landing[r, c]: row reached when falling from free cell (r, c), or -1
    landing = np.full((H, W), -1, dtype=np.int64)
    for c in range(W):
        below = -1
        for r in range(H - 1, -1, -1):
            if not free[r, c]:
                below = -1
            elif stand[r, c]:
                below = r
            landing[r, c] = below
    free_l = free.tolist()
    land_l = landing.tolist()
    seen[start] = True
    queue = [start]
    steps = [(dc, up) for dc in range(-spec.max_across, spec.max_across + 1) if dc
             for up in range(spec.max_up + 1)]
    while queue:
        r, c = queue.pop()
        for dc, up in steps:
            rr, cc = r - up, c + dc
            if 0 <= cc < W and rr >= 0 and free_l[rr][cc]:
                land = land_l[rr][cc]
                if land >= 0 and not seen[land, cc]:
                    seen[land, cc] = True
                    queue.append((land, cc))
    return Reach(seen, True)


def is_playable(level: GridLevel, spec: ReachSpec = ReachSpec()) -> bool:
    """Some cell in the right-most column is reachable."""
    reach = reachable_tiles(level, spec)
    return bool(reach.cells[:, -1].any())


def reach_labels(levels: Sequence[GridLevel], spec: ReachSpec = ReachSpec()) -> np.ndarray:
    return np.stack([reachable_tiles(lv, spec).cells.reshape(-1) for lv in levels]).astype(np.float64)


def reach_variables(H: int) -> tuple:
    return tuple(f"r_{i}" for i in range(H))


def build_reachability_constraint(H: int) -> Formula:
    """Some tile of the right-most column is reachable: ``r_0 | ... | r_{H-1}``."""
    names = reach_variables(H)
    return Formula(disj(Var(n) for n in names), names)


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass
class Dataset:
    levels: list
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = {lv.tiles.shape for lv in self.levels}
        if len(shapes) > 1:
            raise ValueError(f"levels have mixed shapes {sorted(shapes)}")

    def __len__(self):
        return len(self.levels)

    def encodings(self) -> np.ndarray:
        return encode_levels(self.levels)


STYLES = ("pipes", "no-pipes", "mixed", "gaps")


def _terrain(rng, H, W, gap_prob, wide_gap_prob, cliff_prob):
    """Ground heights per column (0 = pit)."""
    heights = np.zeros(W, dtype=int)
    h = int(rng.integers(1, 3))
    c = 0
    while c < W:
        if c > 0 and c < W - 1 and rng.random() < gap_prob:
            width = 2 if rng.random() < wide_gap_prob else 1
            for k in range(width):
                if c + k < W:
                    heights[c + k] = 0
            c += width
            continue
        if rng.random() < cliff_prob:
            h = min(h + 3, H - 3)
        elif rng.random() < 0.35:
            h = int(np.clip(h + rng.choice([-1, 1]), 1, min(3, H - 3)))
        heights[c] = h
        c += 1
    heights[0] = max(heights[0], 1)
    return heights


def _place_pipe(rng, tiles, heights):
    H, W = tiles.shape
    spots = [c for c in range(W - 1)
             if heights[c] > 0 and heights[c] == heights[c + 1]
             and np.all(tiles[H - heights[c] - 1, c : c + 2] == E)]
    if not spots:
        return False
    c = int(rng.choice(spots))
    base = H - heights[c] - 1
    body = int(rng.integers(1, 3))
    top = base - body
    if top < 0:
        return False
    tiles[top, c], tiles[top, c + 1] = TL, TR
    tiles[top + 1 : base + 1, c] = BL
    tiles[top + 1 : base + 1, c + 1] = BR
    # occupied: no second pipe on top
    heights[c] = heights[c + 1] = -1
    return True


def _one_level(rng, H, W, style):
    if style == "gaps":
        heights = _terrain(rng, H, W, gap_prob=0.25, wide_gap_prob=0.45, cliff_prob=0.08)
    else:
        heights = _terrain(rng, H, W, gap_prob=0.12, wide_gap_prob=0.3, cliff_prob=0.0)
    tiles = np.full((H, W), E, dtype=np.int8)
    for c, h in enumerate(heights):
        if h:
            tiles[H - h :, c] = S
    want = {"pipes": True, "no-pipes": False, "gaps": rng.random() < 0.3,
            "mixed": rng.random() < 0.5}[style]
    if want:
        placed = 0
        for _ in range(int(rng.integers(1, 3))):
            placed += _place_pipe(rng, tiles, heights)
        if style == "pipes" and not placed:
            return None
    return GridLevel(tiles)


def synth_dataset(n: int, H: int = DEFAULT_H, W: int = DEFAULT_W, style: str = "pipes",
                  seed: int = 0) -> Dataset:
    """Procedural levels: ground with height changes, pits and well-formed
    pipes.  Every level satisfies the pipe constraint."""
    if n < 1:
        raise ValueError("need at least one level")
    if style not in STYLES:
        raise ValueError(f"unknown style {style!r}; choose from {STYLES}")
    rng = np.random.default_rng(seed)
    levels = []
    while len(levels) < n:
        lv = _one_level(rng, H, W, style)
        if lv is not None:
            levels.append(lv)
    ok = pipes_valid(levels)
    assert ok.all(), "generator produced a level violating the pipe constraint"
    return Dataset(levels, {"generator": f"synth/{style}", "n": n, "H": H, "W": W,
                            "seed": seed, "corruption": 0.0})


def _break_pipe(rng, level: GridLevel) -> GridLevel:
    tiles = level.tiles.copy()
    H, W = tiles.shape
    tops = np.argwhere(tiles == TL)
    if len(tops):
        r, c = tops[rng.integers(len(tops))]
        tiles[r, c + 1] = E
    else:
        r = int(rng.integers(0, H - 1))
        c = int(rng.integers(0, W - 1))
        tiles[r, c] = TL
        tiles[r, c + 1] = E
    return GridLevel(tiles)


def corrupt_dataset(d: Dataset, rate: float, seed: int = 0) -> Dataset:
    """Break exactly ``round(rate * n)`` levels by orphaning a pipe top-left."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must be in [0, 1]")
    n = len(d)
    count = int(round(rate * n))
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(n, size=count, replace=False).tolist()) if count else set()
    levels = [(_break_pipe(rng, lv) if i in chosen else lv) for i, lv in enumerate(d.levels)]
    if chosen:
        ok = pipes_valid([levels[i] for i in sorted(chosen)])
        assert not ok.any(), "corruption left a level valid"
    prov = dict(d.provenance, corruption=rate, corrupted=count, corruption_seed=seed)
    return Dataset(levels, prov)


# ---------------------------------------------------------------------------
# Metrics

METRIC_COLUMNS = ("validity", "novelty", "uniqueness", "diversity", "pipe_tiles")


@dataclass
class Metrics:
    validity: float
    novelty: float
    uniqueness: float
    diversity: float
    pipe_tiles: float
    flags: tuple = ()

    def row(self) -> list[float]:
        return [getattr(self, k) for k in METRIC_COLUMNS]


def mean_pairwise_l1(enc: np.ndarray) -> float:
    """Mean L1 distance over unordered pairs of rows, divided by row length."""
    n, d = enc.shape
    if n < 2 or d == 0:
        return 0.0
    x = enc.astype(np.float64)
    s = x.sum(axis=1)
    dist = s[:, None] + s[None, :] - 2.0 * (x @ x.T)
    total = np.triu(dist, k=1).sum()
    return float(total / (n * (n - 1) / 2) / d)


def metrics(samples: Sequence[GridLevel], dataset: Dataset, circuit: Optional[Circuit] = None,
            valid: Optional[np.ndarray] = None) -> Metrics:
    """Validity, novelty, uniqueness, diversity and pipe tiles per level.

    Validity comes from ``valid`` when given, else from ``circuit`` (default:
    the pipe constraint for the sample shape).  Novelty divides by the number
    of valid samples, uniqueness by the number of samples.
    """
    if not samples:
        raise ValueError("no samples")
    enc = encode_levels(samples)
    if valid is None:
        H, W = samples[0].H, samples[0].W
        c = circuit if circuit is not None else pipe_circuit(H, W)
        valid = c.check_batch(enc)
    valid = np.asarray(valid, dtype=bool)
    n = len(samples)
    n_valid = int(valid.sum())
    flags = []
    known = {lv.tiles.tobytes() for lv in dataset.levels}
    valid_keys = [samples[i].tiles.tobytes() for i in np.flatnonzero(valid)]
    if n_valid:
        novelty = sum(k not in known for k in valid_keys) / n_valid
    else:
        novelty = 0.0
        flags.append("no-valid-samples")
    return Metrics(
        validity=n_valid / n,
        novelty=novelty,
        uniqueness=len(set(valid_keys)) / n,
        diversity=mean_pairwise_l1(enc),
        pipe_tiles=float(np.mean([lv.pipe_tiles() for lv in samples])),
        flags=tuple(flags),
    )


# ---------------------------------------------------------------------------
# Reachability embedding


@dataclass
class PhiResult:
    net: MLP
    heldout_accuracy: float
    majority_rate: float
    train_accuracy: float
    degenerate: bool


def _accuracy(net: MLP, x, y) -> float:
    return float(((net.predict(x) >= 0.5) == (y >= 0.5)).mean())


def train_phi(levels: Sequence[GridLevel], hidden=(256, 256), epochs: int = 60, batch: int = 64,
              lr: float = 2e-3, seed: int = 0, soften: float = 0.0,
              spec: ReachSpec = ReachSpec()) -> PhiResult:
    """Fit a network from one-hot levels to per-tile reachability.

    Labels come from :func:`reachable_tiles`; the first 80% of ``levels``
    train, the rest are held out.  With ``soften`` > 0 a random fraction of
    the one-hot training inputs is mixed with uniform noise of that strength,
    which keeps the network sensible on the soft marginals it sees later.
    """
    x = encode_levels(levels).astype(np.float64)
    y = reach_labels(levels, spec)
    H, W = levels[0].H, levels[0].W
    split = int(0.8 * len(levels))
    xtr, ytr, xte, yte = x[:split], y[:split], x[split:], y[split:]
    majority = float(max(yte.mean(), 1.0 - yte.mean())) if len(yte) else 1.0
    degenerate = bool(np.all(y == y.flat[0]))
    rng = np.random.default_rng(seed)
    sizes = [x.shape[1], *hidden, H * W]
    net = MLP(sizes, ["relu"] * len(hidden) + ["linear"], rng=rng, seed=seed,
              meta={"role": "phi", "H": H, "W": W})
    # output biases start at the per-tile label log-odds
    prior = np.clip(ytr.mean(axis=0), 1e-3, 1 - 1e-3) if len(ytr) else np.full(H * W, 0.5)
    net.params[-1].value[...] = np.log(prior / (1 - prior))
    opt = Adam(net.params, lr=lr, beta1=0.9, beta2=0.999)
    for _ in range(epochs):
        perm = rng.permutation(len(xtr))
        for i in range(0, len(perm), batch):
            idx = perm[i : i + batch]
            xb = xtr[idx]
            if soften > 0:
                mix = rng.random((len(idx), 1)) * soften
                noise = rng.dirichlet(np.ones(T), size=(len(idx), H * W)).reshape(len(idx), -1)
                xb = (1 - mix) * xb + mix * noise
            loss = ad.bce_logits(net(ad.const(xb)), ytr[idx])
            opt.step(ad.backward(loss, net.params))
    # the network is trained on logits; the deployed map ends in a sigmoid
    net.activations[-1] = "sigmoid"
    return PhiResult(
        net=net,
        heldout_accuracy=_accuracy(net, xte, yte) if len(xte) else float("nan"),
        majority_rate=majority,
        train_accuracy=_accuracy(net, xtr, ytr),
        degenerate=degenerate,
    )
