"""Paired GAN / CAN experiments.

Every experiment trains a baseline (``lambda_max = 0``) and a constrained
model on the same data with the same seeds, then evaluates both with the
same sampling seeds.  Results are plain CSV; a run directory additionally
holds weights, per-epoch reports and rendered sample sheets.
"""

from __future__ import annotations

import csv
import io
import json
import subprocess
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import gridworld as gw
from . import trainer as tr
from .circuit import Circuit, compile
from .formula import Formula, Var, disj, parse_dsl
from .semloss import ConditionalSpec, build_conditional, estimate_prior

NAMES = ("xor-toy", "pipes", "reachability", "conditional")
DEFAULT_SEEDS = (0, 1, 2, 3)


class BudgetExceeded(RuntimeError):
    pass


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _csv(columns: Sequence[str], rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Default configurations (desk scale)

GRID_BASE = dict(
    epochs=150, bootstrap_epochs=50, ramp_epochs=50, batch_size=64, latent_dim=32,
    gen_hidden=(128, 128), disc_hidden=(128,), lr=5e-4, real_label=0.9, probe_size=256,
)

DEFAULTS = {
    "xor-toy": tr.TrainConfig(
        epochs=150, bootstrap_epochs=50, ramp_epochs=50, lambda_max=1.0, latent_dim=8,
        gen_hidden=(64, 64), disc_hidden=(64, 64), probe_size=2000,
    ),
    "pipes": tr.TrainConfig(lambda_max=0.2, **GRID_BASE),
    "reachability": tr.TrainConfig(lambda_max=0.5, **GRID_BASE),
    "conditional": tr.TrainConfig(lambda_max=1.0, **GRID_BASE),
}


def resolve_config(name: str, overrides: Optional[dict] = None) -> tr.TrainConfig:
    """Experiment defaults with ``overrides`` applied.

    Shortening ``epochs`` without touching the schedule shrinks the bootstrap
    and ramp to fit.
    """
    if name not in DEFAULTS:
        raise KeyError(f"unknown experiment {name!r}; choose from {', '.join(NAMES)}")
    base = DEFAULTS[name]
    kw = dict(overrides or {})
    if "epochs" in kw:
        e = int(kw["epochs"])
        boot = int(kw.get("bootstrap_epochs", min(base.bootstrap_epochs, e)))
        kw.setdefault("bootstrap_epochs", boot)
        kw.setdefault("ramp_epochs", min(base.ramp_epochs, e - boot))
    return base.replace(**kw)


# ---------------------------------------------------------------------------
# Experiment set-ups


@dataclass
class Setup:
    """Data, penalty and evaluation for one experiment."""

    data: np.ndarray
    spec: tr.GeneratorSpec
    penalty: Callable
    validity: Callable
    columns: tuple
    evaluate: Callable  # (generator, seed) -> dict of metric values
    render: Callable  # (generator, seed) -> str
    prior: Optional[dict] = None
    extras: dict = field(default_factory=dict)


def xor_data(n: int, rate: float, seed: int) -> np.ndarray:
    """Satisfying XOR pairs with exactly ``round(rate * n)`` rows flipped to
    a violating pair."""
    rng = np.random.default_rng(seed)
    d = np.array([[0, 1], [1, 0]])[rng.integers(0, 2, n)]
    k = int(round(rate * n))
    idx = rng.choice(n, k, replace=False)
    d[idx] = np.array([[0, 0], [1, 1]])[rng.integers(0, 2, k)]
    return d.astype(np.float64)


def _xor_setup(cfg: tr.TrainConfig, eval_n: int, n: int = 1000, rate: float = 0.1) -> Setup:
    circuit = compile(parse_dsl("x ^ y"))
    spec = tr.GeneratorSpec(cfg.latent_dim, cells=2, group_size=1, hidden=cfg.gen_hidden)
    data = xor_data(n, rate, cfg.seed)
    corruption = float((~circuit.check_batch(data.astype(np.uint8))).mean())
    valid = tr.circuit_validity(circuit, spec)

    def evaluate(gen, seed):
        s = tr.sample(gen, eval_n, seed=seed)
        v = float(valid(s).mean())
        return {"validity": v, "invalidity": 1.0 - v, "corruption": corruption}

    def render(gen, seed):
        s = tr.sample(gen, 16, seed=seed)
        return "".join(f"{a}{b}\n" for a, b in s)

    return Setup(data, spec, tr.CircuitPenalty(circuit), valid,
                 ("validity", "invalidity", "corruption"), evaluate, render,
                 extras={"corruption": corruption})


def _grid_spec(cfg, H, W, code_dim=0):
    return tr.GeneratorSpec(cfg.latent_dim, cells=H * W, group_size=gw.T, hidden=cfg.gen_hidden,
                            code_dim=code_dim)


def _sheet(tiles, H, W) -> str:
    return gw.format_levels(gw.levels_from_tiles(tiles, H, W))


def _pipes_setup(cfg, eval_n, n=512, H=gw.DEFAULT_H, W=gw.DEFAULT_W) -> Setup:
    ds = gw.synth_dataset(n, H, W, style="pipes", seed=cfg.seed)
    circuit = gw.pipe_circuit(H, W)
    spec = _grid_spec(cfg, H, W)

    def evaluate(gen, seed):
        levels = gw.levels_from_tiles(tr.sample(gen, eval_n, seed=seed), H, W)
        return dict(zip(gw.METRIC_COLUMNS, gw.metrics(levels, ds, circuit).row()))

    return Setup(ds.encodings(), spec, tr.CircuitPenalty(circuit, categorical=True),
                 tr.circuit_validity(circuit, spec),
                 gw.METRIC_COLUMNS, evaluate, lambda g, s: _sheet(tr.sample(g, 8, seed=s), H, W))


def phi_training_levels(n: int, H: int, W: int, seed: int) -> list:
    """Mixed-style levels for fitting the reachability embedding."""
    per = n // 3
    levels = []
    for i, style in enumerate(("gaps", "mixed", "no-pipes")):
        k = per if i < 2 else n - 2 * per
        levels += gw.synth_dataset(k, H, W, style=style, seed=seed + i).levels
    order = np.random.default_rng(seed).permutation(len(levels))
    return [levels[i] for i in order]


def _reach_setup(cfg, eval_n, n=512, H=gw.DEFAULT_H, W=gw.DEFAULT_W, phi_levels=2000) -> Setup:
    ds = gw.synth_dataset(n, H, W, style="gaps", seed=cfg.seed)
    phi = gw.train_phi(phi_training_levels(phi_levels, H, W, cfg.seed + 10), seed=cfg.seed,
                       soften=0.5)
    reach = compile(gw.build_reachability_constraint(H))
    columns = [r * W + (W - 1) for r in range(H)]
    spec = _grid_spec(cfg, H, W)
    pipes = gw.pipe_circuit(H, W)

    def playable(samples, codes=None):
        return np.array([gw.is_playable(lv) for lv in gw.levels_from_tiles(samples, H, W)])

    def evaluate(gen, seed):
        tiles = tr.sample(gen, eval_n, seed=seed)
        levels = gw.levels_from_tiles(tiles, H, W)
        ok = playable(tiles)
        m = gw.metrics(levels, ds, valid=ok)
        return {
            "playability": float(ok.mean()),
            "pipe_validity": float(pipes.check_batch(gw.encode_levels(levels)).mean()),
            "uniqueness": m.uniqueness,
            "diversity": m.diversity,
            "pipe_tiles": m.pipe_tiles,
        }

    def render(gen, seed):
        levels = gw.levels_from_tiles(tr.sample(gen, 8, seed=seed), H, W)
        return "\n".join(f"{H} {W}\n{lv.render(gw.reachable_tiles(lv).cells)}\n" for lv in levels)

    # the pipe term keeps the generator from using stray pipe tiles as platforms
    penalty = tr.SumPenalty([tr.EmbeddedPenalty(phi.net, reach, columns),
                             tr.CircuitPenalty(pipes, categorical=True)])
    return Setup(ds.encodings(), spec, penalty, playable,
                 ("playability", "pipe_validity", "uniqueness", "diversity", "pipe_tiles"),
                 evaluate, render,
                 extras={"phi": phi, "data_playability": float(playable(
                     np.stack([lv.tiles.reshape(-1) for lv in ds.levels])).mean())})


def conditional_properties(H: int, W: int) -> tuple[Formula, Formula]:
    """psi_1: the bottom row has a pit.  psi_2: some pipe top-left tile."""
    names = gw.grid_variables(H, W)
    pit = disj(Var(gw.var_name(H - 1, c, gw.E)) for c in range(W))
    pipe = disj(Var(gw.var_name(r, c, gw.TL)) for r in range(H) for c in range(W))
    return Formula(pit, names), Formula(pipe, names)


def property_labels(levels: Sequence[gw.GridLevel]) -> np.ndarray:
    """(n, 2) 0/1 truth values of the two conditional properties."""
    return np.array([[int(np.any(lv.tiles[-1] == gw.E)), int(np.any(lv.tiles == gw.TL))]
                     for lv in levels])


CODE_NAMES = ("c1", "c2")
ALL_CODES = ((0, 0), (0, 1), (1, 0), (1, 1))


@lru_cache(maxsize=4)
def _conditional_circuit(H: int, W: int) -> Circuit:
    psi = conditional_properties(H, W)
    cspec = ConditionalSpec(psi, CODE_NAMES)
    f = build_conditional(cspec, base=gw.build_pipe_constraint(H, W))
    # code bits at the bottom of the order keep the diagram near pipe size
    return compile(f, order=list(f.variables[len(CODE_NAMES):]) + list(CODE_NAMES))


def _conditional_setup(cfg, eval_n, n=512, H=gw.DEFAULT_H, W=gw.DEFAULT_W) -> Setup:
    ds = gw.synth_dataset(n, H, W, style="mixed", seed=cfg.seed)
    labels = property_labels(ds.levels)
    prior = estimate_prior(labels)
    circuit = _conditional_circuit(H, W)
    spec = _grid_spec(cfg, H, W, code_dim=len(CODE_NAMES))
    valid = tr.circuit_validity(circuit, spec)
    pipes = gw.pipe_circuit(H, W)
    per_code = max(1, eval_n // len(ALL_CODES))

    def evaluate(gen, seed):
        hit = {(i, b): [0, 0] for i in range(2) for b in (0, 1)}
        total_valid = 0
        rng = np.random.default_rng(seed)
        for code in ALL_CODES:
            tiles = tr.sample(gen, per_code, code=code, seed=rng)
            levels = gw.levels_from_tiles(tiles, H, W)
            ok = pipes.check_batch(gw.encode_levels(levels))
            total_valid += int(ok.sum())
            props = property_labels([lv for lv, o in zip(levels, ok) if o]).reshape(-1, 2)
            for i in range(2):
                agree = props[:, i] == code[i]
                hit[(i, code[i])][0] += int(agree.sum())
                hit[(i, code[i])][1] += len(props)
        out = {"validity": total_valid / (per_code * len(ALL_CODES))}
        for i in range(2):
            for b, tag in ((1, "on"), (0, "off")):
                a, m = hit[(i, b)]
                out[f"psi{i + 1}_{tag}"] = a / m if m else 0.0
        return out

    def render(gen, seed):
        rng = np.random.default_rng(seed)
        parts = []
        for code in ALL_CODES:
            parts.append(f"# code {''.join(map(str, code))}\n")
            parts.append(_sheet(tr.sample(gen, 3, code=code, seed=rng), H, W))
        return "".join(parts)

    return Setup(ds.encodings(), spec, tr.CircuitPenalty(circuit, code_dim=len(CODE_NAMES), categorical=True),
                 valid, ("validity", "psi1_on", "psi1_off", "psi2_on", "psi2_off"), evaluate,
                 render, prior=prior, extras={"prior": prior})


SETUPS = {
    "xor-toy": _xor_setup,
    "pipes": _pipes_setup,
    "reachability": _reach_setup,
    "conditional": _conditional_setup,
}

EVAL_SAMPLES = {"xor-toy": 4000, "pipes": 1000, "reachability": 500, "conditional": 800}


# ---------------------------------------------------------------------------
# Running


def version_string() -> str:
    from importlib.metadata import PackageNotFoundError, version

    try:
        base = "v" + version("artifact")
    except PackageNotFoundError:
        base = "v0"
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{base}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return base


@dataclass
class ExperimentResult:
    name: str
    columns: tuple
    rows: list
    config: tr.TrainConfig
    seeds: tuple
    extras: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    generators: dict = field(default_factory=dict)
    run_dir: Optional[Path] = None

    @property
    def all_columns(self) -> tuple:
        return ("experiment", "seed", "model", "lambda_max") + tuple(self.columns)

    def comparison_csv(self) -> str:
        return _csv(self.all_columns, self.rows)

    def mean(self, model: str, column: str) -> float:
        vals = [r[column] for r in self.rows if r["model"] == model]
        return float(np.mean(vals)) if vals else float("nan")

    def summary_rows(self) -> list[dict]:
        out = []
        for model in ("gan", "can"):
            row = {"experiment": self.name, "model": model,
                   "seeds": len([r for r in self.rows if r["model"] == model])}
            row.update({c: self.mean(model, c) for c in self.columns})
            out.append(row)
        return out

    def summary_csv(self) -> str:
        return _csv(("experiment", "model", "seeds") + tuple(self.columns), self.summary_rows())

    def paired(self, column: str) -> list[tuple[float, float]]:
        """(gan, can) values per seed."""
        by = {(r["seed"], r["model"]): r[column] for r in self.rows}
        return [(by[(s, "gan")], by[(s, "can")]) for s in self.seeds]


def _planned_outputs(seeds) -> list[str]:
    out = ["config.txt", "comparison.csv", "summary.csv"]
    for s in seeds:
        for model in ("gan", "can"):
            d = f"{model}-seed{s}"
            out += [f"{d}/weights.bin", f"{d}/report.csv", f"{d}/samples.txt"]
    return out


def _write_manifest(path: Path, manifest: dict):
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def run_experiment(name: str, cfg: Optional[tr.TrainConfig] = None, seeds: Sequence[int] = DEFAULT_SEEDS,
                   out_dir=None, eval_samples: Optional[int] = None,
                   log: Optional[Callable[[str], None]] = None, budget: Optional[float] = None,
                   command: str = "") -> ExperimentResult:
    """Train and evaluate the GAN / CAN pair for every seed.

    ``cfg.seed`` fixes the data (and the embedding network, where there is
    one); ``seeds`` fix initialisation, noise and evaluation sampling.
    ``budget`` caps wall-clock seconds, checked after each training run.
    """
    if name not in SETUPS:
        raise KeyError(f"unknown experiment {name!r}; choose from {', '.join(NAMES)}")
    cfg = cfg if cfg is not None else resolve_config(name)
    seeds = tuple(int(s) for s in seeds)
    eval_n = eval_samples if eval_samples is not None else EVAL_SAMPLES[name]
    start = time.time()
    run_dir = None
    manifest = {}
    if out_dir is not None:
        run_dir = Path(out_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "command": command or f"experiment {name}",
            "experiment": name,
            "seed": cfg.seed,
            "seeds": list(seeds),
            "config": cfg.dumps().splitlines(),
            "version": version_string(),
            "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "outputs": _planned_outputs(seeds),
        }
        _write_manifest(run_dir / "manifest.json", manifest)
        (run_dir / "config.txt").write_text(cfg.dumps())

    setup = SETUPS[name](cfg, eval_n)
    result = ExperimentResult(name, setup.columns, [], cfg, seeds, extras=dict(setup.extras))
    meta = {"experiment": name}
    if setup.spec.group_size == gw.T:
        meta["grid"] = [gw.DEFAULT_H, gw.DEFAULT_W]
    task = tr.Task(setup.data, setup.spec, setup.penalty, setup.validity, setup.prior, meta)
    for s in seeds:
        for model, lam in (("gan", 0.0), ("can", cfg.lambda_max)):
            run_cfg = cfg.replace(seed=s, lambda_max=lam)
            if log:
                log(f"{name}: training {model} seed {s}")
            res = tr.train(run_cfg, task)
            eval_seed = 10_000 + s
            metrics = setup.evaluate(res.generator, eval_seed)
            row = {"experiment": name, "seed": s, "model": model, "lambda_max": lam, **metrics}
            result.rows.append(row)
            result.reports[(s, model)] = res.report
            result.generators[(s, model)] = res.generator
            if run_dir is not None:
                d = run_dir / f"{model}-seed{s}"
                d.mkdir(exist_ok=True)
                res.generator.save(d / "weights.bin")
                res.report.weights_path = str(Path(d.name) / "weights.bin")
                (d / "report.csv").write_text(res.report.to_csv())
                (d / "samples.txt").write_text(setup.render(res.generator, eval_seed))
            if log:
                log(f"{name}: {model} seed {s}: " + ", ".join(f"{k}={metrics[k]:.3f}" for k in setup.columns))
            if budget is not None and time.time() - start > budget:
                raise BudgetExceeded(f"experiment {name} exceeded its {budget:.0f}s budget")

    if run_dir is not None:
        (run_dir / "comparison.csv").write_text(result.comparison_csv())
        (run_dir / "summary.csv").write_text(result.summary_csv())
        extra_files = _write_extras(run_dir, name, result.extras)
        manifest["outputs"] += extra_files
        manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        _write_manifest(run_dir / "manifest.json", manifest)
        result.run_dir = run_dir
    return result


def _write_extras(run_dir: Path, name: str, extras: dict) -> list[str]:
    files = []
    if "phi" in extras:
        phi = extras["phi"]
        phi.net.save(run_dir / "phi.bin")
        (run_dir / "phi.csv").write_text(_csv(
            ("heldout_accuracy", "majority_rate", "train_accuracy", "degenerate"),
            [{"heldout_accuracy": phi.heldout_accuracy, "majority_rate": phi.majority_rate,
              "train_accuracy": phi.train_accuracy, "degenerate": int(phi.degenerate)}]))
        files += ["phi.bin", "phi.csv"]
    if "prior" in extras:
        rows = [{"code": "".join(map(str, k)), "probability": v} for k, v in extras["prior"].items()]
        (run_dir / "prior.csv").write_text(_csv(("code", "probability"), rows))
        files.append("prior.csv")
    return files
