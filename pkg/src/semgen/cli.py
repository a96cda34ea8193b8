"""Command-line entry point: ``semgen <command> ...``."""

from __future__ import annotations

import os
import sys

# must happen before numpy loads its BLAS
_THREADS = os.environ.get("SEMGEN_THREADS")
if _THREADS:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse
import json
import time
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import gridworld as gw
from . import trainer as tr
from .circuit import Circuit, CompilationBlowup, DEFAULT_MAX_NODES, compile
from .formula import (
    And,
    Const,
    Formula,
    FormulaSyntaxError,
    Not,
    Or,
    Var,
    desugar,
    evaluate_batch,
    parse_dimacs,
    parse_dsl,
)
from .nn import MLP
from .semloss import (
    ConditionalSpec,
    InfiniteLoss,
    build_conditional,
    estimate_prior,
    fuzzy_loss,
    fuzzy_truth,
    semantic_loss,
)

EXIT_OK, EXIT_INPUT, EXIT_BUDGET, EXIT_INTERNAL = 0, 1, 2, 3


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# Loading helpers


def read_text(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror}") from None


def parse_constraint_text(text: str) -> Formula:
    body = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("c")]
    if body and body[0].startswith("p cnf"):
        return parse_dimacs(text)
    return parse_dsl(text)


def load_constraint(ref: str, order=None, max_nodes: int = DEFAULT_MAX_NODES):
    """Formula (or None) and circuit for a constraint reference.

    ``ref`` is a circuit file, a DSL or DIMACS file, ``pipes:HxW`` or
    ``reach:H``.
    """
    if ref.startswith("pipes:"):
        H, W = _shape(ref[6:])
        f = gw.build_pipe_constraint(H, W)
        return f, compile(f, order=order, max_nodes=max_nodes)
    if ref.startswith("reach:"):
        f = gw.build_reachability_constraint(int(ref[6:]))
        return f, compile(f, order=order, max_nodes=max_nodes)
    text = read_text(ref)
    if text.startswith("semgen-circuit"):
        return None, Circuit.loads(text)
    f = parse_constraint_text(text)
    return f, compile(f, order=order, max_nodes=max_nodes)


def _shape(text: str) -> tuple[int, int]:
    try:
        H, W = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise InputError(f"bad grid shape {text!r}; expected HxW") from None
    return H, W


def read_vector(path=None, inline=None) -> np.ndarray:
    if inline is not None:
        parts = inline.replace(",", " ").split()
    else:
        parts = [ln.split("#")[0].strip() for ln in read_text(path).splitlines()]
        parts = [p for p in parts if p]
    try:
        return np.array([float(p) for p in parts])
    except ValueError:
        raise InputError("marginal vector must contain numbers") from None


def read_assignments(text: str) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#")[0].strip().replace(" ", "")
        if not line:
            continue
        if set(line) - {"0", "1"}:
            raise InputError(f"line {lineno}: assignments are strings of 0/1")
        rows.append([int(ch) for ch in line])
    if not rows or len({len(r) for r in rows}) != 1:
        raise InputError("assignment file is empty or ragged")
    return np.array(rows, dtype=np.float64)


def load_dataset(path: str):
    """(encodings, levels or None).  Level files start with an "H W" header."""
    text = read_text(path)
    first = next((ln for ln in text.splitlines() if ln.strip()), "")
    if len(first.split()) == 2:
        levels = gw.parse_levels(text)
        return gw.Dataset(levels).encodings().astype(np.float64), levels
    return read_assignments(text), None


def parse_code(text: str | None):
    if text is None:
        return None
    if not text or set(text) - {"0", "1"}:
        raise InputError(f"code must be a bit string, got {text!r}")
    return tuple(int(ch) for ch in text)


def parse_conditional(text: str, variables) -> ConditionalSpec:
    """Lines ``name = <DSL formula>``; the formulas use the data variables."""
    names, constraints = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#")[0].strip()
        if not line:
            continue
        name, sep, body = line.partition("=")
        if not sep:
            raise InputError(f"conditional line {lineno}: expected 'name = formula'")
        f = parse_dsl(body)
        unknown = set(f.variables) - set(variables)
        if unknown:
            raise InputError(f"conditional line {lineno}: unknown variables {sorted(unknown)}")
        names.append(name.strip())
        constraints.append(Formula(f.root, tuple(variables)))
    return ConditionalSpec(tuple(constraints), tuple(names))


def _is_literal(n) -> bool:
    return isinstance(n, Var) or (isinstance(n, Not) and isinstance(n.child, Var))


def _is_normal_form(root, outer, inner) -> bool:
    parts = root.children if isinstance(root, outer) else (root,)
    for p in parts:
        lits = p.children if isinstance(p, inner) else (p,)
        if not all(_is_literal(x) or isinstance(x, Const) for x in lits):
            return False
    return True


# ---------------------------------------------------------------------------
# Commands


def cmd_compile(args) -> int:
    order = _order_arg(args.order)
    f, c = load_constraint(args.constraint, order=order, max_nodes=args.max_nodes)
    stats = c.stats()
    print(f"variables: {c.num_vars}")
    print(f"nodes: {c.node_count}")
    print(f"models: {c.model_count()}")
    print(f"depth: {stats['depth']}")
    if c.model_count() == 0:
        print("warning: constraint is unsatisfiable", file=sys.stderr)
    if args.out:
        Path(args.out).write_text(c.dumps())
        print(f"wrote {args.out}")
    return EXIT_OK


def _order_arg(order):
    if not order:
        return None
    if Path(order).is_file():
        return read_text(order).split()
    return order.replace(",", " ").split()


def _theta(args, c: Circuit) -> np.ndarray:
    if args.theta_file is None and args.theta is None:
        raise InputError("give a marginal file or --theta")
    theta = read_vector(args.theta_file, args.theta)
    if len(theta) != c.num_vars:
        raise InputError(f"marginal vector has {len(theta)} entries, constraint has {c.num_vars} variables")
    if np.any((theta < 0) | (theta > 1)):
        raise InputError("marginals must lie in [0, 1]")
    return theta


def _print_vector(label, names, values):
    print(label)
    for n, v in zip(names, values):
        print(f"  {n} {float(v)!r}")


def cmd_wmc(args) -> int:
    _, c = load_constraint(args.constraint)
    theta = _theta(args, c)
    w, g = c.wmc_and_gradient(theta)
    print(f"wmc: {w!r}")
    _print_vector("gradient:", c.names, g)
    return EXIT_OK


def cmd_sl(args) -> int:
    f, c = load_constraint(args.constraint)
    theta = _theta(args, c)
    if args.fuzzy:
        if f is None:
            raise InputError("the fuzzy baseline needs a formula file, not a compiled circuit")
        d = desugar(f)
        outer, inner = (And, Or) if args.fuzzy == "cnf" else (Or, And)
        if not _is_normal_form(d.root, outer, inner):
            raise InputError(f"constraint is not in {args.fuzzy.upper()} form")
        t = fuzzy_truth(d, theta)
        print(f"fuzzy truth: {t!r}")
        try:
            print(f"fuzzy loss: {fuzzy_loss(d, theta)!r}")
        except InfiniteLoss:
            print("fuzzy loss: inf")
        return EXIT_OK
    try:
        loss = semantic_loss(c, theta)
    except InfiniteLoss:
        print("semantic loss: inf")
        print("warning: the marginals give the constraint zero probability", file=sys.stderr)
        return EXIT_OK
    print(f"semantic loss: {loss.value!r}")
    _print_vector("gradient:", c.names, loss.gradient)
    return EXIT_OK


def _manifest(run_dir: Path, command: str, cfg_text: str, seed, outputs) -> dict:
    m = {
        "command": command,
        "config": cfg_text.splitlines(),
        "seed": seed,
        "version": ex.version_string(),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "outputs": list(outputs),
    }
    (run_dir / "manifest.json").write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
    return m


def build_task(cfg: tr.TrainConfig):
    """Task and circuit for a config that names its dataset and constraint."""
    if not cfg.dataset or not cfg.constraint:
        raise InputError("config must set both dataset and constraint")
    data, levels = load_dataset(cfg.dataset)
    if levels is not None:
        H, W = levels[0].H, levels[0].W
        variables = gw.grid_variables(H, W)
        spec_kw = dict(cells=H * W, group_size=gw.T)
        meta = {"grid": [H, W]}
    else:
        variables = None
        spec_kw = dict(cells=data.shape[1], group_size=1)
        meta = {}
    f, circuit = load_constraint(cfg.constraint)
    if variables is None:
        variables = circuit.names
    prior = None
    code_dim = 0
    if cfg.conditional:
        if f is None:
            raise InputError("a conditional config needs a formula constraint, not a circuit file")
        base = Formula(f.root, tuple(variables))
        cspec = parse_conditional(read_text(cfg.conditional), variables)
        labels = np.stack([evaluate_batch(c, data.astype(np.uint8)) for c in cspec.constraints], axis=1)
        prior = estimate_prior(labels.astype(int))
        cf = build_conditional(cspec, base=base)
        k = cspec.k
        circuit = compile(cf, order=list(cf.variables[k:]) + list(cf.variables[:k]))
        code_dim = k
        meta["codes"] = list(cspec.code_names)
    width = circuit.num_vars - code_dim
    if width != data.shape[1]:
        raise InputError(f"constraint has {width} data variables, dataset rows have {data.shape[1]}")
    if tuple(circuit.names[code_dim:]) != tuple(variables):
        raise InputError("constraint variable order does not match the generator output layout")
    spec = tr.GeneratorSpec(cfg.latent_dim, hidden=cfg.gen_hidden, code_dim=code_dim, **spec_kw)
    penalty = tr.CircuitPenalty(circuit, code_dim=code_dim, categorical=spec.group_size > 1)
    task = tr.Task(data, spec, penalty, tr.circuit_validity(circuit, spec), prior, meta)
    return task, circuit, levels


def cmd_train(args) -> int:
    cfg_text = read_text(args.config)
    try:
        cfg = tr.TrainConfig.loads(cfg_text)
    except ValueError as e:
        raise InputError(f"bad config: {e}") from None
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    out = Path(args.out or f"run-train-seed{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    _manifest(out, "train", cfg.dumps(), cfg.seed,
              ["config.txt", "weights.bin", "report.csv", "samples.txt"])
    (out / "config.txt").write_text(cfg.dumps())
    task, circuit, levels = build_task(cfg)
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    res = tr.train(cfg, task, log=log)
    res.generator.save(out / "weights.bin")
    res.report.weights_path = "weights.bin"
    (out / "report.csv").write_text(res.report.to_csv())
    if task.spec.code_dim:
        sheet = "".join(f"# code {''.join(map(str, code))}\n"
                        + _render_samples(res.generator, 2, cfg.seed, code, False)
                        for code in sorted(task.prior))
    else:
        sheet = _render_samples(res.generator, 8, cfg.seed, None, False)
    (out / "samples.txt").write_text(sheet)
    last = res.report.records[-1] if res.report.records else None
    print(f"wrote {out}")
    if last is not None:
        print(f"final epoch {last.epoch}: validity {last.validity:.3f}, sl {last.sl:.4f}")
    return EXIT_OK


def _render_samples(gen: MLP, n: int, seed, code, annotate: bool, tiles=None) -> str:
    spec = tr.GeneratorSpec.from_meta(gen.meta)
    if tiles is None:
        tiles = tr.sample(gen, n, code=code, seed=seed)
    grid = gen.meta.get("grid")
    if grid and spec.group_size == gw.T:
        H, W = grid
        return _render_levels(gw.levels_from_tiles(tiles, H, W), annotate)
    return "".join("".join(str(int(v)) for v in row) + "\n" for row in tiles)


def _render_levels(levels, annotate: bool) -> str:
    blocks = []
    for lv in levels:
        body = lv.render(gw.reachable_tiles(lv).cells) if annotate else lv.render()
        blocks.append(f"{lv.H} {lv.W}\n{body}\n")
    return "\n".join(blocks)


def _load_weights(path) -> MLP:
    try:
        net = MLP.load(path)
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror}") from None
    if net.meta.get("role") != "generator":
        raise InputError(f"{path} does not hold generator weights")
    return net


def cmd_sample(args) -> int:
    gen = _load_weights(args.weights)
    code = parse_code(args.code)
    seed = 0 if args.seed is None else args.seed
    if args.n < 0:
        raise InputError("-n must be non-negative")
    if args.reject:
        if not args.constraint:
            raise InputError("--reject needs --constraint")
        _, circuit = load_constraint(args.constraint)
        res = tr.rejection_sample(gen, circuit, args.n, max(args.max_attempts, args.n), seed=seed, code=code)
        text = _render_samples(gen, 0, seed, code, False, tiles=res.samples)
        print(f"# attempts {res.attempts} accepted {len(res.samples)}"
              + (" exhausted" if res.exhausted else ""), file=sys.stderr)
    else:
        text = _render_samples(gen, args.n, seed, code, False)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_render(args) -> int:
    if args.weights:
        gen = _load_weights(args.weights)
        seed = 0 if args.seed is None else args.seed
        text = _render_samples(gen, args.n, seed, parse_code(args.code), args.annotate_reach)
    elif args.levels:
        text = _render_levels(gw.parse_levels(read_text(args.levels)), args.annotate_reach)
    else:
        raise InputError("give a level file or --weights")
    sys.stdout.write(text)
    return EXIT_OK


def _parse_sets(items) -> dict:
    for item in items or []:
        if "=" not in item:
            raise InputError(f"--set expects key=value, got {item!r}")
    return tr.TrainConfig.parse_entries("\n".join(items or []))


def cmd_experiment(args) -> int:
    if args.name not in ex.NAMES:
        raise InputError(f"unknown experiment {args.name!r}; choose from {', '.join(ex.NAMES)}")
    overrides = tr.TrainConfig.parse_entries(read_text(args.config)) if args.config else {}
    overrides.update(_parse_sets(args.set))
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        cfg = ex.resolve_config(args.name, overrides)
    except ValueError as e:
        raise InputError(f"bad config: {e}") from None
    seeds = ex.DEFAULT_SEEDS if not args.seeds else tuple(int(s) for s in args.seeds.split(","))
    out = args.out or f"run-{args.name}-seed{cfg.seed}"
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    res = ex.run_experiment(args.name, cfg, seeds=seeds, out_dir=out, eval_samples=args.eval_samples,
                            log=log, budget=args.budget, command=" ".join(["experiment"] + sys.argv[2:]))
    sys.stdout.write(res.summary_csv())
    print(f"wrote {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run)
    if not run.is_dir():
        raise InputError(f"{run} is not a run directory")
    if (run / "manifest.json").exists():
        m = json.loads((run / "manifest.json").read_text())
        print(f"command: {m.get('command', '?')}")
        print(f"version: {m.get('version', '?')}")
        missing = [p for p in m.get("outputs", []) if not (run / p).exists()]
        if missing:
            print(f"missing outputs: {', '.join(missing)}")
    if (run / "summary.csv").exists():
        print((run / "summary.csv").read_text(), end="")
    elif (run / "report.csv").exists():
        lines = (run / "report.csv").read_text().splitlines()
        print(f"epochs: {len(lines) - 1}")
        print(lines[0])
        for line in lines[-min(5, len(lines) - 1):] if len(lines) > 1 else []:
            print(line)
    else:
        raise InputError(f"{run} has neither summary.csv nor report.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semgen", description="Constrained adversarial generation toolkit.")
    p.add_argument("--seed", type=int, default=None, help="seed for every stochastic step")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compile", help="compile a constraint and print circuit statistics")
    c.add_argument("constraint", help="DSL or DIMACS file, pipes:HxW or reach:H")
    c.add_argument("--order", help="variable order: comma-separated names or a file of names")
    c.add_argument("--max-nodes", type=int, default=DEFAULT_MAX_NODES)
    c.add_argument("-o", "--out", help="write the circuit to this file")
    c.set_defaults(func=cmd_compile)

    for name, func, helptext in (("wmc", cmd_wmc, "weighted model count and gradient"),
                                 ("sl", cmd_sl, "semantic loss and gradient")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("constraint")
        s.add_argument("theta_file", nargs="?", help="one probability per line")
        s.add_argument("--theta", help="inline comma-separated probabilities")
        if name == "sl":
            s.add_argument("--fuzzy", choices=("cnf", "dnf"),
                           help="Lukasiewicz baseline; the file must be in this form")
        s.set_defaults(func=func)

    t = sub.add_parser("train", help="train one generator from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="run directory")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw samples from generator weights")
    s.add_argument("--weights", required=True)
    s.add_argument("-n", type=int, default=1)
    s.add_argument("--code", help="code bits for a conditional generator, e.g. 10")
    s.add_argument("--reject", action="store_true", help="keep only samples the constraint accepts")
    s.add_argument("--constraint", help="constraint for --reject")
    s.add_argument("--max-attempts", type=int, default=10_000)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sample)

    r = sub.add_parser("render", help="render levels as text")
    r.add_argument("levels", nargs="?", help="level file")
    r.add_argument("--weights")
    r.add_argument("-n", type=int, default=3)
    r.add_argument("--code")
    r.add_argument("--annotate-reach", action="store_true", help="mark reachable cells and the start")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("experiment", help="run a paired GAN / CAN experiment")
    e.add_argument("name", help=", ".join(ex.NAMES))
    e.add_argument("--config", help="key=value overrides file")
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.add_argument("--seeds", help="comma-separated run seeds (default 0,1,2,3)")
    e.add_argument("--eval-samples", type=int)
    e.add_argument("--budget", type=float, help="wall-clock limit in seconds")
    e.add_argument("--out", help="run directory")
    e.add_argument("-v", "--verbose", action="store_true")
    e.set_defaults(func=cmd_experiment)

    rp = sub.add_parser("report", help="summarise a run directory")
    rp.add_argument("--run", required=True)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if _THREADS is not None and not (_THREADS.isdigit() and int(_THREADS) > 0):
        print("error: SEMGEN_THREADS must be a positive integer", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (InputError, FormulaSyntaxError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (CompilationBlowup, ex.BudgetExceeded) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BUDGET
    except (tr.InvariantError, tr.TrainingDiverged, AssertionError) as e:
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except (ValueError, KeyError, IndexError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
