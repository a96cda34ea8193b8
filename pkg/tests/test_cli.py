import os
import subprocess
import sys

import numpy as np
import pytest

from semgen.cli import main
from semgen.circuit import Circuit
from semgen.trainer import GeneratorSpec, make_generator


@pytest.fixture
def files(tmp_path):
    (tmp_path / "xor.dsl").write_text("x ^ y\n")
    (tmp_path / "cnf.dsl").write_text("(x | y) & (!x | !y)\n")
    (tmp_path / "dnf.dsl").write_text("(x & !y) | (!x & y)\n")
    (tmp_path / "unsat.dsl").write_text("x & !x\n")
    (tmp_path / "bad.dsl").write_text("x & (y |\n")
    (tmp_path / "flat.lvl").write_text("3 4\n....\n....\n####\n")
    (tmp_path / "xor.cnf").write_text("p cnf 2 2\n1 2 0\n-1 -2 0\n")
    return tmp_path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_compile_stats(files, capsys):
    code, out, _ = run(capsys, "compile", files / "xor.dsl", "-o", files / "xor.circ")
    assert code == 0
    assert "nodes: 3" in out and "models: 2" in out and "variables: 2" in out
    assert Circuit.loads((files / "xor.circ").read_text()).model_count() == 2
    code, out, _ = run(capsys, "compile", files / "xor.cnf")
    assert code == 0 and "models: 2" in out


def test_compile_unsat_warns(files, capsys):
    code, out, err = run(capsys, "compile", files / "unsat.dsl")
    assert code == 0 and "models: 0" in out and "unsatisfiable" in err


def test_compile_errors(files, capsys):
    assert run(capsys, "compile", files / "bad.dsl")[0] == 1
    assert run(capsys, "compile", files / "missing.dsl")[0] == 1
    code, _, err = run(capsys, "compile", "pipes:8x8", "--max-nodes", "1000")
    assert code == 2 and "node budget" in err


def test_compile_order(files, capsys):
    code, out, _ = run(capsys, "compile", files / "xor.dsl", "--order", "y,x")
    assert code == 0 and "nodes: 3" in out
    assert run(capsys, "compile", files / "xor.dsl", "--order", "y,y")[0] == 1


def test_wmc_and_sl(files, capsys):
    code, out, _ = run(capsys, "wmc", files / "xor.dsl", "--theta", "0.3,0.8")
    assert code == 0
    assert float(out.splitlines()[0].split(":")[1]) == pytest.approx(0.62, abs=1e-15)
    grads = [float(line.split()[1]) for line in out.splitlines()[2:]]
    assert grads == pytest.approx([-0.6, 0.4], abs=1e-15)
    code, out, _ = run(capsys, "sl", files / "xor.dsl", "--theta", "0.3,0.8")
    assert code == 0
    assert float(out.splitlines()[0].split(":")[1]) == pytest.approx(-np.log(0.62), abs=1e-14)
    (files / "theta.txt").write_text("0.3\n0.8\n")
    by_file = run(capsys, "wmc", files / "xor.dsl", files / "theta.txt")[1]
    assert by_file == run(capsys, "wmc", files / "xor.dsl", "--theta", "0.3,0.8")[1]


def test_theta_errors(files, capsys):
    assert run(capsys, "wmc", files / "xor.dsl", "--theta", "0.3")[0] == 1
    assert run(capsys, "wmc", files / "xor.dsl", "--theta", "0.3,1.5")[0] == 1
    assert run(capsys, "wmc", files / "xor.dsl", "--theta", "a,b")[0] == 1
    assert run(capsys, "wmc", files / "xor.dsl")[0] == 1


def test_sl_infinite(files, capsys):
    code, out, err = run(capsys, "sl", files / "xor.dsl", "--theta", "1,1")
    assert code == 0 and "inf" in out


def test_fuzzy_baseline(files, capsys):
    code, out, _ = run(capsys, "sl", files / "cnf.dsl", "--theta", "0.5,0.5", "--fuzzy", "cnf")
    assert code == 0 and "fuzzy truth: 1.0" in out and "fuzzy loss: 0.0" in out
    code, out, _ = run(capsys, "sl", files / "dnf.dsl", "--theta", "0.5,0.5", "--fuzzy", "dnf")
    assert code == 0 and "fuzzy truth: 0.0" in out and "fuzzy loss: inf" in out
    assert run(capsys, "sl", files / "dnf.dsl", "--theta", "0.5,0.5", "--fuzzy", "cnf")[0] == 1
    a = run(capsys, "sl", files / "cnf.dsl", "--theta", "0.5,0.5")[1].splitlines()[0]
    b = run(capsys, "sl", files / "dnf.dsl", "--theta", "0.5,0.5")[1].splitlines()[0]
    assert a == b


def test_render_level(files, capsys):
    code, out, _ = run(capsys, "render", files / "flat.lvl")
    assert code == 0 and out.splitlines()[-1] == "####"
    code, out, _ = run(capsys, "render", files / "flat.lvl", "--annotate-reach")
    assert out.splitlines()[2] == "@***"
    assert run(capsys, "render")[0] == 1


def _weights(path, grid=True):
    spec = GeneratorSpec(4, 16, 6, hidden=(8,)) if grid else GeneratorSpec(4, 2, 1, hidden=(8,))
    net = make_generator(spec, np.random.default_rng(0))
    if grid:
        net.meta["grid"] = [4, 4]
    net.save(path)
    return path


def test_render_and_sample_from_weights(files, capsys):
    w = _weights(files / "g.bin")
    code, out, _ = run(capsys, "render", "--weights", w, "-n", "3")
    assert code == 0 and out.count("4 4\n") == 3
    a = run(capsys, "--seed", "5", "sample", "--weights", w, "-n", "4")[1]
    b = run(capsys, "--seed", "5", "sample", "--weights", w, "-n", "4")[1]
    assert a == b and a.count("4 4\n") == 4
    assert run(capsys, "sample", "--weights", w, "-n", "2", "--code", "1")[0] == 1
    assert run(capsys, "sample", "--weights", files / "flat.lvl")[0] == 1


def test_sample_with_rejection(files, capsys):
    w = _weights(files / "b.bin", grid=False)
    code, out, err = run(capsys, "sample", "--weights", w, "-n", "5", "--reject",
                         "--constraint", files / "xor.dsl")
    assert code == 0
    assert sorted(set(out.split())) <= ["01", "10"] and len(out.split()) == 5
    assert "attempts" in err
    assert run(capsys, "sample", "--weights", w, "--reject")[0] == 1


def test_train_command(files, capsys):
    data = "\n".join(["01", "10"] * 20) + "\n"
    (files / "data.txt").write_text(data)
    (files / "cfg.txt").write_text(
        f"epochs=3\nbootstrap_epochs=1\nramp_epochs=1\nlambda_max=1.0\nbatch_size=8\n"
        f"latent_dim=4\ngen_hidden=8\ndisc_hidden=8\nprobe_size=20\n"
        f"dataset={files / 'data.txt'}\nconstraint={files / 'xor.dsl'}\n")
    out_dir = files / "run"
    code, out, _ = run(capsys, "train", "--config", files / "cfg.txt", "--out", out_dir)
    assert code == 0
    for f in ("manifest.json", "config.txt", "weights.bin", "report.csv", "samples.txt"):
        assert (out_dir / f).exists()
    assert len((out_dir / "report.csv").read_text().splitlines()) == 4
    code, out, _ = run(capsys, "report", "--run", out_dir)
    assert code == 0 and "epochs: 3" in out
    (files / "bad.txt").write_text("epochs=x\n")
    assert run(capsys, "train", "--config", files / "bad.txt")[0] == 1


def test_conditional_train_command(files, capsys):
    rows = ["110", "001", "111", "000"] * 6
    (files / "d.txt").write_text("\n".join(rows) + "\n")
    (files / "base.dsl").write_text("a | !a | b | c\n")
    (files / "cond.txt").write_text("k = a & b\n")
    (files / "cfg.txt").write_text(
        f"epochs=2\nbootstrap_epochs=0\nramp_epochs=0\nlambda_max=1.0\nbatch_size=8\n"
        f"latent_dim=4\ngen_hidden=8\ndisc_hidden=8\nprobe_size=20\n"
        f"dataset={files / 'd.txt'}\nconstraint={files / 'base.dsl'}\nconditional={files / 'cond.txt'}\n")
    code, _, err = run(capsys, "train", "--config", files / "cfg.txt", "--out", files / "r")
    assert code == 0, err
    code, out, _ = run(capsys, "sample", "--weights", files / "r" / "weights.bin", "-n", "3", "--code", "1")
    assert code == 0 and len(out.split()) == 3
    assert "# code 1" in (files / "r" / "samples.txt").read_text()


def test_experiment_command(files, capsys):
    out_dir = files / "exp"
    code, out, _ = run(capsys, "experiment", "xor-toy", "--set", "epochs=1", "--set", "probe_size=20",
                       "--seeds", "0", "--eval-samples", "50", "--out", out_dir)
    assert code == 0 and out.startswith("experiment,model,seeds,validity")
    code, out, _ = run(capsys, "report", "--run", out_dir)
    assert code == 0 and "missing" not in out and "xor-toy,gan,1" in out
    assert run(capsys, "experiment", "mario")[0] == 1
    assert run(capsys, "experiment", "xor-toy", "--set", "epochs")[0] == 1
    assert run(capsys, "experiment", "xor-toy", "--set", "epochs=1", "--seeds", "0",
               "--eval-samples", "10", "--budget", "0", "--out", files / "budget")[0] == 2


def test_report_errors(files, capsys):
    assert run(capsys, "report", "--run", files / "nowhere")[0] == 1
    assert run(capsys, "report", "--run", files)[0] == 1


def test_thread_variable_is_checked(files):
    env = dict(os.environ, SEMGEN_THREADS="zero")
    p = subprocess.run([sys.executable, "-m", "semgen.cli", "compile", str(files / "xor.dsl")],
                       env=env, capture_output=True, text=True)
    assert p.returncode == 1 and "SEMGEN_THREADS" in p.stderr
    env["SEMGEN_THREADS"] = "1"
    p = subprocess.run([sys.executable, "-m", "semgen.cli", "compile", str(files / "xor.dsl")],
                       env=env, capture_output=True, text=True)
    assert p.returncode == 0 and "nodes: 3" in p.stdout
