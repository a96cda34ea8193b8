"""Adversarial training of categorical generators with a semantic-loss penalty.

The generator maps a latent vector (plus optional code bits) to per-group
categorical marginals.  The discriminator sees those marginals directly for
fakes and one-hot encodings for real data; discrete samples are only drawn at
inference.  The generator minimises ``-mean log d(fake) + lambda * SL``.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .circuit import Circuit
from .nn import MLP, Adam

CLAMP = 1e-7


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, what: str):
        self.epoch = epoch
        super().__init__(f"{what} became non-finite at epoch {epoch}")


class InvariantError(AssertionError):
    pass


# ---------------------------------------------------------------------------
# Objectives


def gan_value(d_real, d_fake) -> float:
    """``mean log d_real + mean log(1 - d_fake)`` with outputs clamped to
    [1e-7, 1 - 1e-7] so the value is always finite."""
    r = np.clip(np.asarray(d_real, dtype=np.float64), CLAMP, 1 - CLAMP)
    f = np.clip(np.asarray(d_fake, dtype=np.float64), CLAMP, 1 - CLAMP)
    return float(np.mean(np.log(r)) + np.mean(np.log1p(-f)))


def can_objective(gan_term: float, sl_term: float, lam: float) -> float:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return gan_term + lam * sl_term


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class GeneratorSpec:
    """Latent size, code bits, hidden widths and output layout.

    Each of the ``cells`` output groups is a categorical over ``group_size``
    values; a group of size 1 is a single Bernoulli bit (sigmoid output).
    """

    latent_dim: int
    cells: int
    group_size: int
    hidden: tuple = (128, 128)
    code_dim: int = 0

    @property
    def output_dim(self) -> int:
        return self.cells * self.group_size

    @property
    def input_dim(self) -> int:
        return self.latent_dim + self.code_dim

    def to_meta(self) -> dict:
        return {"role": "generator", **dataclasses.asdict(self), "hidden": list(self.hidden)}

    @classmethod
    def from_meta(cls, meta: dict) -> "GeneratorSpec":
        return cls(
            latent_dim=meta["latent_dim"],
            cells=meta["cells"],
            group_size=meta["group_size"],
            hidden=tuple(meta["hidden"]),
            code_dim=meta.get("code_dim", 0),
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    bootstrap_epochs: int = 100
    ramp_epochs: int = 100
    lambda_max: float = 0.2
    batch_size: int = 64
    seed: int = 0
    d_steps: int = 1
    g_steps: int = 1
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    latent_dim: int = 32
    gen_hidden: tuple = (128, 128)
    disc_hidden: tuple = (128,)
    probe_size: int = 256
    sl_probe_rows: int = 16
    real_label: float = 1.0
    instance_noise: float = 0.0
    dataset: str = ""
    constraint: str = ""
    conditional: str = ""

    def __post_init__(self):
        if self.bootstrap_epochs + self.ramp_epochs > self.epochs:
            raise ValueError("bootstrap_epochs + ramp_epochs must not exceed epochs")
        if self.lambda_max < 0:
            raise ValueError("lambda_max must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not 0.5 < self.real_label <= 1.0:
            raise ValueError("real_label must be in (0.5, 1]")
        if self.instance_noise < 0:
            raise ValueError("instance_noise must be non-negative")
        if min(self.d_steps, self.g_steps) < 1:
            raise ValueError("step counts must be positive")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    # flat key=value text, one field per line
    def dumps(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse_value(cls, key: str, value: str):
        """Convert the text of one config entry to the field's type."""
        defaults = {f.name: f.default for f in dataclasses.fields(cls)}
        if key not in defaults:
            raise ValueError(f"unknown config key {key!r}")
        default = defaults[key]
        try:
            if isinstance(default, tuple):
                return tuple(int(x) for x in value.split(",") if x.strip())
            if isinstance(default, int):
                return int(value)
            if isinstance(default, float):
                return float(value)
        except ValueError:
            raise ValueError(f"bad value for {key}: {value!r}") from None
        return value

    @classmethod
    def parse_entries(cls, text: str) -> dict:
        """``key=value`` lines (``#`` comments allowed) to typed fields."""
        kw = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#")[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
            kw[key.strip()] = cls.parse_value(key.strip(), value.strip())
        return kw

    @classmethod
    def loads(cls, text: str) -> "TrainConfig":
        return cls(**cls.parse_entries(text))


def lambda_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Zero during bootstrap, then a linear ramp to ``lambda_max``."""
    if epoch < cfg.bootstrap_epochs:
        return 0.0
    if cfg.ramp_epochs == 0:
        return cfg.lambda_max
    frac = (epoch - cfg.bootstrap_epochs) / cfg.ramp_epochs
    return cfg.lambda_max * min(1.0, frac)


# ---------------------------------------------------------------------------
# Networks


def make_generator(spec: GeneratorSpec, rng, seed: int = 0) -> MLP:
    sizes = [spec.input_dim, *spec.hidden, spec.output_dim]
    return MLP(sizes, ["relu"] * len(spec.hidden) + ["linear"], rng=rng, seed=seed,
               meta=spec.to_meta())


def make_discriminator(input_dim: int, hidden: Sequence[int], rng, seed: int = 0) -> MLP:
    sizes = [input_dim, *hidden, 1]
    return MLP(sizes, ["relu"] * len(hidden) + ["linear"], rng=rng, seed=seed,
               meta={"role": "discriminator"})


def generator_theta(net: MLP, x, spec: GeneratorSpec) -> ad.Tensor:
    """Marginals for a batch of generator inputs."""
    logits = net(x)
    if spec.group_size == 1:
        return ad.sigmoid(logits)
    return ad.group_softmax(logits, spec.group_size)


def check_simplex(theta: np.ndarray, spec: GeneratorSpec, tol: float = 1e-9):
    if np.any(theta < 0) or np.any(theta > 1):
        raise InvariantError("generator marginals left [0, 1]")
    if spec.group_size > 1:
        sums = theta.reshape(len(theta), spec.cells, spec.group_size).sum(axis=2)
        if np.max(np.abs(sums - 1.0), initial=0.0) > tol:
            raise InvariantError("generator groups do not sum to 1")


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _draw(theta: np.ndarray, spec: GeneratorSpec, rng) -> np.ndarray:
    n = len(theta)
    if spec.group_size == 1:
        return (rng.random((n, spec.cells)) < theta).astype(np.int8)
    p = theta.reshape(n, spec.cells, spec.group_size)
    u = rng.random((n, spec.cells, 1))
    cdf = np.cumsum(p, axis=2)
    # float round-off can leave the last cdf entry just under 1
    return np.minimum((u >= cdf).sum(axis=2), spec.group_size - 1).astype(np.int8)


def encode_samples(samples: np.ndarray, spec: GeneratorSpec) -> np.ndarray:
    """Per-group values to the Boolean layout the circuit sees."""
    samples = np.asarray(samples)
    if spec.group_size == 1:
        return samples.astype(np.uint8)
    n = len(samples)
    return np.eye(spec.group_size, dtype=np.uint8)[samples.reshape(-1)].reshape(n, -1)


def sample(weights: MLP, n: int, code=None, seed=0) -> np.ndarray:
    """Draw ``n`` discrete structures from a trained generator.

    Needs only the generator weights.  Returns an (n, cells) array of group
    values (tile indices, or bits for Bernoulli groups).
    """
    spec = GeneratorSpec.from_meta(weights.meta)
    rng = _rng(seed)
    if n == 0:
        return np.zeros((0, spec.cells), dtype=np.int8)
    z = rng.standard_normal((n, spec.latent_dim))
    if spec.code_dim:
        if code is None or len(code) != spec.code_dim:
            raise ValueError(f"generator expects a code of length {spec.code_dim}")
        z = np.hstack([z, np.tile(np.asarray(code, dtype=np.float64), (n, 1))])
    elif code is not None and len(code):
        raise ValueError("generator takes no code")
    theta = generator_theta(weights, ad.const(z), spec).value
    return _draw(theta, spec, rng)


@dataclass
class RejectionResult:
    samples: np.ndarray
    attempts: int
    exhausted: bool


def rejection_sample(weights: MLP, circuit: Circuit, n: int, max_attempts: int, seed=0,
                     code=None, chunk: int = 256) -> RejectionResult:
    """Keep the first ``n`` samples the circuit accepts.

    Candidates are drawn in chunks but counted one at a time, so ``attempts``
    is the index of the n-th acceptance.  If the budget runs out, the partial
    result is returned with ``exhausted`` set.
    """
    if max_attempts < n:
        raise ValueError("max_attempts must be at least n")
    spec = GeneratorSpec.from_meta(weights.meta)
    rng = _rng(seed)
    kept, attempts = [], 0
    prefix = np.asarray(code if code is not None else [], dtype=np.uint8)
    while len(kept) < n and attempts < max_attempts:
        m = min(chunk, max_attempts - attempts)
        cand = sample(weights, m, code=code, seed=rng)
        enc = encode_samples(cand, spec)
        if enc.shape[1] != circuit.num_vars:
            enc = np.hstack([np.tile(prefix, (m, 1)), enc])
        ok = circuit.check_batch(enc)
        for i in range(m):
            attempts += 1
            if ok[i]:
                kept.append(cand[i])
                if len(kept) == n:
                    break
    out = np.array(kept, dtype=np.int8).reshape(len(kept), spec.cells)
    return RejectionResult(out, attempts, len(kept) < n)


# ---------------------------------------------------------------------------
# Penalties


class CircuitPenalty:
    """Semantic loss of the generator marginals against a circuit whose
    variables are the generator outputs, optionally preceded by code bits.

    With ``categorical`` the loss is ``-ln P(valid)`` under one categorical
    draw per output group (see :func:`semgen.autodiff.sl_injection`).
    """

    def __init__(self, circuit: Circuit, code_dim: int = 0, categorical: bool = False):
        self.circuit = circuit
        self.code_dim = code_dim
        self.categorical = categorical
        self.source = np.concatenate([np.full(code_dim, -1), np.arange(circuit.num_vars - code_dim)])

    def __call__(self, theta: ad.Tensor, codes: Optional[np.ndarray] = None) -> ad.Tensor:
        n = theta.shape[0]
        fixed = np.zeros((n, self.circuit.num_vars))
        if self.code_dim:
            if codes is None or codes.shape != (n, self.code_dim):
                raise ValueError("conditional penalty needs one code row per sample")
            fixed[:, : self.code_dim] = codes
        return ad.sl_injection(theta, self.circuit, self.source, fixed, self.categorical)


class EmbeddedPenalty:
    """Semantic loss applied to a learned embedding of the marginals.

    ``columns[j]`` is the embedding output feeding circuit variable ``j``.
    The embedding network is fixed; only the generator learns from it.
    """

    def __init__(self, embed: MLP, circuit: Circuit, columns: Sequence[int]):
        self.embed = embed
        self.circuit = circuit
        self.columns = np.asarray(columns, dtype=np.int64)

    def __call__(self, theta: ad.Tensor, codes=None) -> ad.Tensor:
        return ad.sl_injection(self.embed(theta), self.circuit, self.columns)


class SumPenalty:
    """Weighted sum of per-row penalties sharing the same marginals."""

    def __init__(self, parts: Sequence[Callable], weights: Optional[Sequence[float]] = None):
        self.parts = list(parts)
        self.weights = [1.0] * len(self.parts) if weights is None else [float(w) for w in weights]
        if len(self.weights) != len(self.parts):
            raise ValueError("need one weight per penalty")

    def __call__(self, theta: ad.Tensor, codes=None) -> ad.Tensor:
        terms = [p(theta, codes) for p in self.parts]
        n = theta.shape[0]
        value = sum(w * t.value for w, t in zip(self.weights, terms))

        def back(g):
            return tuple(w * g for w in self.weights)

        return ad.Tensor(np.reshape(value, (n, 1)), terms, "sum_penalty", back)


def circuit_validity(circuit: Circuit, spec: GeneratorSpec) -> Callable:
    def valid(samples, codes=None):
        enc = encode_samples(samples, spec)
        if spec.code_dim and codes is not None:
            enc = np.hstack([np.asarray(codes, dtype=np.uint8), enc])
        return circuit.check_batch(enc)

    return valid


@dataclass
class Task:
    """Everything ``train`` needs besides the config."""

    data: np.ndarray
    spec: GeneratorSpec
    penalty: Optional[Callable] = None
    validity: Optional[Callable] = None
    prior: Optional[dict] = None
    meta: dict = field(default_factory=dict)

    def draw_codes(self, rng, n: int) -> Optional[np.ndarray]:
        if not self.spec.code_dim:
            return None
        keys = list(self.prior)
        probs = np.array([self.prior[k] for k in keys])
        pick = rng.choice(len(keys), size=n, p=probs / probs.sum())
        return np.array(keys, dtype=np.float64)[pick]


# ---------------------------------------------------------------------------
# Training

REPORT_COLUMNS = ("epoch", "lambda", "d_loss", "g_loss", "sl", "validity")


@dataclass
class EpochRecord:
    epoch: int
    lam: float
    d_loss: float
    g_loss: float
    sl: float
    validity: float


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    weights_path: str = ""

    def lambdas(self) -> list[float]:
        return [r.lam for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.records:
            w.writerow([r.epoch, repr(r.lam), repr(r.d_loss), repr(r.g_loss), repr(r.sl),
                        repr(r.validity)])
        return buf.getvalue()


@dataclass
class TrainResult:
    report: TrainReport
    generator: MLP
    discriminator: MLP


def _finite(x: float, epoch: int, what: str) -> float:
    if not math.isfinite(x):
        raise TrainingDiverged(epoch, what)
    return x


def train(cfg: TrainConfig, task: Task, log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Alternate discriminator ascent and generator descent for ``cfg.epochs``.

    One epoch is one shuffled pass over ``task.data`` in minibatches; each
    minibatch runs ``d_steps`` discriminator updates then ``g_steps``
    generator updates.  Deterministic given ``cfg.seed``.
    """
    spec = task.spec
    data = np.asarray(task.data, dtype=np.float64)
    if not len(data):
        raise ValueError("empty dataset")
    if data.shape[1] != spec.output_dim:
        raise ValueError(f"data width {data.shape[1]} does not match generator output {spec.output_dim}")
    if spec.code_dim and not task.prior:
        raise ValueError("conditional generator needs a code prior")

    streams = np.random.SeedSequence(cfg.seed).spawn(5)
    init_rng, order_rng, noise_rng, probe_seq, code_rng = (
        np.random.default_rng(s) if i != 3 else s for i, s in enumerate(streams)
    )
    gen = make_generator(spec, init_rng, cfg.seed)
    gen.meta.update(task.meta)
    disc = make_discriminator(spec.output_dim, cfg.disc_hidden, init_rng, cfg.seed)
    g_opt = Adam(gen.params, cfg.lr, cfg.beta1, cfg.beta2)
    d_opt = Adam(disc.params, cfg.lr, cfg.beta1, cfg.beta2)
    report = TrainReport()
    n = len(data)
    B = min(cfg.batch_size, n)

    def gen_input(m):
        z = noise_rng.standard_normal((m, spec.latent_dim))
        codes = task.draw_codes(code_rng, m)
        if codes is not None:
            z = np.hstack([z, codes])
        return z, codes

    for epoch in range(cfg.epochs):
        lam = lambda_schedule(epoch, cfg)
        # discriminator input noise, annealed linearly to zero
        sigma = cfg.instance_noise * (1.0 - epoch / cfg.epochs)

        def noisy(x):
            if sigma == 0:
                return x
            eps = sigma * noise_rng.standard_normal(x.shape)
            return ad.Tensor(x.value + eps, (x,), "noise", lambda g: (g,))
        perm = order_rng.permutation(n)
        d_losses, g_losses, sls = [], [], []
        for start in range(0, n - B + 1, B):
            real_x = ad.const(data[perm[start : start + B]])
            for _ in range(cfg.d_steps):
                z, _ = gen_input(B)
                fake = ad.const(generator_theta(gen, ad.const(z), spec).value)
                d_loss = ad.combine(
                    [ad.bce_logits(disc(noisy(real_x)), cfg.real_label),
                     ad.bce_logits(disc(noisy(fake)), 0.0)], [1.0, 1.0]
                )
                d_opt.step(ad.backward(d_loss, disc.params))
                d_losses.append(float(d_loss.value))
            for _ in range(cfg.g_steps):
                z, codes = gen_input(B)
                theta = generator_theta(gen, ad.const(z), spec)
                adv = ad.bce_logits(disc(noisy(theta)), 1.0)
                terms, coeffs = [adv], [1.0]
                if lam > 0 and task.penalty is not None:
                    if codes is not None and not np.array_equal(z[:, spec.latent_dim :], codes):
                        raise InvariantError("penalty codes differ from generator codes")
                    sl = ad.mean(task.penalty(theta, codes))
                    terms.append(sl)
                    coeffs.append(lam)
                    sls.append(float(sl.value))
                loss = ad.combine(terms, coeffs)
                _finite(float(loss.value), epoch, "generator loss")
                g_opt.step(ad.backward(loss, gen.params))
                g_losses.append(float(adv.value))

        # probe: fresh generator for this epoch so probes are comparable
        prng = np.random.default_rng(probe_seq.spawn(1)[0])
        pz = prng.standard_normal((cfg.probe_size, spec.latent_dim))
        pcodes = task.draw_codes(prng, cfg.probe_size)
        if pcodes is not None:
            pz = np.hstack([pz, pcodes])
        ptheta = generator_theta(gen, ad.const(pz), spec).value
        check_simplex(ptheta, spec)
        psamples = _draw(ptheta, spec, prng)
        validity = float(np.mean(task.validity(psamples, pcodes))) if task.validity else float("nan")
        if sls:
            sl_val = float(np.mean(sls))
        elif task.penalty is not None and cfg.sl_probe_rows:
            k = min(cfg.sl_probe_rows, cfg.probe_size)
            sub = None if pcodes is None else pcodes[:k]
            sl_val = float(np.mean(task.penalty(ad.const(ptheta[:k]), sub).value))
        else:
            sl_val = float("nan")
        d_mean = float(np.mean(d_losses)) if d_losses else float("nan")
        if d_losses:
            _finite(d_mean, epoch, "discriminator loss")
        rec = EpochRecord(
            epoch=epoch,
            lam=lam,
            d_loss=d_mean,
            g_loss=float(np.mean(g_losses)) if g_losses else float("nan"),
            sl=sl_val,
            validity=validity,
        )
        report.records.append(rec)
        if log is not None:
            log(f"epoch {epoch:4d} lam={lam:.3f} d={rec.d_loss:.4f} g={rec.g_loss:.4f} "
                f"sl={rec.sl:.4f} valid={rec.validity:.3f}")
    return TrainResult(report, gen, disc)
