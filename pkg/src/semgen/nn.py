"""Dense networks, Adam and weight files on top of :mod:`semgen.autodiff`."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad

WEIGHTS_MAGIC = b"SEMGEN-NET"
WEIGHTS_VERSION = 1

_ACTIVATIONS = {
    "tanh": ad.tanh,
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "linear": lambda x: x,
}


class MLP:
    """Fully connected network; ``activations[i]`` follows layer ``i``.

    Weights start uniform in +-sqrt(6 / (fan_in + fan_out)), biases at zero.
    """

    def __init__(self, sizes: Sequence[int], activations: Sequence[str], rng=None, seed: int = 0, meta=None):
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        for a in activations:
            if a not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.sizes = [int(s) for s in sizes]
        self.activations = list(activations)
        self.seed = seed
        self.meta = dict(meta or {})
        rng = np.random.default_rng(seed) if rng is None else rng
        self.params: list[ad.Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            self.params.append(ad.param(w, name=f"W{i}"))
            self.params.append(ad.param(np.zeros(fan_out), name=f"b{i}"))

    def __call__(self, x) -> ad.Tensor:
        h = x
        for i, act in enumerate(self.activations):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            h = _ACTIVATIONS[act](ad.add_bias(ad.matmul(h, w), b))
        return h

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Forward pass on plain arrays, no graph kept."""
        return self(ad.const(np.atleast_2d(x))).value

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.value.reshape(-1) for p in self.params])

    def set_flat(self, flat: np.ndarray):
        pos = 0
        for p in self.params:
            size = p.value.size
            p.value[...] = flat[pos : pos + size].reshape(p.shape)
            pos += size
        if pos != len(flat):
            raise ValueError(f"expected {pos} values, got {len(flat)}")

    def copy(self) -> "MLP":
        other = MLP.__new__(MLP)
        other.sizes = list(self.sizes)
        other.activations = list(self.activations)
        other.seed = self.seed
        other.meta = json.loads(json.dumps(self.meta))
        other.params = [ad.param(p.value.copy(), name=p.name) for p in self.params]
        return other

    # -- persistence -------------------------------------------------------

    def to_bytes(self) -> bytes:
        header = {
            "sizes": self.sizes,
            "activations": self.activations,
            "seed": self.seed,
            "meta": self.meta,
        }
        head = WEIGHTS_MAGIC + b" %d\n" % WEIGHTS_VERSION
        head += json.dumps(header, sort_keys=True).encode() + b"\n"
        return head + self.get_flat().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "MLP":
        first, _, rest = data.partition(b"\n")
        parts = first.split()
        if len(parts) != 2 or parts[0] != WEIGHTS_MAGIC:
            raise ValueError("not a semgen weights file")
        if int(parts[1]) != WEIGHTS_VERSION:
            raise ValueError(f"unsupported weights version {parts[1].decode()}")
        line, _, body = rest.partition(b"\n")
        header = json.loads(line)
        net = cls(header["sizes"], header["activations"], seed=header["seed"], meta=header["meta"])
        values = np.frombuffer(body, dtype="<f8").astype(np.float64)
        net.set_flat(values)
        return net

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "MLP":
        return cls.from_bytes(Path(path).read_bytes())


class Adam:
    """Adaptive-moment gradient descent with bias correction."""

    def __init__(self, params: Sequence[ad.Tensor], lr: float = 1e-3, beta1: float = 0.5,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self, grads: Optional[Sequence[np.ndarray]] = None):
        if grads is None:
            grads = [np.zeros(p.shape) if p.grad is None else p.grad for p in self.params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
