"""Scalar/vector numerics: softmax variants, noise sampling, entropy, temperature schedule.

Everything here is a pure function of its inputs plus an explicitly passed
:class:`RngStream`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError

GUMBEL_MEAN = 0.5772156649015329  # Euler-Mascheroni constant
GUMBEL_STD = math.pi / math.sqrt(6.0)  # 1.2825...

# Uniform draws are clamped to [eps, 1 - eps] before the double log.
UNIFORM_EPS = 1e-12


class RngStream:
    """Counter-based deterministic random stream.

    Backed by numpy's ``Philox`` bit generator keyed through a ``SeedSequence``
    built from ``(seed, spawn_key)``. Philox is a counter-based generator, so a
    given ``(seed, key)`` produces the same bits on every platform for a fixed
    numpy major version.

    Independent sub-streams are derived with :meth:`split`; the package uses
    ``root.split(layer, head, t)`` for the noise of one decoding step of one
    head, so every (sequence, layer, head, step) owns its own stream.
    """

    def __init__(self, seed: int, key: Sequence[int] = ()):
        if seed < 0 or seed >= 2**64:
            raise DomainError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self._gen: np.random.Generator | None = None

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
            self._gen = np.random.Generator(np.random.Philox(ss))
        return self._gen

    def split(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(keys))

    def uniform(self, shape) -> np.ndarray:
        return self.generator.random(shape)

    def standard_normal(self, shape) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, key={self.key})"


@dataclass(frozen=True)
class NoiseSpec:
    """Additive logit noise: ``none``, ``constant(c)``, ``gaussian(mu, sigma)`` or standard ``gumbel``."""

    kind: str = "none"
    c: float = 0.5772
    mu: float = 0.5772
    sigma: float = 1.2825

    KINDS = ("none", "constant", "gaussian", "gumbel")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise DomainError(f"unknown noise kind {self.kind!r}")
        if self.kind == "gaussian" and not self.sigma > 0:
            raise DomainError("gaussian noise needs sigma > 0")

    @classmethod
    def none(cls) -> "NoiseSpec":
        return cls("none")

    @classmethod
    def constant(cls, c: float = 0.5772) -> "NoiseSpec":
        return cls("constant", c=c)

    @classmethod
    def gaussian(cls, mu: float = 0.5772, sigma: float = 1.2825) -> "NoiseSpec":
        return cls("gaussian", mu=mu, sigma=sigma)

    @classmethod
    def gumbel(cls) -> "NoiseSpec":
        return cls("gumbel")

    def to_json(self):
        if self.kind in ("none", "gumbel"):
            return self.kind
        if self.kind == "constant":
            return {"kind": "constant", "c": self.c}
        return {"kind": "gaussian", "mu": self.mu, "sigma": self.sigma}

    @classmethod
    def from_json(cls, obj) -> "NoiseSpec":
        if isinstance(obj, str):
            if obj == "constant":
                return cls.constant()
            if obj == "gaussian":
                return cls.gaussian()
            return cls(obj)
        if not isinstance(obj, dict) or "kind" not in obj:
            raise DomainError(f"bad noise spec {obj!r}")
        kind = obj["kind"]
        if kind == "constant":
            return cls.constant(float(obj.get("c", 0.5772)))
        if kind == "gaussian":
            return cls.gaussian(float(obj.get("mu", 0.5772)), float(obj.get("sigma", 1.2825)))
        return cls(kind)


@dataclass(frozen=True)
class TauSchedule:
    """Linear temperature ramp from ``tau_init`` at t=0 to ``tau_end`` at t=T."""

    tau_init: float = 1.0
    tau_end: float = 2.0
    T: int = 0

    def __post_init__(self):
        if not self.tau_init > 0:
            raise DomainError("tau_init must be > 0")
        if self.tau_end < self.tau_init:
            raise DomainError("tau_end must be >= tau_init")
        if self.T < 0:
            raise DomainError("T must be >= 0")

    @property
    def delta(self) -> float:
        if self.T == 0:
            return 0.0
        return (self.tau_end - self.tau_init) / self.T

    @classmethod
    def fixed(cls, tau: float, T: int = 0) -> "TauSchedule":
        return cls(tau, tau, T)


def _as_vector(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DomainError(f"expected a 1-D vector, got shape {arr.shape}")
    if arr.size == 0:
        raise DomainError("empty logit vector")
    if np.isnan(arr).any():
        raise DomainError("NaN in logit vector")
    if not np.isfinite(arr).all():
        raise DomainError("non-finite entry in logit vector")
    return arr


def stable_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Unchecked max-subtracted softmax; ``-inf`` entries map to probability 0."""
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(x) -> np.ndarray:
    return stable_softmax(_as_vector(x))


def tempered_softmax(x, tau: float) -> np.ndarray:
    if not tau > 0:
        raise DomainError(f"temperature must be > 0, got {tau}")
    arr = _as_vector(x)
    if tau == 1.0:
        return stable_softmax(arr)
    return stable_softmax(arr / tau)


def reduced_softmax(x, kept) -> np.ndarray:
    """Softmax over the ``kept`` indices only, returned in ascending index order.

    Mass that the discarded tokens would have held is redistributed over the
    survivors, so every survivor's probability is at least its full-softmax value.
    """
    arr = _as_vector(x)
    idx = np.unique(np.asarray(list(kept), dtype=np.int64))
    if idx.size == 0:
        raise DomainError("kept set is empty")
    if idx[0] < 0 or idx[-1] >= arr.size:
        raise DomainError("kept index out of range")
    return stable_softmax(arr[idx])


def damp(p, alpha: float) -> np.ndarray:
    if not (0.0 < alpha <= 1.0):
        raise DomainError(f"damping factor must lie in (0, 1], got {alpha}")
    return alpha * np.asarray(p, dtype=np.float64)


def sample_noise(spec: NoiseSpec, n, rng: RngStream) -> np.ndarray:
    """Draw additive logit noise of length ``n`` (or an array of shape ``n``)."""
    shape = (n,) if np.isscalar(n) else tuple(n)
    if any(int(s) < 1 for s in shape) or len(shape) == 0:
        raise DomainError(f"noise size must be >= 1, got {n}")
    if spec.kind == "none":
        return np.zeros(shape)
    if spec.kind == "constant":
        return np.full(shape, float(spec.c))
    if spec.kind == "gaussian":
        return spec.mu + spec.sigma * rng.standard_normal(shape)
    u = np.clip(rng.uniform(shape), UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    return -np.log(-np.log(u))


def gumbel_pdf(z):
    z = np.asarray(z, dtype=np.float64)
    return np.exp(-z - np.exp(-z))


def gumbel_cdf(z):
    return np.exp(-np.exp(-np.asarray(z, dtype=np.float64)))


def entropy(p) -> float:
    """Shannon entropy in nats, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def tau_at(sched: TauSchedule, t: int) -> float:
    if t < 0 or t > sched.T:
        raise DomainError(f"step {t} outside schedule [0, {sched.T}]")
    if sched.T == 0 or t == 0:
        return sched.tau_init
    if t == sched.T:
        return sched.tau_end
    return sched.tau_init + t * sched.delta
