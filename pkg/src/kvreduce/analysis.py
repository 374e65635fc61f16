"""Attention statistics and analytical models computed from traces.

Column schemas of the CSV forms are fixed by the ``*_COLUMNS`` constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import DomainError
from .numerics import NoiseSpec, RngStream, entropy, reduced_softmax, sample_noise, softmax, stable_softmax
from .trace import AttentionTrace

CDF_COLUMNS = ("fraction_of_tokens", "cumulative_attention_mass")
SPARSITY_COLUMNS = ("threshold", "sparsity")
ENTROPY_COLUMNS = ("trial", "entropy_noisy_mean", "entropy_plain", "win")
TRAFFIC_COLUMNS = ("step", "cache_tokens", "kv_bytes", "param_bytes", "total_bytes")


def _rows(trace: AttentionTrace):
    if not trace.records:
        raise DomainError("trace holds no attention rows")
    for rec in trace.records:
        yield stable_softmax(rec.logits)


@dataclass
class CdfSeries:
    fractions: np.ndarray
    mass: np.ndarray

    def rows(self):
        return zip(self.fractions.tolist(), self.mass.tolist())


def attention_cdf(trace: AttentionTrace, points: int = 101) -> CdfSeries:
    """Average share of attention mass held by the top fraction of tokens.

    Each row's probabilities are sorted in descending order and turned into a
    piecewise-linear cumulative curve over ``fraction = j / row_len``; curves
    are sampled on a common grid of ``points`` fractions and averaged over all
    rows, layers and heads.
    """
    if points < 2:
        raise DomainError("need at least two grid points")
    grid = np.linspace(0.0, 1.0, points)
    acc = np.zeros(points)
    count = 0
    for p in _rows(trace):
        s = np.sort(p)[::-1]
        m = s.size
        xs = np.arange(m + 1) / m
        ys = np.concatenate([[0.0], np.cumsum(s)])
        ys[-1] = 1.0
        acc += np.interp(grid, xs, ys)
        count += 1
    mass = np.minimum(np.maximum.accumulate(acc / count), 1.0)
    mass[-1] = 1.0
    return CdfSeries(grid, mass)


def threshold_sparsity(trace: AttentionTrace, thresholds) -> list[float]:
    """Fraction of attention entries below ``theta * row_max`` for each ``theta``.

    ``theta = 0`` counts entries whose probability is exactly zero.
    """
    thresholds = [float(t) for t in thresholds]
    if any(not (0.0 <= t <= 1.0) for t in thresholds):
        raise DomainError("thresholds must lie in [0, 1]")
    below = np.zeros(len(thresholds))
    total = 0
    th = np.asarray(thresholds)
    for p in _rows(trace):
        top = p.max()
        zero = p <= 0.0
        below += ((p[None, :] < th[:, None] * top) | zero[None, :]).sum(axis=1)
        total += p.size
    return (below / total).tolist()


@dataclass
class ShiftResult:
    full: np.ndarray
    kept: np.ndarray
    reduced: np.ndarray
    inflation: np.ndarray

    @property
    def max_inflation(self) -> float:
        return float(self.inflation.max())


def distribution_shift(x, keep_fraction: float) -> ShiftResult:
    """Compare full softmax with the softmax over the top ``ceil(keep_fraction * n)`` tokens."""
    if not (0.0 < keep_fraction <= 1.0):
        raise DomainError("keep_fraction must lie in (0, 1]")
    full = softmax(x)
    n = full.size
    m = max(1, math.ceil(Fraction(str(keep_fraction)) * n))
    order = np.lexsort((np.arange(n), -full))
    kept = np.sort(order[:m])
    reduced = reduced_softmax(x, kept)
    return ShiftResult(full, kept, reduced, reduced / full[kept])


@dataclass
class EntropyResult:
    mean_noisy: float
    mean_plain: float
    win_rate: float
    wins: list[bool]
    noisy: list[float]
    plain: list[float]

    def rows(self):
        for i, (hn, hp, w) in enumerate(zip(self.noisy, self.plain, self.wins)):
            yield i, hn, hp, int(w)


def entropy_experiment(
    n: int,
    trials: int,
    noise_samples: int,
    rng: RngStream,
    noise: NoiseSpec | None = None,
    logit_std: float = math.sqrt(2.0),
) -> EntropyResult:
    """Monte Carlo check that noise-averaged softmax is flatter than the plain softmax.

    Per trial: draw logits ``x ~ N(0, logit_std^2)``, average ``softmax(x + zeta)``
    over ``noise_samples`` noise draws and compare its entropy with that of
    ``softmax(x)``. A win is a strict increase.
    """
    if trials < 1 or noise_samples < 1:
        raise DomainError("trials and noise_samples must be >= 1")
    if n < 1:
        raise DomainError("n must be >= 1")
    noise = noise or NoiseSpec.gumbel()
    noisy, plain, wins = [], [], []
    for trial in range(trials):
        stream = rng.split(trial)
        x = stream.standard_normal(n) * logit_std
        zeta = sample_noise(noise, (noise_samples, n), stream)
        z_bar = stable_softmax(x[None, :] + zeta, axis=-1).mean(axis=0)
        hn = entropy(z_bar)
        hp = entropy(softmax(x))
        noisy.append(hn)
        plain.append(hp)
        wins.append(hn > hp)
    return EntropyResult(
        float(np.mean(noisy)), float(np.mean(plain)), float(np.mean(wins)), wins, noisy, plain
    )


@dataclass(frozen=True)
class TrafficModel:
    """Analytical per-step memory traffic of generation: parameters plus KV reads.

    ``beam`` multiplies the KV footprint (one cache per beam); activations and
    output projections are ignored.
    """

    dtype_bytes: int
    layers: int
    heads: int
    d_head: int
    params: int
    beam: int = 1

    @property
    def kv_bytes_per_token(self) -> int:
        return 2 * self.layers * self.heads * self.d_head * self.dtype_bytes * self.beam

    @property
    def model_bytes(self) -> int:
        return self.params * self.dtype_bytes

    def kv_bytes(self, cache_tokens: int) -> int:
        return cache_tokens * self.kv_bytes_per_token

    def crossover_seq_len(self) -> int:
        """Smallest sequence length whose KV cache is at least the model size."""
        return -(-self.model_bytes // self.kv_bytes_per_token)


PRESETS = {
    # 7B-class decoder (MPT-7B-like); beam 4 as in the motivating measurement.
    "7b": TrafficModel(dtype_bytes=2, layers=32, heads=32, d_head=128, params=6_700_000_000, beam=4),
    "7b-beam1": TrafficModel(dtype_bytes=2, layers=32, heads=32, d_head=128, params=6_700_000_000, beam=1),
}


@dataclass
class TrafficResult:
    steps: list[tuple[int, int, int, int, int]]
    kv_total: int
    param_total: int

    @property
    def total(self) -> int:
        return self.kv_total + self.param_total

    @property
    def kv_per_step(self) -> list[int]:
        return [s[2] for s in self.steps]


def cache_budget(n: int, cache_fraction: float | None) -> int | None:
    if cache_fraction is None:
        return None
    if not (0.0 < cache_fraction <= 1.0):
        raise DomainError("cache_fraction must lie in (0, 1]")
    return max(1, math.ceil(Fraction(str(cache_fraction)) * n))


def kv_traffic(model: TrafficModel, n: int, T: int, cache_fraction: float | None) -> TrafficResult:
    """Bytes moved per generated token and in total.

    Generation step ``t`` (1-based) reads ``min(n + t, k)`` cached tokens with
    ``k = ceil(cache_fraction * n)``; ``cache_fraction=None`` is the unreduced
    cache that grows to ``n + t``.
    """
    if n < 0 or T < 0:
        raise DomainError("n and T must be >= 0")
    k = cache_budget(n, cache_fraction)
    steps = []
    for t in range(1, T + 1):
        tokens = n + t if k is None else min(n + t, k)
        kv = model.kv_bytes(tokens)
        steps.append((t, tokens, kv, model.model_bytes, kv + model.model_bytes))
    return TrafficResult(steps, sum(s[2] for s in steps), sum(s[3] for s in steps))


def kept_attention_mass(trace: AttentionTrace, timeline) -> list[float]:
    """Share of each generation step's full attention mass that lands on kept positions.

    ``trace`` must be a full-attention trace and ``timeline`` a replay of it, so
    step ``t`` of the timeline refers to the same query rows. Returns one value
    per generation step, averaged over layers and heads.
    """
    if len(timeline) != trace.gen_len + 1:
        raise DomainError("timeline does not cover the trace's generation steps")
    sums = np.zeros(trace.gen_len)
    counts = np.zeros(trace.gen_len)
    for rec in trace.records:
        if rec.t == 0:
            continue
        p = stable_softmax(rec.logits)
        kept = timeline.steps[rec.t][(rec.layer, rec.head)]
        sums[rec.t - 1] += p[np.isin(rec.slots, kept)].sum()
        counts[rec.t - 1] += 1
    return (sums / np.maximum(counts, 1)).tolist()
