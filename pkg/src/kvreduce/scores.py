"""Accumulated token scores used to rank cached tokens for eviction.

Two scoring rules share one code path:

* accumulated attention (H2O style): add the plain softmax of each query row;
* the Gumbel/temperature rule: add ``softmax((x + zeta) / tau)``.

With no noise and ``tau == 1`` the second rule reduces to the first, which the
test-suite checks as an equivalence oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DomainError
from .numerics import NoiseSpec, RngStream, sample_noise, stable_softmax

SCOPES = ("per_layer_head", "shared")


@dataclass(frozen=True)
class AdjustmentStrategy:
    noise: NoiseSpec = field(default_factory=NoiseSpec.none)
    use_temperature: bool = False

    @classmethod
    def keyformer(cls) -> "AdjustmentStrategy":
        return cls(NoiseSpec.gumbel(), True)

    @classmethod
    def h2o(cls) -> "AdjustmentStrategy":
        return cls(NoiseSpec.none(), False)


class ScoreAccumulator:
    """Per-token accumulated score, aligned with the cache order of one KV cache.

    ``positions`` holds the original token positions in ascending order and
    ``scores`` the matching float64 totals. Evicted positions are remembered so
    they can never be added back.
    """

    def __init__(self, scope: str = "per_layer_head", layer: int | None = None, head: int | None = None):
        if scope not in SCOPES:
            raise DomainError(f"unknown score scope {scope!r}")
        self.scope = scope
        self.layer = layer
        self.head = head
        self.t = 0
        self.positions = np.zeros(0, dtype=np.int64)
        self.scores = np.zeros(0, dtype=np.float64)
        self._evicted: set[int] = set()

    def __len__(self) -> int:
        return int(self.positions.size)

    def add_slots(self, positions) -> None:
        new = np.asarray(positions, dtype=np.int64).reshape(-1)
        if new.size == 0:
            return
        if self._evicted.intersection(new.tolist()):
            raise ContractError("cannot reintroduce an evicted slot")
        if self.positions.size and new.min() <= self.positions[-1]:
            raise ContractError("new slots must follow existing slots")
        if np.any(np.diff(new) <= 0):
            raise ContractError("new slots must be strictly increasing")
        self.positions = np.concatenate([self.positions, new])
        self.scores = np.concatenate([self.scores, np.zeros(new.size)])

    def add(self, increment) -> None:
        inc = np.asarray(increment, dtype=np.float64)
        if inc.shape != self.scores.shape:
            raise ContractError(f"increment length {inc.size} != cached slots {self.scores.size}")
        self.scores = self.scores + inc

    def score(self, position: int) -> float:
        idx = np.searchsorted(self.positions, position)
        if idx >= self.positions.size or self.positions[idx] != position:
            raise ContractError(f"slot {position} is not cached")
        return float(self.scores[idx])

    def as_dict(self) -> dict[int, float]:
        return {int(p): float(s) for p, s in zip(self.positions, self.scores)}

    def keep_indices(self, idx) -> None:
        idx = np.asarray(idx, dtype=np.int64)
        mask = np.ones(self.positions.size, dtype=bool)
        mask[idx] = False
        self._evicted.update(self.positions[mask].tolist())
        self.positions = self.positions[idx]
        self.scores = self.scores[idx]

    def total(self) -> float:
        return float(self.scores.sum())

    def snapshot(self) -> dict:
        return {
            "scope": self.scope,
            "layer": self.layer,
            "head": self.head,
            "t": self.t,
            "scores": {str(int(p)): float(s) for p, s in zip(self.positions, self.scores)},
        }


class ScoreState:
    """The set of accumulators for one sequence: one per (layer, head) or a single shared one."""

    def __init__(self, scope: str, layers: int, heads: int):
        if layers < 1 or heads < 1:
            raise DomainError("layers and heads must be >= 1")
        if scope not in SCOPES:
            raise DomainError(f"unknown score scope {scope!r}")
        self.scope = scope
        self.layers = layers
        self.heads = heads
        if scope == "shared":
            self.accumulators = {None: ScoreAccumulator("shared")}
        else:
            self.accumulators = {
                (l, h): ScoreAccumulator(scope, l, h) for l in range(layers) for h in range(heads)
            }

    def __len__(self) -> int:
        return len(self.accumulators)

    def acc(self, layer: int, head: int) -> ScoreAccumulator:
        if self.scope == "shared":
            return self.accumulators[None]
        return self.accumulators[(layer, head)]

    def advance(self) -> None:
        for acc in self.accumulators.values():
            acc.t += 1

    def to_json(self) -> str:
        return json.dumps(
            {"scope": self.scope, "accumulators": [a.snapshot() for a in self.accumulators.values()]},
            sort_keys=True,
        )


def init_state(scope: str, layers: int, heads: int) -> ScoreState:
    return ScoreState(scope, layers, heads)


def adjust_logits(x, strategy: AdjustmentStrategy, rng: RngStream | None = None) -> np.ndarray:
    """Add the strategy's noise to unnormalized logits (``y = x + zeta``)."""
    x = np.asarray(x, dtype=np.float64)
    if strategy.noise.kind == "none":
        return x
    return x + sample_noise(strategy.noise, x.shape, rng)


def score_increment(x, strategy: AdjustmentStrategy, tau: float, rng: RngStream | None) -> np.ndarray:
    """Per-token mass added by one query row (or the column sums of a masked row matrix).

    ``x`` may be a vector (one row over the cached slots) or a 2-D matrix whose
    rows are causal query rows with ``-inf`` at masked positions; in the matrix
    case the per-row increments are summed into one vector. Noise is drawn with
    the same shape as ``x`` from ``rng``.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).any():
        raise DomainError("no finite logits to score")
    y = adjust_logits(x, strategy, rng)
    if strategy.use_temperature and tau != 1.0:
        if not tau > 0:
            raise DomainError(f"temperature must be > 0, got {tau}")
        y = y / tau
    p = stable_softmax(y, axis=-1)
    if p.ndim == 2:
        return p.sum(axis=0)
    return p


def keyformer_increment(
    acc: ScoreAccumulator,
    x,
    tau: float,
    rng: RngStream | None,
    strategy: AdjustmentStrategy | None = None,
) -> ScoreAccumulator:
    strategy = strategy or AdjustmentStrategy.keyformer()
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != len(acc):
        raise ContractError(f"logit length {x.shape[-1]} != cached slots {len(acc)}")
    acc.add(score_increment(x, strategy, tau, rng))
    return acc


def accattn_increment(acc: ScoreAccumulator, attention_probs) -> ScoreAccumulator:
    p = np.asarray(attention_probs, dtype=np.float64)
    if p.size != len(acc):
        raise ContractError(f"attention length {p.size} != cached slots {len(acc)}")
    acc.add(p)
    return acc


def merge_shared(per_head_updates) -> np.ndarray:
    """Sum per-(layer, head) increment vectors into the shared increment.

    Summation follows the iteration order of ``per_head_updates`` so the result
    is deterministic.
    """
    updates = [np.asarray(u, dtype=np.float64) for u in per_head_updates]
    if not updates:
        raise ContractError("no per-head updates to merge")
    first = updates[0].shape
    if any(u.shape != first for u in updates):
        raise ContractError("per-head updates index different slot sets")
    total = np.zeros(first)
    for u in updates:
        total = total + u
    return total


def evict_from_state(acc: ScoreAccumulator, evicted) -> ScoreAccumulator:
    evicted = {int(e) for e in evicted}
    if not evicted:
        return acc
    present = set(acc.positions.tolist())
    unknown = evicted - present
    if unknown:
        raise ContractError(f"cannot evict unknown slots {sorted(unknown)}")
    keep = [i for i, p in enumerate(acc.positions.tolist()) if p not in evicted]
    acc.keep_indices(keep)
    return acc
