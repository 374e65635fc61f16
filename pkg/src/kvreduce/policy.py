"""KV-cache data model and eviction policies.

Every reducing policy is expressed as a kept-set rule over the cached slots:

=================  ==========================================================
``full``           never evicts
``window``         last ``k`` slots (recent window ``w == k``)
``key_only``       top-``k`` by accumulated score (``w == 0``)
``attention_sink`` first ``sinks`` slots plus the last ``k - sinks``
``h2o``            last ``w`` plus top-``(k - w)`` of the rest, accumulated attention
``damped``         as ``h2o`` but increments after the first eviction are scaled by ``alpha``
``keyformer``      as ``h2o`` but scored with Gumbel noise and a temperature ramp
=================  ==========================================================

Ties in score are broken toward the lower original position.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigError, ContractError, DomainError
from .numerics import NoiseSpec
from .scores import SCOPES, AdjustmentStrategy, ScoreAccumulator

KINDS = ("full", "window", "key_only", "attention_sink", "h2o", "damped", "keyformer")
SCORING_KINDS = ("key_only", "h2o", "damped", "keyformer")
POSITION_MODES = ("original", "renumbered")

DEFAULT_RECENT_RATIO = 0.3
DEFAULT_SINKS = 4


class KvCache:
    """Retained entries of one (layer, head), ordered by original position.

    Key/value arrays are optional so the trace simulator can drive the exact same
    bookkeeping without a model.
    """

    def __init__(self, k: int | None = None, w: int = 0, d_head: int | None = None):
        self.k = k
        self.w = w
        self.d_head = d_head
        self.positions = np.zeros(0, dtype=np.int64)
        self.token_ids = np.zeros(0, dtype=np.int64)
        self.keys: np.ndarray | None = None if d_head is None else np.zeros((0, d_head), np.float32)
        self.values: np.ndarray | None = None if d_head is None else np.zeros((0, d_head), np.float32)

    def __len__(self) -> int:
        return int(self.positions.size)

    def extend(self, positions, token_ids=None, keys=None, values=None) -> None:
        positions = np.asarray(positions, dtype=np.int64).reshape(-1)
        if positions.size == 0:
            return
        if self.positions.size and positions[0] <= self.positions[-1]:
            raise ContractError("appended positions must exceed cached positions")
        if token_ids is None:
            token_ids = np.full(positions.size, -1, dtype=np.int64)
        self.positions = np.concatenate([self.positions, positions])
        self.token_ids = np.concatenate([self.token_ids, np.asarray(token_ids, dtype=np.int64).reshape(-1)])
        if self.keys is not None:
            if keys is None or values is None:
                raise ContractError("this cache stores key/value vectors")
            keys = np.asarray(keys, dtype=np.float32).reshape(-1, self.d_head)
            values = np.asarray(values, dtype=np.float32).reshape(-1, self.d_head)
            self.keys = np.concatenate([self.keys, keys])
            self.values = np.concatenate([self.values, values])

    def append(self, position: int, token_id: int = -1, key=None, value=None) -> None:
        self.extend([position], [token_id], keys=key, values=value)

    def keep_indices(self, idx) -> np.ndarray:
        """Retain the entries at ``idx`` (cache-order indices); return the evicted positions."""
        idx = np.asarray(idx, dtype=np.int64)
        mask = np.ones(self.positions.size, dtype=bool)
        mask[idx] = False
        evicted = self.positions[mask]
        self.positions = self.positions[idx]
        self.token_ids = self.token_ids[idx]
        if self.keys is not None:
            self.keys = self.keys[idx]
            self.values = self.values[idx]
        return evicted

    def copy(self) -> "KvCache":
        out = KvCache(self.k, self.w, self.d_head)
        out.positions = self.positions.copy()
        out.token_ids = self.token_ids.copy()
        if self.keys is not None:
            out.keys = self.keys.copy()
            out.values = self.values.copy()
        return out


def _fraction(x) -> Fraction:
    return Fraction(str(x)) if isinstance(x, float) else Fraction(x)


@dataclass(frozen=True)
class PolicySpec:
    """Which eviction policy to run and its parameters.

    ``k``/``w`` are absolute counts. When they are left unset, :meth:`resolve`
    derives them from ``k_pct`` (percent of prompt length, floored) and
    ``recent_ratio`` (fraction of ``k``, floored).
    """

    kind: str = "keyformer"
    k: int | None = None
    w: int | None = None
    k_pct: float | None = None
    recent_ratio: float = DEFAULT_RECENT_RATIO
    sinks: int = DEFAULT_SINKS
    alpha: float = 1.0
    adjustment: AdjustmentStrategy | None = None
    tau_init: float = 1.0
    tau_end: float = 2.0
    scope: str = "per_layer_head"
    position_mode: str = "original"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown policy kind {self.kind!r}")
        if self.scope not in SCOPES:
            raise ConfigError(f"unknown score scope {self.scope!r}")
        if self.position_mode not in POSITION_MODES:
            raise ConfigError(f"unknown position mode {self.position_mode!r}")
        if not (0.0 < self.alpha <= 1.0):
            raise ConfigError("alpha must lie in (0, 1]")
        if not (0.0 <= self.recent_ratio <= 1.0):
            raise ConfigError("recent_ratio must lie in [0, 1]")
        if self.k_pct is not None and not (0 < self.k_pct <= 100):
            raise ConfigError("k_pct must lie in (0, 100]")
        if not self.tau_init > 0 or self.tau_end < self.tau_init:
            raise ConfigError("need 0 < tau_init <= tau_end")
        if self.sinks < 0:
            raise ConfigError("sinks must be >= 0")
        if self.k is not None and self.w is not None:
            self._check_counts(self.k, self.w)

    def _check_counts(self, k: int, w: int) -> None:
        if self.kind == "full":
            return
        if k < 1:
            raise ConfigError("k must be >= 1")
        if not (0 <= w <= k):
            raise ConfigError(f"need 0 <= w <= k, got k={k}, w={w}")
        if self.kind == "window" and w != k:
            raise ConfigError("window policy requires w == k")
        if self.kind == "key_only" and w != 0:
            raise ConfigError("key_only policy requires w == 0")
        if self.kind == "attention_sink" and (k <= self.sinks or w != k - self.sinks):
            raise ConfigError("attention_sink policy requires k > sinks and w == k - sinks")

    @property
    def strategy(self) -> AdjustmentStrategy:
        if self.adjustment is not None:
            return self.adjustment
        if self.kind == "keyformer":
            return AdjustmentStrategy.keyformer()
        return AdjustmentStrategy.h2o()

    @property
    def uses_scores(self) -> bool:
        return self.kind in SCORING_KINDS

    @property
    def resolved(self) -> bool:
        return self.kind == "full" or (self.k is not None and self.w is not None)

    def resolve(self, n: int) -> "PolicySpec":
        """Fill in absolute ``k`` and ``w`` for a prompt of ``n`` tokens."""
        if self.kind == "full":
            return self
        k = self.k
        if k is None:
            if self.k_pct is None:
                raise ConfigError("policy needs k or k_pct")
            k = max(math.floor(_fraction(self.k_pct) * n / 100), 1)
        if self.kind == "window":
            w = k
        elif self.kind == "key_only":
            w = 0
        elif self.kind == "attention_sink":
            w = k - self.sinks
        elif self.w is not None:
            w = self.w
        else:
            w = math.floor(_fraction(self.recent_ratio) * k)
            if w >= k and self.recent_ratio < 1:
                k = w + 1
        return dataclasses.replace(self, k=k, w=w)

    def to_json(self) -> dict:
        out = {
            "kind": self.kind,
            "recent_ratio": self.recent_ratio,
            "sinks": self.sinks,
            "alpha": self.alpha,
            "noise": self.strategy.noise.to_json(),
            "temperature": self.strategy.use_temperature,
            "tau_init": self.tau_init,
            "tau_end": self.tau_end,
            "scope": self.scope,
            "position_mode": self.position_mode,
        }
        if self.k is not None:
            out["k_abs"] = self.k
        if self.w is not None:
            out["w_abs"] = self.w
        if self.k_pct is not None:
            out["k_pct"] = self.k_pct
        return out

    @classmethod
    def from_json(cls, obj: dict | str) -> "PolicySpec":
        if isinstance(obj, str):
            obj = json.loads(obj)
        obj = dict(obj)
        known = {
            "kind", "k_abs", "w_abs", "k_pct", "recent_ratio", "sinks", "alpha", "noise",
            "temperature", "tau_init", "tau_end", "scope", "position_mode",
        }
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown policy keys: {sorted(unknown)}")
        kind = obj.get("kind", "keyformer")
        adjustment = None
        if "noise" in obj or "temperature" in obj:
            default = AdjustmentStrategy.keyformer() if kind == "keyformer" else AdjustmentStrategy.h2o()
            try:
                noise = NoiseSpec.from_json(obj["noise"]) if "noise" in obj else default.noise
            except DomainError as exc:
                raise ConfigError(str(exc)) from exc
            adjustment = AdjustmentStrategy(noise, bool(obj.get("temperature", default.use_temperature)))
        try:
            return cls(
                kind=kind,
                k=obj.get("k_abs"),
                w=obj.get("w_abs"),
                k_pct=obj.get("k_pct"),
                recent_ratio=float(obj.get("recent_ratio", DEFAULT_RECENT_RATIO)),
                sinks=int(obj.get("sinks", DEFAULT_SINKS)),
                alpha=float(obj.get("alpha", 1.0)),
                adjustment=adjustment,
                tau_init=float(obj.get("tau_init", 1.0)),
                tau_end=float(obj.get("tau_end", 2.0)),
                scope=obj.get("scope", "per_layer_head"),
                position_mode=obj.get("position_mode", "original"),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc


def _scores_of(scores) -> np.ndarray:
    if isinstance(scores, ScoreAccumulator):
        return scores.scores
    return np.asarray(scores, dtype=np.float64)


def topk_indices(scores, positions, m: int) -> np.ndarray:
    """Indices of the ``m`` highest scores; equal scores prefer the lower position."""
    if m <= 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.asarray(positions), -np.asarray(scores)))
    return np.sort(order[:m])


def keyformer_indices(scores, positions, k: int, w: int) -> np.ndarray:
    """Cache-order indices kept by the recent-window + top-(k - w) rule."""
    positions = np.asarray(positions, dtype=np.int64)
    n = positions.size
    if k > n:
        raise DomainError(f"budget k={k} exceeds cached count {n}")
    if not (0 <= w <= k):
        raise DomainError(f"need 0 <= w <= k, got k={k}, w={w}")
    n_old = n - w
    recent = np.arange(n_old, n, dtype=np.int64)
    if k - w == 0:
        return recent
    s = _scores_of(scores)
    if s.size != n:
        raise ContractError("scores are not aligned with the cache")
    key = topk_indices(s[:n_old], positions[:n_old], k - w)
    return np.concatenate([key, recent])


def select_keyformer(scores, positions, k: int, w: int) -> np.ndarray:
    """Original positions kept: the ``w`` most recent plus the top-``(k - w)`` scored older slots."""
    positions = np.asarray(positions, dtype=np.int64)
    return positions[keyformer_indices(scores, positions, k, w)]


def kept_indices(spec: PolicySpec, positions, scores=None) -> np.ndarray:
    """Cache-order indices a resolved ``spec`` keeps from an over-budget cache."""
    positions = np.asarray(positions, dtype=np.int64)
    n = positions.size
    if spec.kind == "full" or n <= spec.k:
        return np.arange(n, dtype=np.int64)
    if spec.kind == "window":
        return np.arange(n - spec.k, n, dtype=np.int64)
    if spec.kind == "attention_sink":
        return np.concatenate([
            np.arange(spec.sinks, dtype=np.int64),
            np.arange(n - (spec.k - spec.sinks), n, dtype=np.int64),
        ])
    return keyformer_indices(scores, positions, spec.k, spec.w)


def _apply(cache: KvCache, acc: ScoreAccumulator | None, idx) -> np.ndarray:
    evicted = cache.keep_indices(idx)
    if acc is not None and acc.scope != "shared":
        acc.keep_indices(idx)
    return evicted


def prompt_reduce(cache: KvCache, acc: ScoreAccumulator | None, spec: PolicySpec) -> KvCache:
    """Cut a freshly filled prompt cache of ``n`` entries down to ``k``.

    Under-budget prompts (``n <= k``) and the ``full`` policy are left untouched.
    """
    if not spec.resolved:
        spec = spec.resolve(len(cache))
    if spec.kind == "full" or len(cache) <= spec.k:
        return cache
    _apply(cache, acc, kept_indices(spec, cache.positions, acc))
    return cache


def step_evict(cache: KvCache, acc: ScoreAccumulator | None, spec: PolicySpec) -> KvCache:
    """Evict one entry from a generation-phase cache holding ``k + 1`` entries."""
    if spec.kind == "full":
        raise ContractError("full policy never evicts")
    if len(cache) <= spec.k:
        raise ContractError(f"step_evict needs more than k={spec.k} entries, cache has {len(cache)}")
    _apply(cache, acc, kept_indices(spec, cache.positions, acc))
    return cache


def position_ids(cache: KvCache, mode: str) -> np.ndarray:
    if mode == "original":
        return cache.positions.copy()
    if mode == "renumbered":
        return np.arange(len(cache), dtype=np.int64)
    raise DomainError(f"unknown position mode {mode!r}")


def policy_attention_mask(spec: PolicySpec, t: int, cache: KvCache, scores=None) -> np.ndarray:
    """Original positions a query at step ``t`` may attend to.

    For a cache at or under budget every policy except ``window``/``key_only``
    allows the whole cache; those two narrow to the last ``w`` or top-``k``
    entries, which coincides with the whole cache once eviction has run.
    """
    pos = cache.positions
    if spec.kind == "window" and spec.w is not None:
        return pos[-spec.w:] if spec.w else pos[:0]
    if spec.kind == "key_only" and spec.k is not None and len(cache) > spec.k:
        return pos[topk_indices(_scores_of(scores), pos, spec.k)]
    return pos.copy()
