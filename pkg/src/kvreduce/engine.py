"""Score-and-evict loop shared by the live decoder and the trace simulator.

The engine owns one :class:`KvCache` per (layer, head) plus the score state.
Callers append the new token's entries to the caches, then hand the engine the
attention logits computed over those caches; the engine updates scores and
evicts. The decoder and :func:`kvreduce.trace.replay` both go through here, so
a replayed timeline is produced by exactly the code that produced the live one.

Noise for step ``t`` of head ``(layer, head)`` is drawn from
``RngStream(seed).split(layer, head, t)``; the prompt phase is ``t = 0`` and
draws one ``(n, n)`` matrix whose row ``i`` perturbs query row ``i``.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .numerics import RngStream, TauSchedule, tau_at
from .policy import KvCache, PolicySpec, kept_indices
from .scores import ScoreState, merge_shared, score_increment


class EvictionEngine:
    def __init__(
        self,
        spec: PolicySpec,
        layers: int,
        heads: int,
        T: int,
        seed: int = 0,
        d_head: int | None = None,
    ):
        if not spec.resolved:
            raise ContractError("policy spec must be resolved to absolute k/w first")
        self.spec = spec
        self.layers = layers
        self.heads = heads
        self.T = T
        self.rng = RngStream(seed)
        k = None if spec.kind == "full" else spec.k
        w = 0 if spec.kind == "full" else spec.w
        self.caches = [[KvCache(k, w, d_head) for _ in range(heads)] for _ in range(layers)]
        self.state = ScoreState(spec.scope, layers, heads) if spec.uses_scores else None
        strategy = spec.strategy
        if strategy.use_temperature:
            self.schedule = TauSchedule(spec.tau_init, spec.tau_end, T)
        else:
            self.schedule = TauSchedule.fixed(1.0, T)
        self.t = 0
        self.prompted = False
        self.discarded = False
        self.evicted: list[list[set[int]]] = [[set() for _ in range(heads)] for _ in range(layers)]

    # -- bookkeeping -----------------------------------------------------

    def heads_iter(self):
        for l in range(self.layers):
            for h in range(self.heads):
                yield l, h

    def _sync_slots(self) -> None:
        """Register newly appended cache slots with the accumulators and check alignment."""
        if self.state is None:
            return
        if self.spec.scope == "shared":
            ref = self.caches[0][0].positions
            for l, h in self.heads_iter():
                if not np.array_equal(self.caches[l][h].positions, ref):
                    raise ContractError("shared scope requires identical slots in every head")
            acc = self.state.acc(0, 0)
            acc.add_slots(ref[len(acc):])
            if not np.array_equal(acc.positions, ref):
                raise ContractError("score state out of sync with cache")
            return
        for l, h in self.heads_iter():
            cache = self.caches[l][h]
            acc = self.state.acc(l, h)
            acc.add_slots(cache.positions[len(acc):])
            if not np.array_equal(acc.positions, cache.positions):
                raise ContractError(f"score state out of sync with cache ({l}, {h})")

    def kept(self) -> dict[tuple[int, int], tuple[int, ...]]:
        return {(l, h): tuple(self.caches[l][h].positions.tolist()) for l, h in self.heads_iter()}

    def tau(self, t: int) -> float:
        return tau_at(self.schedule, t)

    # -- scoring ---------------------------------------------------------

    def _increments(self, t: int, logits) -> dict[tuple[int, int], np.ndarray]:
        strategy = self.spec.strategy
        tau = self.tau(t)
        out = {}
        for l, h in self.heads_iter():
            x = np.asarray(logits[l][h], dtype=np.float64)
            if x.shape[-1] != len(self.caches[l][h]):
                raise ContractError(
                    f"logits for ({l}, {h}) cover {x.shape[-1]} slots, cache holds {len(self.caches[l][h])}"
                )
            inc = score_increment(x, strategy, tau, self.rng.split(l, h, t))
            if self.spec.kind == "damped" and self.discarded:
                inc = self.spec.alpha * inc
            out[(l, h)] = inc
        return out

    def _accumulate(self, t: int, logits) -> None:
        if self.state is None:
            return
        self._sync_slots()
        incs = self._increments(t, logits)
        if self.spec.scope == "shared":
            self.state.acc(0, 0).add(merge_shared(incs[key] for key in self.heads_iter()))
        else:
            for (l, h), inc in incs.items():
                self.state.acc(l, h).add(inc)

    def _evict(self) -> None:
        spec = self.spec
        if spec.kind == "full":
            return
        if spec.scope == "shared" and self.state is not None:
            acc = self.state.acc(0, 0)
            if len(acc) <= spec.k:
                return
            idx = kept_indices(spec, acc.positions, acc)
            acc.keep_indices(idx)
            for l, h in self.heads_iter():
                self._drop(l, h, idx)
            return
        for l, h in self.heads_iter():
            cache = self.caches[l][h]
            if len(cache) <= spec.k:
                continue
            acc = self.state.acc(l, h) if self.state is not None else None
            idx = kept_indices(spec, cache.positions, acc)
            if acc is not None:
                acc.keep_indices(idx)
            self._drop(l, h, idx)

    def _drop(self, l: int, h: int, idx) -> None:
        gone = self.caches[l][h].keep_indices(idx)
        if gone.size:
            self.discarded = True
            self.evicted[l][h].update(gone.tolist())

    # -- phases ----------------------------------------------------------

    def prompt_phase(self, logits) -> None:
        """Accumulate prompt-phase scores and reduce the prompt cache to ``k``.

        ``logits[l][h]`` is the ``(n, n)`` causal matrix of query rows over the
        ``n`` prompt slots, with ``-inf`` above the diagonal.
        """
        if self.prompted:
            raise ContractError("prompt phase already ran")
        self.prompted = True
        self._accumulate(0, logits)
        if self.state is not None:
            self.state.advance()
        self._evict()

    def generation_step(self, t: int, logits) -> None:
        """Score one generation step's query row per head, then evict back to ``k``.

        The caches must already contain the new token's entry, so it is scored
        (and, lying in the recent window, protected) before eviction.
        """
        if not self.prompted:
            raise ContractError("generation step before prompt phase")
        if t != self.t + 1:
            raise ContractError(f"expected step {self.t + 1}, got {t}")
        if t > self.T:
            raise ContractError(f"step {t} beyond generation length {self.T}")
        self._accumulate(t, logits)
        if self.state is not None:
            self.state.advance()
        self._evict()
        self.t = t

    def sizes(self) -> list[int]:
        return [len(self.caches[l][h]) for l, h in self.heads_iter()]
