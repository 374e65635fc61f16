"""Attention traces: JSONL recording, model-free replay, kept-set comparison.

File grammar (one JSON object per line, UTF-8, ``\\n`` terminated)::

    line 1   {"format": "kvreduce-trace", "version": 1, "n_records": N, ...header fields}
    line 2.. {"t": int, "layer": int, "head": int, "q_pos": int,
              "slots": [int, ...], "logits": [decimal, ...]}

Records are ordered by ``(t, layer, head, q_pos)``. ``t = 0`` rows are the
causal prompt rows (``slots = 0..q_pos``); ``t >= 1`` rows are generation
queries over the cache as it stood before that step's eviction. Logits are
written with 17 significant digits, which round-trips IEEE doubles exactly.
A file with fewer than ``n_records`` records is rejected as truncated.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field
from typing import IO, Iterable

import numpy as np

from .errors import DomainError, IncompatibleTraceError, TraceParseError, TraceVersionError

FORMAT = "kvreduce-trace"
VERSION = 1


@dataclass
class TraceRecord:
    t: int
    layer: int
    head: int
    q_pos: int
    slots: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        self.slots = np.asarray(self.slots, dtype=np.int64)
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.slots.shape != self.logits.shape:
            raise ValueError("slots and logits differ in length")

    def __eq__(self, other):
        if not isinstance(other, TraceRecord):
            return NotImplemented
        return (
            (self.t, self.layer, self.head, self.q_pos) == (other.t, other.layer, other.head, other.q_pos)
            and np.array_equal(self.slots, other.slots)
            and np.array_equal(self.logits, other.logits)
        )

    def key(self) -> tuple[int, int, int, int]:
        return (self.t, self.layer, self.head, self.q_pos)


@dataclass
class AttentionTrace:
    header: dict
    records: list[TraceRecord] = field(default_factory=list)

    @property
    def prompt_len(self) -> int:
        return int(self.header["prompt_len"])

    @property
    def gen_len(self) -> int:
        return int(self.header["gen_len"])

    @property
    def layers(self) -> int:
        return int(self.header["layers"])

    @property
    def heads(self) -> int:
        return int(self.header["heads"])

    def __eq__(self, other):
        if not isinstance(other, AttentionTrace):
            return NotImplemented
        return self.header == other.header and self.records == other.records


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def record_line(rec: TraceRecord) -> str:
    slots = ",".join(str(int(s)) for s in rec.slots)
    logits = ",".join(_fmt(v) for v in rec.logits)
    return (
        f'{{"t":{rec.t},"layer":{rec.layer},"head":{rec.head},"q_pos":{rec.q_pos},'
        f'"slots":[{slots}],"logits":[{logits}]}}'
    )


def write_trace(trace: AttentionTrace, sink) -> None:
    """Write ``trace`` as JSONL to a path or a text stream."""
    header = dict(trace.header)
    header["format"] = FORMAT
    header["version"] = VERSION
    header["n_records"] = len(trace.records)
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "w", encoding="utf-8", newline="\n") as fh:
            _write(fh, header, trace.records)
    else:
        _write(sink, header, trace.records)


def _write(fh: IO[str], header: dict, records: Iterable[TraceRecord]) -> None:
    fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
    for rec in records:
        fh.write(record_line(rec) + "\n")


def trace_to_string(trace: AttentionTrace) -> str:
    buf = io.StringIO()
    write_trace(trace, buf)
    return buf.getvalue()


_RECORD_FIELDS = ("t", "layer", "head", "q_pos", "slots", "logits")


def read_trace(source) -> AttentionTrace:
    """Parse a trace from a path or text stream, validating order and completeness."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            return _read(fh)
    return _read(source)


def _read(fh: IO[str]) -> AttentionTrace:
    first = fh.readline()
    if not first:
        raise TraceParseError("empty trace file", 1)
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise TraceParseError(f"bad header: {exc.msg}", 1) from exc
    if not isinstance(header, dict):
        raise TraceParseError("header is not an object", 1)
    if header.get("format") != FORMAT or header.get("version") != VERSION:
        raise TraceVersionError(
            f"unsupported trace format {header.get('format')!r} version {header.get('version')!r}"
        )
    for key in ("n_records", "prompt_len", "gen_len", "layers", "heads"):
        if key not in header:
            raise TraceParseError(f"header missing {key!r}", 1)
    expected = int(header.pop("n_records"))
    header.pop("format")
    header.pop("version")
    records = []
    last = None
    lineno = 1
    for lineno, line in enumerate(fh, start=2):
        if not line.endswith("\n"):
            raise TraceParseError("truncated record (no line terminator)", lineno)
        if not line.strip():
            raise TraceParseError("blank line", lineno)
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceParseError(f"bad record: {exc.msg}", lineno) from exc
        if not isinstance(obj, dict) or any(f not in obj for f in _RECORD_FIELDS):
            raise TraceParseError("record missing fields", lineno)
        if len(obj["slots"]) != len(obj["logits"]):
            raise TraceParseError("slots and logits differ in length", lineno)
        rec = TraceRecord(
            int(obj["t"]), int(obj["layer"]), int(obj["head"]), int(obj["q_pos"]),
            np.array(obj["slots"], dtype=np.int64), np.array(obj["logits"], dtype=np.float64),
        )
        if last is not None and rec.key() <= last:
            raise TraceParseError("records out of order", lineno)
        last = rec.key()
        records.append(rec)
    if len(records) != expected:
        raise TraceParseError(f"expected {expected} records, found {len(records)} (truncated?)", lineno)
    return AttentionTrace(header, records)


# -- kept-set timelines ------------------------------------------------------


@dataclass
class KeptTimeline:
    """Per step ``t`` (0 = after the prompt reduction), the positions each (layer, head) retains."""

    steps: list[dict[tuple[int, int], tuple[int, ...]]]

    def __len__(self) -> int:
        return len(self.steps)

    def __eq__(self, other):
        if not isinstance(other, KeptTimeline):
            return NotImplemented
        return self.steps == other.steps

    def as_set(self, t: int) -> frozenset:
        return frozenset((l, h, p) for (l, h), ps in self.steps[t].items() for p in ps)

    def rows(self):
        """CSV rows ``(t, layer, head, size, positions)``."""
        for t, step in enumerate(self.steps):
            for (l, h), ps in sorted(step.items()):
                yield t, l, h, len(ps), " ".join(str(p) for p in ps)


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def overlap(a, b) -> list[float]:
    """Per-step Jaccard similarity between two timelines (or two sequences of sets)."""
    sa = [a.as_set(t) for t in range(len(a))] if isinstance(a, KeptTimeline) else list(a)
    sb = [b.as_set(t) for t in range(len(b))] if isinstance(b, KeptTimeline) else list(b)
    if len(sa) != len(sb):
        raise DomainError(f"timelines cover different step ranges ({len(sa)} vs {len(sb)})")
    return [jaccard(x, y) for x, y in zip(sa, sb)]


def divergence_step(a, b) -> int | None:
    """First index where two token sequences differ, or ``None`` if identical."""
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return i
    if len(a) != len(b):
        return min(len(a), len(b))
    return None


def timeline_violations(timeline: KeptTimeline, spec, n_prompt: int) -> list[str]:
    """Check budget, recency and irreversibility of a timeline under a resolved ``spec``."""
    problems = []
    evicted: dict[tuple[int, int], set[int]] = {}
    for t, step in enumerate(timeline.steps):
        seen = n_prompt + t
        for key, ps in step.items():
            kept = set(ps)
            if any(p < 0 or p >= seen for p in kept):
                problems.append(f"t={t} {key}: position outside 0..{seen - 1}")
            if spec.kind == "full":
                want = seen
            else:
                want = min(spec.k, seen)
            if len(kept) != want:
                problems.append(f"t={t} {key}: size {len(kept)} != {want}")
            if spec.kind != "full" and spec.w:
                recent = set(range(max(seen - spec.w, 0), seen))
                if not recent <= kept:
                    problems.append(f"t={t} {key}: recent window incomplete")
            if spec.kind == "attention_sink":
                if not set(range(min(spec.sinks, seen))) <= kept:
                    problems.append(f"t={t} {key}: sink tokens missing")
            # every seen token entered the cache, so anything seen but not kept was evicted
            gone = evicted.setdefault(key, set())
            if kept & gone:
                problems.append(f"t={t} {key}: evicted position came back")
            gone |= set(range(seen)) - kept
    return problems


# -- replay -------------------------------------------------------------------


def _group(trace: AttentionTrace):
    prompt: dict[tuple[int, int], list[TraceRecord]] = {}
    steps: dict[int, dict[tuple[int, int], TraceRecord]] = {}
    for rec in trace.records:
        if rec.t == 0:
            prompt.setdefault((rec.layer, rec.head), []).append(rec)
        else:
            slot = steps.setdefault(rec.t, {})
            if (rec.layer, rec.head) in slot:
                raise IncompatibleTraceError(f"duplicate generation record at t={rec.t}")
            slot[(rec.layer, rec.head)] = rec
    return prompt, steps


def replay(trace: AttentionTrace, spec, seed: int | None = None) -> KeptTimeline:
    """Run ``spec`` over the logits recorded in ``trace`` without a model.

    Uses the same :class:`~kvreduce.engine.EvictionEngine` as the live decoder.
    The trace must hold logits for every slot the replayed cache contains; a
    trace recorded under a reducing policy therefore only replays that policy
    (or one that keeps a subset of its slots at every step).
    """
    from .engine import EvictionEngine

    n, T, L, H = trace.prompt_len, trace.gen_len, trace.layers, trace.heads
    if seed is None:
        seed = int(trace.header.get("seeds", {}).get("noise", 0))
    spec = spec.resolve(n)
    engine = EvictionEngine(spec, L, H, T, seed)
    prompt, steps = _group(trace)

    mats = []
    for l in range(L):
        row = []
        for h in range(H):
            recs = prompt.get((l, h), [])
            if len(recs) != n:
                raise IncompatibleTraceError(f"prompt rows for ({l}, {h}): {len(recs)} != {n}")
            mat = np.full((n, n), -np.inf)
            for i, rec in enumerate(recs):
                if rec.q_pos != i or not np.array_equal(rec.slots, np.arange(i + 1)):
                    raise IncompatibleTraceError(f"prompt row {i} of ({l}, {h}) is not a full causal row")
                mat[i, : i + 1] = rec.logits
            row.append(mat)
            engine.caches[l][h].extend(np.arange(n))
        mats.append(row)
    engine.prompt_phase(mats)
    kept = [engine.kept()]

    for t in range(1, T + 1):
        step = steps.get(t)
        if step is None or len(step) != L * H:
            raise IncompatibleTraceError(f"generation step {t} incomplete in trace")
        logits = []
        for l in range(L):
            row = []
            for h in range(H):
                rec = step[(l, h)]
                cache = engine.caches[l][h]
                cache.append(rec.q_pos)
                idx = np.searchsorted(rec.slots, cache.positions)
                idx = np.minimum(idx, rec.slots.size - 1)
                if not np.array_equal(rec.slots[idx], cache.positions):
                    missing = sorted(set(cache.positions.tolist()) - set(rec.slots.tolist()))
                    raise IncompatibleTraceError(
                        f"step {t} ({l}, {h}): trace lacks logits for slots {missing[:8]}"
                    )
                row.append(rec.logits[idx])
            logits.append(row)
        engine.generation_step(t, logits)
        kept.append(engine.kept())
    return KeptTimeline(kept)
