import io
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kvreduce.decoder import generate, synthetic_prompt
from kvreduce.errors import DomainError, IncompatibleTraceError, TraceParseError, TraceVersionError
from kvreduce.policy import PolicySpec
from kvreduce.trace import (
    AttentionTrace,
    KeptTimeline,
    TraceRecord,
    divergence_step,
    jaccard,
    overlap,
    read_trace,
    replay,
    timeline_violations,
    trace_to_string,
    write_trace,
)

GOLDEN = Path(__file__).parent / "data" / "golden_trace.jsonl"


def tiny_trace():
    header = {"layers": 1, "heads": 1, "prompt_len": 2, "gen_len": 1, "seeds": {"noise": 0, "weights": 0},
              "policy": PolicySpec("full").to_json()}
    records = [
        TraceRecord(0, 0, 0, 0, [0], [0.1]),
        TraceRecord(0, 0, 0, 1, [0, 1], [0.1, -2.5]),
        TraceRecord(1, 0, 0, 2, [0, 1, 2], [1 / 3, 1e-300, 12345.678]),
    ]
    return AttentionTrace(header, records)


def test_golden_file_bytes():
    assert trace_to_string(tiny_trace()) == GOLDEN.read_text(encoding="utf-8")


def test_round_trip_is_exact(small_decoder, tmp_path):
    res = generate(small_decoder, synthetic_prompt(8, 1, 32), 10, PolicySpec("keyformer", k_pct=50))
    path = tmp_path / "t.jsonl"
    write_trace(res.trace, path)
    again = read_trace(path)
    assert again == res.trace
    assert trace_to_string(again) == path.read_text()


def test_header_only_trace():
    trace = AttentionTrace({"layers": 1, "heads": 1, "prompt_len": 0, "gen_len": 0}, [])
    text = trace_to_string(trace)
    assert text.count("\n") == 1
    assert read_trace(io.StringIO(text)) == trace


def test_truncated_file_is_rejected():
    text = trace_to_string(tiny_trace())
    lines = text.splitlines(keepends=True)
    with pytest.raises(TraceParseError, match="line 3"):
        read_trace(io.StringIO("".join(lines[:3])))
    with pytest.raises(TraceParseError, match="line 4"):
        read_trace(io.StringIO(text[:-5]))


def test_bad_files():
    text = trace_to_string(tiny_trace())
    with pytest.raises(TraceVersionError):
        read_trace(io.StringIO(text.replace('"version":1', '"version":2')))
    with pytest.raises(TraceParseError):
        read_trace(io.StringIO(""))
    lines = text.splitlines(keepends=True)
    with pytest.raises(TraceParseError, match="out of order"):
        read_trace(io.StringIO(lines[0] + lines[2] + lines[1] + lines[3]))
    with pytest.raises(TraceParseError, match="line 2"):
        read_trace(io.StringIO(lines[0] + "{not json}\n" + "".join(lines[2:])))


def test_comparison_examples():
    assert jaccard({1, 2, 3}, {2, 3, 4}) == 0.5
    assert jaccard({1, 2}, {3, 4}) == 0.0
    assert overlap([{1}, {2}], [{1}, {2}]) == [1.0, 1.0]
    with pytest.raises(DomainError):
        overlap([{1}], [{1}, {2}])
    assert divergence_step([5, 6, 7], [5, 6, 9]) == 2
    assert divergence_step([1, 2], [1, 2]) is None
    assert divergence_step([0], [1]) == 0


@given(st.sets(st.integers(0, 20)), st.sets(st.integers(0, 20)))
def test_jaccard_bounds_and_symmetry(a, b):
    j = jaccard(a, b)
    assert 0.0 <= j <= 1.0
    assert j == jaccard(b, a)


def test_violation_checker_flags_bad_timelines():
    spec = PolicySpec("h2o", k=3, w=1)
    good = KeptTimeline([{(0, 0): (0, 1, 3)}, {(0, 0): (0, 3, 4)}])
    assert timeline_violations(good, spec, 4) == []
    too_big = KeptTimeline([{(0, 0): (0, 1, 2, 3)}])
    assert any("size" in p for p in timeline_violations(too_big, spec, 4))
    no_recent = KeptTimeline([{(0, 0): (0, 1, 2)}])
    assert any("recent" in p for p in timeline_violations(no_recent, spec, 4))
    revived = KeptTimeline([{(0, 0): (0, 1, 3)}, {(0, 0): (0, 2, 4)}])
    assert any("came back" in p for p in timeline_violations(revived, spec, 4))


def test_replay_of_full_trace(small_decoder):
    ids = synthetic_prompt(12, 2, 32)
    res = generate(small_decoder, ids, 6, PolicySpec("full"))
    tl = replay(res.trace, PolicySpec("full"))
    assert tl == res.timeline
    win = replay(res.trace, PolicySpec("window", k=5, w=5))
    for t, step in enumerate(win.steps):
        for kept in step.values():
            assert kept == tuple(range(12 + t - 5, 12 + t))


def test_replay_seed_changes_noisy_timelines(small_decoder):
    res = generate(small_decoder, synthetic_prompt(24, 2, 32), 8, PolicySpec("full"))
    spec = PolicySpec("keyformer", k_pct=40)
    a = replay(res.trace, spec, seed=1)
    b = replay(res.trace, spec, seed=2)
    assert a != b
    assert a == replay(res.trace, spec, seed=1)
    for tl in (a, b):
        assert timeline_violations(tl, spec.resolve(24), 24) == []


def test_plain_keyformer_replay_matches_h2o(small_decoder):
    res = generate(small_decoder, synthetic_prompt(24, 3, 32), 8, PolicySpec("full"))
    plain = PolicySpec.from_json({"kind": "keyformer", "k_pct": 50, "noise": "none", "temperature": False})
    assert overlap(replay(res.trace, plain), replay(res.trace, PolicySpec("h2o", k_pct=50))) == [1.0] * 9


def test_replay_detects_missing_slots(small_decoder):
    res = generate(small_decoder, synthetic_prompt(16, 3, 32), 4, PolicySpec("window", k_pct=50))
    with pytest.raises(IncompatibleTraceError):
        replay(res.trace, PolicySpec("full"))


def test_record_rejects_mismatched_lengths():
    with pytest.raises(ValueError):
        TraceRecord(0, 0, 0, 0, np.arange(2), np.zeros(3))
