import csv
import json

import pytest

from kvreduce.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_TRACE, build_parser, main
from kvreduce.trace import read_trace

SMALL = ["--layers", "1", "--heads", "2", "--d-model", "16", "--vocab", "32"]


def run(args):
    code = main([str(a) for a in args])
    return code


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_generate_full_counts_rows(tmp_path):
    out = tmp_path / "full"
    assert run(["generate", "--policy", "full", "--prompt-len", 64, "--gen", 32, "--seed", 7, "--out", out, *SMALL]) == 0
    trace = read_trace(out / "trace.jsonl")
    assert len(trace.records) == (64 + 32) * 1 * 2
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["cache_sizes"][-1] == 96


def test_generate_keyformer_steady_cache_and_determinism(tmp_path):
    args = ["generate", "--policy", "keyformer", "--kv-pct", 50, "--recent-ratio", 0.3, "--tau", "1:2",
            "--prompt-len", 64, "--gen", 8, *SMALL]
    assert run([*args, "--out", tmp_path / "a"]) == 0
    assert run([*args, "--out", tmp_path / "b"]) == 0
    metrics = json.loads((tmp_path / "a" / "metrics.json").read_text())
    assert set(metrics["cache_sizes"]) == {32}
    assert "divergence_step" in metrics
    for name in ("tokens.txt", "trace.jsonl", "metrics.json", "timeline.csv", "run_config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_run_config_reproduces_and_flags_win(tmp_path):
    assert run(["generate", "--policy", "h2o", "--k", 6, "--prompt-len", 12, "--gen", 4, "--out", tmp_path / "a", *SMALL]) == 0
    cfg = tmp_path / "a" / "run_config.json"
    assert run(["generate", "--config", cfg, "--out", tmp_path / "b"]) == 0
    assert (tmp_path / "a" / "trace.jsonl").read_bytes() == (tmp_path / "b" / "trace.jsonl").read_bytes()
    assert run(["generate", "--config", cfg, "--k", 4, "--out", tmp_path / "c"]) == 0
    metrics = json.loads((tmp_path / "c" / "metrics.json").read_text())
    assert metrics["k"] == 4 and metrics["policy"]["kind"] == "h2o"


def test_env_var_sets_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("KVREDUCE_OUT", str(tmp_path / "env"))
    assert run(["generate", "--policy", "window", "--k", 4, "--prompt-len", 8, "--gen", 2, *SMALL]) == 0
    assert (tmp_path / "env" / "trace.jsonl").exists()


def test_replay_commands(tmp_path):
    assert run(["generate", "--policy", "full", "--prompt-len", 24, "--gen", 6, "--out", tmp_path / "g", *SMALL]) == 0
    trace = tmp_path / "g" / "trace.jsonl"
    assert run(["replay", trace, "--policy", "h2o", "--kv-pct", 50, "--out", tmp_path / "h"]) == 0
    assert run(["replay", trace, "--policy", "keyformer", "--kv-pct", 50, "--noise", "none",
                "--no-temperature", "--out", tmp_path / "k"]) == 0
    h = (tmp_path / "h" / "replay_timeline.csv").read_text()
    assert h == (tmp_path / "k" / "replay_timeline.csv").read_text()
    assert run(["replay", trace, "--policy", "window", "--k", 5, "--out", tmp_path / "w"]) == 0
    rows = read_csv(tmp_path / "w" / "replay_timeline.csv")
    for r in rows:
        t = int(r["t"])
        assert r["positions"] == " ".join(str(p) for p in range(24 + t - 5, 24 + t))


def test_replay_errors(tmp_path):
    assert run(["generate", "--policy", "window", "--k", 4, "--prompt-len", 8, "--gen", 2, "--out", tmp_path, *SMALL]) == 0
    assert run(["replay", tmp_path / "trace.jsonl", "--policy", "full", "--out", tmp_path / "r"]) == EXIT_TRACE
    lines = (tmp_path / "trace.jsonl").read_text().splitlines(keepends=True)
    (tmp_path / "cut.jsonl").write_text("".join(lines[:-1]))
    assert run(["replay", tmp_path / "cut.jsonl", "--out", tmp_path / "r"]) == EXIT_TRACE
    assert run(["replay", tmp_path / "missing.jsonl"]) == EXIT_IO


def test_sweep_rows_and_tau_arms(tmp_path):
    out = tmp_path / "s.csv"
    grid = {"policies": ["keyformer"], "tau": ["1", "2", "1:2"], "prompt_len": 16, "gen": 4,
            "decoder": {"layers": 1, "heads": 2, "d_model": 16, "vocab": 32}}
    (tmp_path / "g.json").write_text(json.dumps(grid))
    assert run(["sweep", "--grid", tmp_path / "g.json", "--workers", 1, "--out-csv", out]) == 0
    rows = read_csv(out)
    assert [(r["tau_init"], r["tau_end"]) for r in rows] == [("1.0", "1.0"), ("2.0", "2.0"), ("1.0", "2.0")]
    assert all(r["status"] == "ok" for r in rows)


def test_sweep_counts_a_percentage_grid(tmp_path):
    out = tmp_path / "s.csv"
    grid = {"policies": ["window"], "prompt_len": 20, "gen": 2,
            "decoder": {"layers": 1, "heads": 1, "d_model": 8, "vocab": 16}}
    (tmp_path / "g.json").write_text(json.dumps(grid))
    args = ["sweep", "--grid", tmp_path / "g.json", "--kv-pct", "20,30,40,50,60,70,80,90",
            "--seeds", "0,1,2", "--workers", 2, "--out-csv", out]
    assert run(args) == 0
    assert len(read_csv(out)) == 24


def test_sweep_usage_errors(tmp_path):
    (tmp_path / "empty.json").write_text(json.dumps({"policies": []}))
    assert run(["sweep", "--grid", tmp_path / "empty.json"]) == EXIT_CONFIG
    (tmp_path / "bad.json").write_text("[1, 2]")
    assert run(["sweep", "--grid", tmp_path / "bad.json"]) == EXIT_CONFIG


def test_sweep_failing_rows_are_recorded(tmp_path):
    out = tmp_path / "s.csv"
    grid = {"policies": ["window", "attention_sink"], "kv_pct": [20], "prompt_len": 10, "gen": 2,
            "decoder": {"layers": 1, "heads": 1, "d_model": 8, "vocab": 16}}
    (tmp_path / "g.json").write_text(json.dumps(grid))
    assert run(["sweep", "--grid", tmp_path / "g.json", "--workers", 1, "--out-csv", out]) == EXIT_OK
    rows = read_csv(out)
    assert [r["status"] for r in rows] == ["ok", "error"]
    assert "ConfigError" in rows[1]["error"]


def test_analyze_commands(tmp_path, capsys):
    assert run(["generate", "--policy", "full", "--prompt-len", 16, "--gen", 2, "--out", tmp_path, *SMALL]) == 0
    trace = tmp_path / "trace.jsonl"
    assert run(["analyze", "cdf", "--trace", trace, "--out", tmp_path]) == 0
    mass = [float(r["cumulative_attention_mass"]) for r in read_csv(tmp_path / "cdf.csv")]
    assert mass == sorted(mass) and mass[-1] == 1.0
    assert run(["analyze", "sparsity", "--trace", trace, "--out", tmp_path]) == 0
    assert run(["analyze", "shift", "--logits", "1,2,3,4", "--keep", "0.5", "--out", tmp_path]) == 0
    assert json.loads((tmp_path / "shift.json").read_text())["kept"] == 2
    assert run(["analyze", "entropy", "--n", 16, "--trials", 5, "--samples", 500, "--out", tmp_path]) == 0
    assert json.loads((tmp_path / "entropy.json").read_text())["win_rate"] == 1.0
    assert run(["analyze", "traffic", "--preset", "7b", "--kv-pct", 50, "--out", tmp_path]) == 0
    summary = json.loads((tmp_path / "traffic.json").read_text())
    assert summary["kv_ratio_full_to_reduced"] == 2.0
    capsys.readouterr()
    assert run(["analyze", "traffic", "--gen", 2, "--prompt-len", 4]) == 0
    assert capsys.readouterr().out.startswith("series,step,cache_tokens")


def test_config_errors(tmp_path):
    assert run(["generate", "--policy", "window", "--k", 0, "--prompt-len", 8, "--gen", 2, "--out", tmp_path]) == EXIT_CONFIG
    (tmp_path / "c.json").write_text('{"policy": {"kind": "h2o", "colour": 1}}')
    assert run(["generate", "--config", tmp_path / "c.json", "--out", tmp_path]) == EXIT_CONFIG
    (tmp_path / "d.json").write_text("{oops")
    assert run(["generate", "--config", tmp_path / "d.json", "--out", tmp_path]) == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main(["generate", "--policy", "lru"])
    assert exc.value.code == 2


def test_help_lists_every_flag(capsys):
    parser = build_parser()
    with pytest.raises(SystemExit):
        parser.parse_args(["generate", "--help"])
    text = capsys.readouterr().out
    for flag in ("--policy", "--kv-pct", "--k", "--w", "--recent-ratio", "--sinks", "--alpha", "--noise",
                 "--temperature", "--tau", "--scope", "--position-mode", "--config", "--out", "--pos-enc"):
        assert flag in text
