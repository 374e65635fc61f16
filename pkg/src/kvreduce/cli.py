"""Command-line entry point: ``kvreduce {generate,replay,sweep,analyze}``.

Exit codes:

===  =====================================================
0    success
1    unexpected failure, or every sweep row failed
2    usage or configuration error
3    I/O error
4    contract violation (internal state desync)
5    trace error (parse, version, incompatible replay)
===  =====================================================

``--config FILE`` loads a JSON run config; flags given on the command line
override its values. ``KVREDUCE_OUT`` sets the default output directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import analysis
from .decoder import DecoderConfig, build_decoder, generate, parse_prompt, synthetic_prompt
from .errors import (
    ConfigError,
    ContractError,
    DomainError,
    IncompatibleTraceError,
    TraceParseError,
    TraceVersionError,
)
from .io_utils import atomic_write_text, csv_text, write_csv, write_json
from .numerics import NoiseSpec, RngStream
from .policy import KINDS, PolicySpec
from .sweep import SWEEP_COLUMNS, SweepGrid, parse_tau, run_sweep
from .trace import overlap, read_trace, replay, trace_to_string

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO, EXIT_CONTRACT, EXIT_TRACE = 0, 1, 2, 3, 4, 5

DECODER_FLAGS = {
    "layers": "layers", "heads": "heads", "d_model": "d_model", "vocab": "vocab",
    "pos_enc": "position_encoding", "weight_seed": "seed", "qk_gain": "qk_gain",
    "max_positions": "max_positions",
}


def _out_dir(args) -> str:
    return args.out or os.environ.get("KVREDUCE_OUT") or "."


def _load_json(path):
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return obj


def add_policy_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("policy")
    g.add_argument("--policy", choices=KINDS, help="eviction policy kind")
    g.add_argument("--kv-pct", type=float, help="KV budget as percent of prompt length (floored)")
    g.add_argument("--k", type=int, help="absolute KV budget (overrides --kv-pct)")
    g.add_argument("--w", type=int, help="absolute recent window (overrides --recent-ratio)")
    g.add_argument("--recent-ratio", type=float, help="recent window as a fraction of k")
    g.add_argument("--sinks", type=int, help="attention-sink token count")
    g.add_argument("--alpha", type=float, help="damping factor for the damped policy")
    g.add_argument("--noise", choices=NoiseSpec.KINDS, help="logit noise for scoring")
    g.add_argument("--temperature", dest="temperature", action="store_true", default=None,
                   help="apply the temperature schedule when scoring")
    g.add_argument("--no-temperature", dest="temperature", action="store_false")
    g.add_argument("--tau", help="temperature range 'init:end' or a fixed value")
    g.add_argument("--scope", choices=("per_layer_head", "shared"), help="score scope")
    g.add_argument("--position-mode", choices=("original", "renumbered"), help="position ids after eviction")


def policy_from(args, base: dict | None) -> PolicySpec:
    obj = dict(base or {})
    if args.policy is not None:
        obj["kind"] = args.policy
    if args.kv_pct is not None:
        obj["k_pct"] = args.kv_pct
        obj.pop("k_abs", None)
    if args.k is not None:
        obj["k_abs"] = args.k
        obj.pop("k_pct", None)
    if args.w is not None:
        obj["w_abs"] = args.w
    if args.recent_ratio is not None:
        obj["recent_ratio"] = args.recent_ratio
        if args.w is None:
            obj.pop("w_abs", None)
    for flag in ("sinks", "alpha", "noise", "temperature", "scope"):
        if getattr(args, flag) is not None:
            obj[flag] = getattr(args, flag)
    if args.position_mode is not None:
        obj["position_mode"] = args.position_mode
    if args.tau is not None:
        obj["tau_init"], obj["tau_end"] = parse_tau(args.tau)
    obj.setdefault("kind", "keyformer")
    if obj["kind"] != "full" and "k_pct" not in obj and "k_abs" not in obj:
        obj["k_pct"] = 50.0
    return PolicySpec.from_json(obj)


def add_decoder_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("decoder")
    g.add_argument("--layers", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--d-model", type=int)
    g.add_argument("--vocab", type=int)
    g.add_argument("--max-positions", type=int)
    g.add_argument("--pos-enc", choices=("absolute_sinusoidal", "alibi"))
    g.add_argument("--weight-seed", type=int)
    g.add_argument("--qk-gain", type=float)


def decoder_from(args, base: dict | None) -> DecoderConfig:
    obj = dict(base or {})
    for flag, key in DECODER_FLAGS.items():
        if getattr(args, flag, None) is not None:
            obj[key] = getattr(args, flag)
    return DecoderConfig.from_json(obj)


# -- generate -------------------------------------------------------------------


def run_config_from(args) -> dict:
    cfg = _load_json(args.config)
    unknown = set(cfg) - {"decoder", "policy", "prompt", "prompt_len", "gen", "seed", "baseline"}
    if unknown:
        raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
    decoder = decoder_from(args, cfg.get("decoder"))
    policy = policy_from(args, cfg.get("policy"))
    prompt = cfg.get("prompt")
    if args.prompt is not None:
        prompt = parse_prompt(args.prompt)
    if args.prompt_file is not None:
        with open(args.prompt_file, encoding="utf-8") as fh:
            prompt = parse_prompt(fh.read())
    prompt_len = args.prompt_len if args.prompt_len is not None else cfg.get("prompt_len", 64)
    gen = args.gen if args.gen is not None else cfg.get("gen", 32)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    baseline = cfg.get("baseline", True) if args.baseline is None else args.baseline
    if prompt is None:
        prompt = synthetic_prompt(int(prompt_len), int(seed), decoder.vocab)
    return {
        "decoder": decoder.to_json(),
        "policy": policy.to_json(),
        "prompt": [int(t) for t in prompt],
        "prompt_len": len(prompt),
        "gen": int(gen),
        "seed": int(seed),
        "baseline": bool(baseline),
    }


def cmd_generate(args) -> int:
    run = run_config_from(args)
    dec = build_decoder(DecoderConfig.from_json(run["decoder"]))
    spec = PolicySpec.from_json(run["policy"])
    base_tokens = None
    if run["baseline"] and spec.kind != "full":
        base_tokens = generate(dec, run["prompt"], run["gen"], PolicySpec("full"), seed=run["seed"],
                               record=False).tokens
    res = generate(dec, run["prompt"], run["gen"], spec, seed=run["seed"], baseline=base_tokens)
    out = _out_dir(args)
    metrics = dict(res.metrics)
    metrics["policy"] = spec.resolve(run["prompt_len"]).to_json()
    metrics["tokens"] = res.tokens
    if base_tokens is not None:
        metrics["baseline_tokens"] = base_tokens
    atomic_write_text(os.path.join(out, "trace.jsonl"), trace_to_string(res.trace))
    atomic_write_text(os.path.join(out, "tokens.txt"), " ".join(str(t) for t in res.tokens) + "\n")
    write_csv(os.path.join(out, "timeline.csv"), ("t", "layer", "head", "size", "positions"), res.timeline.rows())
    write_json(os.path.join(out, "metrics.json"), metrics)
    write_json(os.path.join(out, "run_config.json"), run)
    print(json.dumps({"out": out, "tokens": len(res.tokens), "divergence_step": metrics.get("divergence_step")}))
    return EXIT_OK


# -- replay ---------------------------------------------------------------------


def cmd_replay(args) -> int:
    trace = read_trace(args.trace)
    recorded = PolicySpec.from_json(trace.header["policy"])
    if args.config:
        base = _load_json(args.config).get("policy")
    else:
        # Start from the recorded policy; a new kind recomputes its window.
        base = dict(trace.header["policy"])
        if args.policy is not None and args.policy != base.get("kind"):
            base.pop("w_abs", None)
    spec = policy_from(args, base)
    timeline = replay(trace, spec, seed=args.seed)
    baseline = replay(trace, recorded)
    series = overlap(timeline, baseline)
    out = _out_dir(args)
    write_csv(os.path.join(out, "replay_timeline.csv"), ("t", "layer", "head", "size", "positions"), timeline.rows())
    write_csv(os.path.join(out, "replay_overlap.csv"), ("t", "jaccard_vs_recorded"), enumerate(series))
    print(json.dumps({"steps": len(timeline), "mean_overlap": float(np.mean(series)),
                      "recorded_policy": recorded.kind, "replayed_policy": spec.kind}))
    return EXIT_OK


# -- sweep ----------------------------------------------------------------------


def _floats(text):
    return [float(x) for x in text.split(",") if x.strip()]


def cmd_sweep(args) -> int:
    obj = _load_json(args.grid)
    if args.policies is not None:
        obj["policies"] = [p for p in args.policies.split(",") if p]
    if args.kv_pct is not None:
        obj["kv_pct"] = _floats(args.kv_pct)
    if args.recent_ratio is not None:
        obj["recent_ratio"] = _floats(args.recent_ratio)
    if args.alpha is not None:
        obj["alpha"] = _floats(args.alpha)
    if args.tau is not None:
        obj["tau"] = [t for t in args.tau.split(",") if t]
    if args.seeds is not None:
        obj["seeds"] = [int(s) for s in args.seeds.split(",") if s]
    if args.prompt_len is not None:
        obj["prompt_len"] = args.prompt_len
    if args.gen is not None:
        obj["gen"] = args.gen
    grid = SweepGrid.from_json(obj)
    rows = run_sweep(grid, args.workers)
    out = args.out_csv or os.path.join(_out_dir(args), "sweep.csv")
    write_csv(out, SWEEP_COLUMNS, ([r[c] for c in SWEEP_COLUMNS] for r in rows))
    failed = sum(r["status"] != "ok" for r in rows)
    print(json.dumps({"rows": len(rows), "failed": failed, "out": out}))
    for r in rows:
        if r["status"] != "ok":
            print(f"row {r['row']} failed: {r['error']}", file=sys.stderr)
    return EXIT_FAIL if failed == len(rows) else EXIT_OK


# -- analyze --------------------------------------------------------------------


def _emit(args, name: str, header, rows, summary: dict) -> None:
    rows = list(rows)
    if args.out:
        write_csv(os.path.join(args.out, f"{name}.csv"), header, rows)
        write_json(os.path.join(args.out, f"{name}.json"), summary)
    else:
        sys.stdout.write(csv_text(header, rows))
    print(json.dumps(summary, sort_keys=True), file=sys.stderr)


def cmd_analyze(args) -> int:
    what = args.analysis
    if what == "cdf":
        series = analysis.attention_cdf(read_trace(args.trace), args.points)
        idx = int(np.searchsorted(series.fractions, 0.4 - 1e-12))
        _emit(args, "cdf", analysis.CDF_COLUMNS, series.rows(),
              {"analysis": "cdf", "points": len(series.fractions), "mass_at_40pct": float(series.mass[idx])})
    elif what == "sparsity":
        thresholds = _floats(args.thresholds)
        values = analysis.threshold_sparsity(read_trace(args.trace), thresholds)
        _emit(args, "sparsity", analysis.SPARSITY_COLUMNS, zip(thresholds, values),
              {"analysis": "sparsity", "default_sparsity": values[0] if thresholds[0] == 0 else None})
    elif what == "shift":
        if args.logits:
            x = np.array(_floats(args.logits))
        else:
            x = RngStream(args.seed).standard_normal(args.n) * 2.0
        res = analysis.distribution_shift(x, args.keep)
        rows = [(int(i), float(res.full[i]), float(r), float(f))
                for i, r, f in zip(res.kept, res.reduced, res.inflation)]
        _emit(args, "shift", ("index", "p_full", "p_reduced", "inflation"), rows,
              {"analysis": "shift", "kept": int(res.kept.size), "max_inflation": res.max_inflation})
    elif what == "entropy":
        res = analysis.entropy_experiment(args.n, args.trials, args.samples, RngStream(args.seed))
        _emit(args, "entropy", analysis.ENTROPY_COLUMNS, res.rows(),
              {"analysis": "entropy", "n": args.n, "trials": args.trials, "samples": args.samples,
               "mean_entropy_noisy": res.mean_noisy, "mean_entropy_plain": res.mean_plain,
               "win_rate": res.win_rate})
    elif what == "traffic":
        model = analysis.PRESETS[args.preset]
        frac = args.kv_pct / 100.0
        reduced = analysis.kv_traffic(model, args.prompt_len, args.gen, frac)
        static = analysis.kv_traffic(model, args.prompt_len, args.gen, 1.0)
        grown = analysis.kv_traffic(model, args.prompt_len, args.gen, None)
        rows = [("reduced", *s) for s in reduced.steps] + [("full_static", *s) for s in static.steps] \
            + [("full_growing", *s) for s in grown.steps]
        ratio = static.kv_total / reduced.kv_total if reduced.kv_total else None
        _emit(args, "traffic", ("series", *analysis.TRAFFIC_COLUMNS), rows,
              {"analysis": "traffic", "preset": args.preset, "kv_pct": args.kv_pct,
               "kv_bytes_reduced": reduced.kv_total, "kv_bytes_full_static": static.kv_total,
               "kv_bytes_full_growing": grown.kv_total, "kv_ratio_full_to_reduced": ratio,
               "model_bytes": model.model_bytes, "crossover_seq_len": model.crossover_seq_len()})
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvreduce", description="KV-cache eviction experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="greedy generation under an eviction policy")
    g.add_argument("--config", help="JSON run config (flags override)")
    g.add_argument("--prompt", help="whitespace-separated token ids")
    g.add_argument("--prompt-file", help="file holding whitespace-separated token ids")
    g.add_argument("--prompt-len", type=int, help="synthetic prompt length (default 64)")
    g.add_argument("--gen", type=int, help="tokens to generate (default 32)")
    g.add_argument("--seed", type=int, help="prompt and noise seed (default 0)")
    g.add_argument("--baseline", dest="baseline", action="store_true", default=None,
                   help="also run full attention and report divergence (default)")
    g.add_argument("--no-baseline", dest="baseline", action="store_false")
    g.add_argument("--out", help="output directory (default $KVREDUCE_OUT or .)")
    add_policy_flags(g)
    add_decoder_flags(g)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("replay", help="replay a recorded trace under a policy")
    r.add_argument("trace", help="trace JSONL file")
    r.add_argument("--config", help="JSON file with a 'policy' block (flags override)")
    r.add_argument("--seed", type=int, help="noise seed (default: the trace's)")
    r.add_argument("--out", help="output directory (default $KVREDUCE_OUT or .)")
    add_policy_flags(r)
    r.set_defaults(func=cmd_replay)

    s = sub.add_parser("sweep", help="Cartesian sweep of policies and parameters")
    s.add_argument("--grid", help="JSON grid config (flags override)")
    s.add_argument("--policies", help="comma-separated policy kinds")
    s.add_argument("--kv-pct", help="comma-separated KV percentages")
    s.add_argument("--recent-ratio", help="comma-separated recent ratios")
    s.add_argument("--alpha", help="comma-separated damping factors")
    s.add_argument("--tau", help="comma-separated tau ranges, e.g. 1,2,1:2")
    s.add_argument("--seeds", help="comma-separated seeds")
    s.add_argument("--prompt-len", type=int)
    s.add_argument("--gen", type=int)
    s.add_argument("--workers", type=int, help="worker processes (default: CPU count)")
    s.add_argument("--out", help="output directory (default $KVREDUCE_OUT or .)")
    s.add_argument("--out-csv", help="explicit CSV path")
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("analyze", help="attention statistics and analytical models")
    asub = a.add_subparsers(dest="analysis", required=True)
    c = asub.add_parser("cdf", help="attention-mass CDF over a trace")
    c.add_argument("--trace", required=True)
    c.add_argument("--points", type=int, default=101)
    sp = asub.add_parser("sparsity", help="threshold sparsity over a trace")
    sp.add_argument("--trace", required=True)
    sp.add_argument("--thresholds", default="0,0.01,0.02,0.03,0.04,0.05")
    sh = asub.add_parser("shift", help="score-distribution shift after dropping tokens")
    sh.add_argument("--logits", help="comma-separated logits (default: random)")
    sh.add_argument("--n", type=int, default=64)
    sh.add_argument("--keep", type=float, default=0.5)
    sh.add_argument("--seed", type=int, default=0)
    e = asub.add_parser("entropy", help="entropy of noise-averaged softmax vs plain")
    e.add_argument("--n", type=int, default=64)
    e.add_argument("--trials", type=int, default=200)
    e.add_argument("--samples", type=int, default=10_000)
    e.add_argument("--seed", type=int, default=0)
    t = asub.add_parser("traffic", help="analytical KV/parameter byte traffic")
    t.add_argument("--preset", choices=sorted(analysis.PRESETS), default="7b")
    t.add_argument("--kv-pct", type=float, default=50.0)
    t.add_argument("--prompt-len", type=int, default=2048)
    t.add_argument("--gen", type=int, default=2048)
    for sp_ in (c, sp, sh, e, t):
        sp_.add_argument("--out", help="output directory; CSV goes to stdout when omitted")
    a.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DomainError) as exc:
        print(f"kvreduce: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContractError as exc:
        print(f"kvreduce: contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (TraceParseError, TraceVersionError, IncompatibleTraceError) as exc:
        print(f"kvreduce: trace error: {exc}", file=sys.stderr)
        return EXIT_TRACE
    except OSError as exc:
        print(f"kvreduce: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
