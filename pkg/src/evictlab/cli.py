"""Command-line front end: ``evictlab {gen,evict,fragility,compare,bench}``.

Exit codes: 0 on success, 2 for usage or validation errors (including
malformed trace files), 1 for any other failure. With ``--json-errors`` the
error is printed to stderr as one JSON line.

``--config FILE`` loads a JSON object whose keys are the subcommand's flag
names (``prompt-len`` or ``prompt_len``). Explicit flags override it and
unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import statistics
import sys
import time
from typing import Dict, List, Optional, Sequence

from .aggregation import AggregationSpec, defensive_aggregate, mean_aggregate
from .attention import ModelConfig
from .errors import ContractError, TraceFormatError
from .evaluation import (compare_policies, dumps_json, fragility_analysis, reports_summary,
                         reports_to_csv, table_to_csv)
from .policy import POLICY_NAMES, build_plan
from .rng import CounterRNG
from .synthetic import SyntheticRegime
from .trace_io import ImportanceTrace, atomic_write, gen_synthetic, read_trace, write_trace


class UsageError(ContractError):
    """Bad command line or config file."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add(p: argparse.ArgumentParser, defaults: Dict, flag: str, default=None, **kw) -> None:
    dest = flag.lstrip("-").replace("-", "_")
    defaults[dest] = default
    p.add_argument(flag, dest=dest, default=argparse.SUPPRESS, **kw)


def _float_list(text: str) -> List[float]:
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _str_list(text) -> List[str]:
    if isinstance(text, (list, tuple)):
        return [str(x) for x in text]
    return [x.strip() for x in str(text).split(",") if x.strip()]


def build_parser():
    parser = _Parser(prog="evictlab", description="KV-cache eviction lab")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    defaults: Dict[str, Dict] = {}

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="JSON file with flag values")
        p.add_argument("--json-errors", action="store_true",
                       help="print errors to stderr as single-line JSON")
        d = defaults[name] = {}
        return p, d

    p, d = command("gen", "generate a synthetic raw trace")
    _add(p, d, "--seed", 0, type=int)
    _add(p, d, "--layers", 4, type=int)
    _add(p, d, "--q-heads", 8, type=int)
    _add(p, d, "--kv-heads", 2, type=int)
    _add(p, d, "--dh", 16, type=int)
    _add(p, d, "--prompt-len", 256, type=int)
    _add(p, d, "--steps", 128, type=int)
    _add(p, d, "--shift-prob", 0.05, type=float)
    _add(p, d, "--n-regimes", 4, type=int)
    _add(p, d, "--drift-scale", 2.0, type=float)
    _add(p, d, "--out", None)

    p, d = command("evict", "build an eviction plan")
    _add(p, d, "--trace", None)
    _add(p, d, "--policy", None)
    _add(p, d, "--budget", 0.2, type=float)
    _add(p, d, "--window", 32, type=int)
    _add(p, d, "--kernel", 5, type=int)
    _add(p, d, "--sinks", 4, type=int)
    _add(p, d, "--agg-ablation", None)
    _add(p, d, "--out", None)

    p, d = command("fragility", "retained-importance series per criterion")
    _add(p, d, "--trace", None)
    _add(p, d, "--budget", 0.5, type=float)
    _add(p, d, "--layer", 0, type=int)
    _add(p, d, "--criteria", "single:16,mean,defensive")
    _add(p, d, "--threshold", 0.5, type=float)
    _add(p, d, "--window", 32, type=int)
    _add(p, d, "--kernel", 1, type=int)
    _add(p, d, "--raw-attention", False, action="store_true")
    _add(p, d, "--out", None)

    p, d = command("compare", "policy x budget table over many traces")
    _add(p, d, "--traces", None)
    _add(p, d, "--policies", ",".join(POLICY_NAMES))
    _add(p, d, "--budgets", "0.2,0.5")
    _add(p, d, "--window", 32, type=int)
    _add(p, d, "--threshold", 0.5, type=float)
    _add(p, d, "--out", None)

    p, d = command("bench", "time mean vs defensive aggregation")
    _add(p, d, "--n", 100000, type=int)
    _add(p, d, "--m", 32, type=int)
    _add(p, d, "--iters", 50, type=int)
    _add(p, d, "--seed", 0, type=int)
    _add(p, d, "--out", None)
    return parser, defaults


def _load_config(path: Optional[str], allowed: Dict) -> Dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path} is not valid JSON: {e.msg}") from None
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    out = {}
    for key, value in data.items():
        dest = str(key).lstrip("-").replace("-", "_")
        if dest not in allowed:
            raise UsageError(f"unknown config key {key!r}")
        out[dest] = value
    return out


def resolve_args(argv: Sequence[str]) -> argparse.Namespace:
    """Parse flags and merge: defaults < config file < explicit flags."""
    parser, defaults = build_parser()
    ns = parser.parse_args(argv)
    allowed = defaults[ns.command]
    explicit = {k: v for k, v in vars(ns).items() if k in allowed}
    merged = {**allowed, **_load_config(ns.config, allowed), **explicit}
    return argparse.Namespace(command=ns.command, json_errors=ns.json_errors, **merged)


def _require(args, *names) -> None:
    for name in names:
        if getattr(args, name) in (None, ""):
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _positive(args, *names) -> None:
    for name in names:
        v = getattr(args, name)
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be a positive integer")


def _fraction(value, name: str = "budget") -> float:
    try:
        b = float(value)
    except (TypeError, ValueError):
        raise UsageError(f"--{name} must be a number") from None
    if not 0.0 < b <= 1.0:
        raise UsageError(f"--{name} must lie in (0, 1], got {b}")
    return b


def _sidecar(path: str) -> str:
    root, ext = os.path.splitext(path)
    return (root if ext.lower() == ".csv" else path) + ".json"


def cmd_gen(args) -> int:
    _require(args, "out")
    _positive(args, "layers", "q_heads", "kv_heads", "dh", "prompt_len", "n_regimes")
    if args.steps < 0 or args.seed < 0:
        raise UsageError("--steps and --seed must be >= 0")
    if args.q_heads % args.kv_heads:
        raise UsageError(f"--q-heads {args.q_heads} is not divisible by --kv-heads {args.kv_heads}")
    config = ModelConfig.from_heads(args.layers, args.q_heads, args.kv_heads, args.dh,
                                    seed=args.seed)
    regime = SyntheticRegime(seed=args.seed, n_regimes=args.n_regimes,
                             shift_prob=args.shift_prob, drift_scale=args.drift_scale)
    trace = gen_synthetic(config, args.prompt_len, args.steps, regime)
    write_trace(args.out, trace)
    print(f"wrote {args.out}: kind=1 layers={trace.n_layers} q_heads={trace.n_q_heads} "
          f"kv_heads={trace.n_kv_heads} d_h={trace.d_h} d_model={trace.d_model} "
          f"prompt={trace.n_prompt} steps={trace.n_steps}")
    return 0


def cmd_evict(args) -> int:
    _require(args, "trace", "policy", "out")
    if args.policy not in POLICY_NAMES:
        raise UsageError(f"unknown policy {args.policy!r}; choose from {', '.join(POLICY_NAMES)}")
    budget = _fraction(args.budget)
    _positive(args, "window", "kernel")
    agg = None
    if args.agg_ablation is not None:
        agg = AggregationSpec.parse(args.agg_ablation)
        if agg.kind not in ("worst_case_only", "fixed_threshold"):
            raise UsageError("--agg-ablation takes worst-only or fixed:TAU")
        if args.policy == "streaming":
            raise UsageError("--agg-ablation does not apply to the streaming policy")
    trace = read_trace(args.trace)
    plan = build_plan(trace, args.policy, budget, window=args.window, kernel=args.kernel,
                      sinks=args.sinks, agg=agg)
    atomic_write(args.out, plan.to_json())
    counts = " ".join(f"L{l}={plan.layer_count(l)}" for l in range(plan.n_layers))
    note = " (window flag ignored for streaming)" if args.policy == "streaming" else ""
    print(f"{plan.policy} budget={budget} n={plan.n_entries} retained: {counts}{note}")
    return 0


def cmd_fragility(args) -> int:
    _require(args, "trace", "out")
    budget = _fraction(args.budget)
    threshold = float(args.threshold)
    _positive(args, "window", "kernel")
    specs = [AggregationSpec.parse(c) for c in _str_list(args.criteria)]
    if not specs:
        raise UsageError("--criteria is empty")
    for s in specs:
        if s.kind == "single_token" and s.token > args.window:
            raise UsageError(f"single:{s.token} lies outside the {args.window}-token window")
    trace = read_trace(args.trace)
    if not 0 <= args.layer < trace.n_layers:
        raise UsageError(f"--layer {args.layer} outside [0, {trace.n_layers})")
    reports = fragility_analysis(trace, budget, specs, threshold=threshold, layer=args.layer,
                                 window=args.window, kernel=args.kernel,
                                 raw_attention=bool(args.raw_attention))
    atomic_write(args.out, reports_to_csv(reports))
    summary = reports_summary(reports, budget=budget, layer=args.layer, window=args.window,
                              kernel=args.kernel, steps=len(reports[0].ratios))
    atomic_write(_sidecar(args.out), dumps_json(summary))
    for r in reports:
        print(f"{r.criterion}: min={r.worst:.4f} mean={r.mean:.4f} outliers={r.outliers}")
    return 0


def cmd_compare(args) -> int:
    _require(args, "traces", "out")
    paths = sorted(glob.glob(args.traces))
    if not paths:
        raise UsageError(f"no trace files match {args.traces!r}")
    policies = _str_list(args.policies)
    for p in policies:
        if p not in POLICY_NAMES:
            raise UsageError(f"unknown policy {p!r}")
    budgets = [_fraction(b) for b in (args.budgets if isinstance(args.budgets, list)
                                      else _float_list(args.budgets))]
    if not policies or not budgets:
        raise UsageError("--policies and --budgets must be non-empty")
    _positive(args, "window")
    traces = [read_trace(p) for p in paths]
    rows = compare_policies(traces, policies, budgets, window=args.window,
                            threshold=float(args.threshold))
    atomic_write(args.out, table_to_csv(rows))
    print(f"{len(rows)} rows over {len(paths)} traces -> {args.out}")
    return 0


def _median_time(fn, iters: int) -> float:
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cmd_bench(args) -> int:
    _positive(args, "n", "m", "iters")
    i = CounterRNG(args.seed, 40).uniform((args.m, args.n))
    window = min(args.m, args.n)
    trace = ImportanceTrace(i[None, None])
    mean_t = _median_time(lambda: mean_aggregate(i), args.iters)
    def_t = _median_time(lambda: defensive_aggregate(i), args.iters)
    plan_t = _median_time(lambda: build_plan(trace, "defensivekv", 0.5, window=window,
                                             kernel=1), args.iters)
    result = {"n": args.n, "m": args.m, "iters": args.iters,
              "mean_aggregate_median_s": mean_t, "defensive_aggregate_median_s": def_t,
              "defensive_over_mean": def_t / mean_t if mean_t > 0 else float("inf"),
              "plan_median_s": plan_t}
    text = dumps_json(result)
    if args.out:
        atomic_write(args.out, text)
    sys.stdout.write(text)
    return 0


COMMANDS = {"gen": cmd_gen, "evict": cmd_evict, "fragility": cmd_fragility,
            "compare": cmd_compare, "bench": cmd_bench}


def _report(exc: BaseException, code: int, as_json: bool) -> int:
    if as_json:
        payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        if isinstance(exc, TraceFormatError):
            payload.update(exc.to_dict())
        sys.stderr.write(json.dumps(payload) + "\n")
    else:
        sys.stderr.write(f"evictlab: error: {exc}\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    as_json = "--json-errors" in argv
    try:
        args = resolve_args(argv)
        return COMMANDS[args.command](args)
    except ContractError as e:
        return _report(e, 2, as_json)
    except Exception as e:  # noqa: BLE001 - top-level runtime failure
        return _report(e, 1, as_json)


if __name__ == "__main__":
    sys.exit(main())
