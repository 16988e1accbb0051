"""Acceptance criteria 1-10, one test each.

Every test records a pass/fail line through the ``acceptance`` fixture; the
lines are printed at the end of the run. The wall-time half of criterion 10
is measured over the whole session in conftest.
"""

from __future__ import annotations

import json
import struct
import time

import numpy as np

import oracles
from evictlab.aggregation import (defensive_aggregate, mean_aggregate, prior_risk,
                                  worst_case_estimate)
from evictlab.attention import ModelConfig, Trace, decode_step, init_model, prefill, run_trace
from evictlab.cli import main
from evictlab.errors import TraceFormatError
from evictlab.evaluation import fragility_analysis
from evictlab.families import SPIKE_FAMILY
from evictlab.policy import (POLICIES, POLICY_NAMES, build_plan, global_joint_select,
                             per_layer_joint_select, select_per_head)
from evictlab.synthetic import SyntheticRegime
from evictlab.trace_io import (ImportanceTrace, decode_trace, encode_trace, gen_synthetic,
                               read_trace, write_trace)


def corpus(count=1000, seed=2024):
    rng = np.random.default_rng(seed)
    for k in range(count):
        m, n = int(rng.integers(1, 33)), int(rng.integers(1, 257))
        if k % 4 == 0:
            # coarse values force ties between R-tilde and R-bar
            yield rng.integers(0, 5, size=(m, n)) / 4.0
        else:
            yield rng.dirichlet(np.ones(n), size=m)


def test_criterion_01_oracle_equivalence(acceptance):
    t0 = time.perf_counter()
    bad = 0
    for matrix in corpus():
        expect, _, _ = oracles.defensive_two_pass(matrix.tolist())
        bad += defensive_aggregate(matrix).tolist() != expect
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and elapsed < 10.0
    acceptance(1, ok, f"{bad} mismatches over 1000 matrices in {elapsed:.2f} s (limit 10 s)")
    assert ok


def test_criterion_02_dominance(acceptance):
    violations = 0
    for matrix in corpus():
        r, peak, mean = defensive_aggregate(matrix), worst_case_estimate(matrix), \
            mean_aggregate(matrix)
        violations += int(np.sum(r < peak)) + int(np.sum(peak < mean))
        violations += bool(r.min() < prior_risk(peak))
    acceptance(2, violations == 0, f"{violations} dominance violations over 1000 matrices")
    assert violations == 0


def test_criterion_03_selection_oracles(acceptance):
    rng = np.random.default_rng(3)
    bad = {"per_head": 0, "per_layer_joint": 0, "global_joint": 0}
    for _ in range(200):
        n, w = int(rng.integers(3, 40)), int(rng.integers(1, 4))
        s = rng.integers(0, 4, n - w) / 3.0
        b = int(rng.integers(w, n + 2))
        bad["per_head"] += select_per_head(s, n, b, w).tolist() != \
            oracles.per_head_select(s, n, b, w)

        heads, n, w = int(rng.integers(1, 5)), int(rng.integers(5, 30)), int(rng.integers(1, 4))
        scores = [rng.integers(0, 4, n - w) / 3.0 for _ in range(heads)]
        b = int(rng.integers(heads * w, heads * n + 1))
        got = [r.tolist() for r in per_layer_joint_select(scores, b, n, w)]
        bad["per_layer_joint"] += got != oracles.joint_select(scores, b, n, w)

        L, H = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        n, w = int(rng.integers(4, 20)), int(rng.integers(1, 3))
        scores = [[rng.integers(0, 4, n - w) / 3.0 for _ in range(H)] for _ in range(L)]
        b = int(rng.integers(L * H * w, L * H * n + 1))
        got = [r.tolist() for layer in global_joint_select(scores, b, n, w) for r in layer]
        bad["global_joint"] += got != oracles.joint_select([s for l in scores for s in l], b, n, w)
    ok = not any(bad.values())
    acceptance(3, ok, "mismatches over 200 instances each: " +
               ", ".join(f"{k}={v}" for k, v in bad.items()))
    assert ok


def expected_counts(policy, fraction, n, n_kv, n_layers):
    def ceil(x):
        return int(np.ceil(round(x, 9)))
    scope = "per_head" if policy == "streaming" else POLICIES[policy].scope
    if scope == "per_head":
        return "head", ceil(fraction * n)
    if scope == "per_layer_joint":
        return "layer", ceil(fraction * n * n_kv)
    return "global", ceil(fraction * n * n_kv * n_layers)


def test_criterion_04_budget_exactness(acceptance):
    n, window = 320, 32
    sources = [gen_synthetic(ModelConfig.from_heads(2, 4, 2, 8, seed=s), n, 0,
                             SyntheticRegime(seed=s)) for s in range(3)]
    rng = np.random.default_rng(4)
    sources.append(ImportanceTrace(rng.random((3, 2, window, n))))
    violations = checks = 0
    for src in sources:
        for policy in POLICY_NAMES:
            for f in (0.1, 0.2, 0.5, 1.0):
                plan = build_plan(src, policy, f, window=window)
                scope, target = expected_counts(policy, f, n, src.n_kv_heads, src.n_layers)
                heads = [r for layer in plan.retained for r in layer]
                got = {"head": [len(r) for r in heads],
                       "layer": [plan.layer_count(l) for l in range(plan.n_layers)],
                       "global": [plan.total()]}[scope]
                violations += sum(c != target for c in got)
                for r in heads:
                    checks += 1
                    if len(np.unique(r)) != len(r):
                        violations += 1
                    if policy == "streaming":
                        recent = min(len(r), n) - min(4, len(r))
                        violations += not set(range(n - recent, n)) <= set(r.tolist())
                    else:
                        violations += not set(range(n - window, n)) <= set(r.tolist())
    acceptance(4, violations == 0,
               f"{violations} violations over {checks} head plans, {len(POLICY_NAMES)} policies")
    assert violations == 0


def test_criterion_05_attention(acceptance):
    rng = np.random.default_rng(5)
    worst = 0.0
    for layers in (1, 4):
        for _ in range(3):
            cfg = ModelConfig.from_heads(layers, 4, 2, 8, seed=int(rng.integers(1000)))
            w = init_model(cfg)
            cache = prefill(w, rng.normal(size=(9, cfg.d_model)))
            ref_k = [[k.tolist() for k in layer] for layer in cache.keys]
            ref_v = [[v.tolist() for v in layer] for layer in cache.values]
            x = rng.normal(size=cfg.d_model)
            res = decode_step(w, cache, x)
            stream, _ = oracles.dense_decode(w, ref_k, ref_v, x)
            worst = max(worst, float(np.max(np.abs(res.output - np.asarray(stream)))))
    row_err = 0.0
    for layers in (1, 4):
        t = run_trace(ModelConfig.from_heads(layers, 4, 2, 8, seed=layers), 40, 20,
                      record_attention=True)
        for step in t.attention_log:
            for rows in step:
                row_err = max(row_err, float(np.max(np.abs(rows.sum(axis=1) - 1.0))))
    ok = worst <= 1e-10 and row_err <= 1e-9
    acceptance(5, ok, f"max decode error {worst:.2e} (limit 1e-10), "
                      f"max row-sum error {row_err:.2e} (limit 1e-9)")
    assert ok


def test_criterion_06_fragility_direction(acceptance, regime_family, family_layer, spike_family):
    worst_wins = outlier_wins = 0
    for t, fi in regime_family:
        mean, dfn = fragility_analysis(t, 0.5, ["mean", "defensive"], layer=family_layer, fi=fi)
        worst_wins += dfn.worst >= mean.worst
        outlier_wins += dfn.outliers <= mean.outliers
    strict = 0
    for t, fi in spike_family:
        mean, dfn = fragility_analysis(t, SPIKE_FAMILY.budget, ["mean", "defensive"], fi=fi)
        strict += dfn.worst > mean.worst and dfn.outliers < mean.outliers
    n = len(regime_family)
    ok = worst_wins >= 18 and outlier_wins >= 18 and strict == len(spike_family) == 20
    acceptance(6, ok, f"regime family worst-case {worst_wins}/{n}, outliers {outlier_wins}/{n} "
                      f"(need 18); planted spike strict {strict}/{len(spike_family)}")
    assert ok


def test_criterion_07_ablation_ordering(acceptance, regime_family, family_layer):
    top = mid = 0
    for t, fi in regime_family:
        mean, worst, dfn = fragility_analysis(t, 0.5, ["mean", "worst-only", "defensive"],
                                              layer=family_layer, fi=fi)
        top += dfn.worst >= worst.worst
        mid += worst.worst >= mean.worst
    ok = top >= 16 and mid >= 16
    acceptance(7, ok, f"defensive >= worst-only {top}/20, worst-only >= mean {mid}/20 (need 16)")
    assert ok


def test_criterion_08_linear_time(acceptance, tmp_path, capsys):
    out = tmp_path / "bench.json"
    assert main(["bench", "--n", "100000", "--m", "32", "--iters", "50", "--out", str(out)]) == 0
    capsys.readouterr()
    ratio = json.loads(out.read_text())["defensive_over_mean"]
    acceptance(8, ratio <= 2.0, f"defensive/mean median time ratio {ratio:.3f} (limit 2.0)")
    assert ratio <= 2.0


def random_trace(rng):
    if rng.random() < 0.5:
        L, H, S, E = (int(x) for x in rng.integers(1, 5, size=4))
        return ImportanceTrace(rng.random((L, H, S, E * 3)).astype(np.float32).astype(float))
    L, G, mult, D, N, S = (int(x) for x in rng.integers(1, 4, size=6))
    H, T = G * mult, N + S
    f = lambda *shape: rng.normal(size=shape).astype(np.float32).astype(float)
    return Trace(N, S, f(L, G, T, D), f(L, G, T, D), f(L, H, T, D), f(L, H * D, H * D))


def test_criterion_09_round_trip(acceptance, tmp_path):
    rng = np.random.default_rng(9)
    failures = rejected = 0
    for k in range(100):
        t = random_trace(rng)
        path = tmp_path / f"{k}.dkvt"
        write_trace(path, t)
        failures += encode_trace(read_trace(path)) != path.read_bytes()
    for _ in range(100):
        buf = encode_trace(random_trace(rng))
        header = 40 if struct.unpack_from("<I", buf, 8)[0] == 1 else 28
        pos = int(rng.integers(header))
        value = (buf[pos] + int(rng.integers(1, 256))) % 256
        try:
            decode_trace(buf[:pos] + bytes([value]) + buf[pos + 1:])
        except TraceFormatError as e:
            rejected += isinstance(e.field, str) and isinstance(e.offset, int)
    ok = failures == 0 and rejected == 100
    acceptance(9, ok, f"{100 - failures}/100 round trips bit-exact, "
                      f"{rejected}/100 header corruptions rejected")
    assert ok


def pipeline(root):
    trace, plan, report = root / "t.dkvt", root / "plan.json", root / "frag.csv"
    codes = [main(["gen", "--layers", "2", "--q-heads", "4", "--kv-heads", "2", "--steps", "64",
                   "--seed", "11", "--out", str(trace)]),
             main(["evict", "--trace", str(trace), "--policy", "layer-defensivekv",
                   "--out", str(plan)]),
             main(["fragility", "--trace", str(trace), "--out", str(report)])]
    names = ("t.dkvt", "plan.json", "frag.csv", "frag.json")
    return codes, [(root / n).read_bytes() for n in names]


def test_criterion_10_end_to_end_determinism(acceptance, tmp_path, capsys):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    codes_a, files_a = pipeline(tmp_path / "a")
    codes_b, files_b = pipeline(tmp_path / "b")
    capsys.readouterr()
    same = sum(x == y for x, y in zip(files_a, files_b))
    ok = codes_a == codes_b == [0, 0, 0] and same == len(files_a)
    acceptance(10, ok, f"gen/evict/fragility outputs byte-identical {same}/{len(files_a)}")
    assert ok
