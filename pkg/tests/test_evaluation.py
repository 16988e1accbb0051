from __future__ import annotations

import csv
import io
import math

import numpy as np
import pytest

import oracles
from evictlab.attention import ModelConfig
from evictlab.errors import ContractError
from evictlab.evaluation import (FragilityReport, FutureImportance, compare_policies,
                                 fragility_analysis, future_importance, reports_to_csv,
                                 retained_ratio_series, table_to_csv)
from evictlab.policy import EvictionPlan, build_plan
from evictlab.synthetic import SyntheticRegime
from evictlab.trace_io import ImportanceTrace, gen_synthetic


def tiny_trace(seed=0, steps=5, prompt=40):
    cfg = ModelConfig.from_heads(1, 2, 1, 4, seed=seed)
    return gen_synthetic(cfg, prompt, steps, SyntheticRegime(seed=seed, tail_len=8))


def plan_of(retained, n):
    return EvictionPlan("t", {}, [[np.asarray(r, dtype=np.int64) for r in retained]], n)


def test_future_importance_matches_oracle():
    t = tiny_trace()
    fi = future_importance(t)
    n, g = t.n_prompt, t.group_size
    for h in range(t.n_q_heads):
        w = t.w_o_slice(0, h)
        norms = [oracles.l2(row) for row in oracles.matmul(t.values[0, h // g, :n].tolist(),
                                                           w.tolist())]
        for s in range(t.n_steps):
            q = t.queries[0, h, n + s]
            K = t.keys[0, h // g, :n + s]
            a = oracles.softmax([float(q @ k) / math.sqrt(t.d_h) for k in K])
            expect = [a[i] * norms[i] for i in range(n)]
            np.testing.assert_allclose(fi.data[0, h, s], expect, rtol=1e-10, atol=1e-15)


def test_future_importance_unit_norms_and_single_entry():
    t = tiny_trace(prompt=1, steps=3)
    fi = future_importance(t)
    for h in range(2):
        norm = np.linalg.norm(t.values[0, h // 2, 0] @ t.w_o_slice(0, h))
        # step s sees 1 + s entries; the first entry's share shrinks, but at s=0 it is all
        np.testing.assert_allclose(fi.data[0, h, 0, 0], norm, rtol=1e-12)
    raw = future_importance(tiny_trace(), raw_attention=True)
    assert np.all(raw.data <= 1.0) and np.all(raw.data >= 0)


def test_future_importance_needs_steps():
    with pytest.raises(ContractError):
        future_importance(tiny_trace(steps=0))


def test_ratio_examples():
    fi = FutureImportance(np.array([[[[0.25, 0.25, 0.5]]]]), 1)
    r, zero = retained_ratio_series(fi, plan_of([[2]], 3), 0)
    assert r.tolist() == [0.5] and not zero.any()
    r, _ = retained_ratio_series(fi, plan_of([[0, 1, 2]], 3), 0)
    assert r.tolist() == [1.0]
    fi0 = FutureImportance(np.zeros((1, 1, 2, 3)), 1)
    r, zero = retained_ratio_series(fi0, plan_of([[0]], 3), 0)
    assert r.tolist() == [1.0, 1.0] and zero.all()
    with pytest.raises(ContractError):
        retained_ratio_series(fi, plan_of([[0]], 3), 1)


def test_ratio_double_sum_oracle(rng):
    data = rng.random((1, 4, 6, 10))
    fi = FutureImportance(data, 2)
    retained = [[0, 3, 4, 9], [1, 2, 9]]
    r, _ = retained_ratio_series(fi, plan_of(retained, 10), 0)
    for s in range(6):
        kept = total = 0.0
        for h in range(4):
            for i in range(10):
                total += data[0, h, s, i]
                if i in retained[h // 2]:
                    kept += data[0, h, s, i]
        assert abs(r[s] - kept / total) < 1e-12


def test_ratio_monotone_in_plan(rng):
    fi = FutureImportance(rng.random((1, 2, 5, 12)), 1)
    small = [[1, 5], [0]]
    big = [[1, 2, 5, 7], [0, 11]]
    a, _ = retained_ratio_series(fi, plan_of(big, 12), 0)
    b, _ = retained_ratio_series(fi, plan_of(small, 12), 0)
    assert np.all(a >= b)


def test_report_outliers_strictly_below():
    rep = FragilityReport("x", np.array([0.5, 0.49, 0.7, 0.5 - 1e-12]), 0.5)
    assert rep.outliers == 2 and rep.worst == 0.49
    assert FragilityReport("x", np.array([0.5, 0.6]), 0.6).outliers == 1


def test_budget_one_is_lossless():
    t = tiny_trace(steps=6)
    for rep in fragility_analysis(t, 1.0, ["mean", "defensive"], window=8):
        assert np.all(rep.ratios == 1.0) and rep.outliers == 0


def test_constant_importance_gives_budget_fraction():
    imp = np.full((1, 2, 8 + 5, 64), 0.3)
    t = ImportanceTrace(imp)
    for rep in fragility_analysis(t, 0.25, ["single:3", "mean", "defensive"], window=8):
        np.testing.assert_allclose(rep.ratios, 0.25, atol=1e-15)


def test_single_token_outside_window():
    with pytest.raises(ContractError):
        fragility_analysis(tiny_trace(), 0.5, ["single:9"], window=8)


def test_future_importance_independent_of_evaluation():
    t = tiny_trace(steps=6)
    fi = future_importance(t, 8)
    before = fi.data.copy()
    fragility_analysis(t, 0.5, ["mean", "defensive"], window=8, fi=fi)
    compare_policies([t], ["snapkv", "defensivekv"], [0.5], window=8)
    assert np.array_equal(fi.data, before)
    assert np.array_equal(future_importance(t, 8).data, before)


def test_compare_single_row_consistent_with_fragility(spike_family):
    t, fi = spike_family[0]
    (row,) = compare_policies([t], ["defensivekv"], [0.5])
    (rep,) = fragility_analysis(t, 0.5, ["defensive"], kernel=5, fi=fi)
    assert row["worst_ratio"] == rep.worst
    assert row["outliers"] == rep.outliers
    np.testing.assert_allclose(row["mean_ratio"], rep.mean, rtol=1e-12)


def test_compare_rows_ordered_and_deterministic():
    traces = [tiny_trace(s, steps=4) for s in (0, 1)]
    rows = compare_policies(traces, ["criticalkv", "criticalkv", "streaming"], [0.5, 1.0], window=8)
    assert [(r["policy"], r["budget"]) for r in rows] == [
        ("criticalkv", 0.5), ("criticalkv", 1.0), ("criticalkv", 0.5), ("criticalkv", 1.0),
        ("streaming", 0.5), ("streaming", 1.0)]
    assert rows[0] == rows[2] and rows[1] == rows[3]
    again = compare_policies(traces, ["criticalkv", "criticalkv", "streaming"], [0.5, 1.0], window=8)
    assert table_to_csv(rows) == table_to_csv(again)
    with pytest.raises(ContractError):
        compare_policies([], ["snapkv"], [0.5])


def test_csv_columns():
    reps = [FragilityReport("single16", np.array([0.1, 0.2])),
            FragilityReport("mean", np.array([0.3, 0.4]))]
    rows = list(csv.reader(io.StringIO(reports_to_csv(reps))))
    assert rows[0] == ["step", "ratio_single16", "ratio_mean"]
    assert rows[2] == ["1", "0.2", "0.4"]
    assert "\r" not in reports_to_csv(reps)


def test_defensive_beats_single_token_on_regime_family(regime_family, family_layer):
    for t, fi in regime_family:
        single, dfn = fragility_analysis(t, 0.5, ["single:16", "defensive"], layer=family_layer,
                                         fi=fi)
        assert dfn.worst >= single.worst


def test_planted_spike_outliers(spike_family):
    for t, fi in spike_family:
        mean, dfn = fragility_analysis(t, 0.5, ["mean", "defensive"], fi=fi)
        assert mean.outliers > dfn.outliers
        assert dfn.worst > mean.worst


@pytest.mark.parametrize("budgets", [[0.2, 0.5]])
def test_compare_defensive_worst_on_regime_family(regime_family, budgets):
    traces = [t for t, _ in regime_family]
    rows = compare_policies(traces, ["snapkv", "criticalkv", "defensivekv"], budgets)
    by = {(r["policy"], r["budget"]): r for r in rows}
    for b in budgets:
        assert by[("defensivekv", b)]["worst_ratio"] >= by[("criticalkv", b)]["worst_ratio"]
        assert by[("defensivekv", b)]["worst_ratio"] >= by[("snapkv", b)]["worst_ratio"]


def test_compare_defensive_worst_on_spike_family(spike_family):
    from evictlab.families import SPIKE_FAMILY
    traces = [t for t, _ in spike_family]
    b = SPIKE_FAMILY.budget
    rows = compare_policies(traces, ["snapkv", "criticalkv", "defensivekv"], [b])
    by = {r["policy"]: r for r in rows}
    assert by["defensivekv"]["worst_ratio"] >= by["criticalkv"]["worst_ratio"]
    assert by["defensivekv"]["worst_ratio"] >= by["snapkv"]["worst_ratio"]


def test_plan_on_importance_trace_uses_window_rows(rng):
    imp = rng.random((1, 2, 10, 20))
    t = ImportanceTrace(imp)
    obs = t.layer_observation(0, 4)
    np.testing.assert_array_equal(obs.attention, imp[0, :, :4, :16])
    np.testing.assert_array_equal(t.future_rows(4), imp[:, :, 4:])
    plan = build_plan(t, "defensivekv", 0.5, window=4)
    assert all(len(r) == 10 for r in plan.retained[0])
