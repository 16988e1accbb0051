"""Retained-importance harness.

A plan is judged against the full-cache run: at every decode step we ask
what share of that step's importance mass over the prompt entries falls on
the retained entries. Importance is attention times the projected-value
norm unless ``raw_attention`` is requested.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .aggregation import AggregationSpec
from .core_math import softmax_rows
from .errors import ContractError
from .policy import BudgetSpec, EvictionPlan, ScoringOptions, build_plan, scored_plan
from .scoring import value_norm_weights


@dataclass
class FutureImportance:
    """``data``: (layers, q_heads, steps, n_prompt) importance of every future step."""

    data: np.ndarray
    group_size: int

    @property
    def n_steps(self) -> int:
        return self.data.shape[2]


def future_importance(source, window: int = 32, raw_attention: bool = False) -> FutureImportance:
    """Full-cache importance of every decode step over the prompt entries.

    ``window`` only matters for importance traces, whose leading rows are
    the observation window.
    """
    if hasattr(source, "future_rows"):
        rows = source.future_rows(window)
        if rows.shape[2] == 0:
            raise ContractError("importance trace has no rows after the observation window")
        return FutureImportance(rows.copy(), 1)
    t = source
    if t.n_steps < 1:
        raise ContractError("future importance needs at least one decode step")
    n, S, g = t.n_prompt, t.n_steps, t.group_size
    out = np.empty((t.n_layers, t.n_q_heads, S, n))
    # decode token at position n+s sees entries 0..n+s-1
    visible = np.arange(n, n + S)
    for l in range(t.n_layers):
        for h in range(t.n_q_heads):
            K = t.keys[l, h // g, :n + S - 1]
            a = softmax_rows(t.queries[l, h, n:] @ K.T / math.sqrt(t.d_h), visible)[:, :n]
            if not raw_attention:
                a = a * value_norm_weights(t.values[l, h // g, :n], t.w_o_slice(l, h))[None, :]
            out[l, h] = a
    return FutureImportance(out, g)


def retained_ratio_series(fi: FutureImportance, plan: EvictionPlan, layer: int):
    """Per-step retained share of the layer's importance, summed over q-heads.

    Returns ``(ratios, zero_steps)``; steps with no importance mass get ratio
    1 and are flagged in ``zero_steps``.
    """
    if not 0 <= layer < plan.n_layers or layer >= fi.data.shape[0]:
        raise ContractError(f"plan does not cover layer {layer}")
    imp = fi.data[layer]
    H, S, n = imp.shape
    kept = np.zeros(S)
    total = np.zeros(S)
    for h in range(H):
        # a 0/1 mask keeps the summation order of the total, so retain-all is exactly 1
        mask = np.zeros(n)
        mask[plan.retained[layer][h // fi.group_size]] = 1.0
        kept += (imp[h] * mask).sum(axis=1)
        total += imp[h].sum(axis=1)
    zero = total <= 0
    ratios = np.where(zero, 1.0, kept / np.where(zero, 1.0, total))
    return np.clip(ratios, 0.0, 1.0), zero


@dataclass
class FragilityReport:
    criterion: str
    ratios: np.ndarray
    threshold: float = 0.5
    zero_steps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def worst(self) -> float:
        return float(self.ratios.min())

    @property
    def mean(self) -> float:
        return float(self.ratios.mean())

    @property
    def outliers(self) -> int:
        return int(np.count_nonzero(self.ratios < self.threshold))

    def summary(self) -> dict:
        return {"criterion": self.criterion, "min": self.worst, "mean": self.mean,
                "outliers": self.outliers, "threshold": self.threshold,
                "zero_steps": int(np.count_nonzero(self.zero_steps))}


def criterion_plan(source, spec: AggregationSpec, budget: float, window: int = 32,
                   kernel: int = 1) -> EvictionPlan:
    """Per-head plan that differs between criteria only in the aggregation."""
    if spec.kind == "single_token" and spec.token > window:
        raise ContractError(f"historical token {spec.token} outside window of {window}")
    return scored_plan(source, BudgetSpec(budget, window=window),
                       ScoringOptions(kernel=kernel, value_norm=True), spec, name=spec.label)


def fragility_analysis(source, budget: float = 0.5,
                       criteria: Sequence = ("single:16", "mean", "defensive"),
                       threshold: float = 0.5, layer: int = 0, window: int = 32,
                       kernel: int = 1, fi: Optional[FutureImportance] = None,
                       raw_attention: bool = False) -> List[FragilityReport]:
    """Evict once from the observation window, then follow the retained share."""
    specs = [c if isinstance(c, AggregationSpec) else AggregationSpec.parse(c) for c in criteria]
    if fi is None:
        fi = future_importance(source, window, raw_attention)
    reports = []
    for spec in specs:
        plan = criterion_plan(source, spec, budget, window, kernel)
        ratios, zero = retained_ratio_series(fi, plan, layer)
        reports.append(FragilityReport(spec.label, ratios, threshold, zero))
    return reports


def compare_policies(traces: Sequence, policies: Sequence[str], budgets: Sequence[float],
                     window: int = 32, threshold: float = 0.5,
                     agg: Optional[AggregationSpec] = None) -> List[dict]:
    """One row per (policy, budget) pooled over every trace and layer."""
    if not traces or not policies or not budgets:
        raise ContractError("compare_policies needs traces, policies and budgets")
    fis = [future_importance(t, window) for t in traces]
    rows = []
    for policy in policies:
        for b in budgets:
            series, retained = [], 0
            for t, fi in zip(traces, fis):
                plan = build_plan(t, policy, b, window=window, agg=agg)
                retained += plan.total()
                for l in range(plan.n_layers):
                    series.append(retained_ratio_series(fi, plan, l)[0])
            r = np.concatenate(series)
            rows.append({"policy": policy, "budget": b, "mean_ratio": float(r.mean()),
                         "worst_ratio": float(r.min()),
                         "outliers": int(np.count_nonzero(r < threshold)),
                         "retained": retained})
    return rows


def _fmt(x: float) -> str:
    return repr(float(x))


def reports_to_csv(reports: Sequence[FragilityReport]) -> str:
    """Columns: ``step`` then ``ratio_<criterion>`` in the order given."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step"] + [f"ratio_{r.criterion}" for r in reports])
    for s in range(len(reports[0].ratios)):
        w.writerow([s] + [_fmt(r.ratios[s]) for r in reports])
    return buf.getvalue()


def reports_summary(reports: Sequence[FragilityReport], **extra) -> dict:
    return {**extra, "criteria": [r.summary() for r in reports]}


TABLE_COLUMNS = ("policy", "budget", "mean_ratio", "worst_ratio", "outliers", "retained")


def table_to_csv(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row[c]) if isinstance(row[c], float) else row[c] for c in TABLE_COLUMNS])
    return buf.getvalue()


def dumps_json(obj: dict) -> str:
    return json.dumps(obj, indent=2) + "\n"
