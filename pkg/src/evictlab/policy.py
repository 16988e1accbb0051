"""Eviction policies: scoring + aggregation + budget allocation -> EvictionPlan.

Every plan is one-shot and computed right after prefill. The protected
recent window counts toward the budget. Budgets given as a fraction become
``ceil(fraction * entries)`` per scope unit (a head, a layer, or the whole
model).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .aggregation import AggregationSpec, gqa_group_reduce
from .attention import KVCache
from .core_math import sequential_sum, top_k_indices
from .errors import ContractError
from .scoring import LayerObservation, observe_layer, pool_importance, scale_scores

SCOPES = ("per_head", "per_layer_joint", "global_joint")


def _ceil_fraction(fraction: float, count: int) -> int:
    # round first so that e.g. 0.7 * 10 does not become 8
    return int(math.ceil(round(fraction * count, 9)))


@dataclass(frozen=True)
class BudgetSpec:
    fraction: Optional[float] = None
    entries: Optional[int] = None  # absolute entries per layer
    window: int = 32
    sinks: int = 4
    scope: str = "per_head"

    def __post_init__(self):
        if (self.fraction is None) == (self.entries is None):
            raise ContractError("give exactly one of fraction or entries")
        if self.fraction is not None and not 0.0 < self.fraction <= 1.0:
            raise ContractError(f"budget fraction {self.fraction} not in (0, 1]")
        if self.entries is not None and self.entries < 1:
            raise ContractError("absolute budget must be >= 1 entry")
        if self.window < 1 or self.sinks < 0:
            raise ContractError("window must be >= 1 and sinks >= 0")
        if self.scope not in SCOPES:
            raise ContractError(f"unknown budget scope {self.scope!r}")

    def per_head(self, n: int, n_kv_heads: int) -> int:
        if self.fraction is not None:
            return _ceil_fraction(self.fraction, n)
        return -(-self.entries // n_kv_heads)

    def per_layer(self, n: int, n_kv_heads: int) -> int:
        if self.fraction is not None:
            return _ceil_fraction(self.fraction, n * n_kv_heads)
        return self.entries

    def global_total(self, n: int, n_kv_heads: int, n_layers: int) -> int:
        if self.fraction is not None:
            return _ceil_fraction(self.fraction, n * n_kv_heads * n_layers)
        return self.entries * n_layers

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class EvictionPlan:
    policy: str
    budget: dict
    retained: List[List[np.ndarray]]  # [layer][kv_head] -> ascending indices
    n_entries: int
    metadata: dict = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.retained)

    def layer_count(self, layer: int) -> int:
        return int(sum(len(r) for r in self.retained[layer]))

    def total(self) -> int:
        return sum(self.layer_count(l) for l in range(self.n_layers))

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "budget": self.budget,
            "n_entries": self.n_entries,
            "layers": [
                {"layer": l, "heads": [{"head": h, "retained": [int(i) for i in r]}
                                       for h, r in enumerate(heads)]}
                for l, heads in enumerate(self.retained)
            ],
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":")) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvictionPlan":
        layers = sorted(d["layers"], key=lambda x: x["layer"])
        retained = [[np.asarray(h["retained"], dtype=np.int64)
                     for h in sorted(l["heads"], key=lambda x: x["head"])] for l in layers]
        return cls(d["policy"], d["budget"], retained, int(d["n_entries"]),
                   d.get("metadata", {}))


@dataclass(frozen=True)
class ScoringOptions:
    kernel: int = 5
    value_norm: bool = True
    norm_divisor: str = "layer"  # layer-wise normalisation: "layer" or "head"


def _window_indices(n: int, window: int) -> np.ndarray:
    return np.arange(n - window, n, dtype=np.int64)


def _recent(n: int, count: int) -> np.ndarray:
    return np.arange(max(n - count, 0), n, dtype=np.int64)


def layer_scores(obs: LayerObservation, scoring: ScoringOptions,
                 agg: AggregationSpec) -> List[np.ndarray]:
    """Prefix scores per kv-head: pooling -> aggregation -> value-norm scaling."""
    mats = [pool_importance(obs.attention[h], scoring.kernel) for h in range(obs.n_q_heads)]
    scores = agg.aggregate_group(mats, obs.group_size)
    if scoring.value_norm:
        n_prefix = obs.attention.shape[2]
        weights = kv_value_weights(obs, agg.reduction)
        scores = [scale_scores(r, w[:n_prefix]) for r, w in zip(scores, weights)]
    return scores


def kv_value_weights(obs: LayerObservation, mode: str) -> List[np.ndarray]:
    """Projected-value norms per kv-head over all prompt entries."""
    return gqa_group_reduce(list(obs.norms), obs.group_size, mode)


def select_per_head(scores: np.ndarray, n: int, budget: int, window: int) -> np.ndarray:
    """Window plus the top ``budget - window`` prefix entries of one head."""
    if budget >= n:
        return np.arange(n, dtype=np.int64)
    keep = top_k_indices(scores, budget - window)
    return np.concatenate([keep, _window_indices(n, window)])


def per_layer_joint_select(scores: Sequence[np.ndarray], layer_budget: int, n: int,
                           window: int) -> List[np.ndarray]:
    """One top-k over every head's prefix candidates in a layer.

    Candidates are flattened head-major, so ties go to the lower
    (head, index) pair first.
    """
    heads = len(scores)
    if layer_budget >= n * heads:
        return [np.arange(n, dtype=np.int64) for _ in range(heads)]
    if layer_budget < heads * window:
        raise ContractError(f"layer budget {layer_budget} below {heads} x window {window}")
    n_prefix = n - window
    flat = np.concatenate([np.asarray(s, dtype=np.float64) for s in scores])
    chosen = top_k_indices(flat, layer_budget - heads * window)
    out = []
    for h in range(heads):
        mine = chosen[(chosen >= h * n_prefix) & (chosen < (h + 1) * n_prefix)] - h * n_prefix
        out.append(np.concatenate([mine, _window_indices(n, window)]))
    return out


def global_joint_select(scores: Sequence[Sequence[np.ndarray]], total_budget: int, n: int,
                        window: int) -> List[List[np.ndarray]]:
    """Joint top-k across all (layer, head, entry) candidates.

    Order is score descending, then layer, head, index ascending.
    """
    n_layers, heads = len(scores), len(scores[0])
    if total_budget >= n * heads * n_layers:
        return [[np.arange(n, dtype=np.int64) for _ in range(heads)] for _ in range(n_layers)]
    windows = n_layers * heads * window
    if total_budget < windows:
        raise ContractError(f"global budget {total_budget} below total windows {windows}")
    n_prefix = n - window
    flat = np.concatenate([np.asarray(s, dtype=np.float64) for layer in scores for s in layer])
    chosen = top_k_indices(flat, total_budget - windows)
    out = []
    for l in range(n_layers):
        row = []
        for h in range(heads):
            base = (l * heads + h) * n_prefix
            mine = chosen[(chosen >= base) & (chosen < base + n_prefix)] - base
            row.append(np.concatenate([mine, _window_indices(n, window)]))
        out.append(row)
    return out


def _source_meta(source) -> dict:
    seed = getattr(source, "seed", None)
    return {} if seed is None else {"seed": seed}


def streaming_llm_plan(n: int, budget: BudgetSpec, n_layers: int = 1,
                       n_kv_heads: int = 1) -> EvictionPlan:
    """Attention sinks plus the most recent entries; no scoring."""
    B = budget.per_head(n, n_kv_heads)
    if B < budget.sinks:
        raise ContractError(f"budget {B} below sink count {budget.sinks}")
    if B >= n:
        keep = np.arange(n, dtype=np.int64)
    else:
        keep = np.concatenate([np.arange(budget.sinks, dtype=np.int64),
                               _recent(n, B - budget.sinks)])
    return EvictionPlan("streaming", budget.to_dict(),
                        [[keep.copy() for _ in range(n_kv_heads)] for _ in range(n_layers)],
                        n, {"window_ignored": True})


def scored_plan(source, budget: BudgetSpec, scoring: ScoringOptions, agg: AggregationSpec,
                name: str = "scored") -> EvictionPlan:
    """Per-head or per-layer-joint plan for every layer of ``source``."""
    if budget.scope == "global_joint":
        return layer_defensive_plan(source, budget, scoring, agg, name)
    w = budget.window
    warnings: List[str] = []
    retained = []
    for layer in range(source.n_layers):
        obs = observe_layer(source, layer, w)
        n, heads = obs.n_entries, obs.n_kv_heads
        if budget.scope == "per_head":
            B = budget.per_head(n, heads)
            if B >= n:
                retained.append([np.arange(n, dtype=np.int64) for _ in range(heads)])
            elif B < w:
                warnings.append(f"layer {layer}: budget {B} < window {w}, kept most recent")
                retained.append([_recent(n, B) for _ in range(heads)])
            else:
                scores = layer_scores(obs, scoring, agg)
                retained.append([select_per_head(s, n, B, w) for s in scores])
        else:
            B = budget.per_layer(n, heads)
            if B >= n * heads:
                retained.append([np.arange(n, dtype=np.int64) for _ in range(heads)])
            elif B < heads * w:
                warnings.append(f"layer {layer}: budget {B} < {heads} x window {w}, kept most recent")
                retained.append([_recent(n, B // heads + (h < B % heads)) for h in range(heads)])
            else:
                retained.append(per_layer_joint_select(layer_scores(obs, scoring, agg), B, n, w))
    meta = _source_meta(source)
    meta["aggregation"] = agg.label
    if warnings:
        meta["warnings"] = warnings
    return EvictionPlan(name, budget.to_dict(), retained, source.n_prompt, meta)


def layer_defensive_plan(source, budget: BudgetSpec, scoring: ScoringOptions = ScoringOptions(),
                         agg: AggregationSpec = AggregationSpec("defensive"),
                         name: str = "layer-defensivekv") -> EvictionPlan:
    """Joint selection across layers after layer-wise value-norm normalisation."""
    w = budget.window
    obs_all = [observe_layer(source, l, w) for l in range(source.n_layers)]
    n, heads = obs_all[0].n_entries, obs_all[0].n_kv_heads
    total = budget.global_total(n, heads, len(obs_all))
    if total < len(obs_all) * heads * w and total < n * heads * len(obs_all):
        raise ContractError(f"global budget {total} below total windows {len(obs_all) * heads * w}")
    scoring = replace(scoring, value_norm=True)
    all_scores = []
    for obs in obs_all:
        scores = layer_scores(obs, scoring, agg)
        weights = kv_value_weights(obs, agg.reduction)
        if scoring.norm_divisor == "head":
            scores = [s / sequential_sum(wt) for s, wt in zip(scores, weights)]
        else:
            denom = sequential_sum(np.concatenate(weights))
            scores = [s / denom for s in scores]
        all_scores.append(scores)
    retained = global_joint_select(all_scores, total, n, w)
    meta = _source_meta(source)
    meta["aggregation"] = agg.label
    meta["norm_divisor"] = scoring.norm_divisor
    return EvictionPlan(name, replace(budget, scope="global_joint").to_dict(), retained, n, meta)


def apply_plan(cache: KVCache, plan: EvictionPlan) -> KVCache:
    """Gather the retained rows into a new cache; the input is left untouched."""
    if plan.n_layers != cache.n_layers:
        raise ContractError("plan and cache cover different layer counts")
    keys, values = [], []
    for l in range(cache.n_layers):
        kl, vl = [], []
        if len(plan.retained[l]) != len(cache.keys[l]):
            raise ContractError(f"layer {l}: plan and cache head counts differ")
        for h, idx in enumerate(plan.retained[l]):
            n = cache.n_entries(l, h)
            idx = np.asarray(idx, dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise ContractError(f"layer {l} head {h}: index out of range for {n} entries")
            kl.append(cache.keys[l][h][idx].copy())
            vl.append(cache.values[l][h][idx].copy())
        keys.append(kl)
        values.append(vl)
    return KVCache(keys, values)


@dataclass(frozen=True)
class PolicyConfig:
    name: str
    kernel: int
    aggregation: AggregationSpec
    value_norm: bool
    scope: str


POLICIES: Dict[str, PolicyConfig] = {
    "snapkv": PolicyConfig("snapkv", 5, AggregationSpec("mean"), False, "per_head"),
    "criticalkv": PolicyConfig("criticalkv", 5, AggregationSpec("mean"), True, "per_head"),
    "defensivekv": PolicyConfig("defensivekv", 5, AggregationSpec("defensive"), True, "per_head"),
    "adakv": PolicyConfig("adakv", 5, AggregationSpec("mean"), False, "per_layer_joint"),
    "adakv-defensive": PolicyConfig("adakv-defensive", 5, AggregationSpec("defensive"), False,
                                    "per_layer_joint"),
    "layer-defensivekv": PolicyConfig("layer-defensivekv", 5, AggregationSpec("defensive"), True,
                                      "global_joint"),
}
POLICY_NAMES = ("streaming",) + tuple(POLICIES)


def build_plan(source, policy: str, fraction: float, window: int = 32, kernel: Optional[int] = None,
               sinks: int = 4, agg: Optional[AggregationSpec] = None,
               norm_divisor: str = "layer") -> EvictionPlan:
    """Plan for a named policy preset, optionally overriding kernel or aggregation."""
    if policy == "streaming":
        return streaming_llm_plan(source.n_prompt, BudgetSpec(fraction, window=window, sinks=sinks),
                                  source.n_layers, source.n_kv_heads)
    if policy not in POLICIES:
        raise ContractError(f"unknown policy {policy!r}")
    p = POLICIES[policy]
    budget = BudgetSpec(fraction, window=window, sinks=sinks, scope=p.scope)
    scoring = ScoringOptions(p.kernel if kernel is None else kernel, p.value_norm, norm_divisor)
    return scored_plan(source, budget, scoring, agg or p.aggregation, name=policy)
