"""KV-cache eviction lab: scoring, aggregation, eviction policies and a
retained-importance harness driven by a seeded toy attention model."""

from .aggregation import (AggregationSpec, defensive_aggregate, gqa_group_reduce,
                          mean_aggregate, prior_risk_correct, single_token_scores,
                          worst_case_estimate)
from .attention import (KVCache, LayerWeights, ModelConfig, Trace, decode_step, init_model,
                        prefill, run_trace)
from .errors import ContractError, TraceFormatError
from .evaluation import compare_policies, fragility_analysis, future_importance
from .policy import (POLICIES, POLICY_NAMES, BudgetSpec, EvictionPlan, ScoringOptions,
                     apply_plan, build_plan, layer_defensive_plan, per_layer_joint_select,
                     scored_plan, streaming_llm_plan)
from .synthetic import SyntheticRegime
from .trace_io import ImportanceTrace, gen_synthetic, read_trace, write_trace

__version__ = "0.1.0"

__all__ = [
    "AggregationSpec",
    "BudgetSpec",
    "ContractError",
    "EvictionPlan",
    "ImportanceTrace",
    "KVCache",
    "LayerWeights",
    "ModelConfig",
    "POLICIES",
    "POLICY_NAMES",
    "ScoringOptions",
    "SyntheticRegime",
    "Trace",
    "TraceFormatError",
    "apply_plan",
    "build_plan",
    "compare_policies",
    "decode_step",
    "defensive_aggregate",
    "fragility_analysis",
    "future_importance",
    "gen_synthetic",
    "gqa_group_reduce",
    "init_model",
    "layer_defensive_plan",
    "mean_aggregate",
    "per_layer_joint_select",
    "prefill",
    "prior_risk_correct",
    "read_trace",
    "run_trace",
    "scored_plan",
    "single_token_scores",
    "streaming_llm_plan",
    "worst_case_estimate",
    "write_trace",
]
