"""Fold an importance matrix (observations x entries) into one score per entry."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core_math import sequential_sum
from .errors import ContractError

KINDS = ("mean", "worst_case_only", "defensive", "single_token", "fixed_threshold")


def _as_importance(i) -> np.ndarray:
    a = np.asarray(i, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1:
        raise ContractError("importance matrix needs shape (m >= 1, n)")
    return a


def mean_aggregate(i) -> np.ndarray:
    a = _as_importance(i)
    return a.sum(axis=0) / a.shape[0]


def worst_case_estimate(i) -> np.ndarray:
    """Column maxima: the peak importance each entry showed in the window."""
    return _as_importance(i).max(axis=0)


def prior_risk(rt) -> float:
    """Mean of the worst-case estimates, summed left to right."""
    r = np.asarray(rt, dtype=np.float64)
    if r.size == 0:
        raise ContractError("prior risk of an empty vector")
    return sequential_sum(r) / r.shape[0]


def prior_risk_correct(rt, floor: Optional[float] = None) -> np.ndarray:
    """Raise every estimate to at least the head-level prior (or a fixed ``floor``)."""
    r = np.asarray(rt, dtype=np.float64)
    if r.size == 0:
        return r.copy()
    return np.maximum(r, prior_risk(r) if floor is None else floor)


def defensive_aggregate(i) -> np.ndarray:
    return prior_risk_correct(worst_case_estimate(i))


def single_token_scores(i, j: int) -> np.ndarray:
    """Row ``j`` (1-based) of the importance matrix."""
    a = _as_importance(i)
    if not 1 <= j <= a.shape[0]:
        raise ContractError(f"historical token {j} outside 1..{a.shape[0]}")
    return a[j - 1].copy()


def gqa_group_reduce(per_q_head: Sequence, group_size: int, mode: str = "mean") -> list:
    """Reduce consecutive groups of ``group_size`` q-head vectors to kv-head vectors."""
    vecs = [np.asarray(v, dtype=np.float64) for v in per_q_head]
    if group_size < 1 or len(vecs) % group_size:
        raise ContractError(f"{len(vecs)} q-head vectors not divisible into groups of {group_size}")
    if len({v.shape for v in vecs}) > 1:
        raise ContractError("q-head score vectors have inconsistent lengths")
    if mode not in ("max", "mean", "sum"):
        raise ContractError(f"unknown group reduction {mode!r}")
    out = []
    for start in range(0, len(vecs), group_size):
        stack = np.stack(vecs[start:start + group_size])
        if mode == "max":
            out.append(stack.max(axis=0))
        else:
            total = stack.sum(axis=0)
            out.append(total if mode == "sum" else total / group_size)
    return out


@dataclass(frozen=True)
class AggregationSpec:
    kind: str = "defensive"
    token: Optional[int] = None
    tau: Optional[float] = None
    group_mode: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown aggregation kind {self.kind!r}")
        if self.kind == "single_token" and (self.token is None or self.token < 1):
            raise ContractError("single_token needs a 1-based token index")
        if self.kind == "fixed_threshold" and (self.tau is None or not self.tau > 0):
            raise ContractError("fixed_threshold needs tau > 0")
        if self.group_mode not in (None, "max", "mean", "sum"):
            raise ContractError(f"unknown group mode {self.group_mode!r}")

    @property
    def reduction(self) -> str:
        """GQA reduction mode: max for the worst-case family, mean otherwise."""
        if self.group_mode:
            return self.group_mode
        return "max" if self.kind in ("worst_case_only", "defensive", "fixed_threshold") else "mean"

    @property
    def label(self) -> str:
        if self.kind == "single_token":
            return f"single{self.token}"
        if self.kind == "fixed_threshold":
            return f"fixed{self.tau:g}"
        return {"worst_case_only": "worst_only"}.get(self.kind, self.kind)

    @classmethod
    def parse(cls, text: str) -> "AggregationSpec":
        """Accepts ``mean``, ``defensive``, ``worst-only``, ``single:J``, ``fixed:TAU``."""
        name, _, arg = text.strip().lower().partition(":")
        name = name.replace("-", "_")
        if name in ("mean", "defensive") and not arg:
            return cls(name)
        if name in ("worst_only", "worst_case_only", "worst") and not arg:
            return cls("worst_case_only")
        try:
            if name == "single":
                return cls("single_token", token=int(arg))
            if name == "fixed":
                return cls("fixed_threshold", tau=float(arg))
        except ValueError as e:
            raise ContractError(f"bad aggregation argument in {text!r}") from e
        raise ContractError(f"unknown aggregation {text!r}")

    def reduce_head(self, i) -> np.ndarray:
        """Per-q-head step before GQA reduction."""
        if self.kind == "mean":
            return mean_aggregate(i)
        if self.kind == "single_token":
            return single_token_scores(i, self.token)
        return worst_case_estimate(i)

    def finish(self, r) -> np.ndarray:
        """Per-kv-head step after GQA reduction."""
        if self.kind == "defensive":
            return prior_risk_correct(r)
        if self.kind == "fixed_threshold":
            return prior_risk_correct(r, floor=self.tau)
        return np.asarray(r, dtype=np.float64)

    def aggregate_group(self, matrices: Sequence, group_size: int) -> list:
        """Score vectors per kv-head from the importance matrices of all q-heads."""
        heads = [self.reduce_head(i) for i in matrices]
        return [self.finish(r) for r in gqa_group_reduce(heads, group_size, self.reduction)]
