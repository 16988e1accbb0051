"""Importance matrices from observation-window queries.

An importance matrix has one row per historical (observation) query and
one column per scored cache entry. Scored entries are the prompt prefix
``0..n-m-1``; the last ``m`` prompt entries form the protected window and
are never scored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core_math import avg_pool_rows, row_l2_norms, softmax_rows
from .errors import ContractError


def window_attention(queries, keys, d_h: int) -> np.ndarray:
    """Causal attention rows of the last ``m`` prompt queries over all ``n`` keys.

    Query ``j`` sits at position ``n - m + j`` and sees entries ``0..n-m+j``.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    k = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    m, n = q.shape[0], k.shape[0]
    if m < 1 or n < 1:
        raise ContractError("need at least one query and one key")
    if m > n:
        raise ContractError(f"observation window m={m} exceeds prompt length {n}")
    visible = np.arange(n - m + 1, n + 1)
    return softmax_rows(q @ k.T / math.sqrt(d_h), visible)


def attention_importance(queries, keys, d_h: int) -> np.ndarray:
    """Window attention restricted to the scored prefix columns."""
    a = window_attention(queries, keys, d_h)
    m, n = a.shape
    return a[:, :n - m]


def pool_importance(i, kernel: int) -> np.ndarray:
    i = np.asarray(i, dtype=np.float64)
    if i.shape[1] == 0:
        if kernel < 1 or kernel % 2 == 0:
            raise ContractError(f"pooling kernel must be odd and >= 1, got {kernel}")
        return i.copy()
    return avg_pool_rows(i, kernel)


def value_norm_weights(v, w_o_slice) -> np.ndarray:
    """Per-entry norm of the value row projected through one head's ``W_O`` slice."""
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    w = np.asarray(w_o_slice, dtype=np.float64)
    if v.shape[1] != w.shape[0]:
        raise ContractError(f"value width {v.shape[1]} != W_O slice rows {w.shape[0]}")
    return row_l2_norms(v @ w)


def scale_scores(r, weights) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if r.shape != w.shape:
        raise ContractError(f"score/weight length mismatch: {r.shape} vs {w.shape}")
    return r * w


@dataclass
class LayerObservation:
    """Everything the policies need from one layer.

    ``attention``: (q_heads, m, n_prefix) window attention over the prefix.
    ``norms``: (q_heads, n) projected-value norms over all prompt entries.
    """

    attention: np.ndarray
    norms: np.ndarray
    group_size: int

    @property
    def n_q_heads(self) -> int:
        return self.attention.shape[0]

    @property
    def n_kv_heads(self) -> int:
        return self.n_q_heads // self.group_size

    @property
    def n_entries(self) -> int:
        return self.norms.shape[1]

    @property
    def window(self) -> int:
        return self.attention.shape[1]

    def group(self, kv_head: int) -> range:
        g = self.group_size
        return range(kv_head * g, (kv_head + 1) * g)


def observe_layer(source, layer: int, window: int) -> LayerObservation:
    """Build a :class:`LayerObservation` from a model trace or importance trace."""
    if hasattr(source, "layer_observation"):
        return source.layer_observation(layer, window)
    t = source
    n = t.n_prompt
    if not 1 <= window <= n:
        raise ContractError(f"window {window} outside [1, {n}]")
    if not 0 <= layer < t.n_layers:
        raise ContractError(f"layer {layer} outside [0, {t.n_layers})")
    g = t.group_size
    attn = np.empty((t.n_q_heads, window, n - window))
    norms = np.empty((t.n_q_heads, n))
    for h in range(t.n_q_heads):
        keys = t.keys[layer, h // g, :n]
        attn[h] = attention_importance(t.queries[layer, h, n - window:n], keys, t.d_h)
        norms[h] = value_norm_weights(t.values[layer, h // g, :n], t.w_o_slice(layer, h))
    return LayerObservation(attn, norms, g)
