"""Seeded toy grouped-query attention model.

The model is attention-only. Each layer reads a hidden stream ``x``,
projects per-head queries and per-kv-head keys/values, attends causally and
projects the concatenated head outputs through ``w_o``. The next layer's
stream is the residual sum ``x + o``; only the hidden state fed to the next
decode step is RMS-normalised.

Decoding attends over the cache as it stands and only then appends the new
token's key/value, so the token at position ``p`` sees entries ``0..p-1``.
Prefill queries are causal and include their own position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .core_math import softmax_rows
from .errors import ContractError
from .rng import CounterRNG

_W_Q, _W_K, _W_V, _W_O = range(4)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 128
    n_q_heads: int = 8
    n_kv_heads: int = 2
    d_h: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_q_heads", "n_kv_heads", "d_h"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.n_q_heads % self.n_kv_heads:
            raise ContractError(
                f"n_q_heads={self.n_q_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        if self.n_q_heads * self.d_h != self.d_model:
            raise ContractError("n_q_heads * d_h must equal d_model")

    @property
    def group_size(self) -> int:
        return self.n_q_heads // self.n_kv_heads

    @classmethod
    def from_heads(cls, n_layers: int, n_q_heads: int, n_kv_heads: int, d_h: int,
                   seed: int = 0) -> "ModelConfig":
        return cls(n_layers, n_q_heads * d_h, n_q_heads, n_kv_heads, d_h, seed)


@dataclass
class LayerWeights:
    w_q: np.ndarray  # (n_q_heads, d_model, d_h)
    w_k: np.ndarray  # (n_kv_heads, d_model, d_h)
    w_v: np.ndarray  # (n_kv_heads, d_model, d_h)
    w_o: np.ndarray  # (n_q_heads * d_h, d_model)

    @property
    def d_h(self) -> int:
        return self.w_q.shape[2]

    def w_o_slice(self, q_head: int) -> np.ndarray:
        return self.w_o[q_head * self.d_h:(q_head + 1) * self.d_h]


def init_model(config: ModelConfig) -> List[LayerWeights]:
    """Draw weights from the counter RNG keyed by (seed, layer, matrix)."""
    c = config
    scale = 1.0 / math.sqrt(c.d_model)
    layers = []
    for layer in range(c.n_layers):
        def draw(which, shape):
            return CounterRNG(c.seed, 1, layer, which).normal(shape) * scale

        layers.append(LayerWeights(
            w_q=draw(_W_Q, (c.n_q_heads, c.d_model, c.d_h)),
            w_k=draw(_W_K, (c.n_kv_heads, c.d_model, c.d_h)),
            w_v=draw(_W_V, (c.n_kv_heads, c.d_model, c.d_h)),
            w_o=draw(_W_O, (c.n_q_heads * c.d_h, c.d_model)),
        ))
    return layers


def rms_normalize(x: np.ndarray) -> np.ndarray:
    """Scale the last axis to unit root-mean-square; all-zero rows stay zero."""
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True))
    safe = np.where(r > 0, r, 1.0)
    return np.where(r > 0, x / safe, 0.0)


class KVCache:
    """Per (layer, kv-head) key and value rows.

    After eviction the heads of a layer may hold different entry counts.
    """

    def __init__(self, keys: List[List[np.ndarray]], values: List[List[np.ndarray]]):
        if len(keys) != len(values):
            raise ContractError("keys and values must cover the same layers")
        for kl, vl in zip(keys, values):
            if len(kl) != len(vl):
                raise ContractError("keys and values must cover the same heads")
            for k, v in zip(kl, vl):
                if k.shape[0] != v.shape[0]:
                    raise ContractError("K and V row counts differ")
        self.keys = keys
        self.values = values

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    def n_entries(self, layer: int, kv_head: int) -> int:
        return self.keys[layer][kv_head].shape[0]

    def copy(self) -> "KVCache":
        return KVCache([[k.copy() for k in kl] for kl in self.keys],
                       [[v.copy() for v in vl] for vl in self.values])

    def append(self, layer: int, kv_head: int, k: np.ndarray, v: np.ndarray) -> None:
        self.keys[layer][kv_head] = np.vstack([self.keys[layer][kv_head], k[None, :]])
        self.values[layer][kv_head] = np.vstack([self.values[layer][kv_head], v[None, :]])


def _project_heads(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    # w: (heads, d_model, d_h); x: (n, d_model) -> (heads, n, d_h)
    return np.einsum("nd,hde->hne", x, w)


def _prefill_layers(weights: List[LayerWeights], hidden: np.ndarray):
    """Run causal attention over a prompt; returns cache, queries, streams."""
    x = np.asarray(hidden, dtype=np.float64)
    n = x.shape[0]
    keys, values, queries, streams = [], [], [], [x]
    causal = np.arange(1, n + 1)
    for w in weights:
        if x.shape[1] != w.w_o.shape[1]:
            raise ContractError(f"hidden width {x.shape[1]} != d_model {w.w_o.shape[1]}")
        n_q, n_kv, d_h = w.w_q.shape[0], w.w_k.shape[0], w.d_h
        g = n_q // n_kv
        q = _project_heads(w.w_q, x)
        k = _project_heads(w.w_k, x)
        v = _project_heads(w.w_v, x)
        heads_out = np.empty((n, n_q * d_h))
        for h in range(n_q):
            a = softmax_rows(q[h] @ k[h // g].T / math.sqrt(d_h), causal)
            heads_out[:, h * d_h:(h + 1) * d_h] = a @ v[h // g]
        o = heads_out @ w.w_o
        keys.append([k[j].copy() for j in range(n_kv)])
        values.append([v[j].copy() for j in range(n_kv)])
        queries.append(q)
        x = x + o
        streams.append(x)
    return KVCache(keys, values), queries, streams


def prefill(weights: List[LayerWeights], hidden) -> KVCache:
    """Compute K = H W_K and V = H W_V for every layer and kv-head."""
    h = np.asarray(hidden, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] < 1:
        raise ContractError("hidden must be a non-empty n_prompt x d_model matrix")
    cache, _, _ = _prefill_layers(weights, h)
    return cache


@dataclass
class DecodeResult:
    output: np.ndarray                 # final hidden stream, d_model
    attention: List[np.ndarray]        # [layer] -> (n_q_heads, n_visible)
    queries: List[np.ndarray]          # [layer] -> (n_q_heads, d_h)


def decode_step(weights: List[LayerWeights], cache: KVCache, h_last) -> DecodeResult:
    """Attend ``h_last`` over the full cache, then append its K/V rows.

    Returned attention rows are those computed before the append.
    """
    x = np.asarray(h_last, dtype=np.float64)
    attention, queries = [], []
    for layer, w in enumerate(weights):
        n_q, n_kv, d_h = w.w_q.shape[0], w.w_k.shape[0], w.d_h
        g = n_q // n_kv
        if any(cache.n_entries(layer, j) == 0 for j in range(n_kv)):
            raise ContractError("decode_step needs a non-empty cache")
        q = np.einsum("d,hde->he", x, w.w_q)
        k_new = np.einsum("d,hde->he", x, w.w_k)
        v_new = np.einsum("d,hde->he", x, w.w_v)
        rows = []
        heads_out = np.empty(n_q * d_h)
        for h in range(n_q):
            K = cache.keys[layer][h // g]
            a = softmax_rows((K @ q[h])[None, :] / math.sqrt(d_h))[0]
            rows.append(a)
            heads_out[h * d_h:(h + 1) * d_h] = a @ cache.values[layer][h // g]
        for j in range(n_kv):
            cache.append(layer, j, k_new[j], v_new[j])
        o = heads_out @ w.w_o
        attention.append(np.array(rows) if len({r.shape for r in rows}) == 1 else rows)
        queries.append(q)
        x = x + o
    return DecodeResult(x, attention, queries)


@dataclass
class Trace:
    """Full-cache record of one generation run.

    ``keys``/``values``: (layers, kv_heads, T, d_h); ``queries``:
    (layers, q_heads, T, d_h); ``w_o``: (layers, q_heads * d_h, d_model).
    Rows are in token order, prompt first.
    """

    n_prompt: int
    n_steps: int
    keys: np.ndarray
    values: np.ndarray
    queries: np.ndarray
    w_o: np.ndarray
    hidden: Optional[np.ndarray] = None
    seed: Optional[int] = None
    attention_log: Optional[list] = field(default=None, repr=False)

    @property
    def n_layers(self) -> int:
        return self.keys.shape[0]

    @property
    def n_kv_heads(self) -> int:
        return self.keys.shape[1]

    @property
    def n_q_heads(self) -> int:
        return self.queries.shape[1]

    @property
    def d_h(self) -> int:
        return self.keys.shape[3]

    @property
    def d_model(self) -> int:
        return self.w_o.shape[2]

    @property
    def group_size(self) -> int:
        return self.n_q_heads // self.n_kv_heads

    @property
    def n_tokens(self) -> int:
        return self.n_prompt + self.n_steps

    def w_o_slice(self, layer: int, q_head: int) -> np.ndarray:
        d = self.d_h
        return self.w_o[layer, q_head * d:(q_head + 1) * d]

    def prompt_cache(self) -> KVCache:
        n = self.n_prompt
        return KVCache([[self.keys[l, j, :n].copy() for j in range(self.n_kv_heads)]
                        for l in range(self.n_layers)],
                       [[self.values[l, j, :n].copy() for j in range(self.n_kv_heads)]
                        for l in range(self.n_layers)])


def run_trace(config: ModelConfig, prompt_len: int, steps: int, regime=None,
              record_attention: bool = False) -> Trace:
    """Prefill a synthetic prompt then decode ``steps`` tokens with the full cache."""
    from .synthetic import RegimeSource, SyntheticRegime

    if prompt_len < 1 or steps < 0:
        raise ContractError("prompt_len must be >= 1 and steps >= 0")
    weights = init_model(config)
    source = RegimeSource(config, weights, regime or SyntheticRegime(seed=config.seed),
                          prompt_len, steps)
    prompt_hidden = source.prompt_hidden()
    cache, prompt_queries, streams = _prefill_layers(weights, prompt_hidden)

    T = prompt_len + steps
    L, H = config.n_layers, config.n_q_heads
    queries = np.empty((L, H, T, config.d_h))
    for l in range(L):
        queries[l, :, :prompt_len] = prompt_queries[l]
    hidden = np.empty((T, config.d_model))
    hidden[:prompt_len] = prompt_hidden
    log = [] if record_attention else None

    out = streams[-1][-1]
    for s in range(steps):
        h = source.next_hidden(s, out)
        res = decode_step(weights, cache, h)
        hidden[prompt_len + s] = h
        for l in range(L):
            queries[l, :, prompt_len + s] = res.queries[l]
        if log is not None:
            log.append(res.attention)
        out = res.output

    keys = np.stack([np.stack(cache.keys[l]) for l in range(L)])
    values = np.stack([np.stack(cache.values[l]) for l in range(L)])
    w_o = np.stack([w.w_o for w in weights])
    return Trace(prompt_len, steps, keys, values, queries, w_o, hidden, config.seed, log)
