"""Regime-shift hidden-state source for the toy model.

Each regime ``r`` owns a query direction ``u_r``. Its matching entry
cluster has key direction ``t_r``, chosen so that ``u_r``-driven queries
score ``t_r`` keys highly in every head (``t_r`` is the normalised sum of
``(u_r W_Q^h) W_K^T`` over all layers and heads). Prompt tokens belong to a
random cluster and are written while some regime is active; decode tokens
follow the active regime, which switches with probability ``shift_prob``
per step. Attention mass therefore migrates between clusters whenever the
regime changes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from .errors import ContractError
from .rng import CounterRNG

# stream ids
_DIRS, _CLUSTER, _PROMPT_REGIME, _SALIENCE, _NOISE, _SHIFT, _STEP_NOISE, _TAIL = range(10, 18)


@dataclass(frozen=True)
class SyntheticRegime:
    seed: int = 0
    n_regimes: int = 4
    shift_prob: float = 0.05
    drift_scale: float = 2.0
    prompt_shift_prob: float = 0.1
    key_gain: float = 1.0
    noise_scale: float = 0.5
    tail_len: int = 32
    excursion_len: int = 4
    tail_excursions: int = 2  # regimes visited by the tail besides the dominant; -1 = all

    def __post_init__(self):
        if self.n_regimes < 1:
            raise ContractError("n_regimes must be >= 1")
        for name in ("shift_prob", "prompt_shift_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1]")
        if self.tail_len < 0 or self.excursion_len < 0:
            raise ContractError("tail_len and excursion_len must be >= 0")
        for name in ("drift_scale", "key_gain", "noise_scale"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")


def _unit_rms(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True))


def regime_walk(rng: CounterRNG, n: int, n_regimes: int, p: float, start: int) -> np.ndarray:
    """Markov walk: at each step switch to a different regime with prob ``p``."""
    u = rng.uniform((n, 2))
    out = np.empty(n, dtype=np.int64)
    cur = start
    for t in range(n):
        if n_regimes > 1 and u[t, 0] < p:
            cur = (cur + 1 + int(u[t, 1] * (n_regimes - 1))) % n_regimes
        out[t] = cur
    return out


class RegimeSource:
    """Supplies prompt hidden states and per-step decode inputs."""

    def __init__(self, config, weights: List, regime: SyntheticRegime,
                 prompt_len: int, steps: int):
        self.config = config
        self.regime = regime
        self.prompt_len = prompt_len
        self.steps = steps
        seed, R, d = regime.seed, regime.n_regimes, config.d_model

        self.query_dirs = _unit_rms(CounterRNG(seed, _DIRS).normal((R, d)))
        targets = np.zeros((R, d))
        for w in weights:
            g = w.w_q.shape[0] // w.w_k.shape[0]
            for h in range(w.w_q.shape[0]):
                targets += (self.query_dirs @ w.w_q[h]) @ w.w_k[h // g].T
        self.key_dirs = _unit_rms(targets)

        self.clusters = (CounterRNG(seed, _CLUSTER).uniform(prompt_len) * R).astype(np.int64)
        self.prompt_regimes = regime_walk(CounterRNG(seed, _PROMPT_REGIME), prompt_len, R,
                                          regime.prompt_shift_prob, 0)
        self._plant_tail(CounterRNG(seed, _TAIL))
        self.step_regimes = regime_walk(CounterRNG(seed, _SHIFT), steps, R, regime.shift_prob,
                                        int(self.prompt_regimes[-1]))
        self._step_noise = CounterRNG(seed, _STEP_NOISE).normal((max(steps, 1), d))

    def _plant_tail(self, rng: CounterRNG) -> None:
        # one dominant regime, one short excursion into every other regime at
        # disjoint random slots; the final token stays dominant
        reg, n = self.regime, self.prompt_len
        tail = min(reg.tail_len, n)
        ex = reg.excursion_len
        self.tail = tail
        if tail == 0:
            return
        dominant = int(self.prompt_regimes[n - tail - 1]) if n > tail else 0
        others = [r for r in range(reg.n_regimes) if r != dominant]
        if reg.tail_excursions >= 0:
            pick = np.argsort(rng.uniform(len(others)), kind="stable")[:reg.tail_excursions]
            others = [others[i] for i in sorted(pick)]
        seq = np.full(tail, dominant, dtype=np.int64)
        slots = (tail - 1) // ex if ex else 0
        if others and slots >= len(others):
            order = np.argsort(rng.uniform(slots), kind="stable")[:len(others)]
            for r, slot in zip(others, order):
                seq[slot * ex:(slot + 1) * ex] = r
        self.prompt_regimes[n - tail:] = seq

    def prompt_hidden(self) -> np.ndarray:
        """Body tokens carry cluster content; tail tokens are query-like."""
        reg, n, d = self.regime, self.prompt_len, self.config.d_model
        salience = 1.0 + np.abs(CounterRNG(reg.seed, _SALIENCE).normal(n))
        noise = CounterRNG(reg.seed, _NOISE).normal((n, d))
        h = (self.query_dirs[self.prompt_regimes]
             + reg.key_gain * salience[:, None] * self.key_dirs[self.clusters]
             + reg.noise_scale * noise)
        body = n - self.tail
        q = reg.drift_scale * self.query_dirs[self.prompt_regimes[body:]] + reg.noise_scale * noise[body:]
        h[body:] = q / np.sqrt(np.mean(q * q, axis=1, keepdims=True))
        return h

    def next_hidden(self, step: int, prev_output: np.ndarray) -> np.ndarray:
        reg = self.regime
        prev = np.asarray(prev_output, dtype=np.float64)
        r = np.sqrt(np.mean(prev * prev))
        x = ((prev / r if r > 0 else prev) + reg.drift_scale * self.query_dirs[self.step_regimes[step]]
             + reg.noise_scale * self._step_noise[step])
        return x / np.sqrt(np.mean(x * x))
