"""Synthetic trace families shipped with the lab.

``regime_shift_family`` runs the toy model under regime shifts; the prompt
tail observes only some regimes, so the decode phase later moves attention
onto clusters the window never saw.

``planted_spike_family`` builds importance traces directly. Every trace has
three entry roles in the prefix:

* spike entries: 1.0 in exactly one window row, 0.01 in the others;
  they come in runs that fire together, like a phrase attended at once
* steady entries: a constant 0.05 in every row
* filler entries: a constant 0.01

Steady entries out-average spikes, but spikes have the larger peak. The
future rows keep steady and filler mass unchanged and switch one spike
run on at every step, so keeping steady entries loses most of the mass.
Roles are laid out in runs of ``run_len`` entries so that a pooling kernel
narrower than a run does not blur the roles together.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, List, Sequence

import numpy as np

from .attention import ModelConfig, Trace
from .errors import ContractError
from .rng import CounterRNG
from .synthetic import SyntheticRegime
from .trace_io import ImportanceTrace, gen_synthetic

FAMILY_SEEDS = tuple(range(20))


@dataclass(frozen=True)
class RegimeFamily:
    n_layers: int = 2
    n_q_heads: int = 4
    n_kv_heads: int = 2
    d_h: int = 16
    prompt_len: int = 256
    steps: int = 400
    shift_prob: float = 0.1
    layer: int = 0  # layer the fragility comparison reads

    def config(self, seed: int) -> ModelConfig:
        return ModelConfig.from_heads(self.n_layers, self.n_q_heads, self.n_kv_heads,
                                      self.d_h, seed=seed)

    def regime(self, seed: int) -> SyntheticRegime:
        return SyntheticRegime(seed=seed, shift_prob=self.shift_prob)

    def trace(self, seed: int) -> Trace:
        return gen_synthetic(self.config(seed), self.prompt_len, self.steps, self.regime(seed))


REGIME_FAMILY = RegimeFamily()


def regime_shift_family(seeds: Sequence[int] = FAMILY_SEEDS,
                        family: RegimeFamily = REGIME_FAMILY) -> Iterator[Trace]:
    for s in seeds:
        yield family.trace(s)


@dataclass(frozen=True)
class SpikeFamily:
    n_layers: int = 1
    n_q_heads: int = 2
    window: int = 32
    n_spike: int = 32
    n_steady: int = 32
    n_filler: int = 32
    steps: int = 64
    run_len: int = 8
    spike: float = 1.0
    steady: float = 0.05
    floor: float = 0.01

    @property
    def n_entries(self) -> int:
        return self.n_spike + self.n_steady + self.n_filler + self.window

    @property
    def budget(self) -> float:
        # half of all entries: the window plus exactly n_spike prefix slots
        return (self.window + self.n_spike) / self.n_entries


SPIKE_FAMILY = SpikeFamily()


def spike_roles(seed: int, family: SpikeFamily = SPIKE_FAMILY) -> np.ndarray:
    """Role per prefix entry: 0 spike, 1 steady, 2 filler, in shuffled runs."""
    f = family
    counts = [f.n_spike, f.n_steady, f.n_filler]
    if any(c % f.run_len for c in counts):
        raise ContractError("role counts must be multiples of run_len")
    runs = np.repeat([0, 1, 2], [c // f.run_len for c in counts])
    order = np.argsort(CounterRNG(seed, 30).uniform(runs.size), kind="stable")
    return np.repeat(runs[order], f.run_len)


def planted_spike_trace(seed: int, family: SpikeFamily = SPIKE_FAMILY) -> ImportanceTrace:
    f = family
    n, m, S = f.n_entries, f.window, f.steps
    roles = spike_roles(seed, f)
    runs = np.flatnonzero(roles == 0).reshape(-1, f.run_len)
    prefix = n - m
    imp = np.full((f.n_layers, f.n_q_heads, m + S, n), f.floor)
    for l in range(f.n_layers):
        for h in range(f.n_q_heads):
            rng = CounterRNG(seed, 31, l, h)
            block = imp[l, h]
            block[:, :prefix][:, roles == 1] = f.steady
            rows = (rng.uniform(len(runs)) * m).astype(np.int64)
            for row, run in zip(rows, runs):
                block[row, run] = f.spike
            hot = (rng.uniform(S) * len(runs)).astype(np.int64)
            for s in range(S):
                block[m + s, runs[hot[s]]] = f.spike
    return ImportanceTrace(imp, seed)


def planted_spike_family(seeds: Sequence[int] = FAMILY_SEEDS,
                         family: SpikeFamily = SPIKE_FAMILY) -> List[ImportanceTrace]:
    return [planted_spike_trace(s, family) for s in seeds]
