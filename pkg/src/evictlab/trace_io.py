"""DKVT binary traces and the synthetic trace generator.

File layout (all integers unsigned 32-bit little-endian, all payload values
float32 little-endian, row-major)::

    magic "DKVT" | version=1 | kind | header fields | payload

kind 1 (raw model trace), header
``n_layers, n_q_heads, n_kv_heads, d_h, d_model, n_prompt, n_steps``; then
for each layer: for each kv-head its K block then its V block
(``T x d_h`` with ``T = n_prompt + n_steps``), then Q for each q-head
(``T x d_h``), then W_O (``n_q_heads*d_h x d_model``).

kind 2 (importance trace), header ``n_layers, n_q_heads, n_steps,
n_entries``; then one ``n_steps x n_entries`` block per (layer, q-head).
Rows are consecutive tokens: the leading ``window`` rows are the
observation window (the last prompt tokens) and the remaining rows are
decode steps. Kind-2 traces carry no kv grouping; each q-head is its own
kv-head.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .attention import ModelConfig, Trace, run_trace
from .errors import ContractError, TraceFormatError
from .scoring import LayerObservation
from .synthetic import SyntheticRegime

MAGIC = b"DKVT"
VERSION = 1
KIND_RAW = 1
KIND_IMPORTANCE = 2
RAW_FIELDS = ("n_layers", "n_q_heads", "n_kv_heads", "d_h", "d_model", "n_prompt", "n_steps")
IMPORTANCE_FIELDS = ("n_layers", "n_q_heads", "n_steps", "n_entries")
MAX_PAYLOAD_BYTES = 1 << 40


@dataclass
class ImportanceTrace:
    """Per (layer, q-head) importance rows over ``n_entries`` prompt entries."""

    importance: np.ndarray  # (layers, q_heads, rows, n_entries)
    seed: Optional[int] = None

    @property
    def n_layers(self) -> int:
        return self.importance.shape[0]

    @property
    def n_q_heads(self) -> int:
        return self.importance.shape[1]

    n_kv_heads = n_q_heads
    group_size = 1

    @property
    def n_rows(self) -> int:
        return self.importance.shape[2]

    @property
    def n_prompt(self) -> int:
        return self.importance.shape[3]

    def _check(self, layer: int, window: int):
        if not 0 <= layer < self.n_layers:
            raise ContractError(f"layer {layer} outside [0, {self.n_layers})")
        if not 1 <= window <= min(self.n_prompt, self.n_rows):
            raise ContractError(f"window {window} invalid for {self.n_rows} rows x "
                                f"{self.n_prompt} entries")

    def layer_observation(self, layer: int, window: int) -> LayerObservation:
        self._check(layer, window)
        n = self.n_prompt
        obs = self.importance[layer, :, :window, :n - window].copy()
        return LayerObservation(obs, np.ones((self.n_q_heads, n)), 1)

    def future_rows(self, window: int) -> np.ndarray:
        self._check(0, window)
        return self.importance[:, :, window:, :]


TraceLike = Union[Trace, ImportanceTrace]


def gen_synthetic(config: ModelConfig, prompt_len: int, steps: int,
                  regime: Optional[SyntheticRegime] = None) -> Trace:
    """Deterministic regime-shift trace for ``config``."""
    trace = run_trace(config, prompt_len, steps, regime or SyntheticRegime(seed=config.seed))
    trace.seed = config.seed
    return trace


def _f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def encode_trace(trace: TraceLike) -> bytes:
    if isinstance(trace, ImportanceTrace):
        dims = trace.importance.shape
        head = MAGIC + struct.pack("<6I", VERSION, KIND_IMPORTANCE, *dims)
        return head + _f32(trace.importance)
    t = trace
    dims = (t.n_layers, t.n_q_heads, t.n_kv_heads, t.d_h, t.d_model, t.n_prompt, t.n_steps)
    parts = [MAGIC + struct.pack("<9I", VERSION, KIND_RAW, *dims)]
    for l in range(t.n_layers):
        for j in range(t.n_kv_heads):
            parts.append(_f32(t.keys[l, j]))
            parts.append(_f32(t.values[l, j]))
        for h in range(t.n_q_heads):
            parts.append(_f32(t.queries[l, h]))
        parts.append(_f32(t.w_o[l]))
    return b"".join(parts)


def atomic_write(path, data: Union[bytes, str]) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": "\n",
                                                             "encoding": "utf-8"})) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_trace(path, trace: TraceLike) -> None:
    atomic_write(path, encode_trace(trace))


def _u32(buf: bytes, offset: int, field: str) -> int:
    if len(buf) < offset + 4:
        raise TraceFormatError("file ends inside the header", field, offset)
    return struct.unpack_from("<I", buf, offset)[0]


def decode_trace(buf: bytes) -> TraceLike:
    if buf[:4] != MAGIC:
        raise TraceFormatError(f"bad magic {buf[:4]!r}", "magic", 0)
    version = _u32(buf, 4, "version")
    if version != VERSION:
        raise TraceFormatError(f"unsupported version {version}", "version", 4)
    kind = _u32(buf, 8, "kind")
    if kind not in (KIND_RAW, KIND_IMPORTANCE):
        raise TraceFormatError(f"unknown kind {kind}", "kind", 8)
    names = RAW_FIELDS if kind == KIND_RAW else IMPORTANCE_FIELDS
    dims = {}
    for i, name in enumerate(names):
        off = 12 + 4 * i
        dims[name] = _u32(buf, off, name)
        if dims[name] < 1 and name != "n_steps":
            raise TraceFormatError(f"{name} must be >= 1", name, off)
    start = 12 + 4 * len(names)

    def off_of(name):
        return 12 + 4 * names.index(name)

    if kind == KIND_RAW:
        L, H, G, D, M, N, S = (dims[k] for k in RAW_FIELDS)
        if H % G:
            raise TraceFormatError("n_q_heads not divisible by n_kv_heads", "n_kv_heads",
                                   off_of("n_kv_heads"))
        if H * D != M:
            raise TraceFormatError("d_model != n_q_heads * d_h", "d_model", off_of("d_model"))
        T = N + S
        n_floats = L * ((2 * G + H) * T * D + H * D * M)
    else:
        L, H, S, E = (dims[k] for k in IMPORTANCE_FIELDS)
        if S < 1:
            raise TraceFormatError("n_steps must be >= 1", "n_steps", off_of("n_steps"))
        n_floats = L * H * S * E
    if n_floats * 4 > MAX_PAYLOAD_BYTES:
        raise TraceFormatError("header dimensions overflow the payload limit", "header", 12)
    actual = len(buf) - start
    if actual < n_floats * 4:
        raise TraceFormatError(f"payload truncated: need {n_floats * 4} bytes, have {actual}",
                               "payload", len(buf))
    if actual > n_floats * 4:
        raise TraceFormatError("trailing bytes after payload", "payload", start + n_floats * 4)
    data = np.frombuffer(buf, dtype="<f4", count=n_floats, offset=start).astype(np.float64)
    if not np.all(np.isfinite(data)):
        bad = int(np.argmin(np.isfinite(data)))
        raise TraceFormatError("non-finite payload value", "payload", start + 4 * bad)

    if kind == KIND_IMPORTANCE:
        return ImportanceTrace(data.reshape(L, H, S, E))

    keys = np.empty((L, G, T, D))
    values = np.empty((L, G, T, D))
    queries = np.empty((L, H, T, D))
    w_o = np.empty((L, H * D, M))
    pos = 0

    def take(count):
        nonlocal pos
        out = data[pos:pos + count]
        pos += count
        return out

    for l in range(L):
        for j in range(G):
            keys[l, j] = take(T * D).reshape(T, D)
            values[l, j] = take(T * D).reshape(T, D)
        for h in range(H):
            queries[l, h] = take(T * D).reshape(T, D)
        w_o[l] = take(H * D * M).reshape(H * D, M)
    return Trace(N, S, keys, values, queries, w_o)


def read_trace(path) -> TraceLike:
    with open(path, "rb") as f:
        return decode_trace(f.read())
