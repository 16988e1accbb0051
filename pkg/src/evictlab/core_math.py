"""Dense float64 kernels used by every other module.

Matrices are plain 2-D ``numpy.ndarray`` objects; score vectors are 1-D
arrays. All functions are pure and never modify their inputs.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .errors import ContractError


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ContractError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(logits, valid: Optional[Sequence[int]] = None) -> np.ndarray:
    """Row-wise softmax with optional per-row valid-prefix lengths.

    Positions at or beyond ``valid[r]`` in row ``r`` are masked and come out
    as exactly 0. The row maximum is subtracted before exponentiation.
    """
    x = as_matrix(logits)
    rows, cols = x.shape
    if valid is None:
        lengths = np.full(rows, cols, dtype=np.int64)
    else:
        lengths = np.asarray(valid, dtype=np.int64)
        if lengths.shape != (rows,):
            raise ContractError("mask must give one valid-prefix length per row")
        if np.any(lengths < 1):
            raise ContractError("every softmax row needs at least one valid position")
        lengths = np.minimum(lengths, cols)
    mask = np.arange(cols)[None, :] < lengths[:, None]
    masked = np.where(mask, x, -np.inf)
    shifted = masked - masked.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def avg_pool_rows(m, kernel: int) -> np.ndarray:
    """Stride-1 average pooling along each row.

    Zero padding of ``kernel // 2`` on both sides; the divisor is always
    ``kernel``, so edge positions see the padding in their average.
    """
    x = as_matrix(m)
    if kernel < 1 or kernel % 2 == 0:
        raise ContractError(f"pooling kernel must be odd and >= 1, got {kernel}")
    if kernel == 1:
        return x.copy()
    half = kernel // 2
    padded = np.pad(x, ((0, 0), (half, half)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel, axis=1)
    return windows.sum(axis=2) / kernel


def row_l2_norms(m) -> np.ndarray:
    x = as_matrix(m)
    return np.sqrt(np.einsum("ij,ij->i", x, x))


def top_k_indices(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ascending by index.

    Ties are resolved in favour of the lower index, so the result is fully
    determined by the score values.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise ContractError("scores must be a 1-D vector")
    if k < 0 or k > s.shape[0]:
        raise ContractError(f"k={k} outside [0, {s.shape[0]}]")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    if k == s.shape[0]:
        return np.arange(k, dtype=np.int64)
    # np.lexsort: last key is primary -> score descending, then index ascending
    order = np.lexsort((np.arange(s.shape[0]), -s))
    return np.sort(order[:k]).astype(np.int64)


def sequential_sum(x) -> float:
    """Left-to-right float64 sum (reproducible by a plain loop)."""
    v = np.asarray(x, dtype=np.float64)
    if v.size == 0:
        return 0.0
    return float(np.add.accumulate(v.ravel())[-1])
