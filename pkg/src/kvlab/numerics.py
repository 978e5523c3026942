"""Minimal deterministic dense linear algebra for the toy attention engine.

Everything is float32 and accumulation order is fixed (row-major,
left-to-right over the inner dimension), so results are bit-identical
across runs and match a naive triple-loop reference exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TensorView:
    """Immutable row-major 2-D float32 matrix."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"TensorView requires a 2-D array, got ndim={arr.ndim}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("TensorView entries must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @classmethod
    def from_rows(cls, rows) -> "TensorView":
        return cls(np.asarray(rows, dtype=np.float32).reshape(len(rows), -1))


def _mm_t(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b.T with float32 accumulation in fixed left-to-right inner order.

    Each output element accumulates products in increasing k, exactly like
    the scalar triple loop; the vectorization is over (i, j) only, which
    does not change per-element rounding.
    """
    m, d = a.shape
    n = b.shape[0]
    out = np.zeros((m, n), dtype=np.float32)
    for k in range(d):
        out += a[:, k : k + 1] * b[:, k][None, :]
    return out


def matmul_transposed(a: TensorView, b: TensorView) -> TensorView:
    """Compute a @ b.T for a: m x d, b: n x d."""
    if a.cols != b.cols:
        raise ValueError(
            f"inner dimension mismatch: {a.rows}x{a.cols} vs {b.rows}x{b.cols}"
        )
    return TensorView(_mm_t(a.data, b.data))


def _causal_softmax(scores: np.ndarray, query_offset: int) -> np.ndarray:
    w, t = scores.shape
    if query_offset < 0:
        raise ValueError("query_offset must be non-negative")
    if t == 0 or query_offset >= t + w:
        raise ValueError("mask leaves an empty row")
    cols = np.arange(t)[None, :]
    rows = np.arange(w)[:, None]
    allowed = cols <= query_offset + rows
    if not allowed.any(axis=1).all():
        raise ValueError("mask leaves an empty row")
    x = np.where(allowed, scores, -np.inf).astype(np.float32)
    x -= x.max(axis=1, keepdims=True)
    e = np.where(allowed, np.exp(x), 0.0).astype(np.float32)
    return (e / e.sum(axis=1, keepdims=True)).astype(np.float32)


def causal_softmax_rows(scores: TensorView, query_offset: int) -> TensorView:
    """Row-wise softmax where row i may attend to columns <= query_offset + i.

    Masked entries become exactly zero; each row is max-stabilized and sums
    to 1 up to float32 rounding.
    """
    return TensorView(_causal_softmax(scores.data, query_offset))
