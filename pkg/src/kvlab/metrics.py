"""Fidelity diagnostics and the synthetic needle-retention harness.

The loss/similarity definitions here are artifact-local operationalizations
used for cross-policy comparison: evicted-mass L1 over the full cache, and
cosine between a final-row attention distribution and its zero-masked
(unrenormalized) counterpart.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cache import KeptIndices, LayerKV
from .numerics import TensorView


@dataclass(frozen=True)
class FidelityReport:
    kv_l1: float
    attn_cos: float
    per_layer_l1: tuple[float, ...]
    per_layer_cos: tuple[float, ...]


@dataclass(frozen=True)
class NeedleCase:
    """A contiguous high-signal span planted in uniform noise scores.

    weak_offset, when set, zeroes one span column so token-level selection
    can drop it while the chunk sum still dominates.
    """

    seq_len: int
    span_start: int
    span_len: int
    signal: float
    seed: int = 0
    noise: str = "uniform"  # or "gaussian"
    weak_offset: Optional[int] = None

    def __post_init__(self):
        if self.span_len < 1 or self.span_start < 0:
            raise ValueError("span must be non-empty and start at >= 0")
        if self.span_start + self.span_len > self.seq_len:
            raise ValueError("span must lie within [0, seq_len)")
        if self.noise not in ("uniform", "gaussian"):
            raise ValueError("noise must be 'uniform' or 'gaussian'")
        if self.weak_offset is not None and not (0 <= self.weak_offset < self.span_len):
            raise ValueError("weak_offset must index into the span")

    @property
    def span(self) -> range:
        return range(self.span_start, self.span_start + self.span_len)


def kv_l1_loss(full: LayerKV, kept: KeptIndices) -> float:
    """Absolute K/V mass at evicted positions over the total entry count."""
    if kept.positions and kept.positions[-1] >= full.seq_len:
        raise ValueError("kept index out of range")
    evicted = np.ones(full.seq_len, dtype=bool)
    evicted[np.asarray(kept.positions, dtype=np.intp)] = False
    total_entries = 0
    lost = 0.0
    for k, v in zip(full.keys, full.values):
        total_entries += k.data.size + v.data.size
        lost += float(np.abs(k.data[evicted]).sum(dtype=np.float64))
        lost += float(np.abs(v.data[evicted]).sum(dtype=np.float64))
    return lost / total_entries


def attention_cosine(full_attn_row: TensorView, kept: KeptIndices) -> float:
    """Cosine between a distribution and its zero-masked restriction."""
    p = full_attn_row.data.reshape(-1).astype(np.float64)
    masked = np.zeros_like(p)
    idx = np.asarray([i for i in kept.positions if i < len(p)], dtype=np.intp)
    masked[idx] = p[idx]
    norm = np.linalg.norm(p) * np.linalg.norm(masked)
    if norm == 0:
        return 0.0
    return float(np.dot(p, masked) / norm)


def make_needle_case(case: NeedleCase, observe_rows: int = 1) -> TensorView:
    """Synthetic observe-window score matrix realizing a needle regime.

    Columns inside the span get signal added on top of noise; a weak_offset
    column is forced to zero.  Deterministic in the seed.
    """
    rng = np.random.Generator(np.random.Philox(key=case.seed))
    if case.noise == "uniform":
        scores = rng.uniform(0.0, 1.0, size=(observe_rows, case.seq_len))
    else:
        scores = np.abs(rng.normal(0.0, 1.0, size=(observe_rows, case.seq_len)))
    scores[:, case.span_start : case.span_start + case.span_len] += case.signal
    if case.weak_offset is not None:
        scores[:, case.span_start + case.weak_offset] = 0.0
    return TensorView(scores.astype(np.float32))


def needle_retention(kept: KeptIndices, case: NeedleCase) -> tuple[float, bool]:
    """Fraction of the needle span retained and whether it survived intact."""
    span = set(case.span)
    frac = len(kept.as_set() & span) / case.span_len
    return frac, frac == 1.0
