"""Layer-wise index reuse, cross-layer index similarity, and the reuse
speedup model.

Compression runs only on anchor layers (l mod n_reuse == 0); every other
layer copies its anchor's per-head index sets, head h reusing head h.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cache import KeptIndices
from .model import PrefillTrace
from .policies import PolicySpec, compress_layer


@dataclass(frozen=True)
class ReusePlan:
    n_layers: int
    n_reuse: int

    def __post_init__(self):
        if not (1 <= self.n_reuse <= self.n_layers):
            raise ValueError("need 1 <= n_reuse <= n_layers")

    def anchor(self, layer: int) -> int:
        return (layer // self.n_reuse) * self.n_reuse


@dataclass(frozen=True)
class SimilarityMatrix:
    n: int
    entries: tuple[tuple[float, ...], ...]


def jaccard(a: KeptIndices, b: KeptIndices) -> float:
    """|a n b| / |a u b|; 1.0 when both sets are empty."""
    sa, sb = a.as_set(), b.as_set()
    union = sa | sb
    if not union:
        return 1.0
    return len(sa & sb) / len(union)


def run_with_reuse(
    trace: PrefillTrace, spec: PolicySpec, plan: ReusePlan
) -> list[list[KeptIndices]]:
    """Compress anchor layers fresh; all other layers copy their anchor."""
    if plan.n_layers != trace.n_layers:
        raise ValueError("reuse plan layer count does not match trace")
    out: list[list[KeptIndices]] = []
    for l in range(trace.n_layers):
        if l % plan.n_reuse == 0:
            out.append(compress_layer(trace, l, spec))
        else:
            out.append(list(out[plan.anchor(l)]))
    return out


def adjacent_similarity(per_layer: list[KeptIndices]) -> float:
    """Mean Jaccard similarity of consecutive layers' kept-index sets."""
    if len(per_layer) < 2:
        raise ValueError("need at least 2 layers")
    sims = [jaccard(per_layer[l], per_layer[l + 1]) for l in range(len(per_layer) - 1)]
    return float(np.mean(sims))


def similarity_matrix(per_layer: list[KeptIndices]) -> SimilarityMatrix:
    if not per_layer:
        raise ValueError("need at least 1 layer")
    n = len(per_layer)
    entries = tuple(
        tuple(jaccard(per_layer[i], per_layer[j]) for j in range(n))
        for i in range(n)
    )
    return SimilarityMatrix(n=n, entries=entries)


def speedup_estimate(
    n_layers: int, n_reuse: int, t_compress: float, t_select: float
) -> float:
    """Analytic compression-phase speedup from reusing indices.

    n_layers * t_compress over (n_layers / n_reuse) * t_compress plus the
    remaining layers' selection cost.  A non-dividing n_reuse is evaluated
    with the real-valued layer ratio.
    """
    if t_compress <= 0 or t_select < 0:
        raise ValueError("need t_compress > 0 and t_select >= 0")
    fresh = n_layers / n_reuse
    denom = fresh * t_compress + (n_layers - fresh) * t_select
    if denom == 0:
        raise ValueError("zero denominator in speedup estimate")
    return (n_layers * t_compress) / denom
