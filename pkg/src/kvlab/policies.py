"""Eviction policies behind one interface.

Chunk-based compression keeps whole contiguous chunks scored by summed
observe-window attention, always unioned with the most recent w positions
(mask semantics: the kept count may fall below the budget when selected
chunks overlap the recent window).  The baseline families are policy-level
stand-ins: sink+recent streaming, cumulative-score heavy hitters,
observe-window pooled top-k, layer-decaying budgets, and a depth-split
hybrid of two inner policies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .cache import BudgetSpec, KeptIndices
from .model import PrefillTrace
from .numerics import TensorView, causal_softmax_rows, matmul_transposed

POLICY_KINDS = (
    "FullKV",
    "ChunkKV",
    "SnapKVStyle",
    "H2OStyle",
    "StreamingStyle",
    "PyramidStyle",
    "Hybrid",
)

SCORE_MODES = ("raw", "softmax")


@dataclass(frozen=True)
class PolicySpec:
    """Declarative description of one eviction policy."""

    kind: str
    budget: BudgetSpec
    score_mode: str = "softmax"
    pool_width: int = 1          # SnapKVStyle: odd 1-D max-pool width
    sink: int = 4                # StreamingStyle: initial tokens always kept
    skew: float = 0.0            # PyramidStyle: top/bottom budget skew in [0, 1)
    split: Optional[int] = None  # Hybrid: first split layers use inner_a
    inner_a: Optional["PolicySpec"] = None
    inner_b: Optional["PolicySpec"] = None
    head_pool: bool = False      # score across heads by mean instead of per-head
    h2o_normalize: str = "exposure"  # or "none" for plain column sums

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.score_mode not in SCORE_MODES:
            raise ValueError(f"unknown score mode {self.score_mode!r}")
        if self.h2o_normalize not in ("exposure", "none"):
            raise ValueError(f"unknown h2o_normalize {self.h2o_normalize!r}")
        if self.kind == "Hybrid":
            if self.inner_a is None or self.inner_b is None or self.split is None:
                raise ValueError("Hybrid requires split, inner_a and inner_b")
            if self.inner_a.kind == "Hybrid" or self.inner_b.kind == "Hybrid":
                raise ValueError("Hybrid specs cannot be nested")

    @property
    def name(self) -> str:
        if self.kind == "Hybrid":
            return f"Hybrid[{self.inner_a.kind}|{self.inner_b.kind}@{self.split}]"
        return self.kind


@dataclass(frozen=True)
class ChunkScoreTable:
    """Per-chunk summed attention scores plus the chunk tiling of [0, T)."""

    chunk_count: int
    scores: tuple[float, ...]
    boundaries: tuple[tuple[int, int], ...]


def chunk_boundaries(seq_len: int, c: int) -> tuple[tuple[int, int], ...]:
    if c < 1:
        raise ValueError("chunk size must be >= 1")
    return tuple(
        (start, min(start + c, seq_len)) for start in range(0, seq_len, c)
    )


def observe_scores(
    trace: PrefillTrace, layer: int, head: int, w: int, mode: str = "softmax"
) -> TensorView:
    """Scaled attention scores of the last w queries against all keys."""
    t_q = trace.seq_len
    if w < 1 or w > t_q:
        raise ValueError(f"observe window w={w} outside [1, {t_q}]")
    q = trace.q[layer][head]
    k = trace.k[layer][head]
    scale = np.float32(1.0 / math.sqrt(trace.config.head_dim))
    raw = TensorView(matmul_transposed(TensorView(q.data[t_q - w :]), k).data * scale)
    if mode == "raw":
        return raw
    if mode == "softmax":
        return causal_softmax_rows(raw, query_offset=t_q - w)
    raise ValueError(f"unknown score mode {mode!r}")


def chunk_scores(a: TensorView, c: int) -> ChunkScoreTable:
    """Sum scores over all observe rows within each chunk of c columns."""
    bounds = chunk_boundaries(a.cols, c)
    col_sums = a.data.sum(axis=0, dtype=np.float64)
    starts = [s for s, _ in bounds]
    sums = np.add.reduceat(col_sums, starts) if starts else np.zeros(0)
    return ChunkScoreTable(
        chunk_count=len(bounds),
        scores=tuple(float(s) for s in sums),
        boundaries=bounds,
    )


def _top_k_stable(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores; ties broken toward the earlier index."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return np.sort(order[:k])


def select_chunks(table: ChunkScoreTable, k: int) -> tuple[int, ...]:
    """Top-k chunks by score, emitted in ascending chunk-index order."""
    if k < 0 or k > table.chunk_count:
        raise ValueError(f"k={k} outside [0, {table.chunk_count}]")
    return tuple(int(i) for i in _top_k_stable(np.asarray(table.scores), k))


def _recent_window(t_k: int, w: int) -> range:
    return range(max(t_k - w, 0), t_k)


def chunkkv_from_scores(
    a: TensorView, c: int, w: int, max_len: int, t_k: int
) -> KeptIndices:
    """Mask-based chunk compression over a precomputed score matrix."""
    if w > max_len:
        raise ValueError("observe window exceeds budget")
    if max_len >= t_k:
        return KeptIndices.from_iterable(range(t_k))
    table = chunk_scores(a, c)
    k = min((max_len - w) // c, table.chunk_count)
    kept = set(_recent_window(t_k, w))
    for ci in select_chunks(table, k):
        start, end = table.boundaries[ci]
        kept.update(range(start, end))
    return KeptIndices.from_iterable(kept)


def _zero_scores(w: int, t_k: int) -> TensorView:
    return TensorView(np.zeros((max(w, 1), t_k), dtype=np.float32))


def _observe_or_zero(trace, layer, head, w, mode) -> TensorView:
    if w == 0:
        return _zero_scores(0, trace.seq_len)
    return observe_scores(trace, layer, head, w, mode)


def chunkkv_compress(
    trace: PrefillTrace, layer: int, head: int, spec: PolicySpec
) -> KeptIndices:
    t_k = trace.seq_len
    b = spec.budget
    max_len = b.resolve(t_k)
    if b.w > max_len:
        raise ValueError("observe window exceeds budget")
    if max_len >= t_k:
        return KeptIndices.from_iterable(range(t_k))
    a = _observe_or_zero(trace, layer, head, b.w, spec.score_mode)
    return chunkkv_from_scores(a, b.c, b.w, max_len, t_k)


def topk_from_scores(
    col_scores: np.ndarray, w: int, max_len: int, t_k: int
) -> KeptIndices:
    """Token-level top-k over per-position scores, unioned with the last w."""
    if w > max_len:
        raise ValueError("observe window exceeds budget")
    if max_len >= t_k:
        return KeptIndices.from_iterable(range(t_k))
    kept = set(_recent_window(t_k, w))
    top = _top_k_stable(np.asarray(col_scores, dtype=np.float64), max_len - w)
    kept.update(int(i) for i in top)
    return KeptIndices.from_iterable(kept)


def streaming_compress(t_k: int, spec: PolicySpec) -> KeptIndices:
    """Sink tokens plus a recent window, no scores consulted."""
    max_len = spec.budget.resolve(t_k)
    a = spec.sink
    if a > max_len:
        raise ValueError("sink count exceeds budget")
    if t_k <= max_len:
        return KeptIndices.from_iterable(range(t_k))
    kept = set(range(a)) | set(range(t_k - (max_len - a), t_k))
    return KeptIndices.from_iterable(kept)


def positional_exposure(t_k: int) -> np.ndarray:
    """Column mass each position would accumulate under uniform causal attention.

    Position j is visible to queries j..T-1; a uniform row i spreads 1/(i+1)
    over its visible columns, so the expectation at j is sum_{i>=j} 1/(i+1).
    """
    harmonic = 1.0 / np.arange(1, t_k + 1, dtype=np.float64)
    return np.cumsum(harmonic[::-1])[::-1]


def h2o_column_scores(full_softmax: np.ndarray, normalize: str = "exposure") -> np.ndarray:
    """Heavy-hitter scores from a full causal attention matrix.

    Plain column sums are structurally dominated by early positions (they
    are visible to every query); 'exposure' divides by the uniform-attention
    expectation so content, not position, ranks tokens.
    """
    col = full_softmax.sum(axis=0, dtype=np.float64)
    if normalize == "exposure":
        return col / positional_exposure(full_softmax.shape[1])
    return col


def h2o_compress(
    trace: PrefillTrace, layer: int, head: int, spec: PolicySpec
) -> KeptIndices:
    """Cumulative attention mass over all query rows picks the heavy hitters."""
    t_k = trace.seq_len
    max_len = spec.budget.resolve(t_k)
    if max_len >= t_k:
        return KeptIndices.from_iterable(range(t_k))
    full = observe_scores(trace, layer, head, w=t_k, mode="softmax")
    col = h2o_column_scores(full.data, spec.h2o_normalize)
    return topk_from_scores(col, spec.budget.w, max_len, t_k)


def max_pool_1d(x: np.ndarray, width: int) -> np.ndarray:
    """Centered 1-D max pool; width must be odd."""
    if width < 1 or width % 2 == 0:
        raise ValueError("pool width must be odd and >= 1")
    if width == 1:
        return np.asarray(x, dtype=np.float64)
    half = width // 2
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    return np.array(
        [x[max(i - half, 0) : min(i + half + 1, n)].max() for i in range(n)]
    )


def snapkv_compress(
    trace: PrefillTrace, layer: int, head: int, spec: PolicySpec
) -> KeptIndices:
    """Observe-window column mass, max-pooled across neighboring positions."""
    t_k = trace.seq_len
    max_len = spec.budget.resolve(t_k)
    if max_len >= t_k:
        return KeptIndices.from_iterable(range(t_k))
    a = _observe_or_zero(trace, layer, head, spec.budget.w, spec.score_mode)
    col = max_pool_1d(a.data.sum(axis=0, dtype=np.float64), spec.pool_width)
    return topk_from_scores(col, spec.budget.w, max_len, t_k)


def pyramid_budgets(
    total_budget_per_layer: int, n_layers: int, skew: float, min_budget: int = 1
) -> list[int]:
    """Linearly decaying per-layer budgets summing exactly to n_layers * b.

    Layer 0 targets (1 + skew) * b, the last layer (1 - skew) * b; integer
    rounding uses largest-remainder correction so the total is preserved.
    """
    if not (0.0 <= skew < 1.0):
        raise ValueError("skew must be in [0, 1)")
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    b = total_budget_per_layer
    if n_layers == 1:
        ideal = [float(b)]
    else:
        ideal = [
            b * (1.0 + skew - 2.0 * skew * l / (n_layers - 1))
            for l in range(n_layers)
        ]
    floors = [int(math.floor(x)) for x in ideal]
    remainder = n_layers * b - sum(floors)
    # hand out the leftover units to the largest fractional parts, earlier
    # layers first on ties
    fracs = sorted(
        range(n_layers), key=lambda l: (-(ideal[l] - floors[l]), l)
    )
    budgets = list(floors)
    for l in fracs[:remainder]:
        budgets[l] += 1
    if min(budgets) < min_budget:
        raise ValueError("pyramid skew leaves a layer below the minimum budget")
    return budgets


def compress_layer_head(
    trace: PrefillTrace,
    layer: int,
    head: int,
    spec: PolicySpec,
    max_len_override: Optional[int] = None,
) -> KeptIndices:
    """Dispatch one (layer, head) compression for any non-Hybrid policy."""
    t_k = trace.seq_len
    if max_len_override is not None:
        spec = replace(
            spec, budget=replace(spec.budget, max_len=max_len_override, ratio=None)
        )
    kind = spec.kind
    if kind == "FullKV":
        return KeptIndices.from_iterable(range(t_k))
    if kind == "ChunkKV":
        return chunkkv_compress(trace, layer, head, spec)
    if kind == "StreamingStyle":
        return streaming_compress(t_k, spec)
    if kind == "H2OStyle":
        return h2o_compress(trace, layer, head, spec)
    if kind in ("SnapKVStyle", "PyramidStyle"):
        return snapkv_compress(trace, layer, head, spec)
    raise ValueError(f"cannot dispatch kind {kind!r} per (layer, head)")


def resolved_layer_budgets(
    spec: PolicySpec, n_layers: int, t_k: int
) -> list[int]:
    """Per-layer budgets after ratio resolution and pyramid skew."""
    if spec.kind == "Hybrid":
        a = resolved_layer_budgets(spec.inner_a, n_layers, t_k)
        b = resolved_layer_budgets(spec.inner_b, n_layers, t_k)
        return a[: spec.split] + b[spec.split :]
    base = spec.budget.resolve(t_k)
    if spec.kind == "PyramidStyle":
        return pyramid_budgets(
            base, n_layers, spec.skew, min_budget=spec.budget.w + spec.budget.c
        )
    return [base] * n_layers


def _pooled_scores_kept(
    trace: PrefillTrace, layer: int, spec: PolicySpec, max_len: int
) -> KeptIndices:
    """Head-pooled variant: mean scores across heads, one kept-set per layer."""
    t_k = trace.seq_len
    b = spec.budget
    if spec.kind == "ChunkKV":
        mats = [
            _observe_or_zero(trace, layer, h, b.w, spec.score_mode).data
            for h in range(trace.n_heads)
        ]
        mean = TensorView(np.mean(mats, axis=0).astype(np.float32))
        return chunkkv_from_scores(mean, b.c, b.w, max_len, t_k)
    if spec.kind in ("SnapKVStyle", "PyramidStyle"):
        cols = [
            _observe_or_zero(trace, layer, h, b.w, spec.score_mode).data.sum(
                axis=0, dtype=np.float64
            )
            for h in range(trace.n_heads)
        ]
        col = max_pool_1d(np.mean(cols, axis=0), spec.pool_width)
        return topk_from_scores(col, b.w, max_len, t_k)
    if spec.kind == "H2OStyle":
        cols = [
            h2o_column_scores(
                observe_scores(trace, layer, h, t_k, "softmax").data,
                spec.h2o_normalize,
            )
            for h in range(trace.n_heads)
        ]
        return topk_from_scores(np.mean(cols, axis=0), b.w, max_len, t_k)
    return compress_layer_head(trace, layer, 0, spec, max_len_override=max_len)


def compress_layer(
    trace: PrefillTrace,
    layer: int,
    spec: PolicySpec,
    max_len_override: Optional[int] = None,
) -> list[KeptIndices]:
    """Per-head kept-sets for one layer (identical sets when head-pooled)."""
    if spec.kind == "Hybrid":
        inner = spec.inner_a if layer < spec.split else spec.inner_b
        return compress_layer(trace, layer, inner, max_len_override)
    if spec.kind == "PyramidStyle" and max_len_override is None:
        budgets = resolved_layer_budgets(spec, trace.n_layers, trace.seq_len)
        max_len_override = budgets[layer]
    if spec.head_pool:
        max_len = (
            max_len_override
            if max_len_override is not None
            else spec.budget.resolve(trace.seq_len)
        )
        kept = _pooled_scores_kept(trace, layer, spec, max_len)
        return [kept] * trace.n_heads
    return [
        compress_layer_head(trace, layer, h, spec, max_len_override)
        for h in range(trace.n_heads)
    ]


def hybrid_compress(trace: PrefillTrace, spec: PolicySpec) -> list[list[KeptIndices]]:
    """Depth-split composition: inner_a below the split layer, inner_b above."""
    if spec.kind != "Hybrid":
        raise ValueError("hybrid_compress requires a Hybrid spec")
    if not (0 < spec.split <= trace.n_layers):
        raise ValueError("split must lie in (0, n_layers]")
    return [compress_layer(trace, l, spec) for l in range(trace.n_layers)]


def run_policy(trace: PrefillTrace, spec: PolicySpec) -> list[list[KeptIndices]]:
    """Compress every layer independently: [layer][head] -> KeptIndices."""
    if spec.kind == "Hybrid":
        return hybrid_compress(trace, spec)
    return [compress_layer(trace, l, spec) for l in range(trace.n_layers)]
