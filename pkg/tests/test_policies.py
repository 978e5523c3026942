import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvlab.cache import BudgetSpec
from kvlab.numerics import TensorView, causal_softmax_rows
from kvlab.policies import (
    PolicySpec,
    chunk_scores,
    chunkkv_compress,
    chunkkv_from_scores,
    h2o_column_scores,
    h2o_compress,
    hybrid_compress,
    max_pool_1d,
    observe_scores,
    pyramid_budgets,
    run_policy,
    select_chunks,
    snapkv_compress,
    streaming_compress,
    topk_from_scores,
)

from test_numerics import naive_matmul_transposed


def random_scores(w, t, seed):
    rng = np.random.Generator(np.random.Philox(key=seed))
    return TensorView(rng.uniform(0, 1, size=(max(w, 1), t)).astype(np.float32))


def exhaustive_best_chunks(scores, k):
    """Max-total-score k-subset of chunks, lexicographically smallest on ties."""
    best = None
    for subset in itertools.combinations(range(len(scores)), k):
        total = sum(scores[i] for i in subset)
        if best is None or total > best[0] + 1e-12 or (
            abs(total - best[0]) <= 1e-12 and subset < best[1]
        ):
            best = (total, subset)
    return best[1]


class TestObserveScores:
    def test_full_window_raw_is_scaled_gram(self, small_trace):
        t = small_trace.seq_len
        d = small_trace.config.head_dim
        a = observe_scores(small_trace, 0, 0, w=t, mode="raw")
        q = small_trace.q[0][0].data
        k = small_trace.k[0][0].data
        want = naive_matmul_transposed(q, k) * np.float32(1 / math.sqrt(d))
        assert np.array_equal(a.data, want)

    def test_softmax_rows_sum_to_one(self, small_trace):
        a = observe_scores(small_trace, 1, 0, w=4, mode="softmax")
        assert np.allclose(a.data.sum(axis=1), 1.0, atol=1e-5)

    def test_w_too_large_raises(self, small_trace):
        with pytest.raises(ValueError):
            observe_scores(small_trace, 0, 0, w=small_trace.seq_len + 1)


class TestChunkScores:
    def test_ceiling_boundaries(self):
        table = chunk_scores(random_scores(1, 25, 0), c=10)
        assert table.chunk_count == 3
        assert table.boundaries == ((0, 10), (10, 20), (20, 25))

    def test_all_ones_uniform(self):
        table = chunk_scores(TensorView(np.ones((2, 6), dtype=np.float32)), c=2)
        assert table.scores == (4.0, 4.0, 4.0)

    def test_column_sum_oracle(self):
        cols = [0.1, 0.1, 0.5, 0.4, 0.05, 0.05, 0.9, 0.9]
        table = chunk_scores(TensorView.from_rows([cols]), c=2)
        want = [cols[i] + cols[i + 1] for i in range(0, 8, 2)]
        assert np.allclose(table.scores, want, atol=1e-6)
        assert np.allclose(table.scores, [0.2, 0.9, 0.1, 1.8], atol=1e-6)


class TestSelectChunks:
    def test_example(self):
        table = chunk_scores(
            TensorView.from_rows([[0.1, 0.1, 0.5, 0.4, 0.05, 0.05, 0.9, 0.9]]), c=2
        )
        assert select_chunks(table, 2) == (1, 3)

    def test_k_equals_c(self):
        table = chunk_scores(random_scores(2, 12, 1), c=3)
        assert select_chunks(table, table.chunk_count) == tuple(range(table.chunk_count))

    def test_k_zero(self):
        table = chunk_scores(random_scores(2, 12, 1), c=3)
        assert select_chunks(table, 0) == ()

    @settings(max_examples=100)
    @given(
        st.integers(min_value=2, max_value=24),
        st.integers(min_value=1, max_value=5),
        st.integers(min_value=0, max_value=10_000),
        st.data(),
    )
    def test_exhaustive_subset_oracle(self, t, c, seed, data):
        table = chunk_scores(random_scores(2, t, seed), c)
        if table.chunk_count > 8:
            c = -(-t // 8)
            table = chunk_scores(random_scores(2, t, seed), c)
        k = data.draw(st.integers(min_value=0, max_value=table.chunk_count))
        assert select_chunks(table, k) == exhaustive_best_chunks(table.scores, k)

    def test_tie_break_earlier(self):
        table = chunk_scores(TensorView(np.ones((1, 9), dtype=np.float32)), c=3)
        assert select_chunks(table, 2) == (0, 1)


class TestChunkKV:
    def test_worked_example(self):
        a = TensorView.from_rows([[0.1, 0.1, 0.5, 0.4, 0.05, 0.05, 0.9, 0.9]])
        kept = chunkkv_from_scores(a, c=2, w=2, max_len=6, t_k=8)
        assert kept.positions == (2, 3, 6, 7)

    def test_identity_when_budget_covers(self):
        a = random_scores(2, 10, 0)
        kept = chunkkv_from_scores(a, c=3, w=2, max_len=10, t_k=10)
        assert kept.positions == tuple(range(10))

    def test_uniform_tie_break(self):
        a = TensorView(np.ones((1, 9), dtype=np.float32))
        kept = chunkkv_from_scores(a, c=3, w=0, max_len=6, t_k=9)
        assert kept.positions == tuple(range(6))

    def test_w_exceeding_budget_raises(self):
        with pytest.raises(ValueError):
            chunkkv_from_scores(random_scores(2, 10, 0), c=2, w=5, max_len=4, t_k=10)

    def test_trace_compress_budget_and_recency(self, small_trace):
        spec = PolicySpec("ChunkKV", BudgetSpec(max_len=14, w=4, c=5))
        kept = chunkkv_compress(small_trace, 0, 0, spec)
        t = small_trace.seq_len
        assert len(kept) <= 14
        assert set(range(t - 4, t)) <= kept.as_set()

    @settings(max_examples=100, deadline=None)
    @given(
        st.integers(min_value=4, max_value=40),
        st.integers(min_value=1, max_value=5),
        st.integers(min_value=0, max_value=3),
        st.integers(min_value=0, max_value=10_000),
        st.data(),
    )
    def test_chunk_integrity(self, t, c, w, seed, data):
        max_len = data.draw(st.integers(min_value=max(w, 1), max_value=t))
        a = random_scores(w, t, seed)
        kept = chunkkv_from_scores(a, c, w, max_len, t)
        if max_len >= t:
            assert kept.positions == tuple(range(t))
            return
        assert len(kept) <= max_len
        recent = set(range(t - w, t))
        table = chunk_scores(a, c)
        kept_set = kept.as_set()
        for pos in kept_set - recent:
            ci = pos // c
            start, end = table.boundaries[ci]
            assert set(range(start, end)) <= kept_set

    @settings(max_examples=50, deadline=None)
    @given(
        st.integers(min_value=10, max_value=40),
        st.integers(min_value=1, max_value=4),
        st.integers(min_value=0, max_value=3),
        st.integers(min_value=0, max_value=10_000),
    )
    def test_budget_monotonicity_by_chunk(self, t, c, w, seed):
        a = random_scores(w, t, seed)
        lo = max(w, 1)
        if lo + c >= t:
            return
        small = chunkkv_from_scores(a, c, w, lo, t)
        big = chunkkv_from_scores(a, c, w, lo + c, t)
        assert small.as_set() <= big.as_set()

    def test_score_shift_invariant_with_equal_chunks(self):
        rng = np.random.Generator(np.random.Philox(key=5))
        base = rng.uniform(0, 1, size=(2, 12)).astype(np.float32)
        k1 = chunkkv_from_scores(TensorView(base), c=3, w=0, max_len=6, t_k=12)
        k2 = chunkkv_from_scores(TensorView(base + np.float32(5.0)), c=3, w=0, max_len=6, t_k=12)
        assert k1.positions == k2.positions

    def test_score_shift_can_flip_with_short_final_chunk(self):
        # chunks (0,2),(2,4),(4,5): the short chunk wins raw sums but loses
        # once a constant inflates the full-length chunks
        a = TensorView.from_rows([[0.0, 0.0, 0.0, 0.0, 0.9]])
        k1 = chunkkv_from_scores(a, c=2, w=0, max_len=2, t_k=5)
        assert k1.positions == (4,)
        shifted = TensorView.from_rows([[1.0, 1.0, 1.0, 1.0, 1.9]])
        k2 = chunkkv_from_scores(shifted, c=2, w=0, max_len=2, t_k=5)
        assert k2.positions == (0, 1)


class TestStreaming:
    def test_example(self):
        spec = PolicySpec("StreamingStyle", BudgetSpec(max_len=4, w=0), sink=2)
        assert streaming_compress(6, spec).positions == (0, 1, 4, 5)

    def test_pure_recent(self):
        spec = PolicySpec("StreamingStyle", BudgetSpec(max_len=3, w=0), sink=0)
        assert streaming_compress(6, spec).positions == (3, 4, 5)

    def test_identity(self):
        spec = PolicySpec("StreamingStyle", BudgetSpec(max_len=8, w=0), sink=2)
        assert streaming_compress(5, spec).positions == tuple(range(5))

    def test_sink_exceeds_budget(self):
        spec = PolicySpec("StreamingStyle", BudgetSpec(max_len=3, w=0), sink=4)
        with pytest.raises(ValueError):
            streaming_compress(10, spec)


class TestH2O:
    def test_budget_covers_all(self, small_trace):
        spec = PolicySpec("H2OStyle", BudgetSpec(max_len=small_trace.seq_len, w=2))
        kept = h2o_compress(small_trace, 0, 0, spec)
        assert kept.positions == tuple(range(small_trace.seq_len))

    def test_dominating_column_always_kept(self):
        t = 12
        raw = np.zeros((t, t), dtype=np.float32)
        raw[:, 5] = 50.0
        probs = causal_softmax_rows(TensorView(raw), query_offset=0)
        for normalize in ("exposure", "none"):
            col = h2o_column_scores(probs.data, normalize)
            kept = topk_from_scores(col, w=2, max_len=4, t_k=t)
            assert 5 in kept.as_set()

    def test_sort_based_oracle(self, small_trace):
        w, max_len = 3, 10
        t = small_trace.seq_len
        spec = PolicySpec("H2OStyle", BudgetSpec(max_len=max_len, w=w))
        kept = h2o_compress(small_trace, 1, 1, spec)

        # independent path: explicit python-loop scores + sorted() selection
        probs = observe_scores(small_trace, 1, 1, w=t, mode="softmax").data
        exposure = [sum(1.0 / (i + 1) for i in range(j, t)) for j in range(t)]
        scores = [sum(float(probs[i][j]) for i in range(t)) / exposure[j] for j in range(t)]
        order = sorted(range(t), key=lambda j: (-scores[j], j))
        want = set(order[: max_len - w]) | set(range(t - w, t))
        assert kept.as_set() == want


class TestSnapKV:
    def test_p1_reduces_to_plain_topk(self, small_trace):
        spec = PolicySpec("SnapKVStyle", BudgetSpec(max_len=12, w=4), pool_width=1)
        kept = snapkv_compress(small_trace, 0, 0, spec)
        a = observe_scores(small_trace, 0, 0, 4, "softmax")
        want = topk_from_scores(a.data.sum(axis=0, dtype=np.float64), 4, 12, small_trace.seq_len)
        assert kept.positions == want.positions

    def test_budget_covers_all(self, small_trace):
        spec = PolicySpec("SnapKVStyle", BudgetSpec(max_len=small_trace.seq_len, w=2))
        assert len(snapkv_compress(small_trace, 0, 0, spec)) == small_trace.seq_len

    def test_pooling_hand_case(self):
        pooled = max_pool_1d(np.array([0.0, 5.0, 0.0, 0.0]), 3)
        assert pooled.tolist() == [5.0, 5.0, 5.0, 0.0]
        kept = topk_from_scores(pooled, w=0, max_len=2, t_k=4)
        assert kept.positions == (0, 1)

    def test_even_pool_width_rejected(self):
        with pytest.raises(ValueError):
            max_pool_1d(np.ones(4), 2)


class TestPyramidBudgets:
    def test_zero_skew_uniform(self):
        assert pyramid_budgets(100, 4, 0.0) == [100, 100, 100, 100]

    def test_linear_endpoints(self):
        assert pyramid_budgets(100, 2, 0.5) == [150, 50]

    def test_largest_remainder_sums_exactly(self):
        budgets = pyramid_budgets(100, 5, 0.4)
        assert sum(budgets) == 500
        assert budgets == sorted(budgets, reverse=True)

    @given(
        st.integers(min_value=20, max_value=400),
        st.integers(min_value=1, max_value=12),
        st.floats(min_value=0.0, max_value=0.9),
    )
    def test_total_preserved(self, b, n, skew):
        budgets = pyramid_budgets(b, n, skew)
        assert sum(budgets) == n * b

    def test_infeasible_floor_raises(self):
        with pytest.raises(ValueError):
            pyramid_budgets(10, 4, 0.9, min_budget=8)


class TestHybrid:
    def _spec(self, split, kind_b="SnapKVStyle"):
        budget = BudgetSpec(max_len=12, w=4, c=5)
        return PolicySpec(
            "Hybrid",
            budget,
            split=split,
            inner_a=PolicySpec("ChunkKV", budget),
            inner_b=PolicySpec(kind_b, budget, pool_width=3),
        )

    def test_degenerate_split_is_pure_a(self, small_trace):
        spec = self._spec(split=small_trace.n_layers)
        kept = hybrid_compress(small_trace, spec)
        pure = run_policy(small_trace, spec.inner_a)
        for l in range(small_trace.n_layers):
            for h in range(small_trace.n_heads):
                assert kept[l][h].positions == pure[l][h].positions

    def test_depth_split_structure(self, small_trace):
        spec = self._spec(split=2)
        kept = hybrid_compress(small_trace, spec)
        a = run_policy(small_trace, spec.inner_a)
        b = run_policy(small_trace, spec.inner_b)
        for l in range(small_trace.n_layers):
            want = a[l] if l < 2 else b[l]
            for h in range(small_trace.n_heads):
                assert kept[l][h].positions == want[h].positions

    def test_same_inner_equals_non_hybrid(self, small_trace):
        budget = BudgetSpec(max_len=12, w=4, c=5)
        inner = PolicySpec("ChunkKV", budget)
        spec = PolicySpec("Hybrid", budget, split=1, inner_a=inner, inner_b=inner)
        kept = hybrid_compress(small_trace, spec)
        pure = run_policy(small_trace, inner)
        for l in range(small_trace.n_layers):
            for h in range(small_trace.n_heads):
                assert kept[l][h].positions == pure[l][h].positions

    def test_nested_hybrid_rejected(self):
        budget = BudgetSpec(max_len=12, w=4, c=5)
        inner = PolicySpec("ChunkKV", budget)
        hy = PolicySpec("Hybrid", budget, split=1, inner_a=inner, inner_b=inner)
        with pytest.raises(ValueError):
            PolicySpec("Hybrid", budget, split=1, inner_a=hy, inner_b=inner)


ALL_KINDS = ["FullKV", "ChunkKV", "SnapKVStyle", "H2OStyle", "StreamingStyle", "PyramidStyle"]


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_budget_and_recency_law(kind, small_trace):
    t = small_trace.seq_len
    from kvlab.policies import resolved_layer_budgets

    for max_len in (8, 14, 20, t):
        w = 4
        budget = BudgetSpec(max_len=max_len, w=w, c=3)
        spec = PolicySpec(kind, budget, pool_width=3, sink=2, skew=0.1)
        kept = run_policy(small_trace, spec)
        budgets = resolved_layer_budgets(spec, small_trace.n_layers, t)
        for l in range(small_trace.n_layers):
            for h in range(small_trace.n_heads):
                ks = kept[l][h]
                if kind == "FullKV":
                    assert ks.positions == tuple(range(t))
                else:
                    assert len(ks) <= budgets[l]
                assert set(range(t - w, t)) <= ks.as_set()
                pos = ks.positions
                assert all(pos[i] < pos[i + 1] for i in range(len(pos) - 1))


def test_needle_preservation_vs_token_policy():
    # a chunk-aligned span with uniformly dominant scores is kept whole by
    # chunk selection; token-level top-k with a sub-span budget cannot
    t, c, w = 30, 5, 2
    rng = np.random.Generator(np.random.Philox(key=9))
    noise = rng.uniform(0, 1, size=(2, t)).astype(np.float32)
    span = range(10, 15)
    scores = noise.copy()
    scores[:, 10:15] += np.float32(t)
    a = TensorView(scores)

    kept_chunk = chunkkv_from_scores(a, c, w, max_len=w + c, t_k=t)
    assert set(span) <= kept_chunk.as_set()

    budget = w + len(span) - 1  # strictly between w and span + w
    col = a.data.sum(axis=0, dtype=np.float64)
    kept_token = topk_from_scores(col, w, budget, t)
    assert not set(span) <= kept_token.as_set()
    assert len(set(span) & kept_token.as_set()) > 0


def test_head_pool_gives_identical_sets_across_heads(small_trace):
    spec = PolicySpec("ChunkKV", BudgetSpec(max_len=12, w=4, c=5), head_pool=True)
    kept = run_policy(small_trace, spec)
    for l in range(small_trace.n_layers):
        assert all(
            kept[l][h].positions == kept[l][0].positions
            for h in range(small_trace.n_heads)
        )
