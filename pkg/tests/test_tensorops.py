import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastcar import tensorops as to


def py_matmul(a, b):
    """Naive triple-loop oracle, plain Python floats."""
    m, k = a.shape
    n = b.shape[1]
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i][p] * b[p][j]
            out[i][j] = acc
    return np.array(out)


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(1)
        m = rng.normal(size=(3, 5))
        assert np.array_equal(to.matmul(np.eye(3), m), m)

    def test_zeros(self):
        m = np.random.default_rng(2).normal(size=(3, 2))
        assert np.array_equal(to.matmul(np.zeros((2, 3)), m), np.zeros((2, 2)))

    def test_matches_triple_loop_oracle_exactly(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(4, 4))
        b = rng.normal(size=(4, 4))
        assert np.array_equal(to.matmul(a, b), py_matmul(a, b))

    def test_vec_mat_matches_matmul_row(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=7)
        w = rng.normal(size=(7, 9))
        assert np.array_equal(to.vec_mat(x, w), to.matmul(x[None, :], w)[0])

    def test_batch_rows_bit_equal_to_single_rows(self):
        rng = np.random.default_rng(5)
        xs = rng.normal(size=(6, 8))
        w = rng.normal(size=(8, 10))
        batched = to.matmul(xs, w)
        for r in range(6):
            assert np.array_equal(batched[r], to.vec_mat(xs[r], w))

    def test_shape_error(self):
        with pytest.raises(to.ShapeError):
            to.matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_identity_association_bit_exact(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 5))
        assert np.array_equal(to.matmul(to.matmul(a, np.eye(4)), b), to.matmul(a, b))


class TestSoftmax:
    def test_uniform(self):
        out = to.softmax_row(np.zeros(3))
        assert np.allclose(out, [1 / 3] * 3, atol=1e-15)

    def test_single_element(self):
        assert np.array_equal(to.softmax_row(np.array([4.2])), np.array([1.0]))

    def test_direct_formula_oracle(self):
        v = np.array([1.0, 2.0, 3.0])
        exps = [math.exp(x - 3.0) for x in v]
        expected = np.array([e / sum(exps) for e in exps])
        assert np.max(np.abs(to.softmax_row(v) - expected)) <= 1e-12

    def test_empty_rejected(self):
        with pytest.raises(to.ShapeError):
            to.softmax_row(np.array([]))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
    def test_sums_to_one_and_positive(self, vals):
        out = to.softmax_row(np.array(vals))
        assert np.all(out > 0)
        assert abs(out.sum() - 1.0) <= 1e-12

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.floats(-30, 30), min_size=2, max_size=16),
        st.floats(-20, 20),
    )
    def test_shift_invariance(self, vals, c):
        v = np.array(vals)
        assert np.max(np.abs(to.softmax_row(v + c) - to.softmax_row(v))) <= 1e-12


class TestSilu:
    def test_zero(self):
        assert to.silu(0.0) == 0.0

    def test_large_positive_asymptote(self):
        assert abs(to.silu(20.0) - 20.0) <= 1e-6

    def test_at_one(self):
        assert abs(to.silu(1.0) - 1.0 / (1.0 + math.exp(-1.0))) == 0.0

    def test_huge_negative_underflows(self):
        assert to.silu(-1e4) == 0.0


class TestLayerNorm:
    def test_zero_mean_unit_var(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=32) * 3 + 1
        y = to.layer_norm(x)
        assert abs(y.mean()) < 1e-12
        assert abs(y.std() - 1.0) < 1e-3  # eps shifts variance slightly

    def test_batch_matches_rows(self):
        rng = np.random.default_rng(8)
        xs = rng.normal(size=(5, 16))
        batched = to.layer_norm(xs)
        for r in range(5):
            assert np.array_equal(batched[r], to.layer_norm(xs[r]))


class TestSpectralNorm:
    def test_identity(self):
        assert abs(to.spectral_norm(np.eye(4)) - 1.0) <= 1e-12

    def test_diagonal(self):
        assert abs(to.spectral_norm(np.diag([3.0, 1.0])) - 3.0) <= 1e-9

    def test_zero_matrix(self):
        assert to.spectral_norm(np.zeros((3, 3))) == 0.0

    def test_randomized_oracle(self):
        rng = np.random.default_rng(9)
        m = rng.normal(size=(8, 8))
        # Oracle: maximize |xM|/|x| over many random unit vectors, then refine
        # the best candidate by repeated multiplication until converged.
        best, best_x = -1.0, None
        for _ in range(2000):
            x = rng.normal(size=8)
            x /= np.linalg.norm(x)
            v = np.linalg.norm(x @ m)
            if v > best:
                best, best_x = v, x
        x = best_x
        for _ in range(5000):
            x = (x @ m) @ m.T
            x /= np.linalg.norm(x)
        oracle = np.linalg.norm(x @ m)
        assert abs(to.spectral_norm(m, iters=512) - oracle) <= 1e-6

    def test_nondecreasing_in_iters(self):
        rng = np.random.default_rng(10)
        m = rng.normal(size=(6, 6))
        ests = [to.spectral_norm(m, iters=i) for i in (1, 2, 4, 8, 16, 64)]
        assert all(b >= a - 1e-15 for a, b in zip(ests, ests[1:]))

    def test_at_most_frobenius(self):
        rng = np.random.default_rng(11)
        m = rng.normal(size=(5, 7))
        assert to.spectral_norm(m, iters=256) <= to.frobenius_norm(m) + 1e-12

    def test_dominates_sampled_rayleigh_quotients(self):
        rng = np.random.default_rng(12)
        m = rng.normal(size=(6, 6))
        sn = to.spectral_norm(m, iters=512)
        for _ in range(200):
            x = rng.normal(size=6)
            x /= np.linalg.norm(x)
            assert sn >= np.linalg.norm(x @ m) - 1e-6

    def test_iters_validated(self):
        with pytest.raises(ValueError):
            to.spectral_norm(np.eye(2), iters=0)


class TestAttentionKernel:
    def test_causal_batch_bit_equal_to_stepwise(self):
        rng = np.random.default_rng(13)
        n, d, h = 9, 8, 2
        qs = rng.normal(size=(n, d))
        ks = rng.normal(size=(n, d))
        vs = rng.normal(size=(n, d))
        full_out, full_scores = to.attention_context_causal(qs, ks, vs, h)
        for r in range(n):
            out, scores = to.attention_context(qs[r], ks[: r + 1], vs[: r + 1], h)
            assert np.array_equal(out, full_out[r])
            assert np.array_equal(scores, full_scores[:, r, : r + 1])

    def test_single_position_returns_value(self):
        rng = np.random.default_rng(14)
        d, h = 8, 2
        q = rng.normal(size=d)
        k = rng.normal(size=(1, d))
        v = rng.normal(size=(1, d))
        out, _ = to.attention_context(q, k, v, h)
        assert np.array_equal(out, v[0])

    def test_zero_query_uniform_attention(self):
        rng = np.random.default_rng(15)
        d, h = 4, 1
        v = rng.normal(size=(3, d))
        out, _ = to.attention_context(np.zeros(d), np.zeros((3, d)), v, h)
        assert np.allclose(out, v.mean(axis=0), atol=1e-15)

    def test_head_scores_match_kernel_rows(self):
        rng = np.random.default_rng(16)
        d, h = 8, 2
        q = rng.normal(size=d)
        ks = rng.normal(size=(4, d))
        vs = rng.normal(size=(4, d))
        _, scores = to.attention_context(q, ks, vs, h)
        for p in range(4):
            assert np.array_equal(to.head_scores(q, ks[p], h), scores[:, p])


class TestGatedMlp:
    def _weights(self, d, f, seed):
        rng = np.random.default_rng(seed)
        return rng.normal(size=(d, 2 * f)), rng.normal(size=(f, d))

    def test_zero_input(self):
        wgu, wd = self._weights(4, 8, 17)
        assert np.array_equal(to.gated_mlp(np.zeros(4), wgu, wd), np.zeros(4))

    def test_zero_down_projection(self):
        rng = np.random.default_rng(18)
        wgu, _ = self._weights(4, 8, 18)
        z = rng.normal(size=4)
        assert np.array_equal(to.gated_mlp(z, wgu, np.zeros((8, 4))), np.zeros(4))

    def test_scalar_loop_oracle(self):
        d, f = 4, 8
        rng = np.random.default_rng(19)
        z = rng.normal(size=d)
        wgu, wd = self._weights(d, f, 20)
        gate, up = wgu[:, :f], wgu[:, f:]
        act = []
        for j in range(f):
            g = sum(z[k] * gate[k][j] for k in range(d))
            u = sum(z[k] * up[k][j] for k in range(d))
            act.append((g / (1.0 + math.exp(-g))) * u)
        expected = [sum(act[k] * wd[k][j] for k in range(f)) for j in range(d)]
        assert np.max(np.abs(to.gated_mlp(z, wgu, wd) - np.array(expected))) <= 1e-12

    def test_batch_matches_single(self):
        d, f = 6, 10
        rng = np.random.default_rng(21)
        xs = rng.normal(size=(5, d))
        wgu, wd = self._weights(d, f, 22)
        batched = to.gated_mlp_batch(xs, wgu, wd)
        for r in range(5):
            assert np.array_equal(batched[r], to.gated_mlp(xs[r], wgu, wd))


class TestFlopSink:
    def test_counts_flow_to_sink(self):
        seen = []
        to.set_flop_sink(seen.append)
        try:
            to.matmul(np.zeros((2, 3)), np.zeros((3, 4)))
            to.vec_mat(np.zeros(3), np.zeros((3, 4)))
            to.softmax_row(np.zeros(5))
            to.gated_mlp(np.zeros(4), np.zeros((4, 12)), np.zeros((6, 4)))
        finally:
            to.set_flop_sink(None)
        assert seen == [2 * 2 * 3 * 4, 2 * 3 * 4, 4 * 5, 6 * 4 * 6]

    def test_attention_count(self):
        seen = []
        to.set_flop_sink(seen.append)
        try:
            d, h, ctx = 8, 2, 5
            to.attention_context(np.zeros(d), np.zeros((ctx, d)), np.zeros((ctx, d)), h)
        finally:
            to.set_flop_sink(None)
        assert seen == [4 * 8 * 5 + 4 * 2 * 5]
