import numpy as np
import pytest

from rgnn import tensor as T
from rgnn.refine import (
    RefinementParams,
    apply_refinement,
    context_vectors,
    identity_projection,
    pairwise_attention,
    refine_weight_vector,
)
from rgnn.rng import SplitMix64
from rgnn.tensor import Parameter, Tensor, finite_diff_check


def make_params(rng, c, d_a, d_out):
    return RefinementParams(
        w_query=Tensor(rng.fill_uniform(c * d_a, -1, 1).reshape(c, d_a)),
        w_key=Tensor(rng.fill_uniform(c * d_a, -1, 1).reshape(c, d_a)),
        b_align=Tensor(rng.fill_uniform(d_a, -0.5, 0.5)),
        w_pair=Tensor(rng.fill_uniform(d_a, -1, 1).reshape(d_a, 1)),
        b_pair=Tensor(rng.fill_uniform(1, -0.5, 0.5)),
        w_score=Tensor(rng.fill_uniform(c, -1, 1).reshape(c, 1)),
        b_score=Tensor(rng.fill_uniform(1, -0.5, 0.5)),
        projection=Tensor(rng.fill_uniform(c * d_out, -1, 1).reshape(c, d_out)),
    )


def attention_oracle(feats, p):
    """Four nested loops over (r, r', site, channel), straight off the math."""
    r_n, sp, _ = feats.shape
    wq, wk = p.w_query.data, p.w_key.data
    logits = np.zeros((r_n, r_n))
    for r in range(r_n):
        for rp in range(r_n):
            acc = 0.0
            for s in range(sp):
                aligned = np.tanh(feats[r, s] @ wq + feats[rp, s] @ wk + p.b_align.data)
                acc += float(aligned @ p.w_pair.data[:, 0]) + float(p.b_pair.data[0])
            logits[r, rp] = acc / sp
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def weight_vector_oracle(vectors, p):
    peaks = vectors.max(axis=1)  # spatial max pool, (R, C)
    logits = peaks @ p.w_score.data[:, 0] + p.b_score.data[0]
    e = np.exp(logits - logits.max())
    w = e / e.sum()
    agg = (peaks * w[:, None]).sum(axis=0)
    gate = 1.0 / (1.0 + np.exp(-(agg @ p.projection.data)))
    return gate, w


class TestPairwiseAttention:
    def test_identical_regions_uniform_rows(self):
        rng = SplitMix64(1)
        p = make_params(rng, c=3, d_a=2, d_out=3)
        one = rng.fill_uniform(4 * 3, -1, 1).reshape(4, 3)
        feats = np.tile(one, (5, 1, 1))
        attn = pairwise_attention(Tensor(feats), p)
        np.testing.assert_allclose(attn.data, np.full((5, 5), 0.2), atol=1e-12)

    def test_single_region(self):
        rng = SplitMix64(2)
        p = make_params(rng, 3, 2, 3)
        attn = pairwise_attention(Tensor(rng.fill_uniform(6, -1, 1).reshape(1, 2, 3)), p)
        np.testing.assert_array_equal(attn.data, [[1.0]])

    def test_random_vs_four_loop_oracle(self):
        rng = SplitMix64(3)
        p = make_params(rng, 3, 2, 3)
        feats = rng.fill_uniform(3 * 4 * 3, -1, 1).reshape(3, 4, 3)
        attn = pairwise_attention(Tensor(feats), p)
        np.testing.assert_allclose(attn.data, attention_oracle(feats, p), atol=1e-12)
        np.testing.assert_allclose(attn.data.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(attn.data > 0)

    def test_batched_matches_per_image(self):
        rng = SplitMix64(4)
        p = make_params(rng, 2, 2, 2)
        feats = rng.fill_uniform(2 * 3 * 4 * 2, -1, 1).reshape(2, 3, 4, 2)
        batched = pairwise_attention(Tensor(feats), p).data
        for n in range(2):
            single = pairwise_attention(Tensor(feats[n]), p).data
            np.testing.assert_allclose(batched[n], single, atol=1e-14)

    def test_pair_bias_no_op_on_distribution(self):
        rng = SplitMix64(5)
        p = make_params(rng, 3, 2, 3)
        shifted = RefinementParams(
            p.w_query, p.w_key, p.b_align, p.w_pair,
            Tensor(p.b_pair.data + 42.0), p.w_score, p.b_score, p.projection)
        feats = rng.fill_uniform(3 * 4 * 3, -1, 1).reshape(3, 4, 3)
        a = pairwise_attention(Tensor(feats), p).data
        b = pairwise_attention(Tensor(feats), shifted).data
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestContextVectors:
    def test_one_hot_self_attention_is_identity(self):
        rng = SplitMix64(6)
        feats = rng.fill_uniform(3 * 2 * 2, -1, 1).reshape(3, 2, 2)
        out = context_vectors(Tensor(feats), Tensor(np.eye(3)))
        np.testing.assert_allclose(out.data, feats, atol=1e-15)

    def test_uniform_attention_is_mean(self):
        rng = SplitMix64(7)
        feats = rng.fill_uniform(4 * 2 * 3, -1, 1).reshape(4, 2, 3)
        out = context_vectors(Tensor(feats), Tensor(np.full((4, 4), 0.25)))
        mean = feats.mean(axis=0)
        for r in range(4):
            np.testing.assert_allclose(out.data[r], mean, atol=1e-14)

    def test_convex_combination_bounds(self):
        rng = SplitMix64(8)
        feats = rng.fill_uniform(3 * 4 * 2, -5, 5).reshape(3, 4, 2)
        p = make_params(rng, 2, 2, 2)
        attn = pairwise_attention(Tensor(feats), p)
        out = context_vectors(Tensor(feats), attn).data
        lo = feats.min(axis=0) - 1e-12
        hi = feats.max(axis=0) + 1e-12
        for r in range(3):
            assert np.all(out[r] >= lo) and np.all(out[r] <= hi)


class TestRefineWeightVector:
    def test_single_region(self):
        rng = SplitMix64(9)
        p = make_params(rng, 3, 2, 4)
        vecs = rng.fill_uniform(2 * 3, -1, 1).reshape(1, 2, 3)
        gate, w = refine_weight_vector(Tensor(vecs), p)
        np.testing.assert_array_equal(w.data, [1.0])
        expect, _ = weight_vector_oracle(vecs, p)
        np.testing.assert_allclose(gate.data, expect, atol=1e-12)

    def test_equal_vectors_ignore_scores(self):
        rng = SplitMix64(10)
        p = make_params(rng, 3, 2, 4)
        one = rng.fill_uniform(2 * 3, -1, 1).reshape(2, 3)
        vecs = np.tile(one, (5, 1, 1))
        gate, _ = refine_weight_vector(Tensor(vecs), p)
        peak = one.max(axis=0)
        expect = 1.0 / (1.0 + np.exp(-(peak @ p.projection.data)))
        np.testing.assert_allclose(gate.data, expect, atol=1e-12)

    def test_random_vs_oracle(self):
        rng = SplitMix64(11)
        p = make_params(rng, 3, 2, 4)
        vecs = rng.fill_uniform(3 * 5 * 3, -2, 2).reshape(3, 5, 3)
        gate, w = refine_weight_vector(Tensor(vecs), p)
        expect_gate, expect_w = weight_vector_oracle(vecs, p)
        np.testing.assert_allclose(w.data, expect_w, atol=1e-12)
        np.testing.assert_allclose(gate.data, expect_gate, atol=1e-12)
        assert abs(w.data.sum() - 1.0) <= 1e-12
        assert np.all(gate.data > 0) and np.all(gate.data < 1)

    def test_uniform_weights_ablation(self):
        rng = SplitMix64(12)
        p = make_params(rng, 3, 2, 4)
        vecs = rng.fill_uniform(4 * 5 * 3, -2, 2).reshape(4, 5, 3)
        gate, w = refine_weight_vector(Tensor(vecs), p, uniform_weights=True)
        np.testing.assert_array_equal(w.data, np.full(4, 0.25))
        peaks = vecs.max(axis=1)
        agg = peaks.mean(axis=0)
        expect = 1.0 / (1.0 + np.exp(-(agg @ p.projection.data)))
        np.testing.assert_allclose(gate.data, expect, atol=1e-12)


class TestApplyRefinement:
    def test_half_gate_scales_by_three_halves(self):
        f = Tensor(np.array([2.0, -4.0, 1.0]))
        out = apply_refinement(f, Tensor(np.full(3, 0.5)))
        np.testing.assert_allclose(out.data, 1.5 * f.data, atol=1e-15)

    def test_zero_descriptor_stays_zero(self):
        out = apply_refinement(Tensor(np.zeros(4)), Tensor(np.full(4, 0.7)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_gate_range_bound(self):
        rng = SplitMix64(13)
        f = np.abs(rng.fill_uniform(6, 0.1, 2.0))
        gate = rng.fill_uniform(6, 0.01, 0.99)
        out = apply_refinement(Tensor(f), Tensor(gate)).data
        assert np.all(out > f) and np.all(out < 2 * f)

    def test_dimension_mismatch(self):
        with pytest.raises(T.ShapeError):
            apply_refinement(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_linear_in_descriptor(self):
        rng = SplitMix64(14)
        gate = Tensor(rng.fill_uniform(5, 0, 1))
        f1 = rng.fill_uniform(5, -1, 1)
        f2 = rng.fill_uniform(5, -1, 1)
        lhs = apply_refinement(Tensor(f1 + 2 * f2), gate).data
        rhs = (apply_refinement(Tensor(f1), gate).data
               + 2 * apply_refinement(Tensor(f2), gate).data)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_monotone_in_gate(self):
        f = Tensor(np.full(4, 2.0))
        low = apply_refinement(f, Tensor(np.full(4, 0.2))).data
        high = apply_refinement(f, Tensor(np.full(4, 0.8))).data
        assert np.all(high > low)


class TestChainProperties:
    def test_permutation_equivariance(self):
        rng = SplitMix64(15)
        p = make_params(rng, 3, 2, 4)
        feats = rng.fill_uniform(5 * 4 * 3, -1, 1).reshape(5, 4, 3)
        perm = [2, 0, 4, 1, 3]
        attn = pairwise_attention(Tensor(feats), p).data
        attn_p = pairwise_attention(Tensor(feats[perm]), p).data
        np.testing.assert_allclose(attn_p, attn[np.ix_(perm, perm)], atol=1e-12)
        gate, w = refine_weight_vector(
            context_vectors(Tensor(feats), Tensor(attn)), p)
        gate_p, w_p = refine_weight_vector(
            context_vectors(Tensor(feats[perm]), Tensor(attn_p)), p)
        np.testing.assert_allclose(w_p.data, w.data[perm], atol=1e-12)
        np.testing.assert_allclose(gate_p.data, gate.data, atol=1e-12)

    def test_full_chain_finite_diff(self):
        rng = SplitMix64(16)
        c, d_a, d_out = 2, 2, 3
        names = {
            "w_query": (c, d_a), "w_key": (c, d_a), "b_align": (d_a,),
            "w_pair": (d_a, 1), "b_pair": (1,), "w_score": (c, 1),
            "b_score": (1,), "projection": (c, d_out),
        }
        params = {k: Parameter(k, rng.fill_uniform(int(np.prod(s)), -1, 1).reshape(s))
                  for k, s in names.items()}
        feats = Tensor(rng.fill_uniform(3 * 4 * c, -1, 1).reshape(3, 4, c))
        f_t = Parameter("f_t", rng.fill_uniform(d_out, -1, 1))

        def f():
            rp = RefinementParams(**{k: p.value for k, p in params.items()})
            attn = pairwise_attention(feats, rp)
            gate, _ = refine_weight_vector(context_vectors(feats, attn), rp)
            refined = apply_refinement(f_t.value, gate)
            return T.reduce_sum(T.mul(refined, refined))

        report = finite_diff_check(f, list(params.values()) + [f_t])
        assert report.passed, str(report)
