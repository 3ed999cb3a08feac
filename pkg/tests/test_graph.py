import numpy as np
import pytest

from rgnn import tensor as T
from rgnn.graph import (
    GnnLayerParams,
    PropagationConfig,
    ReadoutParams,
    RegionGraph,
    alt_readout,
    appnp_propagate,
    build_adjacency,
    fixed_point,
    gated_readout,
    gcn_layer,
    iou,
    power_iterate,
)
from rgnn.regions import Region
from rgnn.rng import SplitMix64
from rgnn.tensor import Parameter, Tensor, finite_diff_check


def random_graph(rng, n_nodes, p=0.4) -> RegionGraph:
    a = np.zeros((n_nodes, n_nodes))
    for i in range(n_nodes):
        for j in range(i + 1, n_nodes):
            if rng.next_float() < p:
                a[i, j] = a[j, i] = 1.0
    return RegionGraph(a)


class TestAdjacency:
    def test_full_three_nodes(self):
        regs = [Region(i, 0, 0, 4, 4) for i in range(3)]
        g = build_adjacency(regs, "full")
        np.testing.assert_allclose(g.a_hat, np.full((3, 3), 1 / 3), atol=1e-15)

    def test_single_node(self):
        g = build_adjacency([Region(0, 0, 0, 4, 4)], "full")
        np.testing.assert_array_equal(g.a_hat, [[1.0]])

    def test_overlap_tiles_and_full_image(self):
        tiles = [Region(0, 0, 0, 8, 16), Region(1, 8, 0, 16, 16)]
        full = Region(2, 0, 0, 16, 16)
        assert iou(tiles[0], tiles[1]) == 0.0
        assert iou(tiles[0], full) == 0.5
        g = build_adjacency(tiles + [full], "overlap", iou_thresh=0.1)
        expected = np.array([[0, 0, 1], [0, 0, 1], [1, 1, 0]], dtype=float)
        np.testing.assert_array_equal(g.adjacency, expected)

    def test_isolated_node_keeps_unit_degree(self):
        far = [Region(0, 0, 0, 2, 2), Region(1, 10, 10, 12, 12)]
        g = build_adjacency(far, "overlap", iou_thresh=0.5)
        assert g.degrees.min() == 1.0

    def test_asymmetric_rejected(self):
        a = np.zeros((2, 2))
        a[0, 1] = 1.0
        with pytest.raises(ValueError, match="symmetric"):
            RegionGraph(a)

    def test_nonzero_diagonal_rejected(self):
        with pytest.raises(ValueError, match="diagonal"):
            RegionGraph(np.eye(2))

    def test_spectral_norm_bound(self):
        rng = SplitMix64(1)
        for trial in range(10):
            g = random_graph(rng, 3 + rng.randint(10))
            assert g.spectral_norm() <= 1.0 + 1e-9


def single_layer(weight, activation="sigmoid"):
    d = weight.shape[1]
    return [GnnLayerParams(Tensor(weight), Tensor(np.zeros(d)), activation)]


class TestPropagation:
    H = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])

    def full3(self):
        return build_adjacency([Region(i, 0, 0, 4, 4) for i in range(3)], "full")

    def test_alpha_one_disables_propagation(self):
        g = self.full3()
        x = Tensor(self.H[:, None, :])  # (R, sp=1, C=2)
        out = appnp_propagate(x, single_layer(np.eye(2)), PropagationConfig(1.0, 5), g)
        expected = T.sigmoid(Tensor(self.H)).data
        np.testing.assert_array_equal(out.data, expected)

    def test_hand_case_pre_sigmoid(self):
        g = self.full3()
        pre = power_iterate(Tensor(self.H), g.a_hat_tensor, 0.3, 1)
        # dense oracle: 0.7 * (ones/3) @ H + 0.3 * H
        oracle = 0.7 * (np.full((3, 3), 1 / 3) @ self.H) + 0.3 * self.H
        np.testing.assert_allclose(pre.data, oracle, atol=1e-15)
        np.testing.assert_allclose(pre.data[0], [0.5333, 0.2333], atol=5e-5)

    def test_k1_unrolls_to_single_step(self):
        g = self.full3()
        x = Tensor(self.H[:, None, :])
        out = appnp_propagate(x, single_layer(np.eye(2)), PropagationConfig(0.3, 1), g)
        manual = 0.7 * g.a_hat @ self.H + 0.3 * self.H
        np.testing.assert_allclose(out.data, T.sigmoid(Tensor(manual)).data, atol=1e-15)

    def test_fixed_point_alpha_one(self):
        h = np.arange(6.0).reshape(3, 2)
        np.testing.assert_allclose(fixed_point(h, np.full((3, 3), 1 / 3), 1.0), h, atol=1e-12)

    def test_fixed_point_closed_form(self):
        # for A_hat = J/3: (I - cJ)^-1 = I + cJ/(1-3c) with c = 0.7/3
        c = 0.7 / 3.0
        j = np.ones((3, 3))
        inv = np.eye(3) + c * j / (1 - 3 * c)
        y = fixed_point(self.H, j / 3.0, 0.3)
        np.testing.assert_allclose(y, 0.3 * inv @ self.H, atol=1e-12)
        np.testing.assert_allclose(y[0], [0.53333333, 0.23333333], atol=1e-8)

    def test_power_iteration_converges_to_fixed_point(self):
        rng = SplitMix64(2)
        for trial in range(5):
            g = random_graph(rng, 10)
            h = rng.fill_uniform(10 * 4, -1, 1).reshape(10, 4)
            y_star = fixed_point(h, g.a_hat, 0.3)
            y_pow = power_iterate(Tensor(h), g.a_hat_tensor, 0.3, 50)
            assert np.max(np.abs(y_pow.data - y_star)) <= 1e-6

    def test_convergence_rate_bound(self):
        rng = SplitMix64(3)
        g = random_graph(rng, 10)
        h = rng.fill_uniform(10 * 3, -1, 1).reshape(10, 3)
        alpha = 0.3
        y_star = fixed_point(h, g.a_hat, alpha)
        norm = g.spectral_norm()
        err0 = np.max(np.abs(h - y_star))
        for k in (5, 10, 20):
            yk = power_iterate(Tensor(h), g.a_hat_tensor, alpha, k)
            bound = ((1 - alpha) * norm) ** k * err0
            assert np.max(np.abs(yk.data - y_star)) <= bound + 1e-12

    def test_two_layer_batched_matches_per_image(self):
        rng = SplitMix64(4)
        g = random_graph(rng, 5)
        layers = [
            GnnLayerParams(Tensor(rng.fill_uniform(12, -1, 1).reshape(3, 4)),
                           Tensor(rng.fill_uniform(4, -0.1, 0.1)), "relu"),
            GnnLayerParams(Tensor(rng.fill_uniform(16, -1, 1).reshape(4, 4)),
                           Tensor(rng.fill_uniform(4, -0.1, 0.1)), "sigmoid"),
        ]
        cfg = PropagationConfig(0.3, 2)
        x = rng.fill_uniform(2 * 5 * 6 * 3, -1, 1).reshape(2, 5, 6, 3)
        batched = appnp_propagate(Tensor(x), layers, cfg, g).data
        for n in range(2):
            single = appnp_propagate(Tensor(x[n]), layers, cfg, g).data
            np.testing.assert_allclose(batched[n], single, atol=1e-12)

    def test_permutation_equivariance(self):
        rng = SplitMix64(5)
        g = random_graph(rng, 6)
        perm = list(range(6))
        rng.shuffle(perm)
        x = rng.fill_uniform(6 * 4 * 3, -1, 1).reshape(6, 4, 3)
        layers = single_layer(rng.fill_uniform(6, -1, 1).reshape(3, 2))
        cfg = PropagationConfig(0.3, 3)
        out = appnp_propagate(Tensor(x), layers, cfg, g).data
        gp = RegionGraph(g.adjacency[np.ix_(perm, perm)])
        out_p = appnp_propagate(Tensor(x[perm]), layers, cfg, gp).data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


class TestGcnLayer:
    def test_identity_graph_is_relu(self):
        h = np.array([[1.0, -2.0], [3.0, -4.0]])
        out = gcn_layer(Tensor(h), Tensor(np.eye(2)), Tensor(np.eye(2)))
        np.testing.assert_array_equal(out.data, np.maximum(h, 0))

    def test_zero_weight(self):
        out = gcn_layer(Tensor(np.ones((3, 2))), Tensor(np.ones((3, 3)) / 3), Tensor(np.zeros((2, 2))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_random_vs_triple_loop(self):
        rng = SplitMix64(6)
        g = random_graph(rng, 4)
        h = rng.fill_uniform(4 * 3, -1, 1).reshape(4, 3)
        w = rng.fill_uniform(3 * 2, -1, 1).reshape(3, 2)
        out = gcn_layer(Tensor(h), g.a_hat_tensor, Tensor(w)).data
        oracle = np.zeros((4, 2))
        for i in range(4):
            for j in range(2):
                acc = 0.0
                for k in range(4):
                    for l in range(3):
                        acc += g.a_hat[i, k] * h[k, l] * w[l, j]
                oracle[i, j] = max(acc, 0.0)
        np.testing.assert_allclose(out, oracle, atol=1e-12)


def readout_oracle(y, w1, b1, w2, b2):
    """Per-node python loop for the gated sum."""
    d = y.shape[1]
    total = np.zeros(d)
    for i in range(y.shape[0]):
        gate = 1.0 / (1.0 + np.exp(-(y[i] @ w1 + b1)))
        total += gate * (y[i] @ w2 + b2)
    return total


class TestGatedReadout:
    def test_single_node_half_gate(self):
        d = 4
        y = np.arange(1.0, 5.0).reshape(1, d)
        params = ReadoutParams(Tensor(np.zeros((d, d))), Tensor(np.zeros(d)),
                               Tensor(np.eye(d)), Tensor(np.zeros(d)))
        out = gated_readout(Tensor(y), params)
        np.testing.assert_allclose(out.data, 0.5 * y[0], atol=1e-15)

    def test_saturated_gate_sums_values(self):
        rng = SplitMix64(7)
        y = rng.fill_uniform(3 * 4, -1, 1).reshape(3, 4)
        w2 = rng.fill_uniform(16, -1, 1).reshape(4, 4)
        b2 = rng.fill_uniform(4, -1, 1)
        params = ReadoutParams(Tensor(np.zeros((4, 4))), Tensor(np.full(4, 20.0)),
                               Tensor(w2), Tensor(b2))
        out = gated_readout(Tensor(y), params)
        expected = (y @ w2 + b2).sum(axis=0)
        np.testing.assert_allclose(out.data, expected, atol=1e-8)

    def test_random_vs_loop_oracle(self):
        rng = SplitMix64(8)
        y = rng.fill_uniform(3 * 4, -2, 2).reshape(3, 4)
        w1 = rng.fill_uniform(16, -1, 1).reshape(4, 4)
        b1 = rng.fill_uniform(4, -1, 1)
        w2 = rng.fill_uniform(16, -1, 1).reshape(4, 4)
        b2 = rng.fill_uniform(4, -1, 1)
        params = ReadoutParams(Tensor(w1), Tensor(b1), Tensor(w2), Tensor(b2))
        out = gated_readout(Tensor(y), params)
        np.testing.assert_allclose(out.data, readout_oracle(y, w1, b1, w2, b2), atol=1e-12)

    def test_permutation_invariance(self):
        rng = SplitMix64(9)
        y = rng.fill_uniform(5 * 3, -1, 1).reshape(5, 3)
        w = rng.fill_uniform(9, -1, 1).reshape(3, 3)
        params = ReadoutParams(Tensor(w), Tensor(np.zeros(3)), Tensor(w.T), Tensor(np.ones(3)))
        perm = [3, 0, 4, 1, 2]
        a = gated_readout(Tensor(y), params).data
        b = gated_readout(Tensor(y[perm]), params).data
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestAltReadout:
    def test_gsum_single_node(self):
        y = np.array([[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(alt_readout("gsum", Tensor(y)).data, y[0])

    def test_gap_identical_nodes(self):
        y = np.tile([2.0, -1.0], (4, 1))
        np.testing.assert_allclose(alt_readout("gap", Tensor(y)).data, [2.0, -1.0], atol=1e-15)

    def test_gmp(self):
        y = np.array([[1.0, 0.0], [0.0, 2.0]])
        np.testing.assert_array_equal(alt_readout("gmp", Tensor(y)).data, [1.0, 2.0])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            alt_readout("sort", Tensor(np.ones((2, 2))))


class TestGradients:
    def test_appnp_plus_readout_finite_diff(self):
        rng = SplitMix64(10)
        g = random_graph(rng, 4)
        x = Tensor(rng.fill_uniform(4 * 3 * 2, -1, 1).reshape(4, 3, 2))
        w_l1 = Parameter("w_l1", rng.fill_uniform(2 * 3, -1, 1).reshape(2, 3))
        b_l1 = Parameter("b_l1", np.zeros(3))
        w_l2 = Parameter("w_l2", rng.fill_uniform(9, -1, 1).reshape(3, 3))
        b_l2 = Parameter("b_l2", np.zeros(3))
        w1 = Parameter("w1", rng.fill_uniform(9, -1, 1).reshape(3, 3))
        b1 = Parameter("b1", np.zeros(3))
        w2 = Parameter("w2", rng.fill_uniform(9, -1, 1).reshape(3, 3))
        b2 = Parameter("b2", np.zeros(3))
        params = [w_l1, b_l1, w_l2, b_l2, w1, b1, w2, b2]

        def f():
            layers = [
                GnnLayerParams(w_l1.value, b_l1.value, "relu"),
                GnnLayerParams(w_l2.value, b_l2.value, "sigmoid"),
            ]
            y = appnp_propagate(x, layers, PropagationConfig(0.3, 2), g)
            ft = gated_readout(y, ReadoutParams(w1.value, b1.value, w2.value, b2.value))
            return T.reduce_sum(T.mul(ft, ft))

        report = finite_diff_check(f, params)
        assert report.passed, str(report)
