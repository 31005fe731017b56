import math

import numpy as np
import pytest

from multihop import nn
from multihop.graph import WeightedGraph, scaled_laplacian, sym_renormalize

from conftest import random_graph


def xent(logits: nn.Tensor2, labels, mask=None):
    if mask is None:
        mask = np.ones(logits.rows, dtype=bool)
    return nn.masked_softmax_xent(logits, np.asarray(labels), mask)


class TestGcnLayer:
    def test_identity_composition(self):
        prop = sym_renormalize(WeightedGraph(3))  # identity
        h = nn.Tensor2(np.arange(6.0).reshape(3, 2))
        out = nn.gcn_layer_forward(prop, h, nn.Tensor2(np.eye(2)))
        np.testing.assert_array_equal(out.values, h.values)

    def test_two_node_hand_value(self):
        prop = sym_renormalize(WeightedGraph.from_edges(2, [(0, 1, 1.0)]))
        out = nn.gcn_layer_forward(prop, nn.Tensor2(np.eye(2)), nn.Tensor2(np.eye(2)))
        np.testing.assert_allclose(out.values, [[0.5, 0.5], [0.5, 0.5]])

    def test_matches_dense_matmul_chain(self, rng):
        g = random_graph(rng, 7, 0.5)
        prop = sym_renormalize(g)
        h = rng.standard_normal((7, 5))
        th = rng.standard_normal((5, 3))
        out = nn.gcn_layer_forward(prop, nn.Tensor2(h), nn.Tensor2(th))
        np.testing.assert_allclose(out.values, prop.toarray() @ h @ th, atol=1e-12)

    def test_shape_mismatch_rejected(self, rng):
        prop = sym_renormalize(random_graph(rng, 4, 0.5))
        with pytest.raises(nn.ShapeError):
            nn.gcn_layer_forward(prop, nn.Tensor2(np.zeros((4, 3))), nn.Tensor2(np.zeros((2, 2))))


class TestChebLayer:
    def test_zero_laplacian_collapses_to_first_term(self, rng):
        lap = scaled_laplacian(WeightedGraph(4), 2.0)  # -I, so build a true zero by hand
        import scipy.sparse as sp

        from multihop.graph import PropagationMatrix

        zero = PropagationMatrix(4, sp.csr_matrix((4, 4)), kind="scaled-laplacian")
        h = nn.Tensor2(rng.standard_normal((4, 3)))
        ths = [nn.Tensor2(rng.standard_normal((3, 2))) for _ in range(4)]
        out = nn.cheb_layer_forward(zero, h, ths)
        # T0 h = h, T1 h = 0, T2 h = -h, T3 h = 0
        expected = h.values @ ths[0].values - h.values @ ths[2].values
        np.testing.assert_allclose(out.values, expected, atol=1e-12)

    def test_k1_on_minus_identity(self, rng):
        lap = scaled_laplacian(WeightedGraph(3), 2.0)  # exactly -I
        h = nn.Tensor2(rng.standard_normal((3, 2)))
        t0 = nn.Tensor2(rng.standard_normal((2, 2)))
        t1 = nn.Tensor2(rng.standard_normal((2, 2)))
        out = nn.cheb_layer_forward(lap, h, [t0, t1])
        np.testing.assert_allclose(out.values, h.values @ t0.values - h.values @ t1.values, atol=1e-12)

    def test_matches_dense_polynomial_oracle(self, rng):
        g = random_graph(rng, 6, 0.5)
        lap = scaled_laplacian(g, 1.8)
        dense = lap.toarray()
        # explicit T_k matrices
        t_mats = [np.eye(6), dense]
        for _ in range(2):
            t_mats.append(2 * dense @ t_mats[-1] - t_mats[-2])
        h = rng.standard_normal((6, 4))
        ths = [rng.standard_normal((4, 3)) for _ in range(4)]
        expected = sum(t @ h @ th for t, th in zip(t_mats, ths))
        out = nn.cheb_layer_forward(lap, nn.Tensor2(h), [nn.Tensor2(t) for t in ths])
        np.testing.assert_allclose(out.values, expected, atol=1e-10)

    def test_k_below_one_rejected(self, rng):
        lap = scaled_laplacian(random_graph(rng, 3, 0.9), 2.0)
        with pytest.raises(nn.ShapeError):
            nn.cheb_layer_forward(lap, nn.Tensor2(np.zeros((3, 2))), [nn.Tensor2(np.zeros((2, 2)))])


class TestAwc:
    def test_hand_example(self):
        h1 = nn.Tensor2(np.array([[1.0, 0.0]]))
        h2 = nn.Tensor2(np.array([[0.0, 1.0]]))
        params = nn.AwcParams(nn.Tensor2(np.array([[1.0], [0.0]])))
        fused, weights = nn.awc_forward([h1, h2], params)
        w1 = math.exp(math.tanh(1.0)) / (math.exp(math.tanh(1.0)) + 1.0)
        np.testing.assert_allclose(weights.values, [[w1, 1 - w1]], atol=1e-12)
        np.testing.assert_allclose(fused.values, [[w1, 1 - w1]], atol=1e-12)

    def test_identical_branches_uniform(self, rng):
        h = nn.Tensor2(rng.standard_normal((5, 3)))
        params = nn.AwcParams(nn.Tensor2(rng.standard_normal((3, 1))))
        fused, weights = nn.awc_forward([h, h, h], params)
        np.testing.assert_allclose(weights.values, 1 / 3, atol=1e-12)
        np.testing.assert_allclose(fused.values, h.values, atol=1e-12)

    def test_zero_alpha_uniform(self, rng):
        outs = [nn.Tensor2(rng.standard_normal((4, 3))) for _ in range(3)]
        params = nn.AwcParams(nn.Tensor2(np.zeros((3, 1))))
        _, weights = nn.awc_forward(outs, params)
        np.testing.assert_allclose(weights.values, 1 / 3, atol=1e-12)

    def test_rows_sum_to_one_single_and_double(self, rng):
        for dtype, tol in ((np.float32, 1e-6), (np.float64, 1e-12)):
            outs = [
                nn.Tensor2(rng.standard_normal((20, 4)).astype(dtype) * 3) for _ in range(4)
            ]
            params = nn.AwcParams(nn.Tensor2(rng.standard_normal((4, 1)).astype(dtype)))
            _, weights = nn.awc_forward(outs, params)
            np.testing.assert_allclose(weights.values.sum(axis=1), 1.0, atol=tol)

    def test_single_branch_is_identity(self, rng):
        h = nn.Tensor2(rng.standard_normal((6, 3)))
        fused, weights = nn.awc_forward([h], nn.AwcParams(nn.Tensor2(rng.standard_normal((3, 1)))))
        np.testing.assert_array_equal(fused.values, h.values)
        np.testing.assert_allclose(weights.values, 1.0)

    def test_branch_permutation_equivariance(self, rng):
        outs = [nn.Tensor2(rng.standard_normal((5, 3))) for _ in range(3)]
        params = nn.AwcParams(nn.Tensor2(rng.standard_normal((3, 1))))
        fused_a, w_a = nn.awc_forward(outs, params)
        fused_b, w_b = nn.awc_forward(outs[::-1], params)
        np.testing.assert_allclose(fused_a.values, fused_b.values, atol=1e-12)
        np.testing.assert_allclose(w_a.values, w_b.values[:, ::-1], atol=1e-12)

    def test_empty_branch_list_rejected(self):
        with pytest.raises(nn.ShapeError):
            nn.awc_forward([], nn.AwcParams(nn.Tensor2(np.zeros((2, 1)))))


class TestActivationsDropoutLoss:
    def test_elu_values(self):
        out = nn.elu(nn.Tensor2(np.array([[-745.0, 0.0, 2.0]])))
        np.testing.assert_allclose(out.values, [[-1.0, 0.0, 2.0]], atol=1e-12)

    def test_dropout_rate_zero_identity(self, rng):
        t = nn.Tensor2(rng.standard_normal((4, 4)))
        assert nn.dropout(t, 0.0, rng, training=True) is t

    def test_dropout_eval_mode_bitwise_identity(self, rng):
        t = nn.Tensor2(rng.standard_normal((4, 4)))
        assert nn.dropout(t, 0.5, rng, training=False) is t

    def test_dropout_rate_one_rejected(self, rng):
        with pytest.raises(ValueError):
            nn.dropout(nn.Tensor2(np.zeros((2, 2))), 1.0, rng, training=True)

    def test_dropout_expectation(self, rng):
        x = np.full((5, 4), 2.0)
        t = nn.Tensor2(x)
        draws = 10_000
        acc = np.zeros_like(x)
        for _ in range(draws):
            acc += nn.dropout(t, 0.5, rng, training=True).values
        mean = acc / draws
        sigma = 2.0 * math.sqrt(0.5 / 0.5 / draws)  # per-entry std of the mean
        assert np.abs(mean - x).max() < 3 * sigma

    def test_sparse_dropout_expectation(self, rng):
        import scipy.sparse as sp

        x = sp.random(6, 6, density=0.5, random_state=1, format="csr")
        acc = np.zeros((6, 6))
        draws = 4000
        for _ in range(draws):
            acc += nn.dropout_array(x, 0.5, rng, training=True).toarray()
        dense = x.toarray()
        scalemax = np.abs(dense).max()
        assert np.abs(acc / draws - dense).max() < 4 * scalemax / math.sqrt(draws) + 0.05

    def test_uniform_logits_loss_is_log_c(self):
        logits = nn.Tensor2(np.zeros((7, 5)))
        loss = xent(logits, np.zeros(7, dtype=int))
        assert abs(loss.item() - math.log(5)) < 1e-12

    def test_loss_decreases_monotonically_with_margin(self):
        labels = np.array([0, 1])
        prev = math.inf
        for margin in (1.0, 2.0, 4.0, 8.0, 16.0):
            logits = nn.Tensor2(np.eye(2) * margin)
            cur = xent(logits, labels).item()
            assert cur < prev
            prev = cur
        assert prev < 1e-6

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            xent(nn.Tensor2(np.zeros((3, 2))), np.zeros(3, dtype=int), np.zeros(3, dtype=bool))

    def test_branch_max_tie_keeps_lower_index(self):
        a = nn.Tensor2(np.array([[1.0, 5.0]]), requires_grad=True)
        b = nn.Tensor2(np.array([[1.0, 7.0]]), requires_grad=True)
        out = nn.branch_max([a, b])
        np.testing.assert_array_equal(out.values, [[1.0, 7.0]])
        nn.backward(out)
        np.testing.assert_array_equal(a.grad, [[1.0, 0.0]])  # tie at column 0 routed to a
        np.testing.assert_array_equal(b.grad, [[0.0, 1.0]])


class TestAdam:
    def test_first_step_size(self):
        p = nn.Tensor2(np.array([[0.0]]), requires_grad=True)
        state = nn.AdamState.init([p])
        nn.adam_step([p], [np.array([[0.1]])], state, lr=0.01)
        assert abs(p.values[0, 0] + 0.01) < 1e-6  # ~= -lr * sign(g)

    def test_zero_gradient_keeps_params(self):
        p = nn.Tensor2(np.array([[1.5, -2.0]]), requires_grad=True)
        state = nn.AdamState.init([p])
        before = p.values.copy()
        nn.adam_step([p], [np.zeros((1, 2))], state, lr=0.1)
        np.testing.assert_array_equal(p.values, before)

    def test_descends_quadratic(self):
        p = nn.Tensor2(np.array([[1.0]]), requires_grad=True)
        state = nn.AdamState.init([p])
        prev = 1.0
        for _ in range(10):
            nn.adam_step([p], [2 * p.values], state, lr=0.05)
            assert abs(p.values[0, 0]) < prev
            prev = abs(p.values[0, 0])

    def test_non_positive_lr_rejected(self):
        p = nn.Tensor2(np.zeros((1, 1)), requires_grad=True)
        with pytest.raises(ValueError):
            nn.adam_step([p], [np.zeros((1, 1))], nn.AdamState.init([p]), lr=0.0)


class TestGradCheck:
    def test_gcn_layer(self, rng):
        prop = sym_renormalize(random_graph(rng, 5, 0.6))
        h = nn.Tensor2(rng.standard_normal((5, 4)), requires_grad=True)
        th = nn.Tensor2(rng.standard_normal((4, 3)), requires_grad=True)
        labels = rng.integers(0, 3, 5)
        err = nn.grad_check(lambda: xent(nn.gcn_layer_forward(prop, h, th), labels), [h, th])
        assert err < 1e-4

    def test_awc(self, rng):
        outs = [nn.Tensor2(rng.standard_normal((6, 3)), requires_grad=True) for _ in range(2)]
        alpha = nn.Tensor2(rng.standard_normal((3, 1)), requires_grad=True)
        labels = rng.integers(0, 3, 6)
        err = nn.grad_check(
            lambda: xent(nn.awc_forward(outs, nn.AwcParams(alpha))[0], labels), [*outs, alpha]
        )
        assert err < 1e-4

    def test_cheb_k3(self, rng):
        lap = scaled_laplacian(random_graph(rng, 6, 0.5), 1.6)
        h = nn.Tensor2(rng.standard_normal((6, 4)), requires_grad=True)
        ths = [nn.Tensor2(rng.standard_normal((4, 3)), requires_grad=True) for _ in range(4)]
        labels = rng.integers(0, 3, 6)
        err = nn.grad_check(lambda: xent(nn.cheb_layer_forward(lap, h, ths), labels), [h, *ths])
        assert err < 1e-4

    def test_dropout_backward_uses_mask(self, rng):
        t = nn.Tensor2(rng.standard_normal((4, 3)), requires_grad=True)
        mask_rng = np.random.default_rng(3)
        out = nn.dropout(t, 0.5, mask_rng, training=True)
        nn.backward(out)
        expected = np.where(out.values.reshape(-1) != 0, 2.0, 0.0).reshape(t.shape)
        np.testing.assert_allclose(t.grad, expected)

    def test_check_finite_mode(self):
        nn.set_check_finite(True)
        try:
            with pytest.raises(FloatingPointError):
                nn.scale(nn.Tensor2(np.array([[np.inf]])), 1.0)
        finally:
            nn.set_check_finite(False)
