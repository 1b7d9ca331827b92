import numpy as np
import pytest

from hierts import graphcore, ndiff
from hierts.graphcore import (DiffusionParams, GatedParams, GConvParams, Graph,
                              diffusion_conv, gated_mp, gconv, init_mp_params,
                              message_pass, normalize_sym, row_normalize)
from hierts.ndiff import Tensor, grad_check


class TestGraph:
    def test_roundtrip_edge_list(self, tmp_path):
        g = Graph(n=4, edges=[(0, 1, 1.5), (2, 3, 0.25)], directed=True)
        g.save(tmp_path / "edges.csv")
        loaded = Graph.load(tmp_path / "edges.csv", n=4, directed=True)
        assert loaded.edges == g.edges
        assert np.allclose(loaded.to_dense(), g.to_dense())

    def test_undirected_dense_is_symmetric(self):
        g = Graph(n=3, edges=[(0, 2, 1.0)], directed=False)
        A = g.to_dense()
        assert A[0, 2] == A[2, 0] == 1.0

    def test_validation(self):
        with pytest.raises(ValueError, match="outside node range"):
            Graph(n=2, edges=[(0, 5, 1.0)])
        with pytest.raises(ValueError, match="negative"):
            Graph(n=2, edges=[(0, 1, -1.0)])
        with pytest.raises(ValueError, match="duplicate"):
            Graph(n=2, edges=[(0, 1, 1.0), (0, 1, 2.0)])


class TestNormalize:
    def test_identity_fixed_point(self):
        assert np.allclose(normalize_sym(np.eye(4)), np.eye(4))

    def test_two_node_single_edge(self):
        A = np.array([[0.0, 1.0], [1.0, 0.0]])
        out = normalize_sym(A)
        assert np.allclose(out, A)  # degrees are 1

    def test_isolated_node_row_and_column_zero(self):
        A = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        out = normalize_sym(A)
        assert np.all(out[2] == 0) and np.all(out[:, 2] == 0)

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            normalize_sym(np.array([[0.0, -1.0], [1.0, 0.0]]))

    def test_symmetric_in_symmetric_out(self):
        rng = np.random.default_rng(0)
        A = rng.uniform(size=(6, 6))
        A = A + A.T
        out = normalize_sym(A)
        assert np.allclose(out, out.T)


class TestGConv:
    def test_zero_adjacency_reduces_to_dense_layer(self):
        rng = np.random.default_rng(1)
        H = Tensor(rng.normal(size=(4, 3)))
        params = GConvParams.init(3, 3, rng)
        out = gconv(H, np.zeros((4, 4)), params, activation="identity")
        # self loops only: norm(I) = I
        assert np.allclose(out.data, H.data @ params.weight.data + params.bias.data)

    def test_identity_weights_identity_activation(self):
        H = Tensor(np.arange(6.0).reshape(3, 2))
        params = GConvParams(Tensor(np.eye(2)), Tensor(np.zeros(2)))
        out = gconv(H, np.zeros((3, 3)), params, activation="identity")
        assert np.allclose(out.data, H.data)

    def test_three_node_path_hand_product(self):
        rng = np.random.default_rng(2)
        A = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)
        H = rng.normal(size=(3, 2))
        params = GConvParams.init(2, 2, rng)
        out = gconv(Tensor(H), A, params, activation="identity")
        # direct dense evaluation of the same formula
        with_loops = A + np.eye(3)
        deg = with_loops.sum(axis=1)
        norm = with_loops / np.sqrt(np.outer(deg, deg))
        expected = norm @ H @ params.weight.data + params.bias.data
        assert np.allclose(out.data, expected)


class TestDiffusion:
    def test_zero_adjacency_keeps_self_term(self):
        rng = np.random.default_rng(3)
        H = Tensor(rng.normal(size=(4, 3)))
        params = DiffusionParams.init(3, 3, 2, rng)
        out = diffusion_conv(H, np.zeros((4, 4)), 2, params)
        assert np.allclose(out.data, H.data @ params.w_self.data + params.bias.data)

    def test_directed_two_node_hand_propagation(self):
        rng = np.random.default_rng(4)
        A = np.array([[0.0, 2.0], [0.0, 0.0]])  # single edge 0 -> 1
        H = rng.normal(size=(2, 2))
        params = DiffusionParams.init(2, 2, 1, rng)
        out = diffusion_conv(Tensor(H), A, 1, params)
        p_fwd = np.array([[0.0, 1.0], [0.0, 0.0]])  # row-normalized A
        p_bwd = np.array([[0.0, 0.0], [1.0, 0.0]])
        expected = (H @ params.w_self.data + params.bias.data
                    + p_fwd @ H @ params.w_fwd[0].data + p_bwd @ H @ params.w_bwd[0].data)
        assert np.allclose(out.data, expected)

    def test_undirected_branches_coincide_with_tied_weights(self):
        rng = np.random.default_rng(5)
        A = rng.uniform(size=(5, 5))
        A = A + A.T
        H = rng.normal(size=(5, 3))
        params = DiffusionParams.init(3, 3, 2, rng)
        for wf, wb in zip(params.w_fwd, params.w_bwd):
            wb.data[...] = wf.data
        out = diffusion_conv(Tensor(H), A, 2, params)
        p = row_normalize(A)
        expected = H @ params.w_self.data + params.bias.data
        for q in (1, 2):
            expected = expected + 2.0 * np.linalg.matrix_power(p, q) @ H @ params.w_fwd[q - 1].data
        assert np.allclose(out.data, expected)

    def test_order_below_one_rejected(self):
        rng = np.random.default_rng(0)
        params = DiffusionParams.init(2, 2, 1, rng)
        with pytest.raises(ValueError, match="order"):
            diffusion_conv(Tensor(np.ones((2, 2))), np.zeros((2, 2)), 0, params)


def _manual_gated(H, A, params):
    """Loop-based reference for the gated scheme."""
    n, d = H.shape
    elu = lambda v: np.where(v > 0, v, np.expm1(v))
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    agg = np.zeros((n, d))
    for i in range(n):
        for j in range(n):
            a_ji = A[j, i]
            feat = np.concatenate([H[i], H[j], [a_ji]])
            hidden = elu(feat @ params.msg_w.data + params.msg_b.data)
            msg = (hidden @ params.out_w.data + params.out_b.data) * sig(
                hidden @ params.gate_w.data + params.gate_b.data)
            agg[i] += a_ji * msg
    upd = np.concatenate([H, agg], axis=1)
    return elu(upd @ params.upd_w1.data + params.upd_b1.data) @ params.upd_w2.data \
        + params.upd_b2.data + H


class TestGated:
    def test_two_node_matches_hand_unrolled(self):
        rng = np.random.default_rng(6)
        A = np.array([[0.0, 0.7], [0.3, 0.0]])
        H = rng.normal(size=(2, 3))
        params = GatedParams.init(3, rng)
        out = gated_mp(Tensor(H), A, params)
        assert np.allclose(out.data, _manual_gated(H, A, params))

    def test_no_in_neighbors_means_zero_aggregate(self):
        rng = np.random.default_rng(7)
        A = np.array([[0.0, 1.0], [0.0, 0.0]])  # node 0 has no incoming edge
        H = rng.normal(size=(2, 3))
        params = GatedParams.init(3, rng)
        out = gated_mp(Tensor(H), A, params)
        elu = lambda v: np.where(v > 0, v, np.expm1(v))
        upd = np.concatenate([H[0], np.zeros(3)])
        expected0 = elu(upd @ params.upd_w1.data + params.upd_b1.data) @ params.upd_w2.data \
            + params.upd_b2.data + H[0]
        assert np.allclose(out.data[0], expected0)

    def test_saturated_gate_ignores_neighbors(self):
        rng = np.random.default_rng(8)
        A = np.ones((3, 3)) - np.eye(3)
        params = GatedParams.init(2, rng)
        params.gate_b.data[...] = -60.0  # gate forced to ~0
        H1 = rng.normal(size=(3, 2))
        H2 = H1.copy()
        H2[1] += 5.0  # perturb one neighbor
        out1 = gated_mp(Tensor(H1), A, params).data
        out2 = gated_mp(Tensor(H2), A, params).data
        assert np.allclose(out1[0], out2[0], atol=1e-10)


@pytest.mark.parametrize("scheme", ["gconv", "diffusion", "gated"])
def test_permutation_equivariance(scheme):
    rng = np.random.default_rng(9)
    n, d = 6, 3
    A = rng.uniform(size=(n, n)) * (rng.uniform(size=(n, n)) < 0.5)
    np.fill_diagonal(A, 0.0)
    H = rng.normal(size=(n, d))
    params = init_mp_params(scheme, d, rng)
    perm = rng.permutation(n)
    P = np.eye(n)[perm]
    out = message_pass(Tensor(H), A, params).data
    out_perm = message_pass(Tensor(P @ H), P @ A @ P.T, params).data
    assert np.allclose(out_perm, P @ out, atol=1e-10)


@pytest.mark.parametrize("scheme", ["gconv", "diffusion", "gated"])
def test_schemes_pass_grad_check(scheme):
    rng = np.random.default_rng(10)
    n, d = 4, 2
    A = rng.uniform(size=(n, n)) * (rng.uniform(size=(n, n)) < 0.6)
    np.fill_diagonal(A, 0.0)
    params = init_mp_params(scheme, d, rng)
    H = Tensor(rng.normal(size=(n, d)))

    def feature_loss(h):
        out = message_pass(h, A, params)
        return (out * out).sum()

    assert grad_check(feature_loss, [H]) < 1e-4

    h_fixed = H.data.copy()

    def weight_loss(*_):
        # the tensors below are the same objects grad_check perturbs
        out = message_pass(Tensor(h_fixed), A, params)
        return (out * out).sum()

    assert grad_check(weight_loss, params.tensors()) < 1e-4


def test_batched_inputs_match_per_sample():
    rng = np.random.default_rng(11)
    A = rng.uniform(size=(4, 4))
    params = init_mp_params("gated", 3, rng)
    H = rng.normal(size=(2, 4, 3))
    batched = gated_mp(Tensor(H), A, params).data
    for b in range(2):
        single = gated_mp(Tensor(H[b]), A, params).data
        assert np.allclose(batched[b], single)
