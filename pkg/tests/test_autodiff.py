"""Contract and gradient tests for the reverse-mode engine.

Every registered op gets 20 random instances checked against the central
finite-difference oracle at 64-bit precision.
"""

import numpy as np
import pytest

from terra import autodiff as ad
from terra.autodiff import Graph, GraphError, NonFiniteError, ShapeMismatchError, Tensor

from gradcheck import assert_grad_close, finite_difference_grad

N_INSTANCES = 20


def check_op(make_loss, arrays, seed):
    """Compare engine gradients against finite differences for one instance.

    ``make_loss(tensors)`` builds a scalar Tensor from leaf tensors wrapping
    ``arrays``; it must be deterministic given the array contents.
    """
    graph = Graph()
    leaves = [graph.leaf(a) for a in arrays]
    loss = make_loss(leaves)
    grads = ad.backward(graph, loss)

    for idx, (leaf, arr) in enumerate(zip(leaves, arrays)):
        def f():
            g = Graph()
            return float(make_loss([g.leaf(a) for a in arrays]).data)
        numeric = finite_difference_grad(f, arr)
        assert_grad_close(grads[leaf.node_id], numeric,
                          label=f"input {idx} (seed {seed})")


def _proj(rng, shape):
    c = Tensor(rng.normal(size=shape))
    return lambda t: ad.sum_all(ad.mul(t, c))


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_grad_add_broadcast(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-2, 2, (3, 4))
    b = rng.uniform(-2, 2, (4,))
    proj = _proj(rng, (3, 4))
    check_op(lambda ts: proj(ad.add(ts[0], ts[1])), [a, b], seed)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_grad_sub(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-2, 2, (2, 3, 4)), rng.uniform(-2, 2, (3, 4))
    proj = _proj(rng, (2, 3, 4))
    check_op(lambda ts: proj(ad.sub(ts[0], ts[1])), [a, b], seed)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_grad_mul(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (3, 4))
    proj = _proj(rng, (3, 4))
    check_op(lambda ts: proj(ad.mul(ts[0], ts[1])), [a, b], seed)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_grad_scale(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-2, 2, (3, 4))
    c = float(rng.uniform(-2, 2))
    proj = _proj(rng, (3, 4))
    check_op(lambda ts: proj(ad.scale(ts[0], c)), [a], seed)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_grad_matmul(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (4, 2))
    proj = _proj(rng, (3, 2))
    check_op(lambda ts: proj(ad.matmul(ts[0], ts[1])), [a, b], seed)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_grad_matmul_batched(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-2, 2, (2, 3, 4)), rng.uniform(-2, 2, (4, 3))
    proj = _proj(rng, (2, 3, 3))
    check_op(lambda ts: proj(ad.matmul(ts[0], ts[1])), [a, b], seed)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_grad_transpose(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-2, 2, (3, 4))
    proj = _proj(rng, (4, 3))
    check_op(lambda ts: proj(ad.transpose(ts[0])), [a], seed)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_grad_concat_last(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-2, 2, (3, 2)), rng.uniform(-2, 2, (3, 3))
    proj = _proj(rng, (3, 5))
    check_op(lambda ts: proj(ad.concat_last(ts)), [a, b], seed)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_grad_slice_time(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-2, 2, (3, 4, 2))
    idx = int(rng.integers(0, 4))
    proj = _proj(rng, (3, 2))
    check_op(lambda ts: proj(ad.slice_time(ts[0], idx, axis=1)), [a], seed)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_grad_slice_last(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-2, 2, (3, 6))
    lo = int(rng.integers(0, 4))
    hi = int(rng.integers(lo + 1, 7))
    proj = _proj(rng, (3, hi - lo))
    check_op(lambda ts: proj(ad.slice_last(ts[0], lo, hi)), [a], seed)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_grad_embedding(seed):
    rng = np.random.default_rng(seed)
    w = rng.uniform(-2, 2, (5, 3))
    idx = rng.integers(0, 5, (4, 2))
    proj = _proj(rng, (4, 2, 3))
    check_op(lambda ts: proj(ad.embedding(ts[0], idx)), [w], seed)


@pytest.mark.parametrize("op", [ad.tanh, ad.sigmoid, ad.exp])
@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_grad_smooth_elementwise(op, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-2, 2, (3, 4))
    proj = _proj(rng, (3, 4))
    check_op(lambda ts: proj(op(ts[0])), [a], seed)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_grad_relu(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-2, 2, (3, 4))
    a[np.abs(a) < 1e-2] += 0.05  # keep the finite-difference stencil off the kink
    proj = _proj(rng, (3, 4))
    check_op(lambda ts: proj(ad.relu(ts[0])), [a], seed)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_grad_log(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.5, 2.0, (3, 4))
    proj = _proj(rng, (3, 4))
    check_op(lambda ts: proj(ad.log(ts[0])), [a], seed)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_grad_softmax_rows(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-2, 2, (3, 4))
    proj = _proj(rng, (3, 4))
    check_op(lambda ts: proj(ad.softmax_rows(ts[0])), [a], seed)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_grad_layer_norm(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, (3, 4))
    gamma = rng.uniform(0.5, 1.5, (4,))
    beta = rng.uniform(-1, 1, (4,))
    proj = _proj(rng, (3, 4))
    check_op(lambda ts: proj(ad.layer_norm(ts[0], ts[1], ts[2], 1e-5)),
             [x, gamma, beta], seed)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_grad_dropout_training(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-2, 2, (4, 4))
    proj = _proj(rng, (4, 4))
    # the same mask is redrawn on every evaluation via a fixed-seed rng
    check_op(lambda ts: proj(ad.dropout(
        ts[0], 0.4, np.random.default_rng(seed + 1), training=True)), [a], seed)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_grad_masked_fill_through_softmax(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-2, 2, (4, 4))
    allowed = np.tril(np.ones((4, 4), dtype=bool))
    proj = _proj(rng, (4, 4))
    check_op(lambda ts: proj(ad.softmax_rows(ad.masked_fill(ts[0], allowed))),
             [a], seed)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_grad_mse(seed):
    rng = np.random.default_rng(seed)
    pred, target = rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (3, 4))
    check_op(lambda ts: ad.mse(ts[0], ts[1]), [pred, target], seed)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_grad_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    logits = rng.uniform(-2, 2, (4, 3))
    labels = rng.integers(0, 3, 4)
    check_op(lambda ts: ad.cross_entropy_logits(ts[0], labels), [logits], seed)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_grad_sum_axis(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-2, 2, (2, 3, 4))
    axis = int(rng.integers(0, 3))
    proj = _proj(rng, np.delete(np.array(a.shape), axis))
    check_op(lambda ts: proj(ad.sum_axis(ts[0], axis=axis)), [a], seed)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_grad_sum_all(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-2, 2, (3, 4))
    check_op(lambda ts: ad.sum_all(ts[0]), [a], seed)


# --- exact-value contracts -------------------------------------------------


class TestMatmulValues:
    def test_identity(self):
        out = ad.matmul(Tensor(np.eye(2)), Tensor([[2.0, 3.0], [4.0, 5.0]]))
        assert np.array_equal(out.data, [[2.0, 3.0], [4.0, 5.0]])

    def test_hand_product(self):
        out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        assert np.array_equal(out.data, [[17.0], [39.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_grad_of_sum_is_row_broadcast_of_b_sums(self):
        rng = np.random.default_rng(7)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        graph = Graph()
        la = graph.leaf(a)
        loss = ad.sum_all(ad.matmul(la, Tensor(b)))
        grads = ad.backward(graph, loss)
        expected = np.tile(b.sum(axis=1), (3, 1))
        assert np.allclose(grads[la.node_id], expected)


class TestSoftmaxValues:
    def test_symmetric(self):
        out = ad.softmax_rows(Tensor([[0.0, 0.0]]))
        assert np.allclose(out.data, [[0.5, 0.5]])

    def test_closed_form(self):
        out = ad.softmax_rows(Tensor([[0.0, np.log(3.0)]]))
        assert np.allclose(out.data, [[0.25, 0.75]], atol=1e-12)

    def test_no_overflow(self):
        out = ad.softmax_rows(Tensor([[1000.0, 1000.0]]))
        assert np.allclose(out.data, [[0.5, 0.5]])

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        out = ad.softmax_rows(Tensor(rng.uniform(-50, 50, (20, 7))))
        assert np.all(np.abs(out.data.sum(axis=-1) - 1.0) <= 1e-12)


class TestLayerNormValues:
    def test_constant_row_absorbed_by_eps(self):
        out = ad.layer_norm(Tensor([[3.0, 3.0, 3.0]]), Tensor(np.ones(3)),
                            Tensor(np.zeros(3)), 1e-5)
        assert np.allclose(out.data, 0.0)

    def test_two_point_row(self):
        out = ad.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)),
                            Tensor(np.zeros(2)), 1e-12)
        assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-6)

    def test_zero_gamma_gives_beta(self):
        beta = np.array([0.3, -0.7, 0.1])
        out = ad.layer_norm(Tensor(np.random.default_rng(1).normal(size=(4, 3))),
                            Tensor(np.zeros(3)), Tensor(beta), 1e-5)
        assert np.allclose(out.data, np.broadcast_to(beta, (4, 3)))


class TestBackwardContracts:
    def test_identity_loss(self):
        graph = Graph()
        theta = graph.leaf(np.asarray(2.5))
        grads = ad.backward(graph, theta)
        assert grads[theta.node_id] == pytest.approx(1.0)

    def test_sum_of_squares(self):
        graph = Graph()
        theta = graph.leaf(np.array([1.0, -2.0]))
        loss = ad.sum_all(ad.mul(theta, theta))
        grads = ad.backward(graph, loss)
        assert np.allclose(grads[theta.node_id], [2.0, -4.0])

    def test_shared_subexpression_accumulates(self):
        graph = Graph()
        theta = graph.leaf(np.asarray(3.0))
        loss = ad.add(ad.mul(theta, theta), theta)  # f = theta^2 + theta
        grads = ad.backward(graph, loss)
        assert np.allclose(grads[theta.node_id], 7.0)

    def test_unreachable_leaf_gets_zero(self):
        graph = Graph()
        used = graph.leaf(np.array([1.0, 2.0]))
        unused = graph.leaf(np.array([[5.0, 6.0]]))
        loss = ad.sum_all(used)
        grads = ad.backward(graph, loss)
        assert np.array_equal(grads[unused.node_id], np.zeros((1, 2)))

    def test_non_scalar_loss_rejected(self):
        graph = Graph()
        theta = graph.leaf(np.array([1.0, 2.0]))
        with pytest.raises(GraphError):
            ad.backward(graph, ad.mul(theta, theta))

    def test_mixed_graphs_rejected(self):
        g1, g2 = Graph(), Graph()
        with pytest.raises(GraphError):
            ad.add(g1.leaf(np.ones(2)), g2.leaf(np.ones(2)))


class TestFiniteGuard:
    def test_log_of_negative_raises(self):
        with pytest.raises(NonFiniteError):
            ad.log(Tensor([-1.0, 1.0]))

    def test_exp_overflow_raises(self):
        with pytest.raises(NonFiniteError):
            ad.exp(Tensor([1000.0]))

    def test_leaf_rejects_nan(self):
        with pytest.raises(NonFiniteError):
            Graph().leaf(np.array([np.nan]))


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert ad.dropout(x, 0.5, training=False) is x

    def test_zero_rate_is_identity(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert ad.dropout(x, 0.0, np.random.default_rng(0), training=True) is x

    def test_inverted_scaling_preserves_mean(self):
        rng = np.random.default_rng(5)
        x = Tensor(np.ones((200, 200)))
        out = ad.dropout(x, 0.3, rng, training=True)
        assert out.data.mean() == pytest.approx(1.0, abs=0.02)

    def test_kept_entries_scaled(self):
        rng = np.random.default_rng(6)
        out = ad.dropout(Tensor(np.ones(1000)), 0.25, rng, training=True)
        kept = out.data[out.data != 0]
        assert np.allclose(kept, 1.0 / 0.75)


class TestDetach:
    def test_detach_blocks_gradient(self):
        graph = Graph()
        theta = graph.leaf(np.array([1.0, 2.0]))
        loss = ad.sum_all(ad.mul(ad.detach(theta), theta))
        grads = ad.backward(graph, loss)
        assert np.allclose(grads[theta.node_id], [1.0, 2.0])  # only direct path


def test_masked_fill_values():
    x = Tensor(np.zeros((2, 2)))
    allowed = np.array([[True, False], [True, True]])
    out = ad.masked_fill(x, allowed)
    assert out.data[0, 1] == ad.MASK_FILL_VALUE
    assert out.data[0, 0] == 0.0
