"""Autodiff engine: primitive values, gradients vs. finite differences,
tape semantics, and the neural building blocks."""

import numpy as np
import pytest

from sere.oracle import grad_check
from sere.tensor import (
    BatchNormLayer,
    DenseLayer,
    ParameterStore,
    ShapeError,
    Tape,
    Tensor,
    build_batchnorm,
    build_mlp,
    concat,
    dropout,
    elu,
    matmul,
    new_rng,
    relu,
    sigmoid,
    softplus,
    tanh,
)


def leaf(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


class TestPrimitives:
    def test_softplus_at_zero(self):
        assert softplus(Tensor([0.0])).data.item() == pytest.approx(np.log(2.0), abs=1e-12)

    def test_elu_closed_form(self):
        assert elu(Tensor([-5.0])).data.item() == pytest.approx(np.expm1(-5.0), abs=1e-12)

    def test_matmul_identity(self):
        a = np.arange(12.0).reshape(3, 4)
        out = matmul(Tensor(np.eye(3)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_matmul_shape_error_names_op(self):
        with pytest.raises(ShapeError, match="matmul"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_activations_match_closed_forms(self):
        pts = np.array([0.0, 1.0, -1.0, 10.0, -10.0])
        np.testing.assert_allclose(relu(Tensor(pts)).data, np.maximum(pts, 0), atol=1e-12)
        np.testing.assert_allclose(
            elu(Tensor(pts)).data, np.where(pts > 0, pts, np.expm1(pts)), atol=1e-12)
        np.testing.assert_allclose(
            softplus(Tensor(pts)).data, np.log1p(np.exp(-np.abs(pts))) + np.maximum(pts, 0),
            atol=1e-12)

    def test_concat_and_slice(self):
        a, b = Tensor(np.ones((2, 2))), Tensor(np.zeros((2, 3)))
        out = concat([a, b], axis=-1)
        assert out.shape == (2, 5)
        np.testing.assert_array_equal(out.data[:, :2], 1.0)
        sliced = out[:, 1:3]
        assert sliced.shape == (2, 2)

    def test_concat_shape_error(self):
        with pytest.raises(ShapeError, match="concat"):
            concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2)))], axis=-1)


class TestBackward:
    def test_sum_of_squares(self):
        x = leaf([1.0, 2.0])
        with Tape() as tape:
            y = (x * x).sum()
            tape.backward(y)
        np.testing.assert_allclose(x.grad, [2.0, 4.0], atol=1e-15)

    def test_chain_rule_softplus_elu(self):
        w = leaf([0.0])
        with Tape() as tape:
            y = softplus(elu(w)).sum()
            tape.backward(y)
        # sigmoid(0) * elu'(0) = 0.5
        assert w.grad[0] == pytest.approx(0.5, abs=1e-12)

    def test_non_scalar_root_rejected(self):
        x = leaf([1.0, 2.0])
        with Tape() as tape:
            y = x * x
            with pytest.raises(ValueError, match="scalar"):
                tape.backward(y)

    def test_composite_graph_matches_finite_differences(self):
        rng = new_rng(0, "composite")
        a = leaf(rng.uniform(-2, 2, (3, 4)))
        b = leaf(rng.uniform(-2, 2, (4, 5)))
        c = leaf(rng.uniform(-2, 2, 5))

        def fn():
            h = tanh(matmul(a, b) + c)
            return (sigmoid(h) * softplus(h)).mean() + (elu(h * h)).sum() * 0.1

        res = grad_check(fn, [a, b, c], h=1e-5)
        assert res.max_rel_err <= 1e-6

    def test_broadcast_bias_gradient(self):
        x = Tensor(np.ones((4, 3)))
        b = leaf(np.zeros(3))
        with Tape() as tape:
            y = (x + b).sum()
            tape.backward(y)
        np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])

    def test_getitem_gradient_scatters(self):
        x = leaf(np.arange(6.0).reshape(2, 3))
        with Tape() as tape:
            y = x[:, 1:].sum()
            tape.backward(y)
        np.testing.assert_array_equal(x.grad, [[0, 1, 1], [0, 1, 1]])

    def test_no_tape_records_nothing(self):
        x = leaf([1.0])
        y = x * x
        assert y.requires_grad is False  # evaluation mode

    def test_replay_determinism(self):
        def run():
            rng = new_rng(7, "replay")
            x = Tensor(rng.standard_normal((5, 5)))
            return tanh(matmul(x, x) + 1.0).data

        np.testing.assert_array_equal(run(), run())


class TestDenseLayer:
    def test_identity(self):
        layer = DenseLayer(Tensor(np.eye(3)), Tensor(np.zeros(3)), "identity")
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(layer(Tensor(x)).data, x)

    def test_relu_clamps(self):
        layer = DenseLayer(Tensor(np.eye(2)), Tensor(np.zeros(2)), "relu")
        out = layer(Tensor([[-1.0, 2.0]]))
        np.testing.assert_array_equal(out.data, [[0.0, 2.0]])

    def test_matches_triple_loop_matmul(self):
        rng = new_rng(1, "dense")
        w = rng.standard_normal((4, 3))
        b = rng.standard_normal(3)
        x = rng.standard_normal((5, 4))
        expected = np.zeros((5, 3))
        for i in range(5):
            for j in range(3):
                acc = b[j]
                for k in range(4):
                    acc += x[i, k] * w[k, j]
                expected[i, j] = acc
        layer = DenseLayer(Tensor(w), Tensor(b), "identity")
        np.testing.assert_allclose(layer(Tensor(x)).data, expected, atol=1e-12)

    def test_shape_mismatch(self):
        layer = DenseLayer(Tensor(np.eye(3)), Tensor(np.zeros(3)), "identity")
        with pytest.raises(ShapeError):
            layer(Tensor(np.ones((2, 4))))

    def test_nonfinite_params_rejected(self):
        with pytest.raises(ValueError):
            DenseLayer(Tensor([[np.inf]]), Tensor([0.0]))


class TestBatchNorm:
    def _layer(self, dim=2, gamma=None, beta=None):
        store = ParameterStore()
        layer = build_batchnorm(store, "bn", dim)
        if gamma is not None:
            layer.gamma.data = np.full(dim, float(gamma))
        if beta is not None:
            layer.beta.data = np.full(dim, float(beta))
        return layer

    def test_normalizes_batch(self):
        layer = self._layer(dim=1)
        out = layer(Tensor([[-1.0], [1.0]]), mode="train")
        assert out.data.mean() == pytest.approx(0.0, abs=1e-9)
        assert out.data.var() == pytest.approx(1.0, abs=1e-4)  # within epsilon

    def test_affine_postscale(self):
        layer = self._layer(dim=1, gamma=2.0, beta=3.0)
        x = np.array([[-1.0], [1.0]])
        out = layer(Tensor(x), mode="train")
        xhat = (x - x.mean()) / np.sqrt(x.var() + layer.eps)
        np.testing.assert_allclose(out.data, 2.0 * xhat + 3.0, atol=1e-12)

    def test_eval_deterministic(self):
        layer = self._layer()
        layer(Tensor(np.random.default_rng(0).standard_normal((8, 2))), mode="train")
        x = Tensor([[0.3, -0.2]])
        first = layer(x, mode="eval").data
        second = layer(x, mode="eval").data
        np.testing.assert_array_equal(first, second)

    def test_batch_of_one_rejected(self):
        layer = self._layer()
        with pytest.raises(ValueError, match="batch size"):
            layer(Tensor([[1.0, 2.0]]), mode="train")

    def test_gradients_flow(self):
        layer = self._layer()
        x = Tensor(new_rng(2, "bn").standard_normal((6, 2)))

        def fn():
            return (layer(x, mode="eval") ** 2).sum()

        res = grad_check(fn, [layer.gamma, layer.beta], h=1e-6)
        assert res.max_rel_err <= 1e-6


class TestDropout:
    def test_p_zero_identity(self):
        x = Tensor(np.ones((3, 3)))
        out = dropout(x, 0.0, "train", new_rng(0, "d"))
        np.testing.assert_array_equal(out.data, x.data)

    def test_eval_identity(self):
        x = Tensor(np.ones((3, 3)))
        out = dropout(x, 0.9, "eval", new_rng(0, "d"))
        np.testing.assert_array_equal(out.data, x.data)

    def test_invalid_probability(self):
        with pytest.raises(ValueError):
            dropout(Tensor(np.ones(3)), 1.0, "train", new_rng(0, "d"))

    def test_survivor_fraction(self):
        n = 200_000
        out = dropout(Tensor(np.ones(n)), 0.5, "train", new_rng(3, "d"))
        frac = np.count_nonzero(out.data) / n
        se = np.sqrt(0.25 / n)
        assert abs(frac - 0.5) < 3 * se
        # survivors rescaled by 1/(1-p)
        assert out.data.max() == pytest.approx(2.0)


class TestParameterStore:
    def test_duplicate_rejected(self):
        store = ParameterStore()
        store.create("w", np.zeros(2))
        with pytest.raises(KeyError):
            store.create("w", np.zeros(2))

    def test_checksum_tracks_mutation(self):
        store = ParameterStore()
        t = store.create("w", np.zeros(2))
        before = store.checksum()
        t.data[0] = 1.0
        assert store.checksum() != before

    def test_mlp_builder_shapes(self):
        store = ParameterStore()
        mlp = build_mlp(store, "net", new_rng(0, "mlp"), 4, 2, widths=(8, 8))
        assert mlp.in_dim == 4 and mlp.out_dim == 2
        assert len(store.params) == 6
        out = mlp(Tensor(np.zeros((3, 4))))
        assert out.shape == (3, 2)

    def test_affine_only_mlp(self):
        store = ParameterStore()
        mlp = build_mlp(store, "net", new_rng(0, "mlp"), 3, 3, widths=())
        assert len(mlp.layers) == 1
