"""Bijector contracts: round trips, log-dets vs. dense oracles, batch-norm
invertibility, logit dequantization, chains, and KL invariance."""

import numpy as np
import pytest

from sere.bijectors import (
    AffineDiagRank1,
    BatchNormBijector,
    Chain,
    ConditionedBijector,
    dequantize,
    inverse_logit_transform,
    logit_dequantize,
    logit_transform,
)
from sere.distributions import GaussianDiag, kl_diag_diag
from sere.oracle import grad_check
from sere.tensor import ParameterStore, Tensor, new_rng


def random_affine(rng, dim):
    return AffineDiagRank1(
        shift=Tensor(rng.uniform(-2, 2, dim)),
        raw_diag=Tensor(rng.uniform(-2, 2, dim)),
        perturb=Tensor(rng.uniform(-1.5, 1.5, dim)),
    )


class TestAffine:
    def test_identity_case(self):
        bij = AffineDiagRank1(shift=Tensor([0.0, 0.0]), diag=Tensor([1.0, 1.0]),
                              perturb=Tensor([0.0, 0.0]))
        eps = Tensor([[0.3, -0.4]])
        z, ld = bij.forward(eps)
        np.testing.assert_array_equal(z.data, eps.data)
        assert ld.data.item() == pytest.approx(0.0, abs=1e-15)

    def test_log_det_example(self):
        bij = AffineDiagRank1(shift=Tensor([0.0, 0.0]), diag=Tensor([2.0, 3.0]),
                              perturb=Tensor([1.0, 1.0]))
        _, ld = bij.forward(Tensor([[0.0, 0.0]]))
        assert ld.data.item() == pytest.approx(np.log(11.0), abs=1e-12)
        assert np.log(11.0) == pytest.approx(2.397895, abs=1e-6)

    def test_log_det_matches_dense_jacobian(self):
        rng = new_rng(0, "affine-ld")
        for _ in range(300):
            dim = int(rng.integers(1, 8))
            bij = random_affine(rng, dim)
            _, ld = bij.forward(Tensor(np.zeros((1, dim))))
            dense = np.diag(bij.diag.data) + np.outer(bij.perturb.data, bij.perturb.data)
            sign, dense_ld = np.linalg.slogdet(dense)
            assert sign == 1.0
            assert abs(ld.data.item() - dense_ld) <= 1e-8 * max(1.0, abs(dense_ld))

    def test_round_trip(self):
        rng = new_rng(1, "affine-rt")
        for _ in range(200):
            dim = int(rng.integers(1, 8))
            bij = random_affine(rng, dim)
            eps = Tensor(rng.uniform(-3, 3, (4, dim)))
            z, ld = bij.forward(eps)
            back, ld_inv = bij.inverse(z)
            assert np.max(np.abs(back.data - eps.data)) <= 1e-9
            assert abs(ld.data.item() + ld_inv.data.item()) <= 1e-10

    def test_diagonal_inverse(self):
        bij = AffineDiagRank1(shift=Tensor([1.0, -1.0]), diag=Tensor([2.0, 4.0]),
                              perturb=Tensor([0.0, 0.0]))
        z = Tensor([[3.0, 7.0]])
        eps, _ = bij.inverse(z)
        np.testing.assert_allclose(eps.data, [[1.0, 2.0]], atol=1e-12)

    def test_inverse_matches_dense_solve(self):
        rng = new_rng(2, "affine-solve")
        dim = 5
        bij = random_affine(rng, dim)
        z = rng.uniform(-2, 2, (3, dim))
        eps, _ = bij.inverse(Tensor(z))
        dense = np.diag(bij.diag.data) + np.outer(bij.perturb.data, bij.perturb.data)
        expected = np.linalg.solve(dense, (z - bij.shift.data).T).T
        np.testing.assert_allclose(eps.data, expected, atol=1e-9)

    def test_nonpositive_diag_rejected(self):
        with pytest.raises(ValueError):
            AffineDiagRank1(shift=Tensor([0.0]), diag=Tensor([-1.0]), perturb=Tensor([0.0]))

    def test_gradients_through_forward(self):
        rng = new_rng(3, "affine-grad")
        shift = Tensor(rng.uniform(-1, 1, 3), requires_grad=True)
        raw = Tensor(rng.uniform(-1, 1, 3), requires_grad=True)
        perturb = Tensor(rng.uniform(-1, 1, 3), requires_grad=True)
        eps = Tensor(rng.uniform(-1, 1, (2, 3)))

        def fn():
            z, ld = AffineDiagRank1(shift=shift, raw_diag=raw, perturb=perturb).forward(eps)
            return (z * z).sum() + ld.sum()

        assert grad_check(fn, [shift, raw, perturb]).max_rel_err <= 1e-6


class TestConditionedBijector:
    def test_heads_bounded_by_tanh(self):
        store = ParameterStore()
        cb = ConditionedBijector.build(store, "bij", new_rng(0, "cb"), ctx_dim=4, dim=3)
        ctx = Tensor(new_rng(1, "cb").uniform(-50, 50, (10, 4)))
        bij = cb.params(ctx)
        assert np.all(np.abs(bij.shift.data) <= 1.0)
        assert np.all(np.abs(bij.perturb.data) <= 1.0)
        # tanh-bounded raw keeps the diagonal in a well-conditioned band
        assert np.all(bij.diag.data > 0.43) and np.all(bij.diag.data < 1.32)

    def test_per_sample_params(self):
        store = ParameterStore()
        cb = ConditionedBijector.build(store, "bij", new_rng(2, "cb"), ctx_dim=2, dim=2)
        ctx = Tensor(np.array([[0.5, -1.0], [2.0, 0.3]]))
        bij = cb.params(ctx)
        eps = Tensor(np.ones((2, 2)))
        z, ld = bij.forward(eps)
        assert z.shape == (2, 2) and ld.shape == (2,)
        assert ld.data[0] != ld.data[1]


class TestBatchNormBijector:
    def _built(self, dim=2, eps=1e-5):
        store = ParameterStore()
        bn = BatchNormBijector.build(store, "bn", dim)
        bn.eps = eps
        return bn

    def test_identity_when_stats_trivial(self):
        bn = self._built(dim=2, eps=0.0)
        bn.initialized = True  # defaults: mean 0, var 1, gamma 1, beta 0
        x = Tensor([[0.5, -0.5]])
        y, ld = bn.forward(x, mode="eval")
        np.testing.assert_allclose(y.data, x.data, atol=1e-12)
        assert ld.data.item() == pytest.approx(0.0, abs=1e-12)

    def test_round_trip_eval(self):
        bn = self._built(dim=3)
        bn.forward(Tensor(new_rng(0, "bn").standard_normal((32, 3)) * 2.0 + 1.0), mode="train")
        x = Tensor(new_rng(1, "bn").standard_normal((5, 3)))
        y, ld = bn.forward(x, mode="eval")
        back, ld_inv = bn.inverse(y)
        assert np.max(np.abs(back.data - x.data)) <= 1e-9
        assert abs(ld.data.item() + ld_inv.data.item()) <= 1e-10

    def test_log_det_closed_form(self):
        bn = self._built(dim=1, eps=0.0)
        bn.gamma.data = np.array([2.0])
        bn.running_var[:] = np.array([4.0])
        bn.initialized = True
        _, ld = bn.forward(Tensor([[1.0]]), mode="eval")
        # ln 2 - 0.5 ln 4 = 0
        assert ld.data.item() == pytest.approx(0.0, abs=1e-12)

    def test_zero_gamma_rejected(self):
        bn = self._built()
        bn.gamma.data = np.array([0.0, 1.0])
        with pytest.raises(ValueError, match="gamma"):
            bn.forward(Tensor(np.ones((4, 2))), mode="train")

    def test_eval_without_stats_rejected(self):
        bn = self._built()
        with pytest.raises(RuntimeError, match="stats"):
            bn.forward(Tensor(np.ones((4, 2))), mode="eval")


class _InverseOf:
    """Adapter flipping a bijector's direction, for chain tests."""

    def __init__(self, bij):
        self.bij = bij
        self.dim = bij.dim

    def forward(self, x):
        return self.bij.inverse(x)

    def inverse(self, y):
        return self.bij.forward(y)


class TestChain:
    def test_identity_links(self):
        eye = AffineDiagRank1(shift=Tensor([0.0]), diag=Tensor([1.0]), perturb=Tensor([0.0]))
        chain = Chain(eye, eye, eye)
        x = Tensor([[0.7]])
        y, ld = chain.forward(x)
        np.testing.assert_array_equal(y.data, x.data)
        assert ld.data.item() == pytest.approx(0.0)

    def test_f_then_f_inverse(self):
        bij = random_affine(new_rng(4, "chain"), 3)
        chain = Chain(bij, _InverseOf(bij))
        x = Tensor(new_rng(5, "chain").uniform(-2, 2, (4, 3)))
        y, ld = chain.forward(x)
        assert np.max(np.abs(y.data - x.data)) <= 1e-9
        assert np.max(np.abs(ld.data)) <= 1e-10

    def test_log_dets_add(self):
        rng = new_rng(6, "chain")
        links = [random_affine(rng, 2) for _ in range(3)]
        x = Tensor(rng.uniform(-1, 1, (1, 2)))
        total = 0.0
        h = x
        for link in links:
            h, ld = link.forward(h)
            total += ld.data.item()
        _, chain_ld = Chain(*links).forward(x)
        assert chain_ld.data.item() == pytest.approx(total, abs=1e-12)

    def test_dim_mismatch_rejected(self):
        a = random_affine(new_rng(7, "chain"), 2)
        b = random_affine(new_rng(8, "chain"), 3)
        with pytest.raises(Exception, match="chain"):
            Chain(a, b)


class TestLogitDequantize:
    def test_logit_of_alpha(self):
        y, _ = logit_transform(np.array([0.0]), alpha=0.05)
        assert y[0] == pytest.approx(np.log(0.05 / 0.95), abs=1e-9)
        assert y[0] == pytest.approx(-2.944439, abs=1e-6)

    def test_midpoint_maps_to_zero(self):
        alpha = 0.05
        v = (0.5 - alpha) / (1.0 - alpha)
        y, _ = logit_transform(np.array([v]), alpha=alpha)
        assert y[0] == pytest.approx(0.0, abs=1e-12)

    def test_round_trip(self):
        rng = new_rng(9, "logit")
        v = rng.random(1000)
        y, _ = logit_transform(v, alpha=0.05)
        back = inverse_logit_transform(y, alpha=0.05)
        assert np.max(np.abs(back - v)) <= 1e-9

    def test_log_det_matches_finite_differences(self):
        v = np.array([0.1, 0.5, 0.9])
        _, ld = logit_transform(v, alpha=0.05)
        h = 1e-6
        fd = (logit_transform(v + h, 0.05)[0] - logit_transform(v - h, 0.05)[0]) / (2 * h)
        np.testing.assert_allclose(ld, np.log(np.abs(fd)), atol=1e-7)

    def test_alpha_range_enforced(self):
        with pytest.raises(ValueError):
            logit_dequantize(np.array([0]), alpha=0.6, rng=new_rng(0, "lq"))

    def test_dequantize_range_and_freshness(self):
        rng = new_rng(10, "lq")
        x = np.array([0, 128, 255])
        v1 = dequantize(x, rng)
        v2 = dequantize(x, rng)  # fresh noise every pass, never cached
        assert np.all((v1 >= 0.0) & (v1 < 1.0))
        assert not np.array_equal(v1, v2)
        with pytest.raises(ValueError):
            dequantize(np.array([256]), rng)


class TestDistributionInvariance:
    def test_pushforward_density_normalizes(self):
        # change of variables on a 1-d affine map: quadrature of the pushed
        # density (computed via the inverse + log-det) integrates to 1
        bij = AffineDiagRank1(shift=Tensor([0.4]), diag=Tensor([1.7]), perturb=Tensor([0.8]))
        base = GaussianDiag(Tensor([[0.0]]), var=Tensor([[1.0]]))
        grid = np.linspace(-14, 14, 4001)
        eps, ld_inv = bij.inverse(Tensor(grid[:, None]))
        log_dens = base.log_prob(eps).data + ld_inv.data
        integral = np.trapezoid(np.exp(log_dens), grid)
        assert abs(integral - 1.0) <= 1e-6

    def test_kl_invariant_under_shared_bijector(self):
        # Monte Carlo KL in z-space (densities via inverse + change of
        # variables) equals the analytic eps-space KL within 3 SE
        n = 100_000
        rng = new_rng(11, "klinv")
        q = GaussianDiag(Tensor(np.tile([0.6, -0.2], (n, 1))),
                         var=Tensor(np.tile([0.9, 1.4], (n, 1))))
        p = GaussianDiag(Tensor(np.tile([-0.1, 0.3], (n, 1))),
                         var=Tensor(np.tile([1.2, 0.7], (n, 1))))
        bij = random_affine(rng, 2)
        eps_q, _ = q.sample(rng)
        z, _ = bij.forward(eps_q)
        back, ld_inv = bij.inverse(z)
        log_q_z = q.log_prob(back).data + ld_inv.data
        log_p_z = p.log_prob(back).data + ld_inv.data
        diffs = log_q_z - log_p_z
        analytic = kl_diag_diag(
            GaussianDiag(Tensor([[0.6, -0.2]]), var=Tensor([[0.9, 1.4]])),
            GaussianDiag(Tensor([[-0.1, 0.3]]), var=Tensor([[1.2, 0.7]]))).data.item()
        se = diffs.std(ddof=1) / np.sqrt(n)
        assert abs(diffs.mean() - analytic) < 3 * se
