"""Conditional MADE masks, autoregressive Jacobian structure, MAF stacks,
and the residual base-parameter heads."""

import numpy as np
import pytest

from sere.distributions import GaussianDiag
from sere.made import (
    ConditionalMade,
    MafStack,
    ResidualParamHead,
    build_degrees,
    build_masks,
    connectivity,
    residual_base_update,
)
from sere.tensor import MLP, DenseLayer, ParameterStore, Tensor, constant, new_rng


def reference_standard_made_masks(dim, hidden_sizes):
    """Independent reference: the original masked-autoencoder equations with
    natural input ordering and sequentially tiled hidden degrees."""
    m_input = np.arange(1, dim + 1)
    chain = [m_input]
    for h in hidden_sizes:
        chain.append(1 + (np.arange(h) % (dim - 1)))
    masks = []
    for prev, nxt in zip(chain[:-1], chain[1:]):
        mask = np.zeros((len(prev), len(nxt)))
        for k in range(len(prev)):
            for kp in range(len(nxt)):
                mask[k, kp] = 1.0 if nxt[kp] >= prev[k] else 0.0
        masks.append(mask)
    out = np.zeros((len(chain[-1]), dim))
    for k in range(len(chain[-1])):
        for d in range(dim):
            out[k, d] = 1.0 if m_input[d] > chain[-1][k] else 0.0
    return masks, out


def standard_normal_base(n, dim):
    return GaussianDiag(Tensor(np.zeros((n, dim))), var=Tensor(np.ones((n, dim))))


class TestMasks:
    def test_two_dim_hand_enumeration(self):
        deg = build_degrees(0, 2, [2], ordering="natural", degree_rule="equal")
        np.testing.assert_array_equal(deg.hidden_degrees[0], [1, 1])
        conn = connectivity(deg)
        # output 1 depends on nothing; output 2 depends only on input 1
        assert np.all(conn[:, 0] == 0.0)
        assert conn[0, 1] > 0 and conn[1, 1] == 0.0

    def test_conditioning_inputs_fully_connected(self):
        deg = build_degrees(2, 3, [8, 8])
        masks, _ = build_masks(deg)
        np.testing.assert_array_equal(masks[0][:2, :], 1.0)

    def test_autoregressive_property_randomized(self):
        rng = new_rng(0, "masks")
        for _ in range(40):
            C = int(rng.integers(0, 4))
            D = int(rng.integers(1, 7))
            sizes = [int(rng.integers(1, 12)) for _ in range(int(rng.integers(1, 4)))]
            ordering = ["natural", "random", "reversed"][int(rng.integers(0, 3))]
            rule = ["equal", "random"][int(rng.integers(0, 2))]
            deg = build_degrees(C, D, sizes, ordering=ordering, degree_rule=rule,
                                seed=int(rng.integers(0, 1000)))
            conn = connectivity(deg)[C:, :]  # modeled-input block
            in_deg = deg.modeled_degrees
            for e in range(D):
                for d in range(D):
                    if conn[e, d] != 0.0:
                        assert in_deg[e] < in_deg[d]

    def test_single_output_depends_only_on_conditioning(self):
        deg = build_degrees(2, 1, [4])
        conn = connectivity(deg)
        assert np.all(conn[2:, :] == 0.0)   # the modeled input is masked out
        assert np.all(conn[:2, :] > 0.0)    # conditioning reaches the output

    def test_matches_reference_standard_made(self):
        for dim, sizes in [(3, [5]), (5, [7, 7]), (6, [4, 9, 4])]:
            deg = build_degrees(0, dim, sizes, ordering="natural", degree_rule="equal")
            masks, out = build_masks(deg)
            ref_masks, ref_out = reference_standard_made_masks(dim, sizes)
            for got, ref in zip(masks, ref_masks):
                np.testing.assert_array_equal(got, ref)
            np.testing.assert_array_equal(out, ref_out)

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            build_degrees(0, 0, [4])
        with pytest.raises(ValueError):
            build_degrees(0, 3, [0])


class TestMadeForward:
    def _made(self, C, D, sizes=(16,), seed=0):
        store = ParameterStore()
        return ConditionalMade.build(store, "made", new_rng(seed, "made"), C, D,
                                     hidden_sizes=sizes, seed=seed), store

    def test_zero_weights_constant_outputs(self):
        made, store = self._made(2, 3)
        for name in store.names():
            if name.endswith("_b") or "/b" in name:
                continue
            store[name].data = np.zeros_like(store[name].data)
        store["made/mu_b"].data = np.array([1.0, 2.0, 3.0])
        ctx = Tensor(np.zeros((4, 2)))
        mu1, s1 = made(ctx, Tensor(np.zeros((4, 3))))
        mu2, s2 = made(ctx, Tensor(np.ones((4, 3))))
        np.testing.assert_array_equal(mu1.data, mu2.data)
        np.testing.assert_array_equal(mu1.data[0], [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(s1.data, s2.data)

    def test_jacobian_respects_degrees(self):
        made, _ = self._made(2, 4, sizes=(20, 20), seed=3)
        rng = new_rng(4, "jac")
        ctx = rng.standard_normal((1, 2))
        x0 = rng.standard_normal((1, 4))
        h = 1e-6
        deg = made.degrees.modeled_degrees
        for e in range(4):
            for d in range(4):
                xp, xm = x0.copy(), x0.copy()
                xp[0, e] += h
                xm[0, e] -= h
                dmu = (made(constant(ctx), constant(xp))[0].data
                       - made(constant(ctx), constant(xm))[0].data) / (2 * h)
                if deg[e] >= deg[d]:
                    assert abs(dmu[0, d]) <= 1e-9
        # perturbing the context moves every output (generic weights)
        for j in range(2):
            cp, cm = ctx.copy(), ctx.copy()
            cp[0, j] += h
            cm[0, j] -= h
            dmu = (made(constant(cp), constant(x0))[0].data
                   - made(constant(cm), constant(x0))[0].data) / (2 * h)
            assert np.all(np.abs(dmu) > 1e-12)

    def test_shape_errors(self):
        made, _ = self._made(2, 3)
        with pytest.raises(Exception, match="made_forward"):
            made(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 4))))
        with pytest.raises(Exception, match="made_forward"):
            made(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 3))))


def build_stack(cond_dim, dim, seed=0, **kw):
    store = ParameterStore()
    stack = MafStack.build(store, "maf", new_rng(seed, "stack"), cond_dim, dim, seed=seed, **kw)
    return stack, store


class TestMafStack:
    def test_identity_flow_equals_base(self):
        stack, store = build_stack(0, 3, n_flows=1, mades_per_flow=2, batchnorm=False)
        for name in store.names():
            store[name].data = np.zeros_like(store[name].data)
        x = new_rng(1, "x").standard_normal((6, 3))
        base = standard_normal_base(6, 3)
        lp = stack.log_prob(Tensor(x), None, base)
        np.testing.assert_allclose(lp.data, base.log_prob(Tensor(x)).data, atol=1e-12)

    def test_constant_shift_translation(self):
        stack, store = build_stack(0, 2, n_flows=1, mades_per_flow=1, batchnorm=False)
        for name in store.names():
            store[name].data = np.zeros_like(store[name].data)
        shift = np.array([0.7, -1.2])
        store["maf/flow0/made0/mu_b"].data = shift.copy()
        x = new_rng(2, "x").standard_normal((5, 2))
        base = standard_normal_base(5, 2)
        lp = stack.log_prob(Tensor(x), None, base)
        expected = base.log_prob(Tensor(x - shift)).data
        np.testing.assert_allclose(lp.data, expected, atol=1e-12)

    def test_quadrature_normalization_2d(self):
        stack, store = build_stack(0, 2, n_flows=2, mades_per_flow=2, batchnorm=False,
                                   hidden_sizes=(12,), seed=5)
        for name in store.names():  # damp the random init so the tails stay on-grid
            store[name].data = store[name].data * 0.5
        grid = np.linspace(-12.0, 12.0, 401)
        xx, yy = np.meshgrid(grid, grid, indexing="ij")
        pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
        base = standard_normal_base(pts.shape[0], 2)
        dens = np.exp(stack.log_prob(Tensor(pts), None, base).data).reshape(401, 401)
        integral = np.trapezoid(np.trapezoid(dens, grid, axis=1), grid)
        assert abs(integral - 1.0) <= 1e-2

    def test_round_trip_through_stack(self):
        stack, _ = build_stack(2, 3, n_flows=2, mades_per_flow=2, batchnorm=True,
                               hidden_sizes=(10,), seed=6)
        rng = new_rng(7, "rt")
        ctx = Tensor(rng.standard_normal((8, 2)))
        # populate batch-norm stats with one training pass
        base = standard_normal_base(8, 3)
        stack.log_prob(Tensor(rng.standard_normal((8, 3))), ctx, base, mode="train")
        u = rng.standard_normal((8, 3))
        x = stack.forward_data(u, ctx)
        back = stack.inverse_data(x, ctx)
        assert np.max(np.abs(back - u)) <= 1e-8

    def test_eval_requires_bn_stats(self):
        stack, _ = build_stack(0, 2, n_flows=2, mades_per_flow=1, batchnorm=True)
        base = standard_normal_base(4, 2)
        with pytest.raises(RuntimeError, match="batch-norm"):
            stack.log_prob(Tensor(np.zeros((4, 2))), None, base, mode="eval")

    def test_identity_flow_sampling_ks(self):
        stack, store = build_stack(0, 2, n_flows=1, mades_per_flow=1, batchnorm=False)
        for name in store.names():
            store[name].data = np.zeros_like(store[name].data)
        n = 10_000
        base = standard_normal_base(n, 2)
        draws = stack.sample(new_rng(8, "ks"), None, base)
        # KS against the standard normal CDF at alpha = 0.01
        from math import erf

        for j in range(2):
            xs = np.sort(draws[:, j])
            cdf = 0.5 * (1.0 + np.array([erf(v / np.sqrt(2)) for v in xs]))
            emp_hi = np.arange(1, n + 1) / n
            emp_lo = np.arange(0, n) / n
            d_stat = max(np.max(np.abs(emp_hi - cdf)), np.max(np.abs(cdf - emp_lo)))
            assert d_stat <= 1.628 / np.sqrt(n)

    def test_log_prob_finite_on_samples(self):
        stack, _ = build_stack(1, 3, n_flows=2, mades_per_flow=2, batchnorm=True,
                               hidden_sizes=(8,), seed=9)
        rng = new_rng(10, "fin")
        ctx = Tensor(rng.standard_normal((16, 1)))
        base = standard_normal_base(16, 3)
        stack.log_prob(Tensor(rng.standard_normal((16, 3))), ctx, base, mode="train")
        draws = stack.sample(rng, ctx, base)
        lp = stack.log_prob(Tensor(draws), ctx, base)
        assert np.all(np.isfinite(lp.data))

    def test_constant_shift_sampling_mean(self):
        stack, store = build_stack(0, 2, n_flows=1, mades_per_flow=1, batchnorm=False)
        for name in store.names():
            store[name].data = np.zeros_like(store[name].data)
        shift = np.array([2.0, -1.0])
        store["maf/flow0/made0/mu_b"].data = shift.copy()
        n = 20_000
        draws = stack.sample(new_rng(11, "shift"), None, standard_normal_base(n, 2))
        se = 1.0 / np.sqrt(n)
        assert np.all(np.abs(draws.mean(axis=0) - shift) < 3 * se)

    def test_triangular_jacobian_single_step(self):
        stack, _ = build_stack(0, 5, n_flows=1, mades_per_flow=1, batchnorm=False,
                               hidden_sizes=(16,), seed=12)
        made = stack.flows[0][0]
        rng = new_rng(13, "tri")
        x0 = rng.standard_normal((1, 5))
        h = 1e-6

        def inv_step(x):
            mu, s = made(None, constant(x))
            return ((x - mu.data) * np.exp(-s.data))

        jac = np.zeros((5, 5))
        for e in range(5):
            xp, xm = x0.copy(), x0.copy()
            xp[0, e] += h
            xm[0, e] -= h
            jac[:, e] = (inv_step(xp) - inv_step(xm))[0] / (2 * h)
        order = np.argsort(made.degrees.modeled_degrees)
        permuted = jac[np.ix_(order, order)]
        assert np.max(np.abs(np.triu(permuted, k=1))) <= 1e-9


class TestResidualHead:
    def _head(self, param_dim=4, z_dim=2, seed=0):
        store = ParameterStore()
        rng = new_rng(seed, "res")
        hidden = MLP([DenseLayer(store.create("h/w", rng.standard_normal((param_dim, 3)) * 0.3),
                                 store.create("h/b", np.zeros(3)), "relu")])
        res = MLP([DenseLayer(store.create("r/w", rng.standard_normal((3 + z_dim, param_dim)) * 0.3),
                              store.create("r/b", np.zeros(param_dim)), "identity")])
        return ResidualParamHead(hidden, res), store

    def test_zero_residual_net_is_identity(self):
        head, store = self._head()
        store["r/w"].data = np.zeros_like(store["r/w"].data)
        gamma = Tensor(new_rng(1, "g").standard_normal((3, 4)))
        z = Tensor(np.ones((3, 2)))
        out = residual_base_update(gamma, z, head)
        np.testing.assert_array_equal(out.data, gamma.data)

    def test_telescoping_updates(self):
        heads = [self._head(seed=s)[0] for s in range(3)]
        gamma0 = Tensor(new_rng(2, "g").standard_normal((2, 4)))
        z = Tensor(new_rng(3, "z").standard_normal((2, 2)))
        gamma = gamma0
        residuals = []
        for head in heads:
            nxt = head.update(gamma, z)
            residuals.append(nxt.data - gamma.data)
            gamma = nxt
        np.testing.assert_allclose(gamma.data, gamma0.data + sum(residuals), atol=1e-12)

    def test_identity_jacobian_path_at_zero_init(self):
        head, store = self._head()
        store["r/w"].data = np.zeros_like(store["r/w"].data)
        z = Tensor(np.ones((1, 2)))
        g0 = new_rng(4, "g").standard_normal((1, 4))
        h = 1e-6
        for i in range(4):
            gp, gm = g0.copy(), g0.copy()
            gp[0, i] += h
            gm[0, i] -= h
            d = (head.update(Tensor(gp), z).data - head.update(Tensor(gm), z).data) / (2 * h)
            assert d[0, i] == pytest.approx(1.0, abs=1e-6)

    def test_shape_mismatch_rejected(self):
        head, _ = self._head()
        with pytest.raises(Exception, match="incompatible shapes"):
            head.update(Tensor(np.zeros((1, 5))), Tensor(np.zeros((1, 2))))
