"""The L-layer hierarchy with shared transformational layers.

Generative side: eps^l ~ p(eps^l; alpha^l(z^{l-1})), z^l = f^l(eps^l;
beta^l(z^{l-1})), data from p(x | z^{1:L}). Inference side: q(eps^1 | x) then
q(eps^l | z^{l-1}, x) for l >= 2, where z^{l-1} comes from the *same*
bijector object the generative path uses — one code path, one parameter set,
so the KL of each layer is the closed-form Gaussian KL in eps-space (the
bijector contributes no KL term) and the transformed posterior can still be
arbitrarily complex.

The dlgm wiring keeps the identical parameter layout but severs every
z-conditioning edge (independent priors, unconditioned bijectors, inference
from evidence only); it exists for A/B comparisons against the self-reflective
wiring at matched parameter budgets.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import oracle
from .bijectors import ConditionedBijector
from .distributions import (
    BernoulliLogits,
    GaussianDiag,
    GaussianDiagRank1,
    kl_diag_diag,
    raw_from_scale,
)
from .made import MafStack, ResidualParamHead
from .tensor import (
    MLP,
    ParameterStore,
    ShapeError,
    Tensor,
    as_tensor,
    build_batchnorm,
    build_mlp,
    concat,
    constant,
    new_rng,
    reduce_mean,
    reduce_sum,
)

_DECODER_ALIASES = {
    "bernoulli": "bernoulli",
    "bernoulli-mlp": "bernoulli",
    "gaussian": "gaussian",
    "gaussian-mlp": "gaussian",
    "maf": "maf",
}


@dataclass
class HierarchySpec:
    """Declarative description of the hierarchy; widths of () mean a single
    affine map, and feature sizes of None mean "same as the input" (identity-
    sized encoders, used by the linear oracle-matched configurations)."""

    data_dim: int
    layer_dims: tuple
    wiring: str = "sere"                  # sere | dlgm
    variational_style: str = "concat"     # concat | residual
    decoder: str = "bernoulli"            # bernoulli | gaussian | maf
    prior_style: str = "conditioned"      # conditioned | standard-normal
    activation: str = "relu"
    evidence_widths: tuple = (64,)
    evidence_feature: int = 20
    latent_widths: tuple = (32,)
    latent_feature: int = 16
    head_widths: tuple = (32,)
    prior_widths: tuple = (32,)
    bijector_widths: tuple = (20, 20)
    bijector_activation: str = "tanh"
    bijector_out_activation: str = "tanh"
    decoder_widths: tuple = (128,)
    residual_hidden: int = 0              # 0 -> floor(D^l / 3), min 1
    batchnorm: bool = False
    bn_momentum: float = 0.99
    maf_flows: int = 2
    maf_mades: int = 2
    maf_hidden: tuple = (64, 64)
    maf_base_feature: int = 16

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if self.L < 1 or any(d < 1 for d in self.layer_dims) or self.data_dim < 1:
            raise ValueError("need L >= 1 and all dims >= 1")
        if self.wiring not in ("sere", "dlgm"):
            raise ValueError(f"unknown wiring {self.wiring!r}")
        if self.variational_style not in ("concat", "residual"):
            raise ValueError(f"unknown variational style {self.variational_style!r}")
        if self.decoder not in _DECODER_ALIASES:
            raise ValueError(f"unknown decoder head {self.decoder!r}")
        self.decoder = _DECODER_ALIASES[self.decoder]
        if self.prior_style not in ("conditioned", "standard-normal"):
            raise ValueError(f"unknown prior style {self.prior_style!r}")

    @property
    def L(self):
        return len(self.layer_dims)

    @property
    def total_latent(self):
        return int(sum(self.layer_dims))

    def ev_feature(self):
        return self.data_dim if self.evidence_feature is None else self.evidence_feature

    def lat_feature(self, l):
        return self.layer_dims[l - 1] if self.latent_feature is None else self.latent_feature

    def res_hidden(self, l):
        if self.residual_hidden:
            return self.residual_hidden
        return max(1, self.layer_dims[l] // 3)


@dataclass
class LayerState:
    eps: Tensor
    z: Tensor
    posterior: GaussianDiag
    prior: GaussianDiag
    kl: Tensor      # per-sample, shape (B,)
    noise: np.ndarray


@dataclass
class ElboParts:
    elbo: Tensor        # scalar, batch mean
    recon: Tensor       # scalar, batch mean
    kl_layers: list     # scalar Tensors, batch means
    states: list

    @property
    def kl_total(self):
        total = self.kl_layers[0]
        for kl in self.kl_layers[1:]:
            total = total + kl
        return total


@dataclass
class EvalReport:
    elbo: float
    recon: float
    kl_layers: list
    elbo_mc: float      # single-sample stochastic bound == iwae_bound(K=1)
    iwae: float
    iwae_samples: int


def _expand(t, batch):
    """Broadcast a (D,) parameter tensor to (batch, D) on-graph."""
    return constant(np.zeros((batch, t.shape[-1]))) + t


class _BernoulliDecoder:
    def __init__(self, net):
        self.net = net

    def dist(self, zcat, mode="eval", rng=None):
        return BernoulliLogits(self.net(zcat))

    def log_prob(self, x, z_list, mode="eval"):
        return self.dist(concat(z_list, axis=-1)).log_prob(x)

    def sample(self, z_list, rng, mode="eval"):
        return self.dist(concat(z_list, axis=-1)).sample(rng)


class _GaussianDecoder:
    def __init__(self, loc_net, raw_net):
        self.loc_net = loc_net
        self.raw_net = raw_net

    def dist(self, zcat):
        return GaussianDiag(self.loc_net(zcat), raw_scale=self.raw_net(zcat))

    def log_prob(self, x, z_list, mode="eval"):
        return self.dist(concat(z_list, axis=-1)).log_prob(x)

    def sample(self, z_list, rng, mode="eval"):
        value, _ = self.dist(concat(z_list, axis=-1)).sample(rng)
        return value.data


class _MafDecoder:
    """Flow likelihood head: conditional MADEs see the concatenated codes,
    the rank-1 Gaussian base is rectified layer by layer through residual
    heads (gamma^l = gamma^{l-1} + r^l(hidden(gamma^{l-1}), z^l))."""

    def __init__(self, stack, base0, res_heads):
        self.stack = stack
        self.base0 = base0          # dict of (D,) parameter tensors
        self.res_heads = res_heads  # per layer: dict name -> ResidualParamHead

    def base(self, z_list):
        batch = z_list[0].shape[0]
        params = {k: _expand(t, batch) for k, t in self.base0.items()}
        for heads, z in zip(self.res_heads, z_list):
            params = {k: heads[k].update(params[k], z) for k in params}
        return GaussianDiagRank1(params["loc"], raw_diag=params["raw"], perturb=params["perturb"])

    def log_prob(self, x, z_list, mode="eval"):
        return self.stack.log_prob(x, concat(z_list, axis=-1), self.base(z_list), mode=mode)

    def sample(self, z_list, rng, mode="eval"):
        return self.stack.sample(rng, concat(z_list, axis=-1), self.base(z_list))


class SereModel:
    """Hierarchy assembled from a spec; owns a named ParameterStore whose
    `gen/` prefix is the generative parameter set (prior heads, bijector
    heads, decoder) and `inf/` the inference set (encoders, variational
    heads). The bijector heads appear once, under gen/, and are referenced by
    both passes."""

    def __init__(self, spec, seed=0, store=None):
        self.spec = spec
        self.store = store if store is not None else ParameterStore()
        rng = new_rng(seed, "init")
        s, st = spec, self.store

        self.evidence_enc = []
        self.evidence_bn = []
        self.latent_enc = [None]
        self.var_heads = []
        self.prior_heads = []
        self.bijectors = []
        self.bij_ctx = []

        for l in range(1, s.L + 1):
            D = s.layer_dims[l - 1]
            act = s.activation
            if s.batchnorm:
                self.evidence_bn.append(
                    build_batchnorm(st, f"inf/layer{l}/bn", s.data_dim, momentum=s.bn_momentum))
            else:
                self.evidence_bn.append(None)
            self.evidence_enc.append(build_mlp(
                st, f"inf/layer{l}/evidence", rng, s.data_dim, s.ev_feature(),
                widths=s.evidence_widths, activation=act))

            conditioned = s.wiring == "sere" and l >= 2
            if conditioned:
                self.latent_enc.append(build_mlp(
                    st, f"inf/layer{l}/latent", rng, s.layer_dims[l - 2], s.lat_feature(l),
                    widths=s.latent_widths, activation=act))
            elif l >= 2:
                self.latent_enc.append(None)

            if s.variational_style == "concat" or not conditioned:
                feat_in = s.ev_feature() + (s.lat_feature(l) if conditioned else 0)
                heads = {
                    "loc": build_mlp(st, f"inf/layer{l}/loc", rng, feat_in, D,
                                     widths=s.head_widths, activation=act),
                    "raw": build_mlp(st, f"inf/layer{l}/raw", rng, feat_in, D,
                                     widths=s.head_widths, activation=act),
                }
            else:
                heads = {}
                for name in ("loc", "raw"):
                    heads[f"phi1_{name}"] = build_mlp(
                        st, f"inf/layer{l}/phi1_{name}", rng, s.layer_dims[l - 2], D,
                        widths=s.head_widths, activation=act)
                    heads[f"hidden_{name}"] = build_mlp(
                        st, f"inf/layer{l}/hidden_{name}", rng, D, s.res_hidden(l - 1),
                        widths=(), activation=act)
                    heads[f"res_{name}"] = build_mlp(
                        st, f"inf/layer{l}/res_{name}", rng,
                        s.res_hidden(l - 1) + s.ev_feature(), D,
                        widths=s.head_widths, activation=act)
            self.var_heads.append(heads)

            prior_conditioned = s.wiring == "sere" and s.prior_style == "conditioned" and l >= 2
            if s.prior_style == "standard-normal":
                self.prior_heads.append({"kind": "standard"})
            elif prior_conditioned:
                self.prior_heads.append({
                    "kind": "heads",
                    "loc": build_mlp(st, f"gen/prior{l}/loc", rng, s.layer_dims[l - 2], D,
                                     widths=s.prior_widths, activation=act),
                    "raw": build_mlp(st, f"gen/prior{l}/raw", rng, s.layer_dims[l - 2], D,
                                     widths=s.prior_widths, activation=act),
                })
            else:
                self.prior_heads.append({
                    "kind": "constant",
                    "loc": st.create(f"gen/prior{l}/loc", np.zeros(D)),
                    "raw": st.create(f"gen/prior{l}/raw", np.full(D, raw_from_scale(1.0))),
                })

            bij_conditioned = s.wiring == "sere" and l >= 2
            if bij_conditioned:
                ctx_dim = s.layer_dims[l - 2]
                self.bij_ctx.append(None)
            else:
                ctx_dim = D
                self.bij_ctx.append(st.create(f"gen/bijector{l}/ctx", np.zeros(ctx_dim)))
            self.bijectors.append(ConditionedBijector.build(
                st, f"gen/bijector{l}", rng, ctx_dim, D, widths=s.bijector_widths,
                activation=s.bijector_activation, out_activation=s.bijector_out_activation))

        sumD = s.total_latent
        if s.decoder == "bernoulli":
            self.decoder = _BernoulliDecoder(build_mlp(
                st, "gen/decoder/logits", rng, sumD, s.data_dim,
                widths=s.decoder_widths, activation=s.activation))
        elif s.decoder == "gaussian":
            self.decoder = _GaussianDecoder(
                build_mlp(st, "gen/decoder/loc", rng, sumD, s.data_dim,
                          widths=s.decoder_widths, activation=s.activation),
                build_mlp(st, "gen/decoder/raw", rng, sumD, s.data_dim,
                          widths=s.decoder_widths, activation=s.activation),
            )
        else:
            stack = MafStack.build(
                st, "gen/decoder/maf", rng, cond_dim=sumD, dim=s.data_dim,
                n_flows=s.maf_flows, mades_per_flow=s.maf_mades,
                hidden_sizes=s.maf_hidden, activation=s.activation, seed=seed)
            base0 = {
                "loc": st.create("gen/decoder/base0/loc", np.zeros(s.data_dim)),
                "raw": st.create("gen/decoder/base0/raw", np.full(s.data_dim, raw_from_scale(1.0))),
                "perturb": st.create("gen/decoder/base0/perturb", np.zeros(s.data_dim)),
            }
            res_heads = []
            for l in range(1, s.L + 1):
                heads = {}
                for name in ("loc", "raw", "perturb"):
                    hidden = build_mlp(st, f"gen/decoder/res{l}/{name}/hidden", rng,
                                       s.data_dim, s.maf_base_feature, widths=(),
                                       activation=s.activation)
                    res = build_mlp(st, f"gen/decoder/res{l}/{name}/res", rng,
                                    s.maf_base_feature + s.layer_dims[l - 1], s.data_dim,
                                    widths=(), activation=s.activation)
                    heads[name] = ResidualParamHead(hidden, res)
                res_heads.append(heads)
            self.decoder = _MafDecoder(stack, base0, res_heads)

    # distribution builders ---------------------------------------------------

    def prior_dist(self, l, z_prev, batch):
        head = self.prior_heads[l - 1]
        if head["kind"] == "standard":
            D = self.spec.layer_dims[l - 1]
            return GaussianDiag(constant(np.zeros((batch, D))), var=constant(np.ones((batch, D))))
        if head["kind"] == "heads":
            return GaussianDiag(head["loc"](z_prev), raw_scale=head["raw"](z_prev))
        return GaussianDiag(_expand(head["loc"], batch), raw_scale=_expand(head["raw"], batch))

    def bijector_for(self, l, z_prev, batch):
        ctx = self.bij_ctx[l - 1]
        if ctx is None:
            return self.bijectors[l - 1].params(z_prev)
        return self.bijectors[l - 1].params(_expand(ctx, batch))

    def posterior_dist(self, l, xt, z_prev, mode):
        s = self.spec
        xin = xt
        if self.evidence_bn[l - 1] is not None:
            xin = self.evidence_bn[l - 1](xt, mode)
        ev = self.evidence_enc[l - 1](xin)
        heads = self.var_heads[l - 1]
        conditioned = s.wiring == "sere" and l >= 2
        if not conditioned:
            return GaussianDiag(heads["loc"](ev), raw_scale=heads["raw"](ev))
        if s.variational_style == "concat":
            feat = concat([self.latent_enc[l - 1](z_prev), ev], axis=-1)
            return GaussianDiag(heads["loc"](feat), raw_scale=heads["raw"](feat))
        params = {}
        for name in ("loc", "raw"):
            first = heads[f"phi1_{name}"](z_prev)
            hidden = heads[f"hidden_{name}"](first)
            params[name] = first + heads[f"res_{name}"](concat([hidden, ev], axis=-1))
        return GaussianDiag(params["loc"], raw_scale=params["raw"])

    # core passes -------------------------------------------------------------

    def infer(self, x, rng=None, noises=None, mode="eval"):
        """Top-down inference; returns one LayerState per layer."""
        xt = as_tensor(x)
        if xt.ndim != 2 or xt.shape[1] != self.spec.data_dim:
            raise ShapeError("infer", xt.shape, (self.spec.data_dim,))
        if rng is None and noises is None:
            raise ValueError("infer needs an rng or explicit noises")
        batch = xt.shape[0]
        states = []
        z_prev = None
        for l in range(1, self.spec.L + 1):
            posterior = self.posterior_dist(l, xt, z_prev, mode)
            if noises is not None:
                noise = noises[l - 1]
            else:
                noise = rng.standard_normal((batch, self.spec.layer_dims[l - 1]))
            eps = posterior.sample_with_noise(noise)
            prior = self.prior_dist(l, z_prev, batch)
            # the shared transformational layer: same object, same parameters
            # as the generative path would apply to this eps
            z, _ = self.bijector_for(l, z_prev, batch).forward(eps)
            kl = kl_diag_diag(posterior, prior)
            states.append(LayerState(eps=eps, z=z, posterior=posterior, prior=prior,
                                     kl=kl, noise=noise))
            z_prev = z
        return states

    def generate(self, n, rng, mode="eval"):
        """Ancestral sampling; returns (list of z^l arrays, x sample)."""
        z_prev = None
        z_list = []
        zs_data = []
        for l in range(1, self.spec.L + 1):
            prior = self.prior_dist(l, z_prev, n)
            eps, _ = prior.sample(rng, shape=(n, self.spec.layer_dims[l - 1]))
            z, _ = self.bijector_for(l, z_prev, n).forward(eps)
            z_list.append(z)
            zs_data.append(z.data)
            z_prev = z
        x = self.decoder.sample(z_list, rng, mode=mode)
        return zs_data, x

    def reconstruction(self, states, x, mode="eval"):
        return self.decoder.log_prob(x, [s.z for s in states], mode=mode)

    def elbo(self, x, beta=1.0, rng=None, noises=None, n_mc=1, mode="eval"):
        """Reconstruction minus beta-weighted analytic KLs, batch means."""
        if not (0.0 <= beta <= 1.0):
            raise ValueError(f"beta must be in [0,1], got {beta}")
        recon_acc = None
        kl_acc = None
        for _ in range(n_mc):
            states = self.infer(x, rng=rng, noises=noises, mode=mode)
            recon = reduce_mean(self.reconstruction(states, x, mode=mode))
            kls = [reduce_mean(s.kl) for s in states]
            recon_acc = recon if recon_acc is None else recon_acc + recon
            kl_acc = kls if kl_acc is None else [a + k for a, k in zip(kl_acc, kls)]
        inv = 1.0 / n_mc
        recon = recon_acc * inv
        kls = [k * inv for k in kl_acc]
        elbo = recon
        for kl in kls:
            elbo = elbo - beta * kl
        return ElboParts(elbo=elbo, recon=recon, kl_layers=kls, states=states)

    def _log_weights(self, x, rng, mode="eval"):
        """Per-row log importance weights along one inference draw."""
        states = self.infer(x, rng=rng, mode=mode)
        logw = self.reconstruction(states, x, mode=mode)
        for s in states:
            logw = logw + s.prior.log_prob(s.eps) - s.posterior.log_prob(s.eps)
        return logw.data

    def iwae_bound(self, x, n_samples, rng, chunk=None, mode="eval"):
        """Log-mean-exp of K importance weights per datum, averaged.

        The bijector Jacobians cancel: the same shared f^l transforms the
        prior and posterior densities along each draw's trajectory, so the
        weights are ratios of eps-space densities times the likelihood.
        """
        if n_samples < 1:
            raise ValueError("iwae_bound needs n_samples >= 1")
        x = np.asarray(x, dtype=np.float64)
        batch = x.shape[0]
        if chunk is None:
            chunk = max(1, 32768 // max(1, batch))
        run_max = np.full(batch, -np.inf)
        run_sum = np.zeros(batch)
        done = 0
        while done < n_samples:
            k = min(chunk, n_samples - done)
            xr = np.tile(x, (k, 1))
            logw = self._log_weights(xr, rng, mode=mode).reshape(k, batch)
            m = np.maximum(run_max, logw.max(axis=0))
            scale = np.where(np.isfinite(run_max), np.exp(run_max - m), 0.0)
            run_sum = run_sum * scale + np.exp(logw - m).sum(axis=0)
            run_max = m
            done += k
        return float(np.mean(run_max + np.log(run_sum) - np.log(n_samples)))

    def joint_log_prob(self, eps_list, x, mode="eval"):
        """log p(eps^{1:L}, x): prior terms plus likelihood, z's recomputed."""
        eps_list = [as_tensor(e) for e in eps_list]
        if len(eps_list) != self.spec.L:
            raise ShapeError("joint_log_prob", (len(eps_list),), (self.spec.L,))
        batch = eps_list[0].shape[0]
        total = None
        z_prev = None
        z_list = []
        for l, eps in enumerate(eps_list, start=1):
            if eps.shape[-1] != self.spec.layer_dims[l - 1]:
                raise ShapeError("joint_log_prob", eps.shape, (self.spec.layer_dims[l - 1],))
            prior = self.prior_dist(l, z_prev, batch)
            lp = prior.log_prob(eps)
            total = lp if total is None else total + lp
            z, _ = self.bijector_for(l, z_prev, batch).forward(eps)
            z_list.append(z)
            z_prev = z
        return total + self.decoder.log_prob(x, z_list, mode=mode)

    def evaluate(self, x, n_samples, rng, mode="eval"):
        """EvalReport; elbo_mc uses the identical draw path as iwae K=1."""
        eval_rng_state = rng.bit_generator.state
        parts = self.elbo(x, beta=1.0, rng=rng, mode=mode)
        rng.bit_generator.state = eval_rng_state
        elbo_mc = self.iwae_bound(x, 1, rng, mode=mode)
        iwae = self.iwae_bound(x, n_samples, rng, mode=mode)
        return EvalReport(
            elbo=float(parts.elbo.data),
            recon=float(parts.recon.data),
            kl_layers=[float(k.data) for k in parts.kl_layers],
            elbo_mc=elbo_mc,
            iwae=iwae,
            iwae_samples=n_samples,
        )

    # bookkeeping -------------------------------------------------------------

    def theta_size(self):
        return self.store.n_params("gen/")

    def phi_size(self):
        return self.store.n_params("inf/")

    def n_params(self):
        return self.store.n_params()


# linear oracle matching -------------------------------------------------------

def linear_hierarchy_spec(model):
    """Spec whose networks are bare affine maps: the hierarchy can then
    represent the linear-Gaussian oracle model exactly."""
    return HierarchySpec(
        data_dim=model.xdim,
        layer_dims=tuple(model.dims),
        wiring="sere",
        variational_style="concat",
        decoder="gaussian",
        prior_style="conditioned",
        activation="identity",
        evidence_widths=(),
        evidence_feature=None,
        latent_widths=(),
        latent_feature=None,
        head_widths=(),
        prior_widths=(),
        bijector_widths=(),
        bijector_activation="identity",
        bijector_out_activation="identity",
        decoder_widths=(),
        batchnorm=False,
    )


def _set(store, name, value):
    t = store[name]
    value = np.asarray(value, dtype=np.float64)
    if t.data.shape != value.shape:
        raise ShapeError("install_linear_model", t.data.shape, value.shape)
    t.data = value.copy()


def install_linear_model(hier, lin, posterior="exact"):
    """Set a linear-mode hierarchy's parameters to a LinearGaussianModel.

    posterior="exact" installs the oracle's conditional p(eps^l | z^{l-1}, x)
    into the inference heads (requires the conditional covariances to be
    diagonal, e.g. 1-dimensional layers); "prior" installs the prior maps as
    the proposal; "none" leaves the inference side untouched.
    """
    if not np.allclose(lin.R, np.diag(np.diag(lin.R))):
        raise ValueError("matched decoder is diagonal-Gaussian; need diagonal R")
    st = hier.store
    L = lin.L
    for l in range(1, L + 1):
        D = lin.dims[l - 1]
        # identity encoders
        _set(st, f"inf/layer{l}/evidence/w0", np.eye(lin.xdim))
        _set(st, f"inf/layer{l}/evidence/b0", np.zeros(lin.xdim))
        if l >= 2:
            _set(st, f"inf/layer{l}/latent/w0", np.eye(lin.dims[l - 2]))
            _set(st, f"inf/layer{l}/latent/b0", np.zeros(lin.dims[l - 2]))
        # priors
        if l == 1:
            _set(st, "gen/prior1/loc", lin.m[0])
            _set(st, "gen/prior1/raw", raw_from_scale(lin.v[0]))
        else:
            _set(st, f"gen/prior{l}/loc/w0", lin.M[l - 1].T)
            _set(st, f"gen/prior{l}/loc/b0", lin.m[l - 1])
            _set(st, f"gen/prior{l}/raw/w0", np.zeros((lin.dims[l - 2], D)))
            _set(st, f"gen/prior{l}/raw/b0", raw_from_scale(lin.v[l - 1]))
        # shared bijectors
        if l == 1:
            _set(st, "gen/bijector1/shift/w0", np.zeros((D, D)))
            _set(st, "gen/bijector1/shift/b0", lin.b[0])
            _set(st, "gen/bijector1/diag/w0", np.zeros((D, D)))
            _set(st, "gen/bijector1/diag/b0", raw_from_scale(lin.d[0]))
            _set(st, "gen/bijector1/perturb/w0", np.zeros((D, D)))
            _set(st, "gen/bijector1/perturb/b0", lin.u[0])
        else:
            dz = lin.dims[l - 2]
            _set(st, f"gen/bijector{l}/shift/w0", lin.B[l - 1].T)
            _set(st, f"gen/bijector{l}/shift/b0", lin.b[l - 1])
            _set(st, f"gen/bijector{l}/diag/w0", np.zeros((dz, D)))
            _set(st, f"gen/bijector{l}/diag/b0", raw_from_scale(lin.d[l - 1]))
            _set(st, f"gen/bijector{l}/perturb/w0", np.zeros((dz, D)))
            _set(st, f"gen/bijector{l}/perturb/b0", lin.u[l - 1])
    # decoder: loc = concat(z) @ [C^1 .. C^L]^T, fixed diagonal noise
    sumD = lin.total_latent
    W = np.zeros((sumD, lin.xdim))
    off = 0
    for l in range(L):
        W[off:off + lin.dims[l], :] = lin.C[l].T
        off += lin.dims[l]
    _set(st, "gen/decoder/loc/w0", W)
    _set(st, "gen/decoder/loc/b0", np.zeros(lin.xdim))
    _set(st, "gen/decoder/raw/w0", np.zeros((sumD, lin.xdim)))
    _set(st, "gen/decoder/raw/b0", raw_from_scale(np.diag(lin.R)))

    if posterior == "none":
        return
    for l in range(1, L + 1):
        D = lin.dims[l - 1]
        if posterior == "exact":
            Kz, Kx, k0, cond_cov = oracle.posterior_conditional(lin, l)
            if D > 1 and not np.allclose(cond_cov, np.diag(np.diag(cond_cov)), atol=1e-12):
                raise ValueError("exact posterior is non-diagonal; use 1-d layers")
            var = np.diag(cond_cov).copy()
        else:  # prior proposal
            Kz = lin.M[l - 1].copy() if l >= 2 else None
            Kx = np.zeros((D, lin.xdim))
            k0 = lin.m[l - 1]
            var = lin.v[l - 1]
        if l == 1:
            W = Kx.T
        else:
            W = np.concatenate([Kz.T, Kx.T], axis=0)
        _set(st, f"inf/layer{l}/loc/w0", W)
        _set(st, f"inf/layer{l}/loc/b0", k0)
        _set(st, f"inf/layer{l}/raw/w0", np.zeros(W.shape))
        _set(st, f"inf/layer{l}/raw/b0", raw_from_scale(var))
