"""Conditional masked autoencoders and masked autoregressive flow stacks.

A MADE with C conditioning inputs treats them as a mask offset: conditioning
inputs get degrees 1..C and are never masked out (they reach every hidden
unit), while the D modeled inputs get degrees C+1..C+D under the chosen
ordering. Hidden degrees live in {C+1, ..., C+D-1} so no hidden unit is
useless. The input/hidden mask rule is m_next(k') >= m_prev(k); the output
rule is m_out(d) > m_last(k), with the C conditioning output rows discarded.

Each MADE parameterizes one affine autoregressive step in the inverse
(density) direction: u = (x - mu(x, c)) * exp(-s(x, c)). Sampling inverts it
one coordinate at a time in degree order. Flows stack several MADEs with
alternating orderings; batch-norm bijectors sit between flows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bijectors import BatchNormBijector
from .tensor import (
    ACTIVATIONS,
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    constant,
    exp,
    glorot_normal,
    matmul,
    neg,
    reduce_sum,
)


@dataclass
class MadeDegrees:
    """Degree assignment for one conditional MADE."""

    cond_dim: int
    dim: int
    input_degrees: np.ndarray  # length cond_dim + dim
    hidden_degrees: list = field(default_factory=list)

    @property
    def modeled_degrees(self):
        return self.input_degrees[self.cond_dim:]


def build_degrees(cond_dim, dim, hidden_sizes, ordering="natural", degree_rule="equal",
                  seed=0):
    if dim < 1 or cond_dim < 0 or any(h < 1 for h in hidden_sizes):
        raise ValueError("need dim >= 1, cond_dim >= 0, hidden sizes >= 1")
    C, D = cond_dim, dim
    rng = np.random.default_rng(seed)

    modeled = np.arange(C + 1, C + D + 1)
    if ordering == "random":
        modeled = rng.permutation(modeled)
    elif ordering == "reversed":
        modeled = modeled[::-1].copy()
    elif ordering != "natural":
        raise ValueError(f"unknown ordering {ordering!r}")
    input_degrees = np.concatenate([np.arange(1, C + 1), modeled])

    hidden = []
    for h in hidden_sizes:
        if D == 1:
            # no admissible degree exists; degree C wires hidden units to the
            # conditioning inputs only, so the single output sees just c
            hidden.append(np.full(h, C, dtype=np.int64))
        elif degree_rule == "equal":
            hidden.append(C + 1 + (np.arange(h) % (D - 1)))
        elif degree_rule == "random":
            hidden.append(rng.integers(C + 1, C + D, size=h))
        else:
            raise ValueError(f"unknown degree rule {degree_rule!r}")
    return MadeDegrees(cond_dim=C, dim=D, input_degrees=input_degrees, hidden_degrees=hidden)


def build_masks(degrees):
    """Binary masks, shaped (fan_in, fan_out) to match weight matrices.

    Returns (hidden_masks, output_mask); the output mask already has the
    conditioning rows discarded (it maps last hidden -> D modeled outputs).
    """
    chain = [degrees.input_degrees, *degrees.hidden_degrees]
    masks = []
    for prev, nxt in zip(chain[:-1], chain[1:]):
        masks.append((nxt[None, :] >= prev[:, None]).astype(np.float64))
    out_deg = degrees.modeled_degrees
    output_mask = (out_deg[None, :] > chain[-1][:, None]).astype(np.float64)
    return masks, output_mask


def connectivity(degrees):
    """Product of masks along every path: (C+D, D) reachability matrix."""
    masks, output_mask = build_masks(degrees)
    path = np.eye(degrees.cond_dim + degrees.dim)
    for m in masks:
        path = path @ m
    return path @ output_mask


class ConditionalMade:
    """Masked MLP emitting per-coordinate shift and log-scale heads.

    The conditioning block also feeds the output heads through a direct
    (unmasked) connection: the lowest-degree coordinate has no hidden path
    under the strict output rule, and direct links from inputs of degree
    <= C to every modeled output are mask-legal, so this keeps all outputs
    context-conditioned. At C=0 the skip vanishes and the construction is
    the standard masked autoencoder."""

    def __init__(self, degrees, weights, biases, head_mu, head_s, activation="relu",
                 ctx_skip_mu=None, ctx_skip_s=None):
        self.degrees = degrees
        self.masks, self.output_mask = build_masks(degrees)
        self._mask_consts = [constant(m) for m in self.masks]
        self._out_mask_const = constant(self.output_mask)
        self.weights = weights
        self.biases = biases
        self.head_mu = head_mu  # (W, b)
        self.head_s = head_s
        self.ctx_skip_mu = ctx_skip_mu
        self.ctx_skip_s = ctx_skip_s
        self.activation = activation

    @property
    def cond_dim(self):
        return self.degrees.cond_dim

    @property
    def dim(self):
        return self.degrees.dim

    def forward(self, ctx, x):
        """Outputs (mu, log_scale); coordinate d depends only on modeled
        coordinates of strictly smaller degree plus all of ctx."""
        x = as_tensor(x)
        if x.shape[-1] != self.dim:
            raise ShapeError("made_forward", x.shape, (self.dim,))
        if self.cond_dim:
            ctx = as_tensor(ctx)
            if ctx.shape[-1] != self.cond_dim:
                raise ShapeError("made_forward", ctx.shape, (self.cond_dim,))
            h = concat([ctx, x], axis=-1)
        else:
            h = x
        act = ACTIVATIONS[self.activation]
        for w, b, m in zip(self.weights, self.biases, self._mask_consts):
            h = act(matmul(h, w * m) + b)
        mu = matmul(h, self.head_mu[0] * self._out_mask_const) + self.head_mu[1]
        log_s = matmul(h, self.head_s[0] * self._out_mask_const) + self.head_s[1]
        if self.cond_dim:
            mu = mu + matmul(ctx, self.ctx_skip_mu)
            log_s = log_s + matmul(ctx, self.ctx_skip_s)
        return mu, log_s

    __call__ = forward

    @staticmethod
    def build(store, prefix, rng, cond_dim, dim, hidden_sizes=(64, 64), ordering="natural",
              degree_rule="equal", seed=0, activation="relu"):
        degrees = build_degrees(cond_dim, dim, hidden_sizes, ordering=ordering,
                                degree_rule=degree_rule, seed=seed)
        dims = [cond_dim + dim, *hidden_sizes]
        weights, biases = [], []
        for i in range(len(hidden_sizes)):
            weights.append(store.create(f"{prefix}/w{i}", glorot_normal(rng, dims[i], dims[i + 1])))
            biases.append(store.create(f"{prefix}/b{i}", np.zeros(dims[i + 1])))
        last = dims[-1]
        head_mu = (
            store.create(f"{prefix}/mu_w", glorot_normal(rng, last, dim)),
            store.create(f"{prefix}/mu_b", np.zeros(dim)),
        )
        head_s = (
            store.create(f"{prefix}/s_w", glorot_normal(rng, last, dim)),
            store.create(f"{prefix}/s_b", np.zeros(dim)),
        )
        ctx_skip_mu = ctx_skip_s = None
        if cond_dim:
            ctx_skip_mu = store.create(f"{prefix}/ctx_mu_w", glorot_normal(rng, cond_dim, dim))
            ctx_skip_s = store.create(f"{prefix}/ctx_s_w", glorot_normal(rng, cond_dim, dim))
        return ConditionalMade(degrees, weights, biases, head_mu, head_s, activation,
                               ctx_skip_mu=ctx_skip_mu, ctx_skip_s=ctx_skip_s)


class MafStack:
    """T flows of stacked conditional MADEs with batch-norm bijectors between.

    Density evaluation is the fast direction (one parallel pass per MADE);
    sampling runs coordinate-sequentially. The base distribution is supplied
    per call so conditioned bases (residual rank-1 Gaussians in the hierarchy
    decoder) and fixed bases share the same stack.
    """

    def __init__(self, flows, batchnorms):
        if batchnorms and len(batchnorms) != len(flows) - 1:
            raise ValueError("need exactly one batch-norm bijector between consecutive flows")
        self.flows = flows
        self.batchnorms = batchnorms

    @property
    def dim(self):
        return self.flows[0][0].dim

    def _check_eval_stats(self, mode):
        if mode == "eval" and any(not bn.initialized for bn in self.batchnorms):
            raise RuntimeError("maf_log_prob: eval mode with unpopulated batch-norm stats")

    def log_prob(self, x, ctx, base, mode="eval"):
        """log base(u0) plus the accumulated inverse-pass log-dets."""
        self._check_eval_stats(mode)
        u = as_tensor(x)
        total = 0.0
        for i in range(len(self.flows) - 1, -1, -1):
            for made in reversed(self.flows[i]):
                mu, s = made(ctx, u)
                u = (u - mu) * exp(neg(s))
                total = total + reduce_sum(neg(s), axis=-1)
            if i > 0 and self.batchnorms:
                u, ld = self.batchnorms[i - 1].forward(u, mode)
                total = total + ld
        return base.log_prob(u) + total

    def forward_data(self, u, ctx):
        """Generative direction base -> data, coordinate-sequential (numpy)."""
        u = np.array(u, dtype=np.float64)
        for i, flow in enumerate(self.flows):
            if i > 0 and self.batchnorms:
                u = self.batchnorms[i - 1].inverse(constant(u))[0].data
            for made in flow:
                x = np.zeros_like(u)
                order = np.argsort(made.degrees.modeled_degrees)
                for pos in order:
                    mu, s = made(ctx, constant(x))
                    x[:, pos] = mu.data[:, pos] + u[:, pos] * np.exp(s.data[:, pos])
                u = x
        return u

    def inverse_data(self, x, ctx, mode="eval"):
        """Data -> base values (the density direction, without the log-dets)."""
        self._check_eval_stats(mode)
        u = as_tensor(np.asarray(x, dtype=np.float64))
        for i in range(len(self.flows) - 1, -1, -1):
            for made in reversed(self.flows[i]):
                mu, s = made(ctx, u)
                u = (u - mu) * exp(neg(s))
            if i > 0 and self.batchnorms:
                u, _ = self.batchnorms[i - 1].forward(u, mode)
        return u.data

    def sample(self, rng, ctx, base, n=None):
        """Autoregressive generation, one coordinate at a time per MADE."""
        if n is None:
            value, _ = base.sample(rng)
        else:
            value, _ = base.sample(rng, shape=(n, self.dim))
        return self.forward_data(value.data, ctx)

    @staticmethod
    def build(store, prefix, rng, cond_dim, dim, n_flows=2, mades_per_flow=2,
              hidden_sizes=(64, 64), ordering="natural", degree_rule="equal",
              batchnorm=True, seed=0, activation="relu"):
        """Orderings alternate (reverse) between successive MADEs of a flow;
        `ordering="random"` draws a seeded permutation per MADE instead."""
        flows = []
        for t in range(n_flows):
            mades = []
            for j in range(mades_per_flow):
                if ordering == "random":
                    made_ordering = "random"
                else:
                    made_ordering = "natural" if j % 2 == 0 else "reversed"
                mades.append(ConditionalMade.build(
                    store, f"{prefix}/flow{t}/made{j}", rng, cond_dim, dim,
                    hidden_sizes=hidden_sizes, ordering=made_ordering,
                    degree_rule=degree_rule, seed=seed + 131 * t + j,
                    activation=activation,
                ))
            flows.append(mades)
        bns = []
        if batchnorm:
            for t in range(n_flows - 1):
                bns.append(BatchNormBijector.build(store, f"{prefix}/bn{t}", dim))
        return MafStack(flows, bns)


def maf_log_prob(stack, x, ctx, base, mode="eval"):
    return stack.log_prob(x, ctx, base, mode=mode)


def maf_sample(stack, rng, ctx, base, n=None):
    return stack.sample(rng, ctx, base, n=n)


class ResidualParamHead:
    """One rectification step for a base-distribution parameter estimate.

    gamma_next = gamma_prev + r(hidden(gamma_prev), z): the hidden net
    downscales the previous estimate, the residual net consumes that feature
    map together with the layer's latent code.
    """

    def __init__(self, hidden_net, residual_net):
        self.hidden_net = hidden_net
        self.residual_net = residual_net

    def update(self, gamma_prev, z):
        gamma_prev = as_tensor(gamma_prev)
        z = as_tensor(z)
        feat = self.hidden_net(gamma_prev)
        res = self.residual_net(concat([feat, z], axis=-1))
        if res.shape != gamma_prev.shape:
            raise ShapeError("residual_base_update", res.shape, gamma_prev.shape)
        return gamma_prev + res


def residual_base_update(gamma_prev, z, head):
    return head.update(gamma_prev, z)
