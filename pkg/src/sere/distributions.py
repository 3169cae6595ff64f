"""Parametric distributions: reparameterized sampling, exact log-densities,
and the closed-form KL between diagonal Gaussians.

Scale heads emit a raw pre-activation; the positive variance is
``softplus(elu(raw))``, which leaves large positive raw values untouched and
maps arbitrarily negative ones onto a small positive floor (softplus(-1)).
All densities reduce over the trailing axis, so batched inputs of shape
(B, D) yield per-row values of shape (B,).
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    bernoulli_logprob,
    constant,
    log,
    log1p,
    reduce_sum,
    scale_from_raw_op,
    sigmoid,
)

LOG_2PI = float(np.log(2.0 * np.pi))

# softplus(-1): infimum of softplus(elu(raw)) as raw -> -inf
SCALE_FLOOR = float(np.log1p(np.exp(-1.0)))


def scale_from_raw(raw):
    """Positive scale softplus(elu(raw)); monotone, floored at softplus(-1)."""
    return scale_from_raw_op(raw)


def raw_from_scale(target):
    """Inverse of scale_from_raw for targets above the floor.

    Used to install exact variances in raw-parameterized heads when matching
    a linear-Gaussian oracle instance.
    """
    target = np.asarray(target, dtype=np.float64)
    if np.any(target <= SCALE_FLOOR):
        raise ValueError(
            f"scale {target} not representable: softplus(elu(.)) is floored at {SCALE_FLOOR:.6f}"
        )
    t = np.log(np.expm1(target))  # elu(raw)
    return np.where(t >= 0.0, t, np.log1p(t))


def _check_trailing(op, a, b):
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(op, a.shape, b.shape)


class GaussianDiag:
    """Diagonal Gaussian; variance from a raw head or given directly."""

    def __init__(self, loc, raw_scale=None, var=None):
        if (raw_scale is None) == (var is None):
            raise ValueError("provide exactly one of raw_scale / var")
        self.loc = as_tensor(loc)
        self.raw_scale = as_tensor(raw_scale) if raw_scale is not None else None
        self._var = as_tensor(var) if var is not None else None
        self._sigma = None

    @property
    def var(self):
        if self._var is None:
            self._var = scale_from_raw(self.raw_scale)
        return self._var

    @property
    def sigma(self):
        if self._sigma is None:
            self._sigma = self.var.sqrt()
        return self._sigma

    @property
    def dim(self):
        return self.loc.shape[-1]

    def sample_with_noise(self, noise):
        """Reparameterized draw loc + sigma * noise for a fixed noise array."""
        return self.loc + self.sigma * constant(noise)

    def sample(self, rng, shape=None):
        shape = self.loc.shape if shape is None else shape
        noise = rng.standard_normal(shape)
        return self.sample_with_noise(noise), noise

    def log_prob(self, x):
        x = as_tensor(x)
        _check_trailing("gauss_diag_log_prob", x, self.loc)
        dx = x - self.loc
        terms = log(self.var) + dx * dx / self.var + LOG_2PI
        return reduce_sum(terms, axis=-1) * (-0.5)


def kl_diag_diag(q, p):
    """KL(q || p) for diagonal Gaussians, summed over the trailing axis."""
    _check_trailing("kl_diag_diag", q.loc, p.loc)
    dloc = p.loc - q.loc
    terms = q.var / p.var + dloc * dloc / p.var - 1.0 + log(p.var) - log(q.var)
    return reduce_sum(terms, axis=-1) * 0.5


class GaussianDiagRank1:
    """Gaussian with covariance diag(var) + perturb perturb^T.

    Log-density uses the matrix determinant lemma and Sherman-Morrison, so
    cost stays linear in the dimension.
    """

    def __init__(self, loc, raw_diag=None, perturb=None, var=None):
        if (raw_diag is None) == (var is None):
            raise ValueError("provide exactly one of raw_diag / var")
        if perturb is None:
            raise ValueError("perturb factor is required (zeros recover GaussianDiag)")
        self.loc = as_tensor(loc)
        self.raw_diag = as_tensor(raw_diag) if raw_diag is not None else None
        self._var = as_tensor(var) if var is not None else None
        self.perturb = as_tensor(perturb)

    @property
    def var(self):
        if self._var is None:
            self._var = scale_from_raw(self.raw_diag)
        return self._var

    @property
    def dim(self):
        return self.loc.shape[-1]

    def log_prob(self, x):
        x = as_tensor(x)
        _check_trailing("gauss_rank1_log_prob", x, self.loc)
        d, u = self.var, self.perturb
        y = x - self.loc
        w = reduce_sum(u * u / d, axis=-1)  # u^T D^-1 u
        log_det = reduce_sum(log(d), axis=-1) + log1p(w)
        quad = reduce_sum(y * y / d, axis=-1)
        cross = reduce_sum(u * y / d, axis=-1)
        quad = quad - cross * cross / (1.0 + w)
        return (log_det + quad + self.dim * LOG_2PI) * (-0.5)

    def sample(self, rng, shape=None):
        shape = self.loc.shape if shape is None else shape
        n_diag = rng.standard_normal(shape)
        n_rank1 = rng.standard_normal(shape[:-1] + (1,))
        value = self.loc + self.var.sqrt() * constant(n_diag) + self.perturb * constant(n_rank1)
        return value, (n_diag, n_rank1)


class BernoulliLogits:
    """Independent Bernoulli pixels with a logit parametrization."""

    def __init__(self, logits):
        self.logits = as_tensor(logits)

    @property
    def mean(self):
        return sigmoid(self.logits)

    def log_prob(self, x):
        return reduce_sum(bernoulli_logprob(self.logits, x), axis=-1)

    def sample(self, rng):
        p = self.mean.data
        return (rng.random(p.shape) < p).astype(np.float64)
