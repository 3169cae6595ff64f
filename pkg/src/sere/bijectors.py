"""Invertible transformations with exact log-det-Jacobians.

The workhorse is the positive-diagonal-plus-unit-rank affine map shared
between the generative and inference paths of the hierarchy; its determinant
comes from the matrix determinant lemma and its inverse from Sherman-Morrison,
both linear in the dimension. Also here: the batch-norm bijector used between
flow steps, logit-space dequantization for pixel data, and chain composition.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    build_mlp,
    constant,
    log,
    log1p,
    reduce_sum,
)
from .distributions import scale_from_raw


class AffineDiagRank1:
    """z = shift + (diag(d) + perturb perturb^T) eps, d > 0.

    d comes from the positive scale map of a raw head unless an explicit
    positive `diag` is supplied. log|det| = sum(log d) + log(1 + sum(u^2/d)),
    strictly positive-determinant for every d > 0, hence always invertible.
    """

    def __init__(self, shift, raw_diag=None, perturb=None, diag=None):
        if (raw_diag is None) == (diag is None):
            raise ValueError("provide exactly one of raw_diag / diag")
        self.shift = as_tensor(shift)
        self.perturb = as_tensor(perturb if perturb is not None else np.zeros(self.shift.shape))
        self._diag = as_tensor(diag) if diag is not None else None
        self.raw_diag = as_tensor(raw_diag) if raw_diag is not None else None
        if self._diag is not None and np.any(self._diag.data <= 0.0):
            raise ValueError("affine bijector diagonal must be strictly positive")

    @property
    def diag(self):
        if self._diag is None:
            self._diag = scale_from_raw(self.raw_diag)
        return self._diag

    @property
    def dim(self):
        return self.shift.shape[-1]

    def _log_det(self):
        d, u = self.diag, self.perturb
        return reduce_sum(log(d), axis=-1) + log1p(reduce_sum(u * u / d, axis=-1))

    def forward(self, eps):
        eps = as_tensor(eps)
        if eps.shape[-1] != self.dim:
            raise ShapeError("affine_forward", eps.shape, self.shift.shape)
        d, u = self.diag, self.perturb
        proj = reduce_sum(u * eps, axis=-1, keepdims=True)
        z = self.shift + d * eps + u * proj
        return z, self._log_det()

    def inverse(self, z):
        z = as_tensor(z)
        if z.shape[-1] != self.dim:
            raise ShapeError("affine_inverse", z.shape, self.shift.shape)
        d, u = self.diag, self.perturb
        y = (z - self.shift) / d
        denom = 1.0 + reduce_sum(u * u / d, axis=-1, keepdims=True)
        proj = reduce_sum(u * y, axis=-1, keepdims=True) / denom
        eps = y - (u / d) * proj
        return eps, -self._log_det()


class ConditionedBijector:
    """Affine bijector whose shift/diag/perturb come from three head MLPs.

    The heads share hyperparameters (two tanh hidden layers, tanh output by
    default, which bounds every head output and keeps the diagonal inside a
    well-conditioned band). The first hierarchy layer has no preceding latent
    code, so it conditions on a learned constant vector instead; that path is
    expressed by calling `params` with the broadcast constant.
    """

    def __init__(self, shift_net, diag_net, perturb_net):
        self.shift_net = shift_net
        self.diag_net = diag_net
        self.perturb_net = perturb_net

    @property
    def ctx_dim(self):
        return self.shift_net.in_dim

    @property
    def dim(self):
        return self.shift_net.out_dim

    def params(self, ctx):
        ctx = as_tensor(ctx)
        return AffineDiagRank1(
            shift=self.shift_net(ctx),
            raw_diag=self.diag_net(ctx),
            perturb=self.perturb_net(ctx),
        )

    @staticmethod
    def build(store, prefix, rng, ctx_dim, dim, widths=(20, 20), activation="tanh",
              out_activation="tanh"):
        nets = [
            build_mlp(store, f"{prefix}/{head}", rng, ctx_dim, dim, widths,
                      activation=activation, out_activation=out_activation)
            for head in ("shift", "diag", "perturb")
        ]
        return ConditionedBijector(*nets)


class BatchNormBijector:
    """Batch normalization as an invertible affine map.

    `forward` is the normalizing direction (used when evaluating densities)
    with per-sample log_det = sum(log|gamma| - 0.5 log(var + eps)); `inverse`
    denormalizes with the running statistics (used when sampling). Train-mode
    forward normalizes by batch statistics and folds them into the running
    averages; eval mode requires stats to have been populated.
    """

    def __init__(self, gamma, beta, running_mean, running_var, momentum=0.99, eps=1e-5):
        self.gamma = gamma
        self.beta = beta
        self.running_mean = running_mean
        self.running_var = running_var
        self.momentum = momentum
        self.eps = eps
        # stats restored from a checkpoint count as initialized
        self.initialized = bool(np.any(running_mean != 0.0) or np.any(running_var != 1.0))

    @property
    def dim(self):
        return self.gamma.shape[-1]

    def _check_gamma(self):
        if np.any(self.gamma.data == 0.0):
            raise ValueError("batchnorm bijector requires gamma != 0 for invertibility")

    def _log_det(self, var):
        g2 = self.gamma * self.gamma
        return 0.5 * reduce_sum(log(g2) - log(var + self.eps), axis=-1)

    def forward(self, x, mode="eval"):
        x = as_tensor(x)
        self._check_gamma()
        if mode == "train":
            if x.shape[0] < 2:
                raise ValueError("batchnorm bijector: train mode needs batch size >= 2")
            mu = x.mean(axis=0, keepdims=True)
            var = ((x - mu) ** 2).mean(axis=0, keepdims=True)
            m = self.momentum if self.initialized else 0.0
            self.running_mean[:] = m * self.running_mean + (1.0 - m) * mu.data[0]
            self.running_var[:] = m * self.running_var + (1.0 - m) * var.data[0]
            self.initialized = True
        elif mode == "eval":
            if not self.initialized:
                raise RuntimeError("batchnorm bijector: eval mode with unpopulated running stats")
            mu = constant(self.running_mean[None, :])
            var = constant(self.running_var[None, :])
        else:
            raise ValueError(f"unknown mode {mode!r}")
        y = self.gamma * (x - mu) / (var + self.eps).sqrt() + self.beta
        return y, self._log_det(var)

    def inverse(self, y, mode="eval"):
        y = as_tensor(y)
        self._check_gamma()
        if not self.initialized:
            raise RuntimeError("batchnorm bijector: inverse requires populated running stats")
        mu = constant(self.running_mean[None, :])
        var = constant(self.running_var[None, :])
        x = (y - self.beta) / self.gamma * (var + self.eps).sqrt() + mu
        return x, -self._log_det(var)

    @staticmethod
    def build(store, prefix, dim, momentum=0.99, eps=1e-5):
        gamma = store.create(f"{prefix}/gamma", np.ones(dim))
        beta = store.create(f"{prefix}/beta", np.zeros(dim))
        rm = store.buffer(f"{prefix}/running_mean", np.zeros(dim))
        rv = store.buffer(f"{prefix}/running_var", np.ones(dim))
        return BatchNormBijector(gamma, beta, rm, rv, momentum=momentum, eps=eps)


class Chain:
    """Composite bijector: forward composes left-to-right, log-dets add."""

    def __init__(self, *bijectors):
        self.bijectors = list(bijectors)
        dims = [b.dim for b in self.bijectors if getattr(b, "dim", None) is not None]
        if dims and any(d != dims[0] for d in dims):
            raise ShapeError("chain", *[(d,) for d in dims])

    @property
    def dim(self):
        for b in self.bijectors:
            if getattr(b, "dim", None) is not None:
                return b.dim
        return None

    def forward(self, x):
        total = 0.0
        for b in self.bijectors:
            x, ld = b.forward(x)
            total = total + ld
        return x, total

    def inverse(self, y):
        total = 0.0
        for b in reversed(self.bijectors):
            y, ld = b.inverse(y)
            total = total + ld
        return y, total


# pixel-space preprocessing (plain numpy; not part of the learned graph) -----

def dequantize(x_raw, rng):
    """Integers 0..255 -> uniform-dequantized values v in [0, 1)."""
    x_raw = np.asarray(x_raw)
    if np.any(x_raw < 0) or np.any(x_raw > 255):
        raise ValueError("dequantize expects integer pixel values in 0..255")
    return (x_raw.astype(np.float64) + rng.random(x_raw.shape)) / 256.0


def logit_transform(v, alpha):
    """v in [0,1] -> logit(alpha + (1-alpha) v); returns (y, per-element log|dy/dv|)."""
    if not (0.0 < alpha < 0.5):
        raise ValueError(f"alpha must be in (0, 0.5), got {alpha}")
    v = np.asarray(v, dtype=np.float64)
    w = alpha + (1.0 - alpha) * v
    y = kernels.logit(w)
    log_det = np.log(1.0 - alpha) - np.log(w) - np.log1p(-w)
    return y, log_det


def inverse_logit_transform(y, alpha):
    if not (0.0 < alpha < 0.5):
        raise ValueError(f"alpha must be in (0, 0.5), got {alpha}")
    return (kernels.sigmoid(np.asarray(y, dtype=np.float64)) - alpha) / (1.0 - alpha)


def logit_dequantize(x_raw, alpha, rng):
    """Dequantize raw pixels and map to logit space; fresh noise every call."""
    v = dequantize(x_raw, rng)
    return logit_transform(v, alpha)
