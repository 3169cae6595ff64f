"""Independent ground truth: exact Gaussian inference for linear hierarchies.

A linear instantiation of the hierarchy is jointly Gaussian, so the joint
over (eps^1..eps^L, x) has a closed form: each deterministic transformational
output z^l is eliminated symbolically as an affine function of the eps's
(never treated as a degenerate Gaussian), and conditioning is done by Schur
complements on an augmented block.

The factorization check computes Cov(eps^l, eps^{<l-1} | z^{l-1}, x) for every
l >= 3; the conditional-independence structure of the self-reflective wiring
predicts exactly zero. The prediction holds when the observation connects to
the hierarchy through the last transformational output; feeding earlier
latents (or the base eps's) into the observation opens the collider at x and
destroys the independence, which is what the broken-wiring counterexamples
exercise.

Everything here is plain numpy, independent of the autodiff path it checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, Tensor

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class LinearGaussianModel:
    """Per layer: prior eps^l | z^{l-1} ~ N(M^l z^{l-1} + m^l, diag(v^l));
    bijector z^l = (diag(d^l) + u^l u^l^T) eps^l + B^l z^{l-1} + b^l;
    observation x = sum_l C^l z^l + eta, eta ~ N(0, R). M[0]/B[0] are None."""

    dims: list
    M: list
    m: list
    v: list
    d: list
    u: list
    B: list
    b: list
    C: list
    R: np.ndarray

    def __post_init__(self):
        L = self.L
        for name in ("M", "m", "v", "d", "u", "B", "b", "C"):
            if len(getattr(self, name)) != L:
                raise ValueError(f"{name} must have one entry per layer")
        for l in range(L):
            if np.any(self.d[l] <= 0.0):
                raise ValueError("bijector diagonals must be strictly positive")
            if np.any(self.v[l] <= 0.0):
                raise ValueError("prior variances must be strictly positive")
        self.R = np.asarray(self.R, dtype=np.float64)
        if not np.allclose(self.R, self.R.T):
            raise ValueError("R must be symmetric")

    @property
    def L(self):
        return len(self.dims)

    @property
    def xdim(self):
        return self.R.shape[0]

    @property
    def total_latent(self):
        return int(sum(self.dims))

    def scale_matrix(self, l):
        return np.diag(self.d[l]) + np.outer(self.u[l], self.u[l])


@dataclass
class GaussianJoint:
    """Exact joint over (eps^1, ..., eps^L, x) with the z-elimination maps."""

    mean: np.ndarray
    cov: np.ndarray
    layer_slices: list
    x_slice: slice
    z_maps: list = field(default_factory=list)    # z^l = z_maps[l] @ eps_all + z_offsets[l]
    z_offsets: list = field(default_factory=list)

    def check_psd(self, floor=-1e-10):
        sym = 0.5 * (self.cov + self.cov.T)
        eigs = np.linalg.eigvalsh(sym)
        return float(eigs.min()) >= floor


def build_joint(model):
    """Exact mean/covariance by linear-Gaussian propagation."""
    L, E, xdim = model.L, model.total_latent, model.xdim
    offsets = np.cumsum([0] + list(model.dims))
    layer_slices = [slice(int(offsets[l]), int(offsets[l + 1])) for l in range(L)]

    mu = np.zeros(E)
    cov = np.zeros((E, E))
    z_maps, z_offsets = [], []
    for l in range(L):
        sl = layer_slices[l]
        if l == 0:
            mean_map = np.zeros((model.dims[0], E))
            mean_off = model.m[0]
        else:
            mean_map = model.M[l] @ z_maps[l - 1]
            mean_off = model.M[l] @ z_offsets[l - 1] + model.m[l]
        mu[sl] = mean_map @ mu + mean_off
        cross = cov @ mean_map.T
        cov[:, sl] = cross
        cov[sl, :] = cross.T
        cov[sl, sl] = mean_map @ cross + np.diag(model.v[l])

        S = model.scale_matrix(l)
        if l == 0:
            zmap = np.zeros((model.dims[0], E))
            zmap[:, sl] = S
            zoff = model.b[0].astype(np.float64).copy()
        else:
            zmap = model.B[l] @ z_maps[l - 1]
            zmap[:, sl] += S
            zoff = model.B[l] @ z_offsets[l - 1] + model.b[l]
        z_maps.append(zmap)
        z_offsets.append(zoff)

    F = np.zeros((xdim, E))
    f0 = np.zeros(xdim)
    for l in range(L):
        F += model.C[l] @ z_maps[l]
        f0 += model.C[l] @ z_offsets[l]

    mean = np.concatenate([mu, F @ mu + f0])
    full = np.zeros((E + xdim, E + xdim))
    full[:E, :E] = cov
    full[:E, E:] = cov @ F.T
    full[E:, :E] = F @ cov
    full[E:, E:] = F @ cov @ F.T + model.R
    return GaussianJoint(mean=mean, cov=full, layer_slices=layer_slices,
                         x_slice=slice(E, E + xdim), z_maps=z_maps, z_offsets=z_offsets)


def gaussian_log_density(x, mean, cov):
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    diff = x - mean
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("singular covariance in Gaussian log-density") from None
    alpha = np.linalg.solve(chol, diff)
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-0.5 * (diff.size * LOG_2PI + log_det + alpha @ alpha))


def exact_log_marginal(model, x):
    """Marginal Gaussian density of the observation."""
    joint = build_joint(model)
    xs = joint.x_slice
    return gaussian_log_density(x, joint.mean[xs], joint.cov[xs, xs])


def sample_model(model, n, rng):
    """Ancestral draws; returns (eps (n,E), z list, x (n,xdim))."""
    eps = np.zeros((n, model.total_latent))
    offsets = np.cumsum([0] + list(model.dims))
    zs = []
    z_prev = None
    for l in range(model.L):
        sl = slice(int(offsets[l]), int(offsets[l + 1]))
        mean = model.m[l] if l == 0 else z_prev @ model.M[l].T + model.m[l]
        e = mean + rng.standard_normal((n, model.dims[l])) * np.sqrt(model.v[l])
        eps[:, sl] = e
        z = e @ model.scale_matrix(l).T + model.b[l]
        if l > 0:
            z = z + z_prev @ model.B[l].T
        zs.append(z)
        z_prev = z
    chol_R = np.linalg.cholesky(model.R)
    x = sum(zs[l] @ model.C[l].T for l in range(model.L))
    x = x + rng.standard_normal((n, model.xdim)) @ chol_R.T
    return eps, zs, x


def _condition_cov(joint, cond_map):
    """Conditional covariance of the full (eps, x) block given cond_map @ (eps, x)."""
    S = joint.cov
    SW = S @ cond_map.T
    SWW = cond_map @ SW
    return S - SW @ np.linalg.solve(SWW, SW.T)


def verify_factorization(model, condition_on="z"):
    """Largest |Cov(eps^l, eps^{<l-1} | cond^{l-1}, x)| entry over l = 3..L.

    cond^{l-1} is the transformational output z^{l-1} (the wiring the theorem
    covers) or, with condition_on="eps", the base latent eps^{l-1} (a broken
    conditioning that does not block the hierarchy paths).
    """
    if model.L < 3:
        raise ValueError("factorization check needs L >= 3 to be non-vacuous")
    if condition_on not in ("z", "eps"):
        raise ValueError(f"unknown conditioning {condition_on!r}")
    joint = build_joint(model)
    E = model.total_latent
    total = E + model.xdim
    worst = 0.0
    for l in range(3, model.L + 1):
        dz = model.dims[l - 2]
        cond = np.zeros((dz + model.xdim, total))
        if condition_on == "z":
            cond[:dz, :E] = joint.z_maps[l - 2]
        else:
            cond[:dz, joint.layer_slices[l - 2]] = np.eye(dz)
        cond[dz:, joint.x_slice] = np.eye(model.xdim)
        cond_cov = _condition_cov(joint, cond)
        sl = joint.layer_slices[l - 1]
        prev_end = joint.layer_slices[l - 2].start
        cross = cond_cov[sl, 0:prev_end]
        worst = max(worst, float(np.max(np.abs(cross))))
    return worst


def posterior_conditional(model, l):
    """Exact affine conditional of eps^l given (z^{l-1}, x); (x only for l=1).

    Returns (K_z, K_x, k0, cond_cov) with
    E[eps^l | z^{l-1}, x] = K_z z^{l-1} + K_x x + k0. K_z is None for l=1.
    This is the factorized posterior Theorem-structure makes exact, and it is
    what gets installed into the linear inference heads of a matched model.
    """
    joint = build_joint(model)
    E = model.total_latent
    total = E + model.xdim
    if l == 1:
        cond = np.zeros((model.xdim, total))
        cond[:, joint.x_slice] = np.eye(model.xdim)
        dz = 0
    else:
        dz = model.dims[l - 2]
        cond = np.zeros((dz + model.xdim, total))
        cond[:dz, :E] = joint.z_maps[l - 2]
        cond[dz:, joint.x_slice] = np.eye(model.xdim)
    sl = joint.layer_slices[l - 1]
    SW = joint.cov @ cond.T
    SWW = cond @ SW
    gain = np.linalg.solve(SWW, SW[sl, :].T).T  # (D_l, dz + xdim)
    cond_mean_w = cond @ joint.mean
    if l > 1:
        # conditioning vector is [z^{l-1}; x]; z's offset is not part of cond @ mean
        cond_mean_w = cond_mean_w + np.concatenate([joint.z_offsets[l - 2], np.zeros(model.xdim)])
    k0 = joint.mean[sl] - gain @ cond_mean_w
    cond_cov = joint.cov[sl, sl] - gain @ SW[sl, :].T
    if l == 1:
        return None, gain, k0, cond_cov
    return gain[:, :dz], gain[:, dz:], k0, cond_cov


# randomized model generators -------------------------------------------------

def random_sere_model(rng, L=3, dims=None, xdim=2, markov=True):
    """Valid self-reflective linear instance; observation through z^L only."""
    if dims is None:
        dims = [int(rng.integers(1, 4)) for _ in range(L)]
    dims = list(dims)
    L = len(dims)
    M = [None] + [rng.uniform(-1, 1, (dims[l], dims[l - 1])) for l in range(1, L)]
    m = [rng.uniform(-1, 1, dims[l]) for l in range(L)]
    v = [rng.uniform(0.5, 2.0, dims[l]) for l in range(L)]
    d = [rng.uniform(0.5, 2.0, dims[l]) for l in range(L)]
    u = [rng.uniform(-1, 1, dims[l]) for l in range(L)]
    B = [None] + [rng.uniform(-1, 1, (dims[l], dims[l - 1])) for l in range(1, L)]
    b = [rng.uniform(-1, 1, dims[l]) for l in range(L)]
    C = []
    for l in range(L):
        if markov and l < L - 1:
            C.append(np.zeros((xdim, dims[l])))
        else:
            C.append(_away_from_zero(rng, (xdim, dims[l])))
    R = np.diag(rng.uniform(0.5, 2.0, xdim))
    return LinearGaussianModel(dims=dims, M=M, m=m, v=v, d=d, u=u, B=B, b=b, C=C, R=R)


def _away_from_zero(rng, shape, lo=0.5, hi=1.5):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], size=shape)


def random_broken_model(rng, kind, L=3, dims=None, xdim=2):
    """Counterexample wirings; returns (model, condition_on).

    skip-decoder: valid hierarchy but every z^l feeds the observation.
    dlgm: unconditioned priors/bijectors, observation consumes the base
    latents directly (identity transformational layers).
    condition-on-eps: valid hierarchy, but the check conditions on eps^{l-1}
    instead of z^{l-1}.
    """
    if dims is None:
        dims = [int(rng.integers(1, 4)) for _ in range(L)]
    dims = list(dims)
    L = len(dims)
    if kind == "skip-decoder":
        model = random_sere_model(rng, dims=dims, xdim=xdim, markov=False)
        return model, "z"
    if kind == "dlgm":
        M = [None] + [np.zeros((dims[l], dims[l - 1])) for l in range(1, L)]
        m = [rng.uniform(-1, 1, dims[l]) for l in range(L)]
        v = [rng.uniform(0.5, 2.0, dims[l]) for l in range(L)]
        d = [np.ones(dims[l]) for l in range(L)]
        u = [np.zeros(dims[l]) for l in range(L)]
        B = [None] + [np.zeros((dims[l], dims[l - 1])) for l in range(1, L)]
        b = [np.zeros(dims[l]) for l in range(L)]
        C = [_away_from_zero(rng, (xdim, dims[l])) for l in range(L)]
        R = np.diag(rng.uniform(0.5, 2.0, xdim))
        model = LinearGaussianModel(dims=dims, M=M, m=m, v=v, d=d, u=u, B=B, b=b, C=C, R=R)
        return model, "z"
    if kind == "condition-on-eps":
        model = random_sere_model(rng, dims=dims, xdim=xdim, markov=True)
        # the broken conditioning only differs from z^{l-1} when the bijector
        # actually mixes in earlier codes; push B away from zero
        for l in range(1, L):
            model.B[l] = _away_from_zero(rng, (dims[l], dims[l - 1]))
            model.M[l] = _away_from_zero(rng, (dims[l], dims[l - 1]), lo=0.4, hi=1.0)
        return model, "eps"
    raise ValueError(f"unknown broken-wiring kind {kind!r}")


# finite-difference gradient checking -----------------------------------------

@dataclass
class GradCheckResult:
    max_rel_err: float
    n_checked: int
    skipped: list  # (tensor index, flat coordinate) pairs near non-smooth points


def grad_check(fn, params, h=1e-5, nonsmooth_tol=None):
    """Central finite differences vs. taped gradients of a scalar function.

    `fn()` must rebuild the forward pass from the current values of `params`
    (a list of Tensors) and return a scalar Tensor. Coordinates where the
    second difference |f(x+h) - 2 f(x) + f(x-h)| blows up (a kink within h,
    e.g. relu at 0) are flagged as non-smooth and skipped.
    """
    if nonsmooth_tol is None:
        nonsmooth_tol = h ** 1.5
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        root = fn()
        if not np.all(np.isfinite(root.data)):
            raise FloatingPointError("grad_check: non-finite function value")
        tape.backward(root)
    f0 = float(root.data)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    max_rel = 0.0
    n_checked = 0
    skipped = []
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for ci in range(flat.size):
            orig = flat[ci]
            flat[ci] = orig + h
            f_plus = float(fn().data)
            flat[ci] = orig - h
            f_minus = float(fn().data)
            flat[ci] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError("grad_check: non-finite perturbed value")
            if abs(f_plus + f_minus - 2.0 * f0) > nonsmooth_tol:
                skipped.append((pi, ci))
                continue
            fd = (f_plus - f_minus) / (2.0 * h)
            ad = analytic[pi].reshape(-1)[ci]
            rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-8)
            max_rel = max(max_rel, rel)
            n_checked += 1
    return GradCheckResult(max_rel_err=max_rel, n_checked=n_checked, skipped=skipped)
