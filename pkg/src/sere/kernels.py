"""Hot elementwise kernels: numba-jitted loops with a pure-numpy fallback.

Everything here is float64 in, float64 out. The numba backend fuses the
multi-pass numpy expressions (stable softplus is four array passes in numpy,
one in the jitted loop; the fused Adam update is eight). Backend selection:

* env var ``SERE_BACKEND=numpy`` or ``SERE_BACKEND=numba`` at import time,
* :func:`set_backend` at runtime (used by the tests and the benchmark).

Default is numba when importable, numpy otherwise. Both backends implement
identical IEEE-faithful formulas (no fastmath), so results agree to the last
few ulps; the test suite pins exact agreement tolerances.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "set_backend",
    "current_backend",
    "available_backends",
    "relu",
    "relu_grad",
    "elu",
    "elu_grad",
    "softplus",
    "softplus_grad",
    "sigmoid",
    "sigmoid_grad_from_out",
    "scale_from_raw",
    "scale_from_raw_grad",
    "logit",
    "logit_grad",
    "bernoulli_logprob_terms",
    "bernoulli_logprob_grad",
    "adam_update",
]


# ---------------------------------------------------------------------------
# numpy reference implementations (always present; also the fallback backend)
# ---------------------------------------------------------------------------

def _np_relu(x):
    return np.maximum(x, 0.0)


def _np_relu_grad(x, g):
    return np.where(x > 0.0, g, 0.0)


def _np_elu(x):
    return np.where(x > 0.0, x, np.expm1(np.minimum(x, 0.0)))


def _np_elu_grad(x, g):
    return np.where(x > 0.0, g, g * np.exp(np.minimum(x, 0.0)))


def _np_softplus(x):
    # max(x, 0) + log1p(exp(-|x|)) is overflow-safe on both tails
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _np_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _np_softplus_grad(x, g):
    return g * _np_sigmoid(x)


def _np_sigmoid_grad_from_out(y, g):
    return g * y * (1.0 - y)


def _np_scale_from_raw(x):
    return _np_softplus(_np_elu(x))


def _np_scale_from_raw_grad(x, g):
    inner = _np_elu(x)
    d_inner = np.where(x > 0.0, 1.0, np.exp(np.minimum(x, 0.0)))
    return g * _np_sigmoid(inner) * d_inner


def _np_logit(p):
    return np.log(p) - np.log1p(-p)


def _np_logit_grad(p, g):
    return g / (p * (1.0 - p))


def _np_bernoulli_logprob_terms(logits, x):
    return x * logits - _np_softplus(logits)


def _np_bernoulli_logprob_grad(logits, x, g):
    return g * (x - _np_sigmoid(logits))


def _np_adam_update(p, g, m, v, lr, b1, b2, eps, c1, c2, wd):
    gi = g + wd * p
    m *= b1
    m += (1.0 - b1) * gi
    v *= b2
    v += (1.0 - b2) * gi * gi
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


_NUMPY_IMPL = {
    "relu": _np_relu,
    "relu_grad": _np_relu_grad,
    "elu": _np_elu,
    "elu_grad": _np_elu_grad,
    "softplus": _np_softplus,
    "softplus_grad": _np_softplus_grad,
    "sigmoid": _np_sigmoid,
    "sigmoid_grad_from_out": _np_sigmoid_grad_from_out,
    "scale_from_raw": _np_scale_from_raw,
    "scale_from_raw_grad": _np_scale_from_raw_grad,
    "logit": _np_logit,
    "logit_grad": _np_logit_grad,
    "bernoulli_logprob_terms": _np_bernoulli_logprob_terms,
    "bernoulli_logprob_grad": _np_bernoulli_logprob_grad,
    "adam_update": _np_adam_update,
}


# ---------------------------------------------------------------------------
# numba backend: single-pass loops over raveled views
# ---------------------------------------------------------------------------

def _build_numba_impl():
    from numba import njit

    import math

    jit = njit(cache=True, fastmath=False)

    @jit
    def nb_relu(x):
        out = np.empty_like(x)
        for i in range(x.size):
            out[i] = x[i] if x[i] > 0.0 else 0.0
        return out

    @jit
    def nb_relu_grad(x, g):
        out = np.empty_like(x)
        for i in range(x.size):
            out[i] = g[i] if x[i] > 0.0 else 0.0
        return out

    @jit
    def nb_elu(x):
        out = np.empty_like(x)
        for i in range(x.size):
            out[i] = x[i] if x[i] > 0.0 else math.expm1(x[i])
        return out

    @jit
    def nb_elu_grad(x, g):
        out = np.empty_like(x)
        for i in range(x.size):
            out[i] = g[i] if x[i] > 0.0 else g[i] * math.exp(x[i])
        return out

    @jit
    def nb_softplus(x):
        out = np.empty_like(x)
        for i in range(x.size):
            xi = x[i]
            hi = xi if xi > 0.0 else 0.0
            out[i] = hi + math.log1p(math.exp(-abs(xi)))
        return out

    @jit
    def nb_sigmoid_scalar(xi):
        if xi >= 0.0:
            return 1.0 / (1.0 + math.exp(-xi))
        e = math.exp(xi)
        return e / (1.0 + e)

    @jit
    def nb_softplus_grad(x, g):
        out = np.empty_like(x)
        for i in range(x.size):
            out[i] = g[i] * nb_sigmoid_scalar(x[i])
        return out

    @jit
    def nb_sigmoid(x):
        out = np.empty_like(x)
        for i in range(x.size):
            out[i] = nb_sigmoid_scalar(x[i])
        return out

    @jit
    def nb_sigmoid_grad_from_out(y, g):
        out = np.empty_like(y)
        for i in range(y.size):
            out[i] = g[i] * y[i] * (1.0 - y[i])
        return out

    @jit
    def nb_scale_from_raw(x):
        out = np.empty_like(x)
        for i in range(x.size):
            xi = x[i]
            inner = xi if xi > 0.0 else math.expm1(xi)
            hi = inner if inner > 0.0 else 0.0
            out[i] = hi + math.log1p(math.exp(-abs(inner)))
        return out

    @jit
    def nb_scale_from_raw_grad(x, g):
        out = np.empty_like(x)
        for i in range(x.size):
            xi = x[i]
            if xi > 0.0:
                inner = xi
                d_inner = 1.0
            else:
                inner = math.expm1(xi)
                d_inner = math.exp(xi)
            out[i] = g[i] * nb_sigmoid_scalar(inner) * d_inner
        return out

    @jit
    def nb_logit(p):
        out = np.empty_like(p)
        for i in range(p.size):
            out[i] = math.log(p[i]) - math.log1p(-p[i])
        return out

    @jit
    def nb_logit_grad(p, g):
        out = np.empty_like(p)
        for i in range(p.size):
            out[i] = g[i] / (p[i] * (1.0 - p[i]))
        return out

    @jit
    def nb_bernoulli_logprob_terms(logits, x):
        out = np.empty_like(logits)
        for i in range(logits.size):
            li = logits[i]
            hi = li if li > 0.0 else 0.0
            out[i] = x[i] * li - (hi + math.log1p(math.exp(-abs(li))))
        return out

    @jit
    def nb_bernoulli_logprob_grad(logits, x, g):
        out = np.empty_like(logits)
        for i in range(logits.size):
            out[i] = g[i] * (x[i] - nb_sigmoid_scalar(logits[i]))
        return out

    @jit
    def nb_adam_update(p, g, m, v, lr, b1, b2, eps, c1, c2, wd):
        for i in range(p.size):
            gi = g[i] + wd * p[i]
            m[i] = b1 * m[i] + (1.0 - b1) * gi
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
            p[i] -= lr * (m[i] / c1) / (math.sqrt(v[i] / c2) + eps)

    return {
        "relu": nb_relu,
        "relu_grad": nb_relu_grad,
        "elu": nb_elu,
        "elu_grad": nb_elu_grad,
        "softplus": nb_softplus,
        "softplus_grad": nb_softplus_grad,
        "sigmoid": nb_sigmoid,
        "sigmoid_grad_from_out": nb_sigmoid_grad_from_out,
        "scale_from_raw": nb_scale_from_raw,
        "scale_from_raw_grad": nb_scale_from_raw_grad,
        "logit": nb_logit,
        "logit_grad": nb_logit_grad,
        "bernoulli_logprob_terms": nb_bernoulli_logprob_terms,
        "bernoulli_logprob_grad": nb_bernoulli_logprob_grad,
        "adam_update": nb_adam_update,
    }


_numba_impl = None
_active_name = "numpy"
_active = _NUMPY_IMPL


def available_backends():
    names = ["numpy"]
    try:
        import numba  # noqa: F401

        names.append("numba")
    except ImportError:
        pass
    return names


def set_backend(name):
    """Switch the kernel backend; returns the active backend name."""
    global _active, _active_name, _numba_impl
    if name == "numpy":
        _active = _NUMPY_IMPL
        _active_name = "numpy"
    elif name == "numba":
        if _numba_impl is None:
            _numba_impl = _build_numba_impl()
        _active = _numba_impl
        _active_name = "numba"
    else:
        raise ValueError(f"unknown kernel backend {name!r}; expected 'numpy' or 'numba'")
    return _active_name


def current_backend():
    return _active_name


def _flat(x):
    a = np.ascontiguousarray(x, dtype=np.float64)
    return a, a.reshape(-1)


def relu(x):
    a, f = _flat(x)
    return _active["relu"](f).reshape(a.shape)


def relu_grad(x, g):
    a, f = _flat(x)
    _, gf = _flat(g)
    return _active["relu_grad"](f, gf).reshape(a.shape)


def elu(x):
    a, f = _flat(x)
    return _active["elu"](f).reshape(a.shape)


def elu_grad(x, g):
    a, f = _flat(x)
    _, gf = _flat(g)
    return _active["elu_grad"](f, gf).reshape(a.shape)


def softplus(x):
    a, f = _flat(x)
    return _active["softplus"](f).reshape(a.shape)


def softplus_grad(x, g):
    a, f = _flat(x)
    _, gf = _flat(g)
    return _active["softplus_grad"](f, gf).reshape(a.shape)


def sigmoid(x):
    a, f = _flat(x)
    return _active["sigmoid"](f).reshape(a.shape)


def sigmoid_grad_from_out(y, g):
    a, f = _flat(y)
    _, gf = _flat(g)
    return _active["sigmoid_grad_from_out"](f, gf).reshape(a.shape)


def scale_from_raw(x):
    """softplus(elu(x)): the positive scale map used by every Gaussian head."""
    a, f = _flat(x)
    return _active["scale_from_raw"](f).reshape(a.shape)


def scale_from_raw_grad(x, g):
    a, f = _flat(x)
    _, gf = _flat(g)
    return _active["scale_from_raw_grad"](f, gf).reshape(a.shape)


def logit(p):
    a, f = _flat(p)
    return _active["logit"](f).reshape(a.shape)


def logit_grad(p, g):
    a, f = _flat(p)
    _, gf = _flat(g)
    return _active["logit_grad"](f, gf).reshape(a.shape)


def bernoulli_logprob_terms(logits, x):
    """Elementwise x*l - softplus(l); caller reduces over pixels."""
    a, f = _flat(logits)
    _, xf = _flat(x)
    return _active["bernoulli_logprob_terms"](f, xf).reshape(a.shape)


def bernoulli_logprob_grad(logits, x, g):
    a, f = _flat(logits)
    _, xf = _flat(x)
    _, gf = _flat(g)
    return _active["bernoulli_logprob_grad"](f, xf, gf).reshape(a.shape)


def adam_update(p, g, m, v, lr, b1, b2, eps, t, weight_decay=0.0):
    """Fused in-place Adam step with bias correction at step t (1-based)."""
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    _active["adam_update"](
        p.reshape(-1),
        np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
        m.reshape(-1),
        v.reshape(-1),
        lr,
        b1,
        b2,
        eps,
        c1,
        c2,
        weight_decay,
    )


_env = os.environ.get("SERE_BACKEND")
if _env:
    set_backend(_env)
else:
    try:
        set_backend("numba")
    except ImportError:
        set_backend("numpy")
