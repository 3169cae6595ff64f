"""Backend parity and closed-form checks for the elementwise kernels."""

import numpy as np
import pytest

from sere import kernels


BACKENDS = kernels.available_backends()


@pytest.fixture(params=BACKENDS)
def backend(request):
    previous = kernels.current_backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(previous)


def test_closed_forms(backend):
    assert kernels.softplus(np.array([0.0]))[0] == pytest.approx(np.log(2.0), abs=1e-12)
    assert kernels.elu(np.array([-5.0]))[0] == pytest.approx(np.expm1(-5.0), abs=1e-12)
    assert kernels.relu(np.array([-1.0, 2.0])) == pytest.approx([0.0, 2.0])
    assert kernels.sigmoid(np.array([0.0]))[0] == pytest.approx(0.5, abs=1e-15)
    # scale map: softplus(elu(0)) = ln 2, large raw passes through
    assert kernels.scale_from_raw(np.array([0.0]))[0] == pytest.approx(np.log(2.0), abs=1e-12)
    assert kernels.scale_from_raw(np.array([10.0]))[0] == pytest.approx(10.0000453988992, abs=1e-10)


def test_overflow_safety(backend):
    big = np.array([-745.0, -50.0, 50.0, 745.0])
    assert np.all(np.isfinite(kernels.softplus(big)))
    assert np.all(np.isfinite(kernels.sigmoid(big)))
    assert np.all(np.isfinite(kernels.scale_from_raw(big)))
    assert kernels.softplus(big)[-1] == pytest.approx(745.0)


def test_bernoulli_terms(backend):
    logits = np.array([0.0, 0.0, 3.0])
    x = np.array([1.0, 0.0, 1.0])
    terms = kernels.bernoulli_logprob_terms(logits, x)
    assert terms[0] == pytest.approx(-np.log(2.0), abs=1e-12)
    assert terms[1] == pytest.approx(-np.log(2.0), abs=1e-12)
    assert terms[2] == pytest.approx(-np.log1p(np.exp(-3.0)), abs=1e-12)


def test_adam_first_step(backend):
    p = np.array([1.0])
    g = np.array([1.0])
    m = np.zeros(1)
    v = np.zeros(1)
    kernels.adam_update(p, g, m, v, lr=0.1, b1=0.9, b2=0.999, eps=1e-8, t=1)
    # bias-corrected m_hat = v_hat = 1 on the first unit-gradient step
    assert p[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)


@pytest.mark.skipif("numba" not in BACKENDS, reason="numba unavailable")
def test_backend_agreement():
    rng = np.random.default_rng(0)
    x = rng.uniform(-30.0, 30.0, (64, 33))
    g = rng.standard_normal(x.shape)
    names = ["relu", "elu", "softplus", "sigmoid", "scale_from_raw", "logit"]
    results = {}
    for backend in ("numpy", "numba"):
        kernels.set_backend(backend)
        vals = {}
        for name in names:
            arg = (x + 31.0) / 62.0 * 0.98 + 0.01 if name == "logit" else x
            vals[name] = getattr(kernels, name)(arg)
            vals[name + "_grad"] = getattr(kernels, name + "_grad")(
                arg, g) if name != "sigmoid" else kernels.sigmoid_grad_from_out(vals[name], g)
        results[backend] = vals
    kernels.set_backend("numba")
    for name, ref in results["numpy"].items():
        got = results["numba"][name]
        np.testing.assert_allclose(got, ref, rtol=0, atol=5e-15, err_msg=name)


@pytest.mark.skipif("numba" not in BACKENDS, reason="numba unavailable")
def test_adam_backend_agreement():
    rng = np.random.default_rng(1)
    states = {}
    for backend in ("numpy", "numba"):
        kernels.set_backend(backend)
        p = rng.standard_normal(100).copy()
        p0 = p.copy()
        g = rng.standard_normal(100)
        m = np.zeros(100)
        v = np.zeros(100)
        for t in range(1, 6):
            kernels.adam_update(p0, g, m, v, 1e-2, 0.9, 0.999, 1e-8, t, weight_decay=1e-4)
        states[backend] = p0.copy()
        rng = np.random.default_rng(1)  # replay identical draws
    np.testing.assert_allclose(states["numba"], states["numpy"], rtol=0, atol=1e-14)


def test_set_backend_unknown():
    with pytest.raises(ValueError):
        kernels.set_backend("cuda")
