"""Compiled kernel vs NumPy reference: same numbers, same shapes."""

import numpy as np
import pytest

from dosewise import _kernels
from dosewise.model import THETA0_DEFAULT
from oracles import random_state, random_theta


@pytest.fixture(scope="module")
def params(calibrated_model_module):
    return _kernels.pack_params(calibrated_model_module)


@pytest.fixture(scope="module")
def calibrated_model_module():
    from dosewise.config import default_config

    return default_config().model()


def _batch(rng, k=64):
    x = np.stack([random_state(rng) for _ in range(k)])
    xi = rng.normal(scale=50.0, size=(k, 8, 8))
    th = np.stack([random_theta(rng, THETA0_DEFAULT) for _ in range(k)])
    u = rng.uniform(0, 173, size=k)
    d = rng.normal(scale=1e3, size=(k, 8))
    return x, xi, th, u, d


def test_backends_report(self=None):
    backs = _kernels.backends()
    assert "numpy" in backs
    assert _kernels.BACKEND in backs


@pytest.mark.skipif("cython" not in _kernels.backends(), reason="extension not built")
def test_step_batch_agreement(params, rng):
    backs = _kernels.backends()
    x, xi, th, u, d = _batch(rng)
    a = _kernels.step_batch(x, u, d, th, params, impl=backs["numpy"])
    b = _kernels.step_batch(x, u, d, th, params, impl=backs["cython"])
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=0)


@pytest.mark.skipif("cython" not in _kernels.backends(), reason="extension not built")
def test_step_sens_batch_agreement(params, rng):
    backs = _kernels.backends()
    x, xi, th, u, d = _batch(rng)
    ax, axi = _kernels.step_sens_batch(x, xi, u, d, th, params, impl=backs["numpy"])
    bx, bxi = _kernels.step_sens_batch(x, xi, u, d, th, params, impl=backs["cython"])
    np.testing.assert_allclose(ax, bx, rtol=1e-12, atol=0)
    scale = np.abs(axi).max()
    np.testing.assert_allclose(axi, bxi, rtol=1e-10, atol=1e-12 * scale)


@pytest.mark.skipif("cython" not in _kernels.backends(), reason="extension not built")
def test_agreement_along_trajectory(params, rng):
    # differences must not blow up over a full-cycle recursion
    backs = _kernels.backends()
    x, xi, th, u, d = _batch(rng, k=8)
    xa, xia = x.copy(), xi * 0.0
    xb, xib = x.copy(), xi * 0.0
    for t in range(504):
        dd = rng.normal(scale=1e2, size=(8, 8))
        xa, xia = _kernels.step_sens_batch(xa, xia, 50.0, dd, th, params,
                                           impl=backs["numpy"])
        xb, xib = _kernels.step_sens_batch(xb, xib, 50.0, dd, th, params,
                                           impl=backs["cython"])
    np.testing.assert_allclose(xa, xb, rtol=1e-9)
    np.testing.assert_allclose(xia, xib, rtol=1e-6, atol=1e-9 * np.abs(xia).max())


def test_broadcasting_scalar_u_and_shared_theta(params, rng):
    x, xi, th, u, d = _batch(rng, k=5)
    shared = THETA0_DEFAULT
    out1 = _kernels.step_batch(x, 50.0, d, shared, params)
    out2 = _kernels.step_batch(x, np.full(5, 50.0), d, np.tile(shared, (5, 1)), params)
    np.testing.assert_array_equal(out1, out2)


def test_step_batch_matches_model_single(params, calibrated_model_module, rng):
    m = calibrated_model_module
    x, xi, th, u, d = _batch(rng, k=6)
    out = _kernels.step_batch(x, u, d, th, params)
    for i in range(6):
        np.testing.assert_allclose(out[i], m.step(x[i], u[i], d[i], th[i]),
                                   rtol=1e-12)
