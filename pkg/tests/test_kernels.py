import os
import subprocess
import sys

import numpy as np
import pytest

from talbotlau import _kernels as K

needs_numba = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba backend unavailable")


@needs_numba
def test_damped_first_order_backends_agree(rng):
    ws1 = rng.normal(size=300) + 1j * rng.normal(size=300)
    rates = rng.uniform(0, 1e16, size=(4, 300))
    inv_tau = 10.0 ** -np.linspace(0, 25, 501)
    a = K.damped_first_order_numpy(ws1, rates, inv_tau)
    b = K.damped_first_order_numba(ws1, rates, inv_tau)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-13)


@needs_numba
def test_profile_grid_backends_agree(rng):
    theta = 2 * np.pi * np.arange(60) * 15 / 133
    dwell = np.full(60, 4.0)
    lam = dwell * (120 * (1 + 0.1 * np.cos(theta - 1.3)) + 30)
    counts = rng.poisson(lam).astype(float)
    v = np.linspace(0, 0.3, 101)
    lla, ra, pa = K.profile_grid_numpy(theta, dwell, counts, 30.0, v)
    llb, rb, pb = K.profile_grid_numba(theta, dwell, counts, 30.0, v)
    assert np.allclose(lla, llb, rtol=1e-12, atol=1e-8)
    assert np.allclose(ra, rb, rtol=1e-8)


@needs_numba
def test_mmm_integrals_backends_agree(rng):
    z = np.linspace(0, 8, 2001)
    gw = np.full(z.size, z[1]) * np.exp(-0.5 * z * z)
    a = rng.uniform(0.1, 50, size=6)
    j1sq = K.j1_numpy(np.multiply.outer(a, z)) ** 2
    idx = rng.integers(0, 6, size=500)
    b = rng.uniform(0, 200, size=500)
    x = K.mmm_integrals_numpy(j1sq, idx, b, z, gw)
    y = K.mmm_integrals_numba(j1sq, idx, b, z, gw)
    assert np.allclose(x, y, rtol=1e-12, atol=1e-15)


def test_series_branches_are_continuous():
    from scipy.special import sici, spherical_jn

    x = np.array([1e-8, 1e-3, 0.3, 0.4999999, 0.5, 0.5000001, 2.0, 40.0])
    assert np.allclose(K.j1_numpy(x), spherical_jn(1, x), rtol=1e-13, atol=0)
    ref = 1 - sici(x)[0] / x
    big = x >= 0.3  # below, the direct formula itself loses digits to cancellation
    assert np.allclose(K.f_numpy(x)[big], ref[big], rtol=1e-10, atol=0)
    assert K.f_numpy(np.array([1e-3]))[0] == pytest.approx(1e-6 / 18 - 1e-12 / 600, rel=1e-12)
    assert K.f_numpy(np.array([1e-4]))[0] == pytest.approx(1e-8 / 18, rel=1e-8)


def test_disable_flag_selects_numpy_backend():
    env = dict(os.environ, TALBOTLAU_DISABLE_NUMBA="1")
    out = subprocess.run(
        [sys.executable, "-c", "from talbotlau import _kernels as K; print('BACKEND', K.BACKEND, K.profile_grid.__name__)"],
        capture_output=True, text=True, env=env, check=True,
    )
    assert out.stdout.split() == ["BACKEND", "numpy", "profile_grid_numpy"]


def test_dispatch_matches_backend():
    expected = "numba" if K.HAVE_NUMBA else "numpy"
    assert K.BACKEND == expected
    assert K.damped_first_order.__name__.endswith(expected)
