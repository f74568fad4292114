import math

import numpy as np
import pytest

from smcprobit import _backend
from smcprobit.kernels import NUMBA, NUMPY, get_kernels
from smcprobit.smc import SMCConfig, sample_tmvn_batch

needs_numba = pytest.mark.skipif(NUMBA is None, reason="numba not installed")


def _inputs(rng, s=5, m=64, p=3):
    z = np.abs(rng.normal(size=(s, m, p))) + 0.05
    w = rng.random((s, m))
    w /= w.sum(axis=1, keepdims=True)
    mu = rng.normal(scale=0.5, size=(s, p))
    finv = np.empty((s, p, p))
    prop = np.empty((s, p, p))
    for a in range(s):
        b = rng.normal(size=(p, p))
        f = np.linalg.cholesky(b @ b.T + p * np.eye(p))
        finv[a] = np.linalg.inv(f)
        prop[a] = 0.7 * f
    nu = np.array([4.0, 8.0, math.inf, 64.0, math.inf])[:s]
    lower = np.zeros((s, p))
    lower[1] = -np.inf
    return z, w, mu, finv, nu, lower, prop


def test_env_flag_selects_numpy(monkeypatch):
    monkeypatch.setenv("SMCPROBIT_BACKEND", "numpy")
    assert get_kernels() is NUMPY
    monkeypatch.delenv("SMCPROBIT_BACKEND")
    monkeypatch.setenv("SMCPROBIT_DISABLE_NUMBA", "1")
    assert _backend.requested_backend() == "numpy"


def test_unknown_backend(monkeypatch):
    monkeypatch.setenv("SMCPROBIT_BACKEND", "cuda")
    with pytest.raises(ValueError):
        _backend.requested_backend()
    with pytest.raises(ValueError):
        get_kernels("fortran")


def test_numpy_log_kernel_matches_direct_formula(rng):
    z, w, mu, finv, nu, lower, _ = _inputs(rng)
    idx = np.arange(z.shape[0])
    got = NUMPY.log_kernel(z, mu, finv, nu, lower, idx)
    for a in idx:
        prec = finv[a].T @ finv[a]
        d = z[a] - mu[a]
        q = np.einsum("mi,ij,mj->m", d, prec, d)
        ref = -0.5 * q if math.isinf(nu[a]) else -0.5 * (nu[a] + 3) * np.log1p(q / nu[a])
        np.testing.assert_allclose(got[a], ref, rtol=1e-12)


@needs_numba
def test_log_kernel_agree(rng):
    z, w, mu, finv, nu, lower, _ = _inputs(rng)
    z[0, 3, 1] = -0.1  # outside the region
    idx = np.array([0, 2, 4])
    a = NUMPY.log_kernel(z, mu, finv, nu, lower, idx)
    b = NUMBA.log_kernel(z, mu, finv, nu, lower, idx)
    assert a[0, 3] == -np.inf and b[0, 3] == -np.inf
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


@needs_numba
def test_mh_move_agree(rng):
    z, w, mu, finv, nu, lower, prop = _inputs(rng)
    idx = np.array([1, 2, 3])
    logk = np.full(w.shape, np.nan)
    logk[idx] = NUMPY.log_kernel(z, mu, finv, nu, lower, idx)
    eps = rng.normal(size=(idx.size,) + z.shape[1:])
    logu = np.log(rng.random((idx.size, z.shape[1])))
    z1, z2, k1, k2 = z.copy(), z.copy(), logk.copy(), logk.copy()
    acc1 = NUMPY.mh_move(z1, k1, w, mu, finv, nu, lower, prop, eps, logu, idx)
    acc2 = NUMBA.mh_move(z2, k2, w, mu, finv, nu, lower, prop, eps, logu, idx)
    np.testing.assert_allclose(z1, z2, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(k1[idx], k2[idx], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(acc1, acc2, rtol=1e-12)
    # untouched systems stay put
    np.testing.assert_array_equal(z1[0], z[0])
    np.testing.assert_array_equal(z2[4], z[4])


@needs_numba
def test_systematic_indices_agree(rng):
    _, w, *_ = _inputs(rng)
    idx = np.arange(w.shape[0])
    u = rng.random(idx.size)
    a = NUMPY.systematic_indices(w, u, idx)
    b = NUMBA.systematic_indices(w, u, idx)
    np.testing.assert_array_equal(a, b)
    assert np.all(np.diff(a, axis=1) >= 0)


@needs_numba
def test_weighted_moments_agree(rng):
    z, w, *_ = _inputs(rng)
    idx = np.array([0, 3])
    m1, s1 = NUMPY.weighted_moments(z, w, idx)
    m2, s2 = NUMBA.weighted_moments(z, w, idx)
    np.testing.assert_allclose(m1, m2, rtol=1e-12)
    np.testing.assert_allclose(s1, s2, rtol=1e-12)
    np.testing.assert_allclose(m1[1], w[3] @ z[3], rtol=1e-12)


@needs_numba
def test_full_sampler_backends_agree():
    # random streams are drawn outside the kernels, so both backends see the
    # same inputs and end up with the same estimate up to rounding
    signs = np.array([[1.0, -1.0, 1.0], [1.0, 1.0, 1.0]])
    mu = np.array([0.2, -0.1, 0.3])
    sig = np.array([[1.0, 0.4, 0.1], [0.4, 1.0, 0.3], [0.1, 0.3, 1.0]])
    out = {}
    for name in ("numpy", "numba"):
        cfg = SMCConfig(n_particles=300, backend=name)
        out[name] = sample_tmvn_batch(signs, mu, sig, cfg, np.random.default_rng(3))
    np.testing.assert_allclose(out["numpy"].log_prob, out["numba"].log_prob, rtol=1e-9)
    np.testing.assert_array_equal(out["numpy"].steps, out["numba"].steps)
