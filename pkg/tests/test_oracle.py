import math

import numpy as np
import pytest
from scipy.special import ndtr

from smcprobit.mcem import MaximizerConfig, beta_hat, d_solve, m_step, omega_iterate, q_function, s_hat, tilde_q
from smcprobit.oracle import (
    OracleRefused,
    finite_diff_check,
    finite_diff_gradient,
    gibbs_sample_tmvn,
    orthant_prob_oracle,
    rejection_sample_tmvn,
    truncated_normal_above,
)
from smcprobit.probit import Parameters
from smcprobit.smc import SMCConfig, sample_tmvn_batch

from .conftest import random_corr, random_spd
from .test_mcem import _instance


def test_rejection_half_line():
    s = rejection_sample_tmvn([1], [0.0], [[1.0]], 20000, rng=1)
    assert s.method == "rejection"
    assert abs(s.acceptance - 0.5) < 3 * math.sqrt(0.25 / 40000)
    assert abs(s.mean()[0] - math.sqrt(2 / math.pi)) < 3 * s.mean_se()[0]
    assert np.all(s.draws > 0)


def test_rejection_independent_quadrant():
    s = rejection_sample_tmvn([1, 1], [0, 0], np.eye(2), 20000, rng=2)
    assert abs(s.acceptance - 0.25) < 0.01


def test_rejection_refuses():
    with pytest.raises(OracleRefused):
        rejection_sample_tmvn([1, 1], [-4.0, -4.0], np.eye(2), 10, rng=3)
    with pytest.raises(OracleRefused):
        rejection_sample_tmvn(np.ones(5), np.zeros(5), np.eye(5), 10, rng=3)
    with pytest.raises(ValueError):
        rejection_sample_tmvn([1, 0], [0, 0], np.eye(2), 10)


def test_truncated_normal_tail_is_finite():
    rng = np.random.default_rng(4)
    x = truncated_normal_above(np.full(1000, -40.0), np.ones(1000), rng)
    assert np.all(np.isfinite(x)) and np.all(x >= 0)
    assert np.mean(x) < 0.1  # mass piles up just above zero (mean ~ 1/40)


def test_gibbs_matches_rejection():
    sig = np.array([[1.0, 0.5], [0.5, 1.0]])
    mu = np.array([0.2, -0.1])
    g = gibbs_sample_tmvn([1, 1], mu, sig, 20000, burn_in=100, rng=5)
    r = rejection_sample_tmvn([1, 1], mu, sig, 20000, rng=6)
    assert g.method == "gibbs"
    assert np.all(g.draws > 0)
    se = np.sqrt(g.mean_se() ** 2 + r.mean_se() ** 2)
    assert np.all(np.abs(g.mean() - r.mean()) < 3 * se)


def test_gibbs_independent_coordinates():
    g = gibbs_sample_tmvn([1, -1], [0.0, 0.0], np.eye(2), 20000, burn_in=5, rng=7)
    target = np.array([1, -1]) * math.sqrt(2 / math.pi)
    assert np.all(np.abs(g.mean() - target) < 3 * g.mean_se())
    assert abs(np.corrcoef(g.draws.T)[0, 1]) < 0.03


def test_gibbs_vs_smc_sixcities_like():
    rho = np.array([[1.0, 0.58, 0.52, 0.58], [0.58, 1.0, 0.69, 0.56],
                    [0.52, 0.69, 1.0, 0.63], [0.58, 0.56, 0.63, 1.0]])
    mu = np.full(4, -1.1)
    orth = np.array([1.0, -1.0, 1.0, 1.0])
    g = gibbs_sample_tmvn(orth, mu, rho, 20000, burn_in=200, rng=8)
    reps = 20
    b = sample_tmvn_batch(np.tile(orth, (reps, 1)), mu, rho, SMCConfig(n_particles=2000), np.random.default_rng(9))
    means = np.einsum("sm,smi->si", b.weights, b.particles)
    se = np.sqrt(means.var(axis=0, ddof=1) / reps + g.mean_se() ** 2)
    assert np.all(np.abs(means.mean(axis=0) - g.mean()) < 3 * se)


def test_orthant_examples():
    assert orthant_prob_oracle([1, 1], [0, 0], np.eye(2)) == pytest.approx(0.25, abs=1e-12)
    rho9 = np.array([[1.0, 0.9], [0.9, 1.0]])
    assert orthant_prob_oracle([1, 1], [0, 0], rho9) == pytest.approx(0.25 + math.asin(0.9) / (2 * math.pi), abs=1e-12)
    assert orthant_prob_oracle([1, 1, 1], np.zeros(3), np.eye(3)) == pytest.approx(0.125, abs=1e-8)
    assert orthant_prob_oracle([-1], [0.3], [[4.0]]) == pytest.approx(ndtr(-0.15))
    with pytest.raises(OracleRefused):
        orthant_prob_oracle(np.ones(4), np.zeros(4), np.eye(4))


def test_orthant_shifted_bivariate_matches_rejection_rate():
    mu = np.array([0.4, -0.3])
    sig = np.array([[1.3, 0.6], [0.6, 0.8]])
    rng = np.random.default_rng(10)
    z = mu + rng.standard_normal((400000, 2)) @ np.linalg.cholesky(sig).T
    emp = np.mean((z[:, 0] > 0) & (z[:, 1] < 0))
    assert orthant_prob_oracle([1, -1], mu, sig) == pytest.approx(emp, abs=3 * math.sqrt(emp / 400000))


@pytest.mark.parametrize("p", [1, 2, 3])
def test_orthants_sum_to_one(rng, p):
    mu = rng.normal(scale=0.5, size=p)
    sig = random_spd(rng, p)
    total = 0.0
    for k in range(2**p):
        orth = [1.0 if (k >> i) & 1 else -1.0 for i in range(p)]
        total += orthant_prob_oracle(orth, mu, sig)
    assert total == pytest.approx(1.0, abs=1e-6)


def test_finite_diff_quadratic():
    a = np.array([[2.0, 0.3], [0.3, 1.0]])

    def f(x):
        return 0.5 * x @ a @ x

    x = np.array([0.7, -1.2])
    assert finite_diff_check(f, x, a @ x, h=1e-4) < 1e-9


def test_finite_diff_non_finite():
    with pytest.raises(FloatingPointError):
        finite_diff_gradient(lambda x: np.log(x[0]) if x[0] > 0 else np.nan, np.array([1e-9]), h=1e-6)


def test_beta_hat_is_stationary(rng):
    x, mom = _instance(rng)
    sig = random_spd(rng, 3)
    b = beta_hat(sig, mom, x)
    g = finite_diff_gradient(lambda v: q_function(Parameters(v, sig), mom, x), b, h=1e-5)
    assert np.linalg.norm(g) < 1e-6 * max(1.0, mom.n)


def test_qtilde_maximizer_is_stationary(rng):
    x, mom = _instance(rng, n=40, p=2)
    res = m_step(mom, x, Parameters(np.zeros(x.shape[2]), np.eye(2)),
                 MaximizerConfig("qtilde", "unconstrained", inner_tol=1e-12, inner_max_iters=500))
    beta, sig = res.params.beta, res.params.sigma
    tri = np.tril_indices(2)

    def f(v):
        s = np.zeros((2, 2))
        s[tri] = v
        s = s + s.T - np.diag(np.diag(s))
        return tilde_q(Parameters(beta, s), mom, x)

    g = finite_diff_gradient(f, sig[tri], h=1e-5)
    assert np.linalg.norm(g) < 1e-4


def _sym_from_tril(v, p):
    s = np.zeros((p, p))
    s[np.tril_indices(p)] = v
    return s + s.T - np.diag(np.diag(s))


@pytest.mark.parametrize("mode", ["correlation", "fixed_first"])
def test_omega_iterate_stationary_by_finite_differences(rng, mode):
    p = 3
    for scale_lo, scale_hi in ((0.8, 1.2), (0.3, 3.0)):
        s = random_corr(rng, p) * np.outer(*(2 * [np.sqrt(rng.uniform(scale_lo, scale_hi, p))]))
        om, _ = omega_iterate(s, mode)
        tri = np.tril_indices(p)
        # free coordinates: off-diagonal entries, plus the diagonal past (1, 1) in fixed_first
        free = np.array([i != j or (mode == "fixed_first" and i > 0) for i, j in zip(*tri)])

        def f(v):
            full = om[tri].copy()
            full[free] = v
            w = _sym_from_tril(full, p)
            return -np.linalg.slogdet(w)[1] - np.trace(np.linalg.solve(w, s))

        g = finite_diff_gradient(f, om[tri][free], h=1e-5)
        assert np.max(np.abs(g)) < 1e-4


def test_omega_d_solve_cycle_stationary_by_finite_differences(rng):
    p = 3
    x, mom = _instance(rng, n=60, p=p)
    beta = beta_hat(np.eye(p), mom, x)
    d = np.ones(p)
    for _ in range(1000):
        om, _ = omega_iterate(s_hat(beta, d, mom, x))
        new_d, _ = d_solve(om, beta, mom, x, current=d)
        if np.max(np.abs(new_d - d)) < 1e-13:
            break
        d = new_d
    sig = om * np.outer(d, d)
    tri = np.tril_indices(p)
    g = finite_diff_gradient(lambda v: tilde_q(Parameters(beta, _sym_from_tril(v, p)), mom, x), sig[tri], h=1e-5)
    assert np.max(np.abs(g)) < 1e-4
