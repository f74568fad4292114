"""Slow, independent reference implementations used to check the sampler and EM.

None of these share code with :mod:`smcprobit.smc`: draws come from plain
rejection or a coordinatewise Gibbs sampler, and orthant probabilities from
closed forms or adaptive quadrature.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import log_ndtr, ndtr, ndtri, ndtri_exp

__all__ = [
    "OracleSample",
    "OracleRefused",
    "rejection_sample_tmvn",
    "gibbs_sample_tmvn",
    "truncated_normal_above",
    "orthant_prob_oracle",
    "finite_diff_gradient",
    "finite_diff_check",
]


class OracleRefused(ValueError):
    """The requested oracle does not apply to this input."""


@dataclass
class OracleSample:
    draws: np.ndarray
    method: str
    acceptance: float = math.nan

    def mean(self):
        return self.draws.mean(axis=0)

    def mean_se(self):
        return self.draws.std(axis=0, ddof=1) / math.sqrt(self.draws.shape[0])


def _oriented(orthant, mu, sigma):
    s = np.asarray(orthant, dtype=float).ravel()
    if not np.all(np.isin(s, (-1.0, 1.0))):
        raise ValueError("orthant must be a vector of +/-1")
    mu = np.asarray(mu, dtype=float).ravel()
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if mu.size != s.size or sigma.shape != (s.size, s.size):
        raise ValueError("dimension mismatch between orthant, mu and sigma")
    return s, s * mu, sigma * np.outer(s, s)


def rejection_sample_tmvn(orthant, mu, sigma, n_draws, rng=None, min_acceptance=1e-4, pilot=20000):
    """Exact draws by keeping unconstrained normals that land in the orthant.

    Refuses (``OracleRefused``) for ``p > 4`` or when a pilot run suggests an
    acceptance rate below ``min_acceptance``.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    s = np.asarray(orthant, dtype=float).ravel()
    mu = np.asarray(mu, dtype=float).ravel()
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    _oriented(s, mu, sigma)
    if s.size > 4:
        raise OracleRefused("rejection oracle limited to p <= 4")
    chol = np.linalg.cholesky(sigma)
    trial = mu + rng.standard_normal((pilot, s.size)) @ chol.T
    acc = np.mean(np.all(trial * s > 0, axis=1))
    if acc < min_acceptance:
        raise OracleRefused(f"estimated acceptance {acc:.2e} below floor {min_acceptance:.0e}; use gibbs")
    kept = [trial[np.all(trial * s > 0, axis=1)]]
    n_kept, n_tried = kept[0].shape[0], pilot
    while n_kept < n_draws:
        batch = int(min(max(1.2 * (n_draws - n_kept) / acc, 1000), 5e6))
        z = mu + rng.standard_normal((batch, s.size)) @ chol.T
        ok = z[np.all(z * s > 0, axis=1)]
        kept.append(ok)
        n_kept += ok.shape[0]
        n_tried += batch
    draws = np.concatenate(kept)[:n_draws]
    total_acc = sum(k.shape[0] for k in kept) / n_tried
    return OracleSample(draws, "rejection", total_acc)


def truncated_normal_above(mean, sd, rng, size=None):
    """Draw ``X ~ N(mean, sd^2)`` conditioned on ``X > 0`` by inverse CDF.

    Far in the tail the complementary probability is handled on the log
    scale, so standardized bounds of 40+ still give finite draws.
    """
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    a = -mean / sd
    u = rng.random(size if size is not None else np.broadcast(mean, sd).shape)
    out = np.empty(np.broadcast(a, u).shape)
    a = np.broadcast_to(a, out.shape)
    lo = a < 0
    # bulk: Phi(a) + U (1 - Phi(a)) stays away from 1
    pa = ndtr(a[lo])
    out[lo] = ndtri(pa + u[lo] * (1.0 - pa))
    # tail: -X' with X' below -a, via log Phi(-a) + log(1 - U)
    hi = ~lo
    out[hi] = -ndtri_exp(log_ndtr(-a[hi]) + np.log1p(-u[hi]))
    out = np.maximum(out, a)
    return np.broadcast_to(mean, out.shape) + np.broadcast_to(sd, out.shape) * out


def gibbs_sample_tmvn(orthant, mu, sigma, n_draws, burn_in=200, rng=None, start=None):
    """Coordinatewise Gibbs sampler run as ``n_draws`` independent parallel chains.

    Each chain starts inside the orthant and returns its state after
    ``burn_in`` full sweeps, so the draws are independent of one another.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    s, mu_u, sig_u = _oriented(orthant, mu, sigma)
    p = s.size
    prec = np.linalg.inv(sig_u)
    cond_sd = 1.0 / np.sqrt(np.diag(prec))
    if start is None:
        u = np.abs(mu_u) + np.sqrt(np.diag(sig_u))
        x = np.tile(u, (n_draws, 1))
    else:
        x = np.tile(np.asarray(start, dtype=float) * s, (n_draws, 1))
        if np.any(x <= 0):
            raise ValueError("start must lie inside the orthant")
    for _ in range(burn_in):
        for i in range(p):
            d = x - mu_u
            # conditional mean mu_i - sum_{j != i} prec_ij / prec_ii (x_j - mu_j)
            cm = mu_u[i] - (d @ prec[i] - prec[i, i] * d[:, i]) / prec[i, i]
            x[:, i] = truncated_normal_above(cm, cond_sd[i], rng)
    return OracleSample(x * s, "gibbs")


def _p1(m, v):
    return float(ndtr(m / math.sqrt(v)))


def _p2(m, sig, epsabs):
    s1, s2 = math.sqrt(sig[0, 0]), math.sqrt(sig[1, 1])
    rho = sig[0, 1] / (s1 * s2)
    if abs(m[0]) == 0 and abs(m[1]) == 0:
        return 0.25 + math.asin(rho) / (2 * math.pi)
    b = sig[0, 1] / sig[0, 0]
    cv = sig[1, 1] - b * sig[0, 1]

    def f(u1):
        dens = math.exp(-0.5 * ((u1 - m[0]) / s1) ** 2) / (s1 * math.sqrt(2 * math.pi))
        return dens * ndtr((m[1] + b * (u1 - m[0])) / math.sqrt(cv))

    val, _ = integrate.quad(f, 0.0, np.inf, epsabs=epsabs, epsrel=1e-10, limit=200)
    return float(val)


def _p3(m, sig, epsabs):
    s1 = math.sqrt(sig[0, 0])
    b1 = sig[1:, 0] / sig[0, 0]
    c1 = sig[1:, 1:] - np.outer(b1, sig[0, 1:])

    def inner(u1):
        return _p2(m[1:] + b1 * (u1 - m[0]), c1, epsabs * 0.1)

    def f(u1):
        dens = math.exp(-0.5 * ((u1 - m[0]) / s1) ** 2) / (s1 * math.sqrt(2 * math.pi))
        if dens == 0.0:
            return 0.0
        return dens * inner(u1)

    val, _ = integrate.quad(f, 0.0, np.inf, epsabs=epsabs, epsrel=1e-10, limit=200)
    return float(val)


def orthant_prob_oracle(orthant, mu, sigma, epsabs=1e-8):
    """``P(sign(Z) = orthant)`` for ``Z ~ N(mu, sigma)`` with ``p <= 3``.

    ``p = 1`` uses the normal CDF, centred ``p = 2`` the arcsine formula,
    otherwise adaptive quadrature over the first coordinate(s) of the exact
    conditional decomposition.
    """
    s, m, sig = _oriented(orthant, mu, sigma)
    p = s.size
    if p == 1:
        return _p1(m[0], sig[0, 0])
    if p == 2:
        return _p2(m, sig, epsabs)
    if p == 3:
        return _p3(m, sig, epsabs)
    raise OracleRefused("quadrature oracle limited to p <= 3")


def finite_diff_gradient(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        fp, fm = f(x + e), f(x - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value near coordinate {i}")
        g[i] = (fp - fm) / (2 * h)
    return g


def finite_diff_check(f, x, analytic_grad, h=1e-5):
    """Largest absolute gap between central differences and ``analytic_grad``."""
    g = finite_diff_gradient(f, x, h)
    return float(np.max(np.abs(g - np.asarray(analytic_grad, dtype=float))))
