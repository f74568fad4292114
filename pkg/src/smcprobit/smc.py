"""Adaptive SMC sampler for multivariate normals truncated to orthants.

Particles start as exact draws from an unconstrained multivariate Student t,
the truncation bounds slide toward the orthant along an ESS-controlled
schedule, then the degrees of freedom are annealed up to the Gaussian.  The
running product of incremental weight sums estimates the probability of the
orthant.

Internally all work happens in *oriented* coordinates ``u = s * z`` where
``s`` is the orthant's sign vector, so every region is ``{u : u > lower}``.
Many independent systems (one per observation in the probit E-step) are
advanced in lockstep; see :func:`sample_tmvn_batch`.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import gammaln, log_ndtr

from .kernels import get_kernels

log = logging.getLogger(__name__)

__all__ = [
    "SMCConfig",
    "TargetSpec",
    "ParticleSystem",
    "ScheduleState",
    "KernelConfig",
    "TMVNBatch",
    "TargetUnreachableError",
    "student_log_density_unnorm",
    "student_log_norm_constant",
    "ess",
    "resample_systematic",
    "rw_mh_move",
    "adapt_kappa",
    "reweight_to_next_target",
    "advance_schedule",
    "sample_tmvn",
    "sample_tmvn_batch",
    "recycle_to_new_params",
    "recycle_batch",
    "resize_batch",
]

KAPPA_MIN = 1e-4
KAPPA_MAX = 1e2


class TargetUnreachableError(RuntimeError):
    """All incremental weights vanished: the schedule stepped too far."""

    def __init__(self, message, theta=None, systems=None):
        super().__init__(message)
        self.theta = theta
        self.systems = systems


@dataclass(frozen=True)
class SMCConfig:
    """Sampler settings.

    The truncation step is ``zeta (ESS~ - ess_ratio M) / M`` (floored at
    ``dtheta_min``) in the schedule coordinate chosen by ``truncation_path``:

    ``"log_mass"`` (default)
        nominal log probability removed so far, treating coordinates as
        independent Gaussians; a unit step removes a comparable share of mass
        anywhere on the path.
    ``"linear"``
        fraction of the straight path from the start bounds to the final
        bounds.  Near the orthant a fixed fraction can remove most of the
        mass in one step, which degrades small samples.

    ``schedule_ess`` picks ``ESS~``: ``"conditional"`` (default) measures the
    incremental weights against the incoming weights, ``"current"`` uses the
    ESS of the weights after reweighting.

    With ``pilot_fraction > 0`` an adaptive pilot run on
    ``pilot_particles()`` particles fixes the schedule and the random-walk
    proposals; the main run replays them with fresh randomness.  Proposals
    tuned on the very particles they move bias the normalizing-constant
    estimate upwards (by several percent per system at ``M = 100``); a
    replayed, non-adaptive run does not.  ``pilot_fraction = 0`` runs the
    adaptive sampler directly.
    """

    n_particles: int = 4000
    ess_ratio: float = 0.9
    zeta: float = 1.0
    dtheta_min: float = 1e-4
    nu0: float = 4.0
    nu_max: float = 512.0
    nu_factor: float = 2.0
    target_acceptance: float = 0.3
    moves_per_step: int = 2
    kappa0: Optional[float] = None
    kappa_gain: float = 1.0
    ridge: float = 1e-8
    start_sds: float = 6.0
    max_steps: int = 5000
    max_substeps: int = 50
    truncation_path: str = "log_mass"
    schedule_ess: str = "conditional"
    pilot_fraction: float = 0.1
    pilot_min: int = 50
    backend: Optional[str] = None

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least 2 particles")
        if not 0.0 < self.ess_ratio < 1.0:
            raise ValueError("ess_ratio must lie in (0, 1)")
        if not 2.0 < self.nu0 < self.nu_max:
            raise ValueError("need 2 < nu0 < nu_max")
        if self.nu_factor <= 1.0:
            raise ValueError("nu_factor must exceed 1")
        if not 0.0 < self.target_acceptance < 1.0:
            raise ValueError("target_acceptance must lie in (0, 1)")
        if self.moves_per_step < 1:
            raise ValueError("moves_per_step must be positive")
        if self.dtheta_min <= 0:
            raise ValueError("dtheta_min must be positive")
        if self.truncation_path not in ("log_mass", "linear"):
            raise ValueError("truncation_path must be 'log_mass' or 'linear'")
        if self.schedule_ess not in ("conditional", "current"):
            raise ValueError("schedule_ess must be 'conditional' or 'current'")
        if not 0.0 <= self.pilot_fraction <= 1.0:
            raise ValueError("pilot_fraction must lie in [0, 1]")
        if self.pilot_min < 2:
            raise ValueError("pilot_min must be >= 2")

    def pilot_particles(self):
        """Particles for the adaptive pilot run (0 when disabled)."""
        if self.pilot_fraction == 0.0:
            return 0
        return min(self.n_particles, max(self.pilot_min, math.ceil(self.pilot_fraction * self.n_particles)))

    def nu_ladder(self):
        """Degrees of freedom visited after nu0, ending with ``inf``."""
        out = []
        nu = self.nu0
        while nu < self.nu_max:
            nu = nu * self.nu_factor
            out.append(nu)
        out.append(math.inf)
        return out

    def initial_kappa(self, p):
        return self.kappa0 if self.kappa0 is not None else 2.38**2 / p


# ---------------------------------------------------------------------------
# single-system value types and operations
# ---------------------------------------------------------------------------


@dataclass
class TargetSpec:
    """One member of the artificial target sequence.

    The region is ``{z : signs * z > lower}``; ``lower`` may hold ``-inf``.
    ``nu = inf`` marks the Gaussian limit.
    """

    nu: float
    mu: np.ndarray
    sigma: np.ndarray
    signs: np.ndarray
    lower: np.ndarray

    @classmethod
    def unconstrained(cls, nu, mu, sigma):
        mu = np.asarray(mu, dtype=float)
        p = mu.shape[0]
        return cls(nu, mu, np.asarray(sigma, dtype=float), np.ones(p), np.full(p, -np.inf))

    @property
    def p(self):
        return self.mu.shape[0]

    def contains(self, z):
        z = np.asarray(z, dtype=float)
        return np.all(z * self.signs > self.lower, axis=-1)


@dataclass
class ParticleSystem:
    particles: np.ndarray
    weights: np.ndarray
    log_constant: float
    rng: np.random.Generator

    def __post_init__(self):
        self.particles = np.asarray(self.particles, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.particles.ndim != 2 or self.particles.shape[0] != self.weights.shape[0]:
            raise ValueError("particles must be (M, p) with M weights")
        if self.particles.shape[0] < 2:
            raise ValueError("a particle system needs M >= 2")

    @property
    def n_particles(self):
        return self.particles.shape[0]

    def ess(self):
        return ess(self.weights)

    def mean(self):
        return self.weights @ self.particles

    def covariance(self):
        d = self.particles - self.mean()
        return (self.weights[:, None] * d).T @ d


@dataclass
class ScheduleState:
    theta: float
    theta_final: float
    zeta: float = 1.0
    dtheta_min: float = 1e-4
    ess_ratio: float = 0.9
    phase: str = "truncation"

    @property
    def done(self):
        return self.theta >= self.theta_final


@dataclass
class KernelConfig:
    kappa: float
    proposal_cov: np.ndarray
    target_acceptance: float = 0.3
    moves_per_step: int = 2
    gain: float = 1.0


def _factor(sigma):
    """Lower Cholesky factor, its inverse and log-determinant, batched."""
    sigma = np.asarray(sigma, dtype=float)
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("covariance matrix is not positive definite") from exc
    finv = np.linalg.inv(chol)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)
    return chol, finv, logdet


def student_log_density_unnorm(z, target: TargetSpec):
    """Log of the Student (or Gaussian, ``nu = inf``) kernel, no region test."""
    z = np.asarray(z, dtype=float)
    _, finv, _ = _factor(target.sigma)
    u = (z - target.mu) @ finv.T
    q = np.sum(u * u, axis=-1)
    if np.isinf(target.nu):
        return -0.5 * q
    return -0.5 * (target.nu + target.p) * np.log1p(q / target.nu)


def _log_norm_constant(nu, p, logdet):
    if np.isinf(nu):
        return -0.5 * p * math.log(2.0 * math.pi) - 0.5 * logdet
    return (
        gammaln(0.5 * (nu + p))
        - gammaln(0.5 * nu)
        - 0.5 * p * math.log(math.pi * nu)
        - 0.5 * logdet
    )


def student_log_norm_constant(target: TargetSpec):
    """Log prefactor turning the kernel into a normalized density."""
    _, _, logdet = _factor(target.sigma)
    return float(_log_norm_constant(target.nu, target.p, logdet))


def ess(weights):
    w = np.asarray(weights, dtype=float)
    s2 = np.sum(w * w, axis=-1)
    if np.any(s2 == 0):
        raise ValueError("ESS undefined for all-zero weights")
    return 1.0 / s2


def _normalize_log_weights(logw):
    """Normalize log-weights row-wise; returns (weights, log of the row sums)."""
    mx = np.max(logw, axis=-1, keepdims=True)
    finite = np.isfinite(mx)
    safe = np.where(finite, mx, 0.0)
    ex = np.exp(logw - safe)
    tot = ex.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = ex / tot
        logsum = np.log(tot) + safe
    logsum = np.where(finite, logsum, -np.inf)
    return w, logsum[..., 0]


def resample_systematic(system: ParticleSystem, backend=None) -> ParticleSystem:
    kern = get_kernels(backend)
    w = system.weights[None, :]
    u = system.rng.random(1)
    ind = kern.systematic_indices(w, u, np.zeros(1, dtype=np.int64))[0]
    m = system.n_particles
    return ParticleSystem(system.particles[ind].copy(), np.full(m, 1.0 / m), system.log_constant, system.rng)


def _oriented(target: TargetSpec):
    s = np.asarray(target.signs, dtype=float)
    return s * target.mu, target.sigma * np.outer(s, s), np.asarray(target.lower, dtype=float)


def rw_mh_move(system: ParticleSystem, target: TargetSpec, kernel: KernelConfig, backend=None):
    """One random-walk Metropolis sweep over all particles.

    Returns the moved system and the weight-averaged acceptance probability.
    """
    kern = get_kernels(backend)
    s = np.asarray(target.signs, dtype=float)
    if not np.all(target.contains(system.particles)):
        raise ValueError("rw_mh_move: particle outside the target region on entry")
    mu_u, sig_u, lower = _oriented(target)
    _, finv, _ = _factor(sig_u)
    prop, _, _ = _factor(kernel.kappa * kernel.proposal_cov * np.outer(s, s))
    z = (system.particles * s)[None].copy()
    m, p = system.particles.shape
    nu = np.array([float(target.nu)])
    idx = np.zeros(1, dtype=np.int64)
    lower_b = np.where(np.isfinite(lower), lower, -np.inf)[None]
    logk = kern.log_kernel(z, mu_u[None], finv[None], nu, lower_b, idx)
    eps = system.rng.standard_normal((1, m, p))
    logu = np.log(system.rng.random((1, m)))
    acc = kern.mh_move(z, logk, system.weights[None], mu_u[None], finv[None], nu, lower_b,
                       prop[None], eps, logu, idx)
    moved = ParticleSystem(z[0] * s, system.weights.copy(), system.log_constant, system.rng)
    return moved, float(acc[0])


def adapt_kappa(kernel: KernelConfig, observed_acceptance: float) -> KernelConfig:
    if not 0.0 <= observed_acceptance <= 1.0:
        raise ValueError("acceptance must lie in [0, 1]")
    k = math.exp(math.log(kernel.kappa) + kernel.gain * (observed_acceptance - kernel.target_acceptance))
    return replace(kernel, kappa=min(max(k, KAPPA_MIN), KAPPA_MAX))


def reweight_to_next_target(system: ParticleSystem, current: TargetSpec, nxt: TargetSpec) -> ParticleSystem:
    """Incremental weights ``gamma_next / gamma_current`` at the current positions."""
    z = system.particles
    lg_cur = student_log_density_unnorm(z, current)
    lg_cur = np.where(current.contains(z), lg_cur, -np.inf)
    lg_nxt = student_log_density_unnorm(z, nxt)
    lg_nxt = np.where(nxt.contains(z), lg_nxt, -np.inf)
    with np.errstate(invalid="ignore"):
        inc = lg_nxt - lg_cur
    inc = np.where(np.isnan(inc), -np.inf, inc)
    with np.errstate(divide="ignore"):
        logw = np.log(system.weights) + inc
    w, logsum = _normalize_log_weights(logw[None])
    if not np.isfinite(logsum[0]):
        raise TargetUnreachableError("all incremental weights are zero")
    return ParticleSystem(z.copy(), w[0], system.log_constant + float(logsum[0]), system.rng)


def advance_schedule(schedule: ScheduleState, observed_ess: float, n_particles: int) -> ScheduleState:
    """Robbins-Monro style step toward ``theta_final`` driven by the observed ESS."""
    if schedule.done:
        raise ValueError("schedule already at its final value")
    step = schedule.zeta * (observed_ess - schedule.ess_ratio * n_particles) / n_particles
    theta = min(schedule.theta + max(step, schedule.dtheta_min), schedule.theta_final)
    return replace(schedule, theta=theta)


# ---------------------------------------------------------------------------
# batched engine
# ---------------------------------------------------------------------------


@dataclass
class TMVNBatch:
    """Weighted particle approximations for ``S`` independent truncated normals.

    ``particles`` and ``mu`` are in the caller's (unoriented) coordinates.
    ``log_constant`` is the log integral of the unnormalized Gaussian kernel
    over each orthant, so ``log_prob = log_constant + log_norm``.
    """

    particles: np.ndarray
    weights: np.ndarray
    signs: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    log_constant: np.ndarray
    log_prob: np.ndarray
    kappa: np.ndarray
    steps: np.ndarray
    log_r0: np.ndarray
    n_resamples: np.ndarray
    trace: list = field(default_factory=list)
    truncation_steps: Optional[np.ndarray] = None
    log_r_trunc: Optional[np.ndarray] = None

    @property
    def n_systems(self):
        return self.particles.shape[0]

    @property
    def n_particles(self):
        return self.particles.shape[1]

    def ess(self):
        return ess(self.weights)

    def moments(self, backend=None):
        """Weighted first and second moments per system, in caller coordinates."""
        kern = get_kernels(backend)
        idx = np.arange(self.n_systems, dtype=np.int64)
        mean, second = kern.weighted_moments(self.particles, self.weights, idx)
        return mean, second

    def system(self, j, rng=None):
        return ParticleSystem(self.particles[j].copy(), self.weights[j].copy(),
                              float(self.log_constant[j]), rng or np.random.default_rng())

    def subset(self, idx):
        idx = np.asarray(idx)
        return TMVNBatch(
            self.particles[idx], self.weights[idx], self.signs[idx], self.mu[idx],
            self.sigma[idx], self.log_constant[idx], self.log_prob[idx], self.kappa[idx],
            self.steps[idx], self.log_r0[idx], self.n_resamples[idx], [],
            None if self.truncation_steps is None else self.truncation_steps[idx],
            None if self.log_r_trunc is None else self.log_r_trunc[idx],
        )


class _Engine:
    """Mutable lockstep state; particles live in oriented coordinates."""

    def __init__(self, signs, mu, sigma, config: SMCConfig, rng, diag=None):
        self.cfg = config
        self.kern = get_kernels(config.backend)
        self.rng = rng
        self.diag = diag
        self.signs = np.asarray(signs, dtype=float)
        n_sys, p = self.signs.shape
        self.S, self.p, self.M = n_sys, p, config.n_particles
        mu = np.asarray(mu, dtype=float)
        sigma = np.asarray(sigma, dtype=float)
        if sigma.ndim == 2:
            sigma = np.broadcast_to(sigma, (n_sys, p, p))
        self.sigma = np.array(sigma)
        self.mu = np.array(np.broadcast_to(mu, (n_sys, p)))
        self._set_params(self.mu, self.sigma)
        self.kappa = np.full(n_sys, config.initial_kappa(p))
        self.steps = np.zeros(n_sys, dtype=np.int64)
        self.n_resamples = np.zeros(n_sys, dtype=np.int64)
        self.log_r0 = np.full(n_sys, np.nan)
        self.trace = []
        self.all_idx = np.arange(n_sys, dtype=np.int64)
        # plan: recorded (truncation steps, proposal factors) of an adaptive run;
        # replay: such a plan to follow instead of adapting
        self.plan = None
        self.replay = None
        self._n_moves = 0

    def _set_params(self, mu, sigma, idx=None):
        s = self.signs if idx is None else self.signs[idx]
        mu_u = s * mu
        sig_u = sigma * s[:, :, None] * s[:, None, :]
        _, finv, logdet = _factor(sig_u)
        if idx is None:
            self.mu_u, self.finv, self.logdet = mu_u, finv, logdet
        else:
            self.mu_u[idx], self.finv[idx], self.logdet[idx] = mu_u, finv, logdet

    # -- elementary steps ---------------------------------------------------

    def logk(self, idx, lower=None, nu=None):
        lower = self.lower if lower is None else lower
        nu = self.nu if nu is None else nu
        return self.kern.log_kernel(self.z, self.mu_u, self.finv, nu, lower, idx)

    def reweight(self, idx, new_logk):
        with np.errstate(invalid="ignore"):
            inc = new_logk - self.logk_cur[idx]
        inc = np.where(np.isnan(inc), -np.inf, inc)
        with np.errstate(divide="ignore"):
            logw = np.log(self.w[idx]) + inc
        w, logsum = _normalize_log_weights(logw)
        return w, logsum

    def commit(self, idx, w, logsum, new_logk):
        self.w[idx] = w
        self.logC[idx] += logsum
        self.logk_cur[idx] = new_logk
        self.steps[idx] += 1

    def resample_where_needed(self, idx):
        e = ess(self.w[idx])
        need = idx[e < self.cfg.ess_ratio * self.M]
        if need.size:
            u = self.rng.random(need.size)
            ind = self.kern.systematic_indices(self.w, u, need)
            self.z[need] = np.take_along_axis(self.z[need], ind[:, :, None], axis=1)
            self.logk_cur[need] = np.take_along_axis(self.logk_cur[need], ind, axis=1)
            self.w[need] = 1.0 / self.M
            self.n_resamples[need] += 1
        return e

    def move(self, idx):
        if idx.size == 0:
            return np.zeros(0)
        if self.replay is not None:
            return self._replayed_move(idx)
        mean, second = self.kern.weighted_moments(self.z, self.w, idx)
        cov = second - mean[:, :, None] * mean[:, None, :]
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2)) + self.cfg.ridge * np.eye(self.p)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            chol = np.linalg.cholesky(cov + 1e-6 * np.eye(self.p))
        prop = np.zeros((self.S, self.p, self.p))
        accs = np.zeros(idx.size)
        recorded = []
        for _ in range(self.cfg.moves_per_step):
            prop[idx] = np.sqrt(self.kappa[idx])[:, None, None] * chol
            if self.plan is not None:
                recorded.append(prop[idx].copy())
            eps = self.rng.standard_normal((idx.size, self.M, self.p))
            logu = np.log(self.rng.random((idx.size, self.M)))
            acc = self.kern.mh_move(self.z, self.logk_cur, self.w, self.mu_u, self.finv,
                                    self.nu, self.lower, prop, eps, logu, idx)
            acc = np.clip(acc, 0.0, 1.0)
            k = np.log(self.kappa[idx]) + self.cfg.kappa_gain * (acc - self.cfg.target_acceptance)
            self.kappa[idx] = np.clip(np.exp(k), KAPPA_MIN, KAPPA_MAX)
            accs = acc
        if self.plan is not None:
            self.plan["moves"].append(recorded)
        return accs

    def _replayed_move(self, idx):
        props = self.replay["moves"][self._n_moves]
        self._n_moves += 1
        prop = np.zeros((self.S, self.p, self.p))
        acc = np.zeros(idx.size)
        for factor in props:
            prop[idx] = factor
            eps = self.rng.standard_normal((idx.size, self.M, self.p))
            logu = np.log(self.rng.random((idx.size, self.M)))
            acc = self.kern.mh_move(self.z, self.logk_cur, self.w, self.mu_u, self.finv,
                                    self.nu, self.lower, prop, eps, logu, idx)
        return np.clip(acc, 0.0, 1.0)

    def record(self, phase, idx, theta, ess_vals, acc):
        if self.diag is None and not log.isEnabledFor(logging.DEBUG):
            return
        rec = {
            "phase": phase,
            "active": int(idx.size),
            "theta": float(np.mean(theta)) if np.size(theta) else float("nan"),
            "nu": float(np.mean(self.nu[idx])) if idx.size else float("nan"),
            "ess": float(np.mean(ess_vals)) if np.size(ess_vals) else float("nan"),
            "ess_min": float(np.min(ess_vals)) if np.size(ess_vals) else float("nan"),
            "kappa": float(np.mean(self.kappa[idx])) if idx.size else float("nan"),
            "acceptance": float(np.mean(acc)) if np.size(acc) else float("nan"),
            "log_c": float(np.mean(self.logC[idx])) if idx.size else float("nan"),
        }
        self.trace.append(rec)
        line = " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items())
        if self.diag is not None:
            self.diag.write(line + "\n")
        log.debug(line)

    # -- phases ---------------------------------------------------------------

    def initialize(self, lower_start, lower_final, theta_final):
        cfg = self.cfg
        S, M, p = self.S, self.M, self.p
        self.nu = np.full(S, float(cfg.nu0))
        chol = np.linalg.inv(self.finv)
        eps = self.rng.standard_normal((S, M, p))
        chi = self.rng.chisquare(cfg.nu0, size=(S, M))
        scale = np.sqrt(cfg.nu0 / chi)
        self.z = self.mu_u[:, None, :] + np.matmul(eps, np.swapaxes(chol, 1, 2)) * scale[:, :, None]
        self.w = np.full((S, M), 1.0 / M)
        self.logC = -_log_norm_constant(cfg.nu0, p, self.logdet)
        self.lower = np.full((S, p), -np.inf)
        self.logk_cur = self.logk(self.all_idx)
        self.lower_start = np.asarray(lower_start, dtype=float)
        self.lower_final = np.asarray(lower_final, dtype=float)
        if np.any(self.lower_final < self.lower_start):
            raise ValueError("final truncation bounds must not lie below the starting bounds")
        if cfg.truncation_path == "log_mass":
            self.tail_scale = np.sqrt(np.diagonal(self.sigma, axis1=1, axis2=2))
            self.log_mass0 = self._log_mass(self.all_idx, np.zeros(S))
            self.theta_final = self.log_mass0 - self._log_mass(self.all_idx, np.ones(S))
        else:
            self.theta_final = np.broadcast_to(np.asarray(theta_final, dtype=float), (S,)).copy()
        self.theta = np.zeros(S)

    def _log_mass(self, idx, frac):
        """Log mass above the bounds at ``frac`` for independent Gaussian coordinates.

        Uses the target's mean and marginal scales; a nominal measure of how
        much probability the truncation has removed.
        """
        lower = self.lower_start[idx] + frac[:, None] * (self.lower_final[idx] - self.lower_start[idx])
        x = (self.mu_u[idx] - lower) / self.tail_scale[idx]
        return np.sum(log_ndtr(x), axis=1)

    def bounds_at(self, idx, theta):
        """Bounds on the straight path whose schedule coordinate equals ``theta``.

        ``truncation_path="linear"``: ``theta`` is the fraction of the path.
        ``truncation_path="log_mass"``: ``theta`` is the nominal log mass removed
        (independent Gaussian coordinates), inverted by bisection.
        """
        tf = self.theta_final[idx]
        if self.cfg.truncation_path == "linear":
            frac = theta / tf
        else:
            lo = np.zeros(idx.size)
            hi = np.ones(idx.size)
            target = self.log_mass0[idx] - theta
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                above = self._log_mass(idx, mid) >= target
                lo = np.where(above, mid, lo)
                hi = np.where(above, hi, mid)
            frac = np.where(theta >= tf, 1.0, hi)
        frac = np.clip(frac, 0.0, 1.0)[:, None]
        return self.lower_start[idx] + frac * (self.lower_final[idx] - self.lower_start[idx])

    def _truncate_to(self, idx, theta_new, allow_backtrack):
        """Reweight ``idx`` to the region at ``theta_new``; halve failing steps."""
        theta_new = theta_new.copy()
        theta_old = self.theta[idx]
        while True:
            lower = self.lower.copy()
            lower[idx] = self.bounds_at(idx, theta_new)
            new_logk = self.logk(idx, lower=lower)
            w_prev = self.w[idx]
            w, logsum = self.reweight(idx, new_logk)
            dead = ~np.isfinite(logsum)
            if not dead.any():
                break
            step = theta_new[dead] - theta_old[dead]
            if not allow_backtrack or np.any(step <= self.cfg.dtheta_min):
                bad = idx[dead]
                raise TargetUnreachableError(
                    f"all incremental weights zero for system(s) {bad.tolist()[:5]} "
                    f"at theta={theta_new[dead].tolist()[:5]}",
                    theta=theta_new[dead], systems=bad,
                )
            theta_new[dead] = theta_old[dead] + np.maximum(0.5 * step, self.cfg.dtheta_min)
        self.lower = lower
        self.theta[idx] = theta_new
        if self.cfg.schedule_ess == "conditional":
            # ESS of the incremental weights alone, relative to the incoming weights
            with np.errstate(invalid="ignore"):
                inc = np.exp(np.where(np.isfinite(new_logk), new_logk - self.logk_cur[idx], -np.inf))
            inc = np.nan_to_num(inc)
            a = w_prev * inc
            observed = self.M * a.sum(axis=1) ** 2 / np.maximum((a * inc).sum(axis=1), 1e-300)
        else:
            observed = ess(w)
        self.commit(idx, w, logsum, new_logk)
        return observed

    def run_truncation(self):
        cfg = self.cfg
        M = self.M
        idx = self.all_idx
        # initial jump from the unconstrained Student to the start region
        ess_obs = self._truncate_to(idx, np.zeros(self.S), allow_backtrack=False)
        self.log_r0 = self.logC + _log_norm_constant(cfg.nu0, self.p, self.logdet)
        self.steps[:] = 0
        e = self.resample_where_needed(idx)
        acc = self.move(idx)
        self.record("truncation", idx, self.theta[idx], e, acc)
        if self.replay is not None:
            for idx, theta_new in self.replay["truncation"]:
                self._truncate_to(idx, theta_new, allow_backtrack=False)
                e = self.resample_where_needed(idx)
                acc = self.move(idx)
                self.record("truncation", idx, self.theta[idx], e, acc)
            return
        active = self.theta < self.theta_final
        n = 0
        while active.any():
            n += 1
            if n > cfg.max_steps:
                raise TargetUnreachableError("truncation schedule exceeded max_steps")
            idx = np.flatnonzero(active).astype(np.int64)
            step = cfg.zeta * (ess_obs[idx] - cfg.ess_ratio * M) / M
            theta_new = np.minimum(self.theta[idx] + np.maximum(step, cfg.dtheta_min), self.theta_final[idx])
            ess_obs[idx] = self._truncate_to(idx, theta_new, allow_backtrack=True)
            if self.plan is not None:
                self.plan["truncation"].append((idx, self.theta[idx].copy()))
            e = self.resample_where_needed(idx)
            acc = self.move(idx)
            self.record("truncation", idx, self.theta[idx], e, acc)
            active = self.theta < self.theta_final

    def run_dof_anneal(self):
        idx = self.all_idx
        p = self.p
        for nu in self.cfg.nu_ladder():
            nu_new = np.full(self.S, nu)
            new_logk = self.logk(idx, nu=nu_new)
            w, logsum = self.reweight(idx, new_logk)
            if not np.all(np.isfinite(logsum)):
                raise TargetUnreachableError(f"degenerate weights while annealing to nu={nu}")
            self.nu = nu_new
            self.commit(idx, w, logsum, new_logk)
            e = self.resample_where_needed(idx)
            acc = self.move(idx)
            self.record("dof_anneal", idx, self.theta, e, acc)
        return self.logC + _log_norm_constant(math.inf, p, self.logdet)

    def to_batch(self):
        z = self.z * self.signs[:, None, :]
        log_prob = self.logC + _log_norm_constant(math.inf, self.p, self.logdet)
        return TMVNBatch(
            particles=z, weights=self.w, signs=self.signs.copy(), mu=self.mu.copy(),
            sigma=self.sigma.copy(), log_constant=self.logC.copy(), log_prob=log_prob,
            kappa=self.kappa.copy(), steps=self.steps.copy(), log_r0=self.log_r0.copy(),
            n_resamples=self.n_resamples.copy(), trace=self.trace,
        )

    @classmethod
    def from_batch(cls, batch: TMVNBatch, config, rng, diag=None):
        eng = cls(batch.signs, batch.mu, batch.sigma, config, rng, diag)
        if batch.n_particles != config.n_particles:
            raise ValueError("batch particle count differs from config.n_particles")
        eng.z = batch.particles * batch.signs[:, None, :]
        eng.w = batch.weights.copy()
        eng.logC = batch.log_constant.copy()
        eng.kappa = batch.kappa.copy()
        eng.nu = np.full(eng.S, math.inf)
        eng.lower = np.zeros((eng.S, eng.p))
        eng.logk_cur = eng.logk(eng.all_idx)
        return eng


def _default_start(mu_u, sigma_u, nu0, start_sds):
    sd = np.sqrt(np.diagonal(sigma_u, axis1=-2, axis2=-1) * nu0 / (nu0 - 2.0))
    return mu_u - start_sds * sd


def _as_signs(orthants, p=None):
    s = np.asarray(orthants)
    if s.dtype == bool:
        return np.where(s, 1.0, -1.0)
    s = s.astype(float)
    if np.all(np.isin(s, (0.0, 1.0))) and not np.all(s == 1.0):
        return np.where(s > 0, 1.0, -1.0)
    if not np.all(np.isin(s, (-1.0, 1.0))):
        raise ValueError("orthant signs must be +/-1, booleans or 0/1 responses")
    return s


def sample_tmvn_batch(signs, mu, sigma, config: SMCConfig = SMCConfig(), rng=None,
                      lower_start=None, lower_final=None, theta_final=1.0, diag=None) -> TMVNBatch:
    """Run the two-phase SMC sampler on ``S`` independent orthant targets.

    Parameters
    ----------
    signs : (S, p) array of +/-1 (or 0/1 responses)
    mu : (S, p) or (p,) means
    sigma : (p, p) shared or (S, p, p) per-system covariance
    lower_start, lower_final : (S, p), optional
        Oriented truncation bounds at ``theta = 0`` and ``theta = theta_final``.
        Default: ``mu - start_sds * sd`` sliding to 0 (the orthant itself).
    theta_final : float
        Length of the schedule with ``truncation_path="linear"`` (bounds move
        linearly in ``theta``).  The log-mass path sets its own length.

    Notes
    -----
    Unless ``config.pilot_fraction`` is 0, a small adaptive pilot run goes
    first and the full run replays its schedule and proposal factors (see
    :class:`SMCConfig`).  Both draw from ``rng``.  ``truncation_steps`` then
    counts the pilot's steps, and ``kappa`` is the pilot's final scale (the
    starting point for later recycling).
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    signs = _as_signs(np.atleast_2d(signs))
    n_pilot = config.pilot_particles()
    plan = None
    kappa = None
    if n_pilot:
        pilot = _Engine(signs, mu, sigma, replace(config, n_particles=n_pilot), rng)
        pilot.plan = {"truncation": [], "moves": []}
        _run_phases(pilot, lower_start, lower_final, theta_final)
        plan, kappa = pilot.plan, pilot.kappa
    eng = _Engine(signs, mu, sigma, config, rng, diag)
    eng.replay = plan
    try:
        trunc_steps, log_r_trunc = _run_phases(eng, lower_start, lower_final, theta_final)
    except TargetUnreachableError:
        if plan is None:
            raise
        # the replayed schedule starved some system; adapt on the full sample
        log.warning("replayed schedule failed; rerunning the adaptive sampler")
        eng = _Engine(signs, mu, sigma, config, rng, diag)
        trunc_steps, log_r_trunc = _run_phases(eng, lower_start, lower_final, theta_final)
        kappa = None
    if kappa is not None:
        eng.kappa = kappa.copy()
    out = eng.to_batch()
    out.truncation_steps = trunc_steps
    out.log_r_trunc = log_r_trunc
    return out


def _run_phases(eng, lower_start, lower_final, theta_final):
    config = eng.cfg
    sig_u = eng.sigma * eng.signs[:, :, None] * eng.signs[:, None, :]
    if lower_start is None:
        lower_start = _default_start(eng.mu_u, sig_u, config.nu0, config.start_sds)
    if lower_final is None:
        lower_final = np.zeros_like(eng.mu_u)
    lower_final = np.broadcast_to(lower_final, eng.mu_u.shape)
    lower_start = np.minimum(np.broadcast_to(lower_start, eng.mu_u.shape), lower_final)
    eng.initialize(lower_start, lower_final, theta_final)
    eng.run_truncation()
    trunc_steps = eng.steps.copy()
    log_r_trunc = eng.logC + _log_norm_constant(config.nu0, eng.p, eng.logdet)
    eng.run_dof_anneal()
    return trunc_steps, log_r_trunc


def sample_tmvn(orthant, mu, sigma, config: SMCConfig = SMCConfig(), rng=None, diag=None):
    """Sample one truncated normal; returns ``(ParticleSystem, log_orthant_prob)``."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    mu = np.asarray(mu, dtype=float)
    batch = sample_tmvn_batch(np.atleast_2d(orthant), mu[None], np.asarray(sigma, dtype=float),
                              config, rng, diag=diag)
    return batch.system(0, rng), float(batch.log_prob[0])


def _gauss_path(mu0, sig0, mu1, sig1, t):
    t = np.asarray(t)[:, None]
    mu = (1 - t) * mu0 + t * mu1
    sig = (1 - t)[:, :, None] * sig0 + t[:, :, None] * sig1
    return mu, sig


def recycle_batch(batch: TMVNBatch, mu_new, sigma_new, config: SMCConfig = SMCConfig(),
                  rng=None, diag=None) -> TMVNBatch:
    """Move Gaussian-target approximations to new ``(mu, sigma)`` without re-truncating.

    Intermediate targets follow the straight path in ``(mu, sigma)``; each
    sub-step is the largest one whose conditional ESS stays at or above
    ``ess_ratio * M``.  Systems that cannot move even by ``dtheta_min`` are
    re-sampled from scratch.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    cfg = config
    eng = _Engine.from_batch(batch, cfg, rng, diag)
    S, M, p = eng.S, eng.M, eng.p
    mu_new = np.array(np.broadcast_to(np.asarray(mu_new, dtype=float), (S, p)))
    sigma_new = np.asarray(sigma_new, dtype=float)
    if sigma_new.ndim == 2:
        sigma_new = np.broadcast_to(sigma_new, (S, p, p))
    sigma_new = np.array(sigma_new)
    _factor(sigma_new)
    mu_old, sig_old = eng.mu.copy(), eng.sigma.copy()
    t = np.zeros(S)
    eng.steps[:] = 0
    fallback = np.zeros(S, dtype=bool)
    r = cfg.ess_ratio

    def cess_at(idx, t_try):
        mu_t, sig_t = _gauss_path(mu_old[idx], sig_old[idx], mu_new[idx], sig_new_idx(idx), t_try)
        eng._set_params(mu_t, sig_t, idx)
        new_logk = eng.logk(idx)
        with np.errstate(invalid="ignore"):
            inc = new_logk - eng.logk_cur[idx]
        inc = np.where(np.isnan(inc), -np.inf, inc)
        mx = inc.max(axis=1, keepdims=True)
        a = eng.w[idx] * np.exp(inc - mx)
        num = a.sum(axis=1) ** 2
        den = (a * np.exp(inc - mx)).sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            c = num / den
        return np.where(np.isfinite(c), c, 0.0), new_logk, mu_t, sig_t

    def sig_new_idx(idx):
        return sigma_new[idx]

    n = 0
    while True:
        idx = np.flatnonzero((t < 1.0) & ~fallback).astype(np.int64)
        if idx.size == 0:
            break
        n += 1
        if n > cfg.max_substeps:
            fallback[idx] = True
            break
        t_cur = t[idx]
        c, new_logk, mu_t, sig_t = cess_at(idx, np.ones(idx.size))
        t_try = np.ones(idx.size)
        bad = c < r
        if bad.any():
            lo = t_cur[bad].copy()
            hi = np.ones(bad.sum())
            b_idx = idx[bad]
            for _ in range(30):
                mid = 0.5 * (lo + hi)
                cm, _, _, _ = cess_at(b_idx, mid)
                ok = cm >= r
                lo = np.where(ok, mid, lo)
                hi = np.where(ok, hi, mid)
                if np.all(hi - lo < 1e-3 * cfg.dtheta_min):
                    break
            stuck = lo - t_cur[bad] < cfg.dtheta_min
            t_try[bad] = lo
            if stuck.any():
                fallback[b_idx[stuck]] = True
            c2, lk2, mu2, sg2 = cess_at(idx, t_try)
            new_logk, mu_t, sig_t = lk2, mu2, sg2
        keep = ~fallback[idx]
        k_idx = idx[keep]
        if k_idx.size == 0:
            continue
        eng._set_params(mu_t[keep], sig_t[keep], k_idx)
        eng.mu[k_idx], eng.sigma[k_idx] = mu_t[keep], sig_t[keep]
        w, logsum = eng.reweight(k_idx, new_logk[keep])
        eng.commit(k_idx, w, logsum, new_logk[keep])
        t[k_idx] = t_try[keep]
        e = eng.resample_where_needed(k_idx)
        acc = eng.move(k_idx)
        eng.record("param_shift", k_idx, t[k_idx], e, acc)

    out = eng.to_batch()
    if fallback.any():
        f_idx = np.flatnonzero(fallback)
        log.info("recycling fell back to fresh sampling for %d system(s)", f_idx.size)
        fresh = sample_tmvn_batch(batch.signs[f_idx], mu_new[f_idx], sigma_new[f_idx], cfg, rng, diag=diag)
        for name in ("particles", "weights", "mu", "sigma", "log_constant", "log_prob", "kappa", "steps",
                     "n_resamples"):
            getattr(out, name)[f_idx] = getattr(fresh, name)
    out.mu[:] = mu_new
    out.sigma[:] = sigma_new
    return out


def resize_batch(batch: TMVNBatch, n_particles: int, rng=None) -> TMVNBatch:
    """Systematically resample every system to ``n_particles`` equally weighted particles.

    The normalizing-constant estimates are unchanged; the subsequent MH moves
    of :func:`recycle_batch` restore diversity when the count grows.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if n_particles < 2:
        raise ValueError("n_particles must be >= 2")
    s, m_old, p = batch.particles.shape
    u = rng.random(s)
    grid = np.arange(n_particles)
    z = np.empty((s, n_particles, p))
    for a in range(s):
        cum = np.cumsum(batch.weights[a])
        ind = np.minimum(np.searchsorted(cum, (u[a] + grid) / n_particles, side="right"), m_old - 1)
        z[a] = batch.particles[a, ind]
    return replace(batch, particles=z, weights=np.full((s, n_particles), 1.0 / n_particles), trace=[])


def recycle_to_new_params(system: ParticleSystem, orthant, old, new, config: SMCConfig = SMCConfig()):
    """Single-system wrapper around :func:`recycle_batch`.

    ``old`` and ``new`` are ``(mu, sigma)`` pairs; ``system.log_constant`` must be
    the log integral of the unnormalized Gaussian kernel at ``old``.
    """
    mu0, sig0 = (np.asarray(a, dtype=float) for a in old)
    mu1, sig1 = (np.asarray(a, dtype=float) for a in new)
    signs = _as_signs(np.atleast_2d(orthant))
    p = mu0.shape[0]
    _, _, logdet = _factor(sig0)
    cfg = replace(config, n_particles=system.n_particles)
    batch = TMVNBatch(
        particles=system.particles[None].copy(), weights=system.weights[None].copy(), signs=signs,
        mu=mu0[None], sigma=sig0[None], log_constant=np.array([system.log_constant]),
        log_prob=np.array([system.log_constant + _log_norm_constant(math.inf, p, logdet)]),
        kappa=np.array([cfg.initial_kappa(p)]), steps=np.zeros(1, dtype=np.int64),
        log_r0=np.array([np.nan]), n_resamples=np.zeros(1, dtype=np.int64),
    )
    out = recycle_batch(batch, mu1[None], sig1, cfg, system.rng)
    return ParticleSystem(out.particles[0], out.weights[0], float(out.log_constant[0]), system.rng)
