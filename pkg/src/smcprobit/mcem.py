"""Monte Carlo EM for the multivariate probit model.

The E-step draws weighted particles from each observation's truncated normal
with :mod:`smcprobit.smc`; everything the M-step needs is the per-observation
first and second weighted moments of those particles.

M-step variants (``MaximizerConfig``):

* ``objective="q"``: the usual EM surrogate.
  ``mode="unconstrained"`` cycles the closed-form GLS coefficient update and
  the sample covariance update to convergence; ``mode="constrained"`` keeps
  the covariance in identified form (unit diagonal, or ``sigma_11 = 1``)
  through :func:`omega_iterate`.
* ``objective="qtilde"``: the scale-invariant surrogate evaluated at the
  identified projection.  ``mode="unconstrained"`` also cycles the diagonal
  scale through :func:`d_solve`.
"""
from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import optimize

from .probit import (
    BLOCK,
    SHARED,
    Parameters,
    ProbitDataset,
    log_likelihood,
    project_to_identified,
    recompose,
    univariate_probit_init,
)
from .smc import SMCConfig, TMVNBatch, recycle_batch, resize_batch, sample_tmvn_batch
from .kernels import get_kernels

log = logging.getLogger(__name__)

__all__ = [
    "SufficientMoments",
    "WeightedLatentSample",
    "MaximizerConfig",
    "MCEMConfig",
    "EMTrace",
    "SingularCovarianceError",
    "RankDeficiencyError",
    "NonInteriorError",
    "OmegaConvergenceError",
    "moments_from_batch",
    "e_step",
    "q_function",
    "beta_hat",
    "sigma_hat",
    "q_hat",
    "cycle_conditional_max",
    "s_hat",
    "tilde_q",
    "omega_iterate",
    "omega_residual",
    "d_solve",
    "m_step",
    "variance_reduction_update",
    "particle_schedule",
    "run_mcem",
    "identified_vector",
    "identified_names",
    "standard_errors",
]


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


class RankDeficiencyError(np.linalg.LinAlgError):
    pass


class NonInteriorError(ValueError):
    pass


class OmegaConvergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# moments and objective functions
# ---------------------------------------------------------------------------


@dataclass
class SufficientMoments:
    """Per-observation weighted sums ``sum W Z`` and ``sum W Z Z^T``."""

    first: np.ndarray
    second: np.ndarray

    @property
    def n(self):
        return self.first.shape[0]

    @property
    def p(self):
        return self.first.shape[1]

    def mean_second(self):
        return self.second.mean(axis=0)


@dataclass
class WeightedLatentSample:
    batch: TMVNBatch

    @property
    def particles(self):
        return self.batch.particles

    @property
    def weights(self):
        return self.batch.weights


def moments_from_batch(batch: TMVNBatch, backend=None) -> SufficientMoments:
    first, second = batch.moments(backend)
    return SufficientMoments(first, second)


def _design(dataset_or_x, layout=BLOCK):
    if isinstance(dataset_or_x, ProbitDataset):
        return dataset_or_x.design(layout)
    return np.asarray(dataset_or_x, dtype=float)


def _means(x, beta):
    return np.einsum("npk,k->np", x, beta)


def _mean_scatter(mom: SufficientMoments, offsets):
    """``(1/N) sum_j E[(Z - c_j)(Z - c_j)^T]`` for per-observation offsets ``c_j``."""
    m, c = mom.first, offsets
    n = mom.n
    cross = np.einsum("ni,nj->ij", m, c)
    out = mom.second.sum(axis=0) - cross - cross.T + np.einsum("ni,nj->ij", c, c)
    out = out / n
    return 0.5 * (out + out.T)


def _logdet_inv(sigma):
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError("covariance matrix is not positive definite") from exc
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    inv = np.linalg.inv(sigma)
    return logdet, 0.5 * (inv + inv.T)


def q_function(params: Parameters, moments: SufficientMoments, x, layout=BLOCK) -> float:
    """EM surrogate ``-(N/2)[log|Sigma| + tr(Sigma^-1 mean scatter)]``."""
    x = _design(x, layout)
    logdet, inv = _logdet_inv(params.sigma)
    scat = _mean_scatter(moments, _means(x, params.beta))
    return -0.5 * moments.n * (logdet + np.sum(inv * scat))


def beta_hat(sigma, moments: SufficientMoments, x, layout=BLOCK, scale=None):
    """GLS coefficient update for fixed ``sigma``.

    ``scale`` (the diagonal of ``D``) multiplies the first moments before the
    sum, which is the coefficient update of the invariant surrogate.
    """
    x = _design(x, layout)
    _, inv = _logdet_inv(np.asarray(sigma, dtype=float))
    m = moments.first if scale is None else moments.first * scale
    xs = np.einsum("npk,pq->nkq", x, inv)
    a = np.einsum("nkq,nql->kl", xs, x)
    b = np.einsum("nkq,nq->k", xs, m)
    if np.linalg.cond(a) > 1e12:
        raise RankDeficiencyError("normal equations are singular (rank-deficient design)")
    return np.linalg.solve(a, b)


def sigma_hat(beta, moments: SufficientMoments, x, layout=BLOCK, check=True):
    """Covariance update for fixed ``beta``.

    With ``check`` a singular result is flagged with a ``RuntimeWarning`` and
    a ``1e-10`` ridge is added so later inversions stay defined.
    """
    x = _design(x, layout)
    out = _mean_scatter(moments, _means(x, np.asarray(beta, dtype=float)))
    if check and np.linalg.eigvalsh(out)[0] <= 1e-14 * max(1.0, np.trace(out)):
        warnings.warn("sigma_hat is singular; adding a 1e-10 ridge", RuntimeWarning, stacklevel=2)
        out = out + 1e-10 * np.eye(out.shape[0])
    return out


def q_hat(beta, moments: SufficientMoments, x, layout=BLOCK) -> float:
    """Surrogate profiled over the covariance: ``-(N/2) log|Sigma_hat| - Np/2``."""
    s = sigma_hat(beta, moments, x, layout, check=False)
    sign, logdet = np.linalg.slogdet(s)
    if sign <= 0:
        return -math.inf
    return -0.5 * moments.n * logdet - 0.5 * moments.n * moments.p


def _is_spd(s):
    try:
        np.linalg.cholesky(s)
        return True
    except np.linalg.LinAlgError:
        return False


def cycle_conditional_max(moments: SufficientMoments, x, start: Parameters, layout=BLOCK,
                          tol=1e-8, max_iter=100, return_path=False):
    """Alternate the coefficient and covariance updates until ``||d beta|| < tol``.

    The first pass is the two-step conditional maximization; each later pass
    maximizes the log-linearized profile, so ``q_hat`` never decreases.
    """
    x = _design(x, layout)
    beta, sigma = start.beta.copy(), start.sigma.copy()
    path = []
    for it in range(1, max_iter + 1):
        new_beta = beta_hat(sigma, moments, x)
        sigma = sigma_hat(new_beta, moments, x, check=False)
        if not _is_spd(sigma):
            raise SingularCovarianceError(f"non-SPD covariance update at inner iterate {it}")
        step = np.linalg.norm(new_beta - beta)
        beta = new_beta
        path.append(Parameters(beta.copy(), sigma.copy()))
        if step < tol:
            break
    out = Parameters(beta, sigma)
    return (out, path) if return_path else out


def _scale_from(sigma, ident):
    diag = np.diag(sigma)
    if np.any(diag <= 0):
        raise ValueError("non-positive diagonal in covariance")
    if ident == "fixed_first":
        return np.full(diag.size, math.sqrt(diag[0]))
    return np.sqrt(diag)


def s_hat(beta, scale, moments: SufficientMoments, x, layout=BLOCK):
    """Mean scatter about the rescaled means ``D^-1 X beta``."""
    scale = np.asarray(scale, dtype=float)
    if np.any(scale <= 0):
        raise ValueError("scale entries must be positive")
    x = _design(x, layout)
    return _mean_scatter(moments, _means(x, np.asarray(beta, dtype=float)) / scale)


def tilde_q(params: Parameters, moments: SufficientMoments, x, layout=BLOCK, ident="correlation") -> float:
    """Scale-invariant surrogate: ``q_function`` evaluated at the identified projection."""
    x = _design(x, layout)
    d = _scale_from(params.sigma, ident)
    omega = params.sigma / np.outer(d, d)
    logdet, inv = _logdet_inv(omega)
    s = s_hat(params.beta, d, moments, x)
    return -0.5 * moments.n * (logdet + np.sum(inv * s))


def _omega_direct(s, mode, start):
    """Quasi-Newton maximization over row-normalized Cholesky factors.

    Fallback for ``S`` whose diagonal is far enough from one that the fixed
    point iteration is repelling.
    """
    p = s.shape[0]
    tri = np.tril_indices(p)
    rows = np.arange(p) if mode == "correlation" else np.array([0])

    def unpack(v):
        v_mat = np.zeros((p, p))
        v_mat[tri] = v
        norms = np.linalg.norm(v_mat, axis=1)
        low = v_mat.copy()
        low[rows] /= norms[rows, None]
        return low, norms

    def fun(v):
        low, norms = unpack(v)
        dg = np.abs(np.diag(low))
        if np.any(dg < 1e-12):
            return math.inf, np.zeros_like(v)
        linv = np.linalg.inv(low)
        inv = linv.T @ linv
        val = 2.0 * np.sum(np.log(dg)) + np.sum(inv * s)
        g_low = 2.0 * (inv - inv @ s @ inv) @ low
        grad = g_low.copy()
        for i in rows:
            grad[i] = (g_low[i] - (g_low[i] @ low[i]) * low[i]) / norms[i]
        return val, grad[tri]

    v0 = np.linalg.cholesky(start)[tri]
    res = optimize.minimize(fun, v0, jac=True, method="BFGS", options={"gtol": 1e-12, "maxiter": 5000})
    low, _ = unpack(res.x)
    omega = low @ low.T
    if mode == "correlation":
        np.fill_diagonal(omega, 1.0)
    else:
        omega[0, 0] = 1.0
    return 0.5 * (omega + omega.T)


def _omega_multiplier(omega, s, mode):
    """Diagonal of ``A`` implied by ``W = S + W A W`` at a solution ``W``."""
    ds = np.diag(s)
    if mode == "correlation":
        return np.linalg.solve(omega * omega, 1.0 - ds)
    a = np.zeros(s.shape[0])
    a[0] = (1.0 - ds[0]) / omega[0, 0] ** 2
    return a


def omega_iterate(s, mode="correlation", tol=1e-10, max_iter=200, start=None, fallback_tol=1e-6):
    """Maximize ``-log|W| - tr(W^-1 S)`` over identified ``W``.

    Solves the fixed point ``W = S + W A W`` with diagonal ``A`` chosen at each
    step so that the update has unit diagonal (``mode="correlation"``) or unit
    first element with ``A`` supported on entry (1, 1) (``mode="fixed_first"``).
    Returns ``(W, a)`` with ``a`` the diagonal of ``A``.

    The iteration converges when ``diag(S)`` is near one.  If it diverges or
    stalls, the maximum is found directly over row-normalized Cholesky
    factors and accepted when its stationarity residual (see
    :func:`omega_residual`) is below ``fallback_tol``.
    """
    s = np.asarray(s, dtype=float)
    p = s.shape[0]
    ds = np.diag(s)
    if np.any(ds <= 0):
        raise OmegaConvergenceError(f"non-positive diagonal in S: {ds}")
    if mode not in ("correlation", "fixed_first"):
        raise ValueError(f"unknown mode {mode!r}")
    if start is None:
        if mode == "correlation":
            r = np.sqrt(ds)
            start = s / np.outer(r, r)
        else:
            start = s / ds[0]
    start = np.asarray(start, dtype=float)
    omega, a = _omega_fixed_point(s, mode, tol, max_iter, start.copy())
    if omega is not None:
        return omega, a
    log.debug("omega fixed point failed (diag(S)=%s); maximizing directly", ds)
    try:
        omega = _omega_direct(s, mode, start)
    except np.linalg.LinAlgError as exc:
        raise OmegaConvergenceError(f"omega maximization failed; diag(S)={ds}") from exc
    if not _is_spd(omega) or omega_residual(omega, s, mode) > fallback_tol:
        raise OmegaConvergenceError(f"omega iteration did not converge in {max_iter} steps; diag(S)={ds}")
    return omega, _omega_multiplier(omega, s, mode)


def _omega_fixed_point(s, mode, tol, max_iter, omega):
    """Run ``W <- S + W A W``; returns ``(None, None)`` on divergence or stall."""
    p = s.shape[0]
    ds = np.diag(s)
    a = np.zeros(p)
    for _ in range(max_iter):
        if mode == "correlation":
            try:
                a = np.linalg.solve(omega * omega, 1.0 - ds)
            except np.linalg.LinAlgError:
                return None, None
            new = s + (omega * a) @ omega
            np.fill_diagonal(new, 1.0)
        else:
            a = np.zeros(p)
            a[0] = (1.0 - ds[0]) / omega[0, 0] ** 2
            c = omega[:, 0]
            new = s + a[0] * np.outer(c, c)
            new[0, 0] = 1.0
        new = 0.5 * (new + new.T)
        if not np.all(np.isfinite(new)):
            return None, None
        delta = np.max(np.abs(new - omega))
        omega = new
        if delta < tol:
            break
    else:
        return None, None
    if not _is_spd(omega):
        return None, None
    return omega, a


def omega_residual(omega, s, mode="correlation"):
    """Largest entry of ``W^-1 - W^-1 S W^-1`` that must vanish at the optimum."""
    inv = np.linalg.inv(omega)
    r = inv - inv @ s @ inv
    if mode == "correlation":
        np.fill_diagonal(r, 0.0)
    else:
        r[0, 0] = 0.0
    return float(np.max(np.abs(r)))


def d_solve(omega, beta, moments: SufficientMoments, x, layout=BLOCK, mode="correlation", current=None):
    """Optimal diagonal scale for fixed ``omega`` and ``beta``.

    The stationarity condition is linear in the entries of ``D^-1``:
    ``diag(W^-1 sum_j (m_j - D^-1 mu_j) mu_j^T) = 0`` (all entries), or its
    trace when every scale is shared (``mode="fixed_first"``).

    Returns ``(scale, solved)``; ``solved`` is False when the means vanish and
    the scale is left at ``current``.
    """
    x = _design(x, layout)
    inv = np.linalg.inv(np.asarray(omega, dtype=float))
    mu = _means(x, np.asarray(beta, dtype=float))
    m = moments.first
    p = mu.shape[1]
    if current is None:
        current = np.ones(p)
    if np.allclose(mu, 0.0):
        return np.asarray(current, dtype=float).copy(), False
    if mode == "fixed_first":
        num = np.einsum("ni,ij,nj->", mu, inv, m)
        den = np.einsum("ni,ij,nj->", mu, inv, mu)
        if den <= 0:
            return np.asarray(current, dtype=float).copy(), False
        t = np.full(p, num / den)
    else:
        g = inv * np.einsum("ni,nj->ij", mu, mu)
        h = np.einsum("ni,ij,nj->i", mu, inv, m)
        zero = np.abs(np.diag(g)) < 1e-300
        t = np.empty(p)
        cur_t = 1.0 / np.asarray(current, dtype=float)
        if zero.any():
            # components with identically zero mean keep their scale
            t[zero] = cur_t[zero]
            keep = ~zero
            rhs = h[keep] - g[np.ix_(keep, zero)] @ t[zero]
            t[keep] = np.linalg.solve(g[np.ix_(keep, keep)], rhs)
        else:
            t = np.linalg.solve(g, h)
    if np.any(t <= 0):
        raise NonInteriorError(f"scale solution has non-positive entries (1/D = {t})")
    return 1.0 / t, True


# ---------------------------------------------------------------------------
# M-step dispatcher
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaximizerConfig:
    """M-step options.

    objective : "q" or "qtilde"
    mode : "constrained" (identified covariance, scale held at 1) or
        "unconstrained" (full covariance; for ``qtilde`` the scale is solved for)
    ident : "correlation" or "fixed_first"; the identified form used for
        constrained maximization and for reporting
    """

    objective: str = "q"
    mode: str = "constrained"
    ident: str = "correlation"
    inner_tol: float = 1e-8
    inner_max_iters: int = 100

    def __post_init__(self):
        if self.objective not in ("q", "qtilde"):
            raise ValueError(f"objective must be 'q' or 'qtilde', got {self.objective!r}")
        if self.mode not in ("constrained", "unconstrained"):
            raise ValueError(f"mode must be 'constrained' or 'unconstrained', got {self.mode!r}")
        if self.ident not in ("correlation", "fixed_first"):
            raise ValueError(f"ident must be 'correlation' or 'fixed_first', got {self.ident!r}")
        if self.inner_tol <= 0:
            raise ValueError("inner_tol must be positive")

    def projection(self, layout=BLOCK):
        """Identified form used between iterations and for reporting.

        With shared coefficients only a common scale is unidentified, so any
        run that frees the variances is reported with ``sigma_11 = 1``.
        """
        if layout == SHARED and (self.mode == "unconstrained" or self.ident == "fixed_first"):
            return "fixed_first"
        return self.ident

    def objective_value(self, params, moments, x):
        if self.objective == "qtilde":
            return tilde_q(params, moments, x, ident=self.ident)
        return q_function(params, moments, x)


@dataclass
class MStepResult:
    params: Parameters
    n_iter: int
    objective: list


def m_step(moments: SufficientMoments, x, start: Parameters, config: MaximizerConfig = MaximizerConfig(),
           layout=BLOCK) -> MStepResult:
    x = _design(x, layout)
    cfg = config
    obj = [cfg.objective_value(start, moments, x)]
    beta, sigma = start.beta.copy(), start.sigma.copy()

    if cfg.objective == "q" and cfg.mode == "unconstrained":
        _, path = cycle_conditional_max(moments, x, start, tol=cfg.inner_tol,
                                        max_iter=cfg.inner_max_iters, return_path=True)
        obj += [q_function(ps, moments, x) for ps in path]
        return MStepResult(path[-1], len(path), obj)

    if cfg.mode == "constrained":
        # scale pinned at one; only the identified covariance moves
        d = _scale_from(sigma, cfg.ident)
        omega = sigma / np.outer(d, d)
        sigma = omega
        n = 0
        for n in range(1, cfg.inner_max_iters + 1):
            new_beta = beta_hat(sigma, moments, x)
            s = sigma_hat(new_beta, moments, x, check=False)
            sigma, _ = omega_iterate(s, cfg.ident)
            step = np.linalg.norm(new_beta - beta)
            beta = new_beta
            obj.append(cfg.objective_value(Parameters(beta, sigma), moments, x))
            if step < cfg.inner_tol:
                break
        return MStepResult(Parameters(beta, sigma), n, obj)

    # invariant surrogate, scale free: beta -> omega -> D
    d = _scale_from(sigma, cfg.ident)
    omega = sigma / np.outer(d, d)
    n = 0
    for n in range(1, cfg.inner_max_iters + 1):
        sig = omega * np.outer(d, d)
        new_beta = beta_hat(sig, moments, x, scale=d)
        omega, _ = omega_iterate(s_hat(new_beta, d, moments, x), cfg.ident)
        d, _ = d_solve(omega, new_beta, moments, x, mode=cfg.ident, current=d)
        step = np.linalg.norm(new_beta - beta)
        beta = new_beta
        obj.append(tilde_q(Parameters(beta, omega * np.outer(d, d)), moments, x, ident=cfg.ident))
        if step < cfg.inner_tol:
            break
    return MStepResult(Parameters(beta, omega * np.outer(d, d)), n, obj)


def variance_reduction_update(prev: Parameters, new: Parameters, zeta: float) -> Parameters:
    """Stochastic-approximation average ``(1 - zeta) prev + zeta new``."""
    if not 0.0 < zeta <= 1.0:
        raise ValueError("zeta must lie in (0, 1]")
    if prev.beta.shape != new.beta.shape or prev.sigma.shape != new.sigma.shape:
        raise ValueError("parameter shapes differ")
    return Parameters((1 - zeta) * prev.beta + zeta * new.beta, (1 - zeta) * prev.sigma + zeta * new.sigma)


# ---------------------------------------------------------------------------
# E-step and driver
# ---------------------------------------------------------------------------


def _identify(params: Parameters, dataset: ProbitDataset, layout, ident) -> Parameters:
    ip = project_to_identified(params, ident, dataset.k_sizes, layout)
    return Parameters(ip.lam, ip.omega)


def e_step(params: Parameters, dataset: ProbitDataset, smc: SMCConfig, layout=BLOCK, rng=None,
           previous: Optional[TMVNBatch] = None, x=None, diag=None):
    """Sample every observation's truncated normal at ``params``.

    With ``previous`` (a batch at older parameters) the particles are moved
    to ``params`` instead of re-sampled; a change of particle count is
    bridged by systematic resampling first.
    Returns ``(batch, moments, loglik)``.
    """
    x = dataset.design(layout) if x is None else x
    mu = _means(x, params.beta)
    try:
        if previous is not None:
            if previous.n_particles != smc.n_particles:
                previous = resize_batch(previous, smc.n_particles, rng)
            batch = recycle_batch(previous, mu, params.sigma, smc, rng, diag=diag)
        else:
            batch = sample_tmvn_batch(dataset.signs(), mu, params.sigma, smc, rng, diag=diag)
    except Exception as exc:
        systems = getattr(exc, "systems", None)
        if systems is not None:
            raise type(exc)(f"{exc} (observation(s) {list(systems)[:5]})") from exc
        raise
    moments = moments_from_batch(batch, smc.backend)
    ll = log_likelihood(None, dataset, np.exp(batch.log_prob))
    return batch, moments, ll


def particle_schedule(n_grow=40, start=100, step=100, cap=4000, n_plateau=0, n_vr=10):
    """Particle counts per EM iteration: linear growth, plateau, then averaging steps."""
    grow = [min(start + step * i, cap) for i in range(n_grow)]
    return grow + [cap] * (n_plateau + n_vr)


@dataclass
class MCEMConfig:
    layout: str = BLOCK
    maximizer: MaximizerConfig = field(default_factory=MaximizerConfig)
    schedule: Sequence[int] = field(default_factory=particle_schedule)
    vr_steps: int = 10
    recycle: bool = False
    final_particles: Optional[int] = None
    smc: SMCConfig = field(default_factory=SMCConfig)
    seed: Optional[int] = 0
    start: Optional[Parameters] = None

    def __post_init__(self):
        if len(self.schedule) < 1:
            raise ValueError("empty particle schedule")
        if any(int(m) < 2 for m in self.schedule):
            raise ValueError("particle counts must be >= 2")
        if not 0 <= self.vr_steps <= len(self.schedule):
            raise ValueError("vr_steps must be between 0 and the schedule length")


@dataclass
class EMTrace:
    params: list = field(default_factory=list)
    loglik: list = field(default_factory=list)
    particles: list = field(default_factory=list)
    ess_min: list = field(default_factory=list)
    ess_mean: list = field(default_factory=list)
    smc_steps: list = field(default_factory=list)
    inner_iters: list = field(default_factory=list)
    phase: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    ident: str = "correlation"
    final_params: Optional[Parameters] = None
    final_loglik: float = math.nan
    final_batch: Optional[TMVNBatch] = field(default=None, repr=False)
    elapsed: float = 0.0

    @property
    def iterations(self):
        return len(self.loglik)


def run_mcem(dataset: ProbitDataset, config: MCEMConfig = MCEMConfig(), diag=None, progress=None) -> EMTrace:
    """Monte Carlo EM over a fixed particle schedule.

    Parameters are kept in identified form between iterations (which leaves the
    likelihood unchanged); the last ``vr_steps`` iterations average the M-step
    output with step ``1 / (number of averaging steps so far)``.  A final
    E-step at the last parameters (fresh particles, also in recycling mode)
    estimates their log-likelihood.
    """
    cfg = config
    layout = cfg.layout
    mx = cfg.maximizer
    rng = np.random.default_rng(cfg.seed)
    x = dataset.design(layout)
    if cfg.start is not None:
        psi = cfg.start.copy().check(dataset, layout)
    else:
        psi = univariate_probit_init(dataset, layout)
    proj = mx.projection(layout)
    psi = _identify(psi, dataset, layout, proj)
    trace = EMTrace(ident=proj)
    sched = [int(m) for m in cfg.schedule]
    n_iter = len(sched)
    vr_start = n_iter - cfg.vr_steps
    batch = None
    t_start = time.perf_counter()
    for it, n_part in enumerate(sched):
        t0 = time.perf_counter()
        smc = replace(cfg.smc, n_particles=n_part)
        prev = batch if cfg.recycle else None
        batch, moments, ll = e_step(psi, dataset, smc, layout, rng, previous=prev, x=x, diag=diag)
        if not math.isfinite(ll):
            raise FloatingPointError(f"non-finite log-likelihood at iteration {it}")
        res = m_step(moments, x, psi, mx)
        new = _identify(res.params, dataset, layout, proj)
        if it >= vr_start:
            zeta = 1.0 / (it - vr_start + 1)
            psi = variance_reduction_update(psi, new, zeta)
            phase = "variance_reduction"
        else:
            psi = new
            phase = "growing" if it == 0 or n_part != sched[it - 1] else "plateau"
        ess_vals = batch.ess()
        trace.params.append(psi.copy())
        trace.loglik.append(ll)
        trace.particles.append(n_part)
        trace.ess_min.append(float(ess_vals.min()))
        trace.ess_mean.append(float(ess_vals.mean()))
        trace.smc_steps.append(float(batch.steps.mean()))
        trace.inner_iters.append(res.n_iter)
        trace.phase.append(phase)
        trace.seconds.append(time.perf_counter() - t0)
        if progress is not None:
            progress(it, trace)
        log.info("iter=%d M=%d loglik=%.4f inner=%d phase=%s", it, n_part, ll, res.n_iter, phase)
    n_final = cfg.final_particles or sched[-1]
    smc = replace(cfg.smc, n_particles=n_final)
    # always a fresh sample: chained recycled constants accumulate error
    batch, _, ll = e_step(psi, dataset, smc, layout, rng, x=x, diag=diag)
    trace.final_params = psi
    trace.final_loglik = ll
    trace.final_batch = batch
    trace.elapsed = time.perf_counter() - t_start
    return trace


# ---------------------------------------------------------------------------
# standard errors
# ---------------------------------------------------------------------------


def identified_names(dataset: ProbitDataset, layout=BLOCK, ident="correlation"):
    p = dataset.p
    if layout == SHARED:
        names = [f"beta{i}" for i in range(dataset.k_sizes[0])]
    else:
        names = [f"beta{i + 1}_{c}" for i, k in enumerate(dataset.k_sizes) for c in range(k)]
    for i in range(p):
        for j in range(i, p):
            if i == j and (ident == "correlation" or i == 0):
                continue
            names.append(f"sigma{i + 1}{j + 1}")
    return names


def identified_vector(params: Parameters, ident="correlation"):
    """Free coordinates of an identified parameter: coefficients then covariance entries."""
    p = params.p
    vals = list(params.beta)
    for i in range(p):
        for j in range(i, p):
            if i == j and (ident == "correlation" or i == 0):
                continue
            vals.append(params.sigma[i, j])
    return np.array(vals)


def _from_vector(vec, k, p, ident="correlation"):
    beta = np.array(vec[:k], dtype=float)
    sigma = np.eye(p)
    c = k
    for i in range(p):
        for j in range(i, p):
            if i == j and (ident == "correlation" or i == 0):
                continue
            sigma[i, j] = sigma[j, i] = vec[c]
            c += 1
    return Parameters(beta, sigma)


def _frozen_loglik(batch: TMVNBatch, x, k, p, ident, backend=None):
    """Log-likelihood at nearby parameters from a fixed weighted sample.

    Each observation's orthant probability is the probability at the sampled
    parameters times the importance-weighted Gaussian density ratio, so the
    function is smooth in the parameters (common random numbers throughout).
    """
    kern = get_kernels(backend)
    n, m, _ = batch.particles.shape
    idx = np.arange(n, dtype=np.int64)
    nu = np.full(n, math.inf)
    lower = np.full((n, p), -np.inf)
    finv0 = np.broadcast_to(np.linalg.inv(np.linalg.cholesky(batch.sigma[0])), (n, p, p)).copy()
    _, logdet0 = np.linalg.slogdet(batch.sigma[0])
    base = kern.log_kernel(batch.particles, batch.mu, finv0, nu, lower, idx) - 0.5 * logdet0
    logw = np.log(np.maximum(batch.weights, 1e-300))

    def f(vec):
        par = _from_vector(vec, k, p, ident)
        chol = np.linalg.cholesky(par.sigma)
        finv = np.broadcast_to(np.linalg.inv(chol), (n, p, p)).copy()
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        mu = _means(x, par.beta)
        lk = kern.log_kernel(batch.particles, mu, finv, nu, lower, idx) - 0.5 * logdet
        a = logw + lk - base
        mx = a.max(axis=1)
        return float(np.sum(batch.log_prob + mx + np.log(np.exp(a - mx[:, None]).sum(axis=1))))

    return f


@dataclass
class StandardErrors:
    names: list
    estimates: np.ndarray
    se: np.ndarray
    information: np.ndarray
    available: bool


def standard_errors(params: Parameters, dataset: ProbitDataset, layout=BLOCK, ident="correlation",
                    smc: SMCConfig = SMCConfig(), h=1e-3, rng=None, batch: Optional[TMVNBatch] = None):
    """Observed-information standard errors by central differences.

    The log-likelihood is evaluated on a frozen weighted sample drawn at
    ``params`` (see :func:`_frozen_loglik`).  A non positive-definite
    information estimate yields ``nan`` standard errors and
    ``available=False``.
    """
    params = _identify(params, dataset, layout, ident)
    x = dataset.design(layout)
    if batch is None or not np.allclose(batch.sigma[0], params.sigma):
        batch, _, _ = e_step(params, dataset, smc, layout, rng, x=x)
    k = params.beta.size
    p = params.p
    f = _frozen_loglik(batch, x, k, p, ident, smc.backend)
    theta = identified_vector(params, ident)
    n = theta.size
    f0 = f(theta)
    hess = np.zeros((n, n))
    e = np.eye(n) * h
    for i in range(n):
        fp, fm = f(theta + e[i]), f(theta - e[i])
        hess[i, i] = (fp - 2 * f0 + fm) / h**2
        for j in range(i):
            fpp = f(theta + e[i] + e[j])
            fpm = f(theta + e[i] - e[j])
            fmp = f(theta - e[i] + e[j])
            fmm = f(theta - e[i] - e[j])
            hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4 * h**2)
    info = -hess
    names = identified_names(dataset, layout, ident)
    try:
        np.linalg.cholesky(info)
        cov = np.linalg.inv(info)
        se = np.sqrt(np.diag(cov))
        ok = True
    except np.linalg.LinAlgError:
        se = np.full(n, np.nan)
        ok = False
    return StandardErrors(names, theta, se, info, ok)
