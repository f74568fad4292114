"""Step-count scaling of the truncation phase with target probability and dimension.

Design: zero mean, unit variances, a single correlation of 0.9 between the
first two coordinates, and a common cutoff ``c`` in every direction
(region ``z_i > c``).  The sampler starts from the region holding a quarter
of an independent standard normal's mass and slides the cutoff to ``c``.
The final cutoff is drawn so that ``p log Phi(-c)`` (the log probability for
an independent standard normal) is uniform on ``log_prob_range``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtri

from .smc import SMCConfig, sample_tmvn_batch

__all__ = ["ScalingConfig", "ScalingRow", "DimensionFit", "scaling_covariance", "run_scaling", "fit_lines"]


@dataclass(frozen=True)
class ScalingConfig:
    dims: tuple = (2, 4, 8, 16)
    replicates: int = 20
    n_particles: int = 4000
    log_prob_range: tuple = (-16.0, -3.0)
    correlation: float = 0.9
    start_mass: float = 0.25
    seed: int = 0
    smc: SMCConfig = field(default_factory=lambda: SMCConfig(pilot_fraction=0.0))

    def __post_init__(self):
        if self.replicates < 2:
            raise ValueError("replicates must be >= 2")
        lo, hi = self.log_prob_range
        if not lo < hi < math.log(self.start_mass):
            raise ValueError("log_prob_range must lie below log(start_mass)")
        if any(int(d) < 2 for d in self.dims):
            raise ValueError("dimensions must be >= 2")


@dataclass
class ScalingRow:
    dim: int
    log_ratio: float
    steps: int
    log_r0: float
    log_r: float
    cutoff: float


@dataclass
class DimensionFit:
    dim: int
    slope: float
    intercept: float
    r2: float
    n: int


def scaling_covariance(p, rho=0.9):
    sigma = np.eye(p)
    sigma[0, 1] = sigma[1, 0] = rho
    return sigma


def _cutoff_for(log_prob, p):
    # p log Phi(-c) = log_prob
    return -float(ndtri(math.exp(log_prob / p)))


def run_scaling(config: ScalingConfig = ScalingConfig(), progress=None):
    """Run every replicate of every dimension; returns a list of ``ScalingRow``.

    All replicates of one dimension run as one lockstep batch.  ``log_r0`` is
    the sampler's estimate of the starting region's probability under the
    initial Student target and ``log_r`` its estimate of the final region's
    Gaussian probability.  ``steps`` counts truncation steps after the
    initial jump.

    The truncation coordinate is the nominal log mass removed (see
    ``SMCConfig.truncation_path``), so each ESS-driven increment stands for a
    fraction of probability.  The default sampler adapts on the full particle
    set (no pilot run), so ``steps`` is the length of a schedule chosen with
    ``n_particles`` particles.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    smc = replace(cfg.smc, n_particles=cfg.n_particles)
    rows = []
    for p in cfg.dims:
        p = int(p)
        n = cfg.replicates
        log_probs = rng.uniform(*cfg.log_prob_range, size=n)
        cut = np.array([_cutoff_for(lp, p) for lp in log_probs])
        c0 = _cutoff_for(math.log(cfg.start_mass), p)
        sigma = scaling_covariance(p, cfg.correlation)
        signs = np.ones((n, p))
        mu = np.zeros((n, p))
        lower_start = np.full((n, p), c0)
        lower_final = np.repeat(cut[:, None], p, axis=1)
        batch = sample_tmvn_batch(signs, mu, sigma, smc, rng, lower_start=lower_start, lower_final=lower_final)
        for j in range(n):
            rows.append(ScalingRow(p, float(batch.log_r0[j] - batch.log_prob[j]), int(batch.truncation_steps[j]),
                                   float(batch.log_r0[j]), float(batch.log_prob[j]), float(cut[j])))
        if progress is not None:
            progress(p, rows)
    return rows


def fit_lines(rows):
    """Least-squares ``steps ~ a + b log(r0/r)`` per dimension."""
    out = []
    for p in sorted({r.dim for r in rows}):
        sub = [r for r in rows if r.dim == p]
        x = np.array([r.log_ratio for r in sub])
        y = np.array([r.steps for r in sub], dtype=float)
        b, a = np.polyfit(x, y, 1)
        resid = y - (a + b * x)
        ss = np.sum((y - y.mean()) ** 2)
        r2 = 1.0 - np.sum(resid**2) / ss if ss > 0 else float("nan")
        out.append(DimensionFit(p, float(b), float(a), float(r2), len(sub)))
    return out
