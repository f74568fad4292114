"""Multivariate probit model: data, design matrices, parameters, likelihood."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtr, ndtri

__all__ = [
    "BLOCK",
    "SHARED",
    "ProbitDataset",
    "DesignMatrix",
    "Parameters",
    "IdentifiedParameters",
    "ConvergenceError",
    "DegenerateEstimateError",
    "orthant_from_response",
    "build_design_matrix",
    "univariate_probit_init",
    "project_to_identified",
    "recompose",
    "log_likelihood",
]

BLOCK = "block"
SHARED = "shared"


class ConvergenceError(RuntimeError):
    pass


class DegenerateEstimateError(ValueError):
    pass


@dataclass
class ProbitDataset:
    """``N`` binary response vectors with per-component covariates.

    ``covariates[i]`` is an ``(N, k_i)`` array holding ``x_i^j`` for every
    observation ``j``.
    """

    responses: np.ndarray
    covariates: list

    def __post_init__(self):
        y = np.asarray(self.responses)
        if y.ndim == 1:
            y = y[:, None]
        if y.ndim != 2 or y.shape[0] < 1 or y.shape[1] < 1:
            raise ValueError("responses must be an (N, p) array with N, p >= 1")
        if not np.all(np.isin(y, (0, 1))):
            raise ValueError("responses must be 0/1")
        self.responses = y.astype(np.int64)
        n, p = y.shape
        if len(self.covariates) != p:
            raise ValueError(f"expected {p} covariate blocks, got {len(self.covariates)}")
        covs = []
        for i, x in enumerate(self.covariates):
            x = np.asarray(x, dtype=float)
            if x.ndim == 1:
                x = x[:, None]
            if x.shape[0] != n:
                raise ValueError(f"covariate block {i} has {x.shape[0]} rows, expected {n}")
            covs.append(x)
        self.covariates = covs

    @property
    def n(self):
        return self.responses.shape[0]

    @property
    def p(self):
        return self.responses.shape[1]

    @property
    def k_sizes(self):
        return tuple(x.shape[1] for x in self.covariates)

    def n_coef(self, layout):
        return self.k_sizes[0] if layout == SHARED else sum(self.k_sizes)

    def signs(self):
        return np.where(self.responses == 1, 1.0, -1.0)

    def design(self, layout=BLOCK):
        """All design matrices stacked as an ``(N, p, k)`` array."""
        n, p = self.n, self.p
        if layout == SHARED:
            if len(set(self.k_sizes)) != 1:
                raise ValueError("shared layout needs equal covariate lengths")
            return np.stack(self.covariates, axis=1)
        if layout != BLOCK:
            raise ValueError(f"unknown layout {layout!r}")
        k = sum(self.k_sizes)
        out = np.zeros((n, p, k))
        c = 0
        for i, x in enumerate(self.covariates):
            out[:, i, c:c + x.shape[1]] = x
            c += x.shape[1]
        return out

    def subset(self, idx):
        return ProbitDataset(self.responses[idx], [x[idx] for x in self.covariates])


@dataclass
class DesignMatrix:
    matrix: np.ndarray
    layout: str


@dataclass
class Parameters:
    beta: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float).ravel()
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        s = self.sigma
        if s.shape[0] != s.shape[1]:
            raise ValueError("sigma must be square")
        if not np.allclose(s, s.T, rtol=0, atol=1e-10 * max(1.0, np.abs(s).max())):
            raise ValueError("sigma must be symmetric")
        self.sigma = 0.5 * (s + s.T)

    @property
    def p(self):
        return self.sigma.shape[0]

    def is_valid(self):
        try:
            np.linalg.cholesky(self.sigma)
        except np.linalg.LinAlgError:
            return False
        return bool(np.all(np.isfinite(self.beta)))

    def check(self, dataset: ProbitDataset | None = None, layout=BLOCK):
        if not self.is_valid():
            raise ValueError("sigma is not positive definite")
        if dataset is not None:
            if self.p != dataset.p or self.beta.size != dataset.n_coef(layout):
                raise ValueError("parameter dimensions do not match the dataset")
        return self

    def copy(self):
        return Parameters(self.beta.copy(), self.sigma.copy())


@dataclass
class IdentifiedParameters:
    omega: np.ndarray
    lam: np.ndarray
    scale: np.ndarray
    mode: str


def orthant_from_response(response):
    """Sign vector (+1 where the response is 1, -1 otherwise)."""
    r = np.asarray(response)
    if not np.all(np.isin(r, (0, 1))):
        raise ValueError("response entries must be 0 or 1")
    return np.where(r == 1, 1.0, -1.0)


def build_design_matrix(covariates: Sequence, layout=BLOCK) -> DesignMatrix:
    """Design matrix for one observation from its ``p`` covariate vectors."""
    xs = [np.atleast_1d(np.asarray(x, dtype=float)) for x in covariates]
    p = len(xs)
    if layout == SHARED:
        if len({x.size for x in xs}) != 1:
            raise ValueError("shared layout needs covariate vectors of equal length")
        return DesignMatrix(np.vstack(xs), SHARED)
    if layout != BLOCK:
        raise ValueError(f"unknown layout {layout!r}")
    k = sum(x.size for x in xs)
    mat = np.zeros((p, k))
    c = 0
    for i, x in enumerate(xs):
        mat[i, c:c + x.size] = x
        c += x.size
    return DesignMatrix(mat, BLOCK)


def _probit_irls(y, x, max_iter=50, tol=1e-8):
    """Univariate probit MLE by Fisher scoring (IRLS); returns (beta, converged)."""
    beta = np.zeros(x.shape[1])
    ybar = np.clip(y.mean(), 1e-3, 1 - 1e-3)
    if np.allclose(x[:, 0], 1.0):
        beta[0] = ndtri(ybar)
    for _ in range(max_iter):
        eta = x @ beta
        cdf = np.clip(ndtr(eta), 1e-12, 1 - 1e-12)
        pdf = np.exp(-0.5 * eta**2) / np.sqrt(2 * np.pi)
        wts = pdf**2 / (cdf * (1 - cdf))
        grad = x.T @ (pdf * (y - cdf) / (cdf * (1 - cdf)))
        info = x.T @ (wts[:, None] * x)
        try:
            delta = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            return beta, False
        beta = beta + delta
        if np.max(np.abs(grad)) < tol or np.max(np.abs(delta)) < tol:
            return beta, True
        if np.max(np.abs(beta)) > 30:
            return beta, False
    return beta, False


def univariate_probit_init(dataset: ProbitDataset, layout=BLOCK, max_iter=50, tol=1e-8) -> Parameters:
    """Independence-model start: identity covariance, univariate probit coefficients.

    With the shared layout a single pooled probit is fitted to all components.
    """
    y = dataset.responses
    if layout == SHARED:
        x = np.concatenate(dataset.covariates, axis=0)
        yy = y.T.reshape(-1)
        beta, ok = _probit_irls(yy, x, max_iter, tol)
        if not ok:
            raise ConvergenceError("pooled univariate probit did not converge")
    else:
        parts = []
        for i, x in enumerate(dataset.covariates):
            b, ok = _probit_irls(y[:, i], x, max_iter, tol)
            if not ok:
                raise ConvergenceError(f"univariate probit for component {i} did not converge "
                                       "(possible separation)")
            parts.append(b)
        beta = np.concatenate(parts)
    return Parameters(beta, np.eye(dataset.p))


def _block_scale(scale, k_sizes, layout):
    if layout == SHARED:
        if not np.allclose(scale, scale[0], rtol=1e-12, atol=0):
            raise ValueError("shared-coefficient layout only admits a common scale")
        return np.full(k_sizes[0], scale[0])
    return np.repeat(scale, k_sizes)


def project_to_identified(params: Parameters, mode="correlation", k_sizes=None, layout=BLOCK):
    """Rescale to an identified representative of the likelihood-invariant orbit.

    ``mode="correlation"`` divides each latent coordinate by its own standard
    deviation; ``mode="fixed_first"`` divides all of them by ``sqrt(sigma_11)``.
    ``k_sizes`` gives the coefficient block lengths (default: one per
    component, or all coefficients shared when ``layout == "shared"``).
    """
    diag = np.diag(params.sigma)
    if np.any(diag <= 0):
        raise ValueError("invalid covariance: non-positive diagonal entry")
    p = params.p
    if mode == "correlation":
        d = np.sqrt(diag)
    elif mode == "fixed_first":
        d = np.full(p, np.sqrt(diag[0]))
    else:
        raise ValueError(f"unknown identification mode {mode!r}")
    if k_sizes is None:
        k_sizes = (params.beta.size,) * p if layout == SHARED else _even_blocks(params.beta.size, p)
    omega = params.sigma / np.outer(d, d)
    if mode == "correlation":
        np.fill_diagonal(omega, 1.0)
    else:
        omega[0, 0] = 1.0
    lam = params.beta / _block_scale(d, k_sizes, layout)
    return IdentifiedParameters(omega, lam, d, mode)


def _even_blocks(k, p):
    if k % p:
        raise ValueError("cannot infer block sizes; pass k_sizes")
    return (k // p,) * p


def recompose(ident: IdentifiedParameters, k_sizes=None, layout=BLOCK) -> Parameters:
    d = ident.scale
    p = d.size
    if k_sizes is None:
        k_sizes = (ident.lam.size,) * p if layout == SHARED else _even_blocks(ident.lam.size, p)
    return Parameters(ident.lam * _block_scale(d, k_sizes, layout), ident.omega * np.outer(d, d))


def log_likelihood(params: Parameters | None, dataset: ProbitDataset | None, orthant_probs) -> float:
    """Sum of log orthant probabilities (one estimate per observation)."""
    pr = np.asarray(orthant_probs, dtype=float).ravel()
    if dataset is not None and pr.size != dataset.n:
        raise ValueError(f"expected {dataset.n} probabilities, got {pr.size}")
    bad = np.flatnonzero(~(pr > 0))
    if bad.size:
        raise DegenerateEstimateError(f"non-positive probability estimate for observation {int(bad[0])}")
    if np.any(pr > 1 + 1e-12):
        warnings.warn("probability estimate above 1", RuntimeWarning, stacklevel=2)
    return float(np.sum(np.log(pr)))
