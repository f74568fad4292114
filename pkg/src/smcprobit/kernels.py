"""Hot particle kernels, in a numba flavour and a pure-numpy flavour.

Every kernel works on a batch of independent particle systems laid out as

* ``z``: ``(S, M, p)`` particle positions,
* ``w``: ``(S, M)`` normalized weights,
* per-system target pieces ``mu (S, p)``, ``finv (S, p, p)`` (inverse of a
  lower-triangular factor of the scale matrix), ``nu (S,)`` (``inf`` for the
  Gaussian) and ``lower (S, p)`` (lower truncation bounds),

and only touches the systems listed in ``idx``.  Random inputs are drawn by
the caller, so both flavours consume identical streams and agree to rounding.
"""
import numpy as np

from ._backend import HAVE_NUMBA, requested_backend

__all__ = ["NUMPY", "NUMBA", "get_kernels", "active_kernels"]


class KernelSet:
    def __init__(self, name, log_kernel, mh_move, systematic_indices, weighted_moments):
        self.name = name
        self.log_kernel = log_kernel
        self.mh_move = mh_move
        self.systematic_indices = systematic_indices
        self.weighted_moments = weighted_moments

    def __repr__(self):
        return f"KernelSet({self.name!r})"


# ---------------------------------------------------------------------------
# numpy flavour
# ---------------------------------------------------------------------------


def _np_log_kernel_sub(z, mu, finv, nu, lower):
    p = z.shape[-1]
    u = np.matmul(z - mu[:, None, :], np.swapaxes(finv, 1, 2))
    q = np.einsum("smi,smi->sm", u, u)
    out = np.empty_like(q)
    gauss = np.isinf(nu)
    if gauss.any():
        out[gauss] = -0.5 * q[gauss]
    stud = ~gauss
    if stud.any():
        nus = nu[stud][:, None]
        out[stud] = -0.5 * (nus + p) * np.log1p(q[stud] / nus)
    outside = (z <= lower[:, None, :]).any(axis=-1)
    out[outside] = -np.inf
    return out


def np_log_kernel(z, mu, finv, nu, lower, idx):
    return _np_log_kernel_sub(z[idx], mu[idx], finv[idx], nu[idx], lower[idx])


def np_mh_move(z, logk, w, mu, finv, nu, lower, prop, eps, logu, idx):
    zs = z[idx]
    y = zs + np.matmul(eps, np.swapaxes(prop[idx], 1, 2))
    logk_y = _np_log_kernel_sub(y, mu[idx], finv[idx], nu[idx], lower[idx])
    logk_z = logk[idx]
    with np.errstate(invalid="ignore"):
        log_ratio = logk_y - logk_z
    log_ratio = np.where(np.isnan(log_ratio), -np.inf, log_ratio)
    alpha = np.exp(np.minimum(log_ratio, 0.0))
    acc = logu < log_ratio
    zs[acc] = y[acc]
    logk_z = np.where(acc, logk_y, logk_z)
    z[idx] = zs
    logk[idx] = logk_z
    return np.einsum("sm,sm->s", w[idx], alpha)


def np_systematic_indices(w, u, idx):
    ws = w[idx]
    n_sys, m = ws.shape
    out = np.empty((n_sys, m), dtype=np.int64)
    grid = np.arange(m)
    for a in range(n_sys):
        cum = np.cumsum(ws[a])
        out[a] = np.searchsorted(cum, (u[a] + grid) / m, side="right")
    return np.minimum(out, m - 1)


def np_weighted_moments(z, w, idx):
    zs = z[idx]
    ws = w[idx]
    mean = np.einsum("sm,smi->si", ws, zs)
    second = np.einsum("sm,smi,smj->sij", ws, zs, zs)
    return mean, second


NUMPY = KernelSet(
    "numpy", np_log_kernel, np_mh_move, np_systematic_indices, np_weighted_moments
)


# ---------------------------------------------------------------------------
# numba flavour
# ---------------------------------------------------------------------------

NUMBA = None

if HAVE_NUMBA:
    from numba import njit

    # Loops are written out flat: helper calls on array views cost ~2x here.

    @njit(cache=True)
    def nb_log_kernel(z, mu, finv, nu, lower, idx):
        n_sys = idx.shape[0]
        m = z.shape[1]
        p = z.shape[2]
        out = np.empty((n_sys, m))
        d = np.empty(p)
        for a in range(n_sys):
            s = idx[a]
            nu_s = nu[s]
            gauss = np.isinf(nu_s)
            c = -0.5 * (nu_s + p)
            for k in range(m):
                inside = True
                for i in range(p):
                    x = z[s, k, i]
                    if x <= lower[s, i]:
                        inside = False
                    d[i] = x - mu[s, i]
                if not inside:
                    out[a, k] = -np.inf
                    continue
                q = 0.0
                for i in range(p):
                    acc = 0.0
                    for j in range(i + 1):
                        acc += finv[s, i, j] * d[j]
                    q += acc * acc
                if gauss:
                    out[a, k] = -0.5 * q
                else:
                    out[a, k] = c * np.log1p(q / nu_s)
        return out

    @njit(cache=True)
    def nb_mh_move(z, logk, w, mu, finv, nu, lower, prop, eps, logu, idx):
        n_sys = idx.shape[0]
        m = z.shape[1]
        p = z.shape[2]
        acc_rate = np.zeros(n_sys)
        y = np.empty(p)
        d = np.empty(p)
        for a in range(n_sys):
            s = idx[a]
            nu_s = nu[s]
            gauss = np.isinf(nu_s)
            c = -0.5 * (nu_s + p)
            tot = 0.0
            for k in range(m):
                inside = True
                for i in range(p):
                    x = z[s, k, i]
                    for j in range(i + 1):
                        x += prop[s, i, j] * eps[a, k, j]
                    if x <= lower[s, i]:
                        inside = False
                        break
                    y[i] = x
                    d[i] = x - mu[s, i]
                if not inside:
                    continue
                q = 0.0
                for i in range(p):
                    acc = 0.0
                    for j in range(i + 1):
                        acc += finv[s, i, j] * d[j]
                    q += acc * acc
                if gauss:
                    ly = -0.5 * q
                else:
                    ly = c * np.log1p(q / nu_s)
                ratio = ly - logk[s, k]
                if ratio >= 0.0:
                    tot += w[s, k]
                else:
                    tot += w[s, k] * np.exp(ratio)
                if logu[a, k] < ratio:
                    for i in range(p):
                        z[s, k, i] = y[i]
                    logk[s, k] = ly
            acc_rate[a] = tot
        return acc_rate

    @njit(cache=True)
    def nb_systematic_indices(w, u, idx):
        n_sys = idx.shape[0]
        m = w.shape[1]
        out = np.empty((n_sys, m), dtype=np.int64)
        for a in range(n_sys):
            s = idx[a]
            j = 0
            cum = w[s, 0]
            for k in range(m):
                pos = (u[a] + k) / m
                while pos >= cum and j < m - 1:
                    j += 1
                    cum += w[s, j]
                out[a, k] = j
        return out

    @njit(cache=True)
    def nb_weighted_moments(z, w, idx):
        n_sys = idx.shape[0]
        m = z.shape[1]
        p = z.shape[2]
        mean = np.zeros((n_sys, p))
        second = np.zeros((n_sys, p, p))
        for a in range(n_sys):
            s = idx[a]
            for k in range(m):
                wk = w[s, k]
                if wk == 0.0:
                    continue
                for i in range(p):
                    zi = wk * z[s, k, i]
                    mean[a, i] += zi
                    for j in range(i + 1):
                        second[a, i, j] += zi * z[s, k, j]
            for i in range(p):
                for j in range(i):
                    second[a, j, i] = second[a, i, j]
        return mean, second

    NUMBA = KernelSet(
        "numba", nb_log_kernel, nb_mh_move, nb_systematic_indices, nb_weighted_moments
    )


def get_kernels(name=None):
    """Return the kernel set called ``name`` (default: environment choice)."""
    name = name or requested_backend()
    if name == "numba":
        if NUMBA is None:
            raise ImportError("numba backend requested but numba is unavailable")
        return NUMBA
    if name == "numpy":
        return NUMPY
    raise ValueError(f"unknown kernel backend {name!r}")


def active_kernels():
    return get_kernels()
