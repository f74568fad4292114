"""Compare the numba and numpy particle kernels, plus one end-to-end E-step.

Usage::

    python benchmarks/bench_kernels.py [--systems 537] [--particles 2000] [--repeat 5]

Timings are medians over ``--repeat`` calls after one warm-up call (which
also triggers JIT compilation).  Both backends receive identical inputs and
the script checks that their outputs agree.
"""
import argparse
import sys
import time
from dataclasses import replace

import numpy as np

from smcprobit.dataio import ingest_csv, sixcities_path
from smcprobit.kernels import get_kernels
from smcprobit.mcem import e_step
from smcprobit.probit import SHARED, Parameters
from smcprobit.smc import SMCConfig


def make_inputs(n_sys, m, p, rng):
    mu = rng.normal(size=(n_sys, p))
    a = rng.normal(size=(p, p))
    sigma = a @ a.T + p * np.eye(p)
    finv = np.broadcast_to(np.linalg.inv(np.linalg.cholesky(sigma)), (n_sys, p, p)).copy()
    prop = np.broadcast_to(0.5 * np.linalg.cholesky(sigma), (n_sys, p, p)).copy()
    lower = np.full((n_sys, p), -1.0)
    z = np.abs(rng.normal(size=(n_sys, m, p)))
    nu = np.full(n_sys, 5.0)
    w = rng.random((n_sys, m))
    w /= w.sum(axis=1, keepdims=True)
    return dict(z=z, mu=mu, finv=finv, nu=nu, lower=lower, prop=prop, w=w,
                eps=rng.normal(size=(n_sys, m, p)), logu=np.log(rng.random((n_sys, m))),
                u=rng.random(n_sys), idx=np.arange(n_sys))


def timed(fn, repeat):
    fn()
    ts = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t)
    return float(np.median(ts))


def bench_kernels(args):
    rng = np.random.default_rng(0)
    d = make_inputs(args.systems, args.particles, args.dim, rng)
    rows = []
    results = {}
    for name in ("numpy", "numba"):
        k = get_kernels(name)
        logk = k.log_kernel(d["z"], d["mu"], d["finv"], d["nu"], d["lower"], d["idx"])

        def move():
            z = d["z"].copy()
            lk = logk.copy()
            return k.mh_move(z, lk, d["w"], d["mu"], d["finv"], d["nu"], d["lower"], d["prop"],
                             d["eps"], d["logu"], d["idx"]), z

        cases = {
            "log_kernel": lambda: k.log_kernel(d["z"], d["mu"], d["finv"], d["nu"], d["lower"], d["idx"]),
            "mh_move": move,
            "systematic_indices": lambda: k.systematic_indices(d["w"], d["u"], d["idx"]),
            "weighted_moments": lambda: k.weighted_moments(d["z"], d["w"], d["idx"]),
        }
        for case, fn in cases.items():
            results[(name, case)] = fn()
            rows.append((case, name, timed(fn, args.repeat)))
    for case in ("log_kernel", "systematic_indices"):
        assert np.allclose(results[("numpy", case)], results[("numba", case)]), case
    acc_np, z_np = results[("numpy", "mh_move")]
    acc_nb, z_nb = results[("numba", "mh_move")]
    assert np.allclose(acc_np, acc_nb) and np.allclose(z_np, z_nb), "mh_move"
    for a, b in zip(results[("numpy", "weighted_moments")], results[("numba", "weighted_moments")]):
        assert np.allclose(a, b), "weighted_moments"
    return rows


def bench_estep(args):
    ds = ingest_csv(sixcities_path()).dataset
    rho = np.full((4, 4), 0.55)
    np.fill_diagonal(rho, 1.0)
    params = Parameters(np.array([-1.12, -0.08, 0.16, 0.04]), rho)
    rows = []
    for name in ("numpy", "numba"):
        smc = replace(SMCConfig(), n_particles=args.particles, backend=name)
        fn = lambda: e_step(params, ds, smc, SHARED, np.random.default_rng(1))
        rows.append(("e_step_sixcities", name, timed(fn, max(1, args.repeat // 2))))
    return rows


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--systems", type=int, default=537)
    ap.add_argument("--particles", type=int, default=2000)
    ap.add_argument("--dim", type=int, default=4)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-estep", action="store_true")
    args = ap.parse_args()
    rows = bench_kernels(args)
    if not args.skip_estep:
        rows += bench_estep(args)
    print(f"{'case':22s} {'backend':8s} {'median_s':>10s} {'speedup':>8s}")
    base = {case: t for case, name, t in rows if name == "numpy"}
    for case, name, t in rows:
        print(f"{case:22s} {name:8s} {t:10.4f} {base[case] / t:8.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
