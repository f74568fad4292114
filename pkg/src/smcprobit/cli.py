"""Command line front end: ``fit``, ``scaling``, ``sample-tmvn`` and ``validate-data``.

Every artifact is a deterministic function of the resolved configuration
(including the seed); wall-clock timings go to stderr only.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Optional

import numpy as np

from .dataio import DataError, ingest_csv, sixcities_path, validate_csv
from .mcem import (
    MaximizerConfig,
    MCEMConfig,
    NonInteriorError,
    OmegaConvergenceError,
    RankDeficiencyError,
    SingularCovarianceError,
    identified_names,
    identified_vector,
    particle_schedule,
    run_mcem,
    standard_errors,
)
from .probit import ConvergenceError, DegenerateEstimateError
from .scaling import ScalingConfig, fit_lines, run_scaling
from .smc import SMCConfig, TargetUnreachableError, sample_tmvn

log = logging.getLogger("smcprobit")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

NUMERICAL_ERRORS = (
    np.linalg.LinAlgError,
    TargetUnreachableError,
    ConvergenceError,
    OmegaConvergenceError,
    NonInteriorError,
    DegenerateEstimateError,
    FloatingPointError,
    SingularCovarianceError,
    RankDeficiencyError,
)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Resolved settings for one command (defaults < config file < flags)."""

    command: str = "fit"
    data: Optional[str] = None
    schema: str = "sixcities"
    mode: str = "constrained"
    objective: str = "q"
    fix_sigma11: bool = False
    recycle: bool = False
    particles_schedule: str = "100:100:4000"
    plateau: Optional[int] = None
    vr_steps: int = 10
    final_particles: Optional[int] = None
    standard_errors: bool = True
    se_step: float = 1e-3
    inner_tol: float = 1e-8
    ess_ratio: float = 0.9
    seed: int = 1
    threads: Optional[int] = None
    backend: Optional[str] = None
    out_dir: str = "out"
    # scaling
    dims: str = "2,4,8,16"
    replicates: int = 20
    log_prob_range: str = "-16,-3"
    # sample-tmvn
    mu: Optional[str] = None
    sigma: Optional[str] = None
    orthant: Optional[str] = None
    particles: int = 4000

    def validate(self):
        if self.command not in ("fit", "scaling", "sample-tmvn", "validate-data"):
            raise ConfigError(f"unknown command {self.command!r}")
        if self.schema not in ("sixcities", "generic"):
            raise ConfigError(f"--schema must be sixcities or generic, got {self.schema!r}")
        if self.mode not in ("constrained", "unconstrained"):
            raise ConfigError(f"--mode must be constrained or unconstrained, got {self.mode!r}")
        if self.objective not in ("q", "qtilde"):
            raise ConfigError(f"--objective must be q or qtilde, got {self.objective!r}")
        if self.vr_steps < 0:
            raise ConfigError("--vr-steps must be >= 0")
        if self.plateau is not None and self.plateau < 0:
            raise ConfigError("--plateau must be >= 0")
        if not 0 < self.ess_ratio < 1:
            raise ConfigError("--ess-ratio must lie in (0, 1)")
        if self.inner_tol <= 0:
            raise ConfigError("--inner-tol must be positive")
        if self.se_step <= 0:
            raise ConfigError("--se-step must be positive")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if self.backend not in (None, "numba", "numpy"):
            raise ConfigError(f"--backend must be numba or numpy, got {self.backend!r}")
        if self.particles < 2:
            raise ConfigError("--particles must be >= 2")
        if self.replicates < 2:
            raise ConfigError("--replicates must be >= 2")
        if self.final_particles is not None and self.final_particles < 2:
            raise ConfigError("--final-particles must be >= 2")
        if self.command == "fit":
            self.schedule()
            if self.schema == "generic" and self.data is None:
                raise ConfigError("--data is required with --schema generic")
        if self.command == "validate-data" and self.data is None and self.schema == "generic":
            raise ConfigError("--data is required with --schema generic")
        if self.command == "scaling":
            self.dim_list()
            self.prob_range()
        if self.command == "sample-tmvn":
            self.tmvn_inputs()
        return self

    # -- derived values -------------------------------------------------

    def schedule(self):
        """Particle count per EM iteration (growth, plateau, then averaging steps)."""
        spec = self.particles_schedule.strip()
        try:
            if ":" in spec:
                start, step, cap = (int(v) for v in spec.split(":"))
                if start < 2 or step < 0 or cap < start:
                    raise ValueError
                n_grow = 1 if step == 0 else (cap - start) // step + 1
                grow = [min(start + step * i, cap) for i in range(n_grow)]
            else:
                grow = [int(v) for v in spec.split(",")]
                if not grow or min(grow) < 2:
                    raise ValueError
        except ValueError:
            raise ConfigError(
                f"--particles-schedule must be start:step:cap or a comma list of counts >= 2, got {spec!r}"
            ) from None
        plateau = self.plateau if self.plateau is not None else (20 if self.mode == "unconstrained" else 0)
        return grow + [grow[-1]] * (plateau + self.vr_steps)

    def dim_list(self):
        try:
            dims = tuple(int(v) for v in self.dims.split(","))
        except ValueError:
            raise ConfigError(f"--dims must be a comma list of integers, got {self.dims!r}") from None
        if not dims or min(dims) < 2:
            raise ConfigError("--dims entries must be >= 2")
        return dims

    def prob_range(self):
        try:
            lo, hi = (float(v) for v in self.log_prob_range.split(","))
        except ValueError:
            raise ConfigError(f"--log-prob-range must be 'lo,hi', got {self.log_prob_range!r}") from None
        if not lo < hi < math.log(0.25):
            raise ConfigError("--log-prob-range needs lo < hi < log(1/4)")
        return lo, hi

    def tmvn_inputs(self):
        if self.mu is None or self.sigma is None or self.orthant is None:
            raise ConfigError("sample-tmvn needs --mu, --sigma and --orthant")
        try:
            mu = np.array([float(v) for v in self.mu.split(",")])
            sigma = np.array([[float(v) for v in row.split(",")] for row in self.sigma.split(";")])
            orth = np.array([_parse_sign(v) for v in self.orthant.split(",")])
        except ValueError as exc:
            raise ConfigError(f"cannot parse sample-tmvn inputs: {exc}") from None
        p = mu.size
        if sigma.shape != (p, p) or orth.size != p:
            raise ConfigError(f"dimension mismatch: mu has {p} entries, sigma is {sigma.shape}, "
                              f"orthant has {orth.size}")
        if not np.allclose(sigma, sigma.T):
            raise ConfigError("--sigma must be symmetric")
        if np.linalg.eigvalsh(sigma)[0] <= 0:
            raise ConfigError("--sigma must be positive definite")
        return mu, sigma, orth

    def maximizer(self, layout):
        ident = "fixed_first" if self.fix_sigma11 else "correlation"
        return MaximizerConfig(self.objective, self.mode, ident, inner_tol=self.inner_tol)

    def smc_config(self):
        return SMCConfig(n_particles=self.particles, ess_ratio=self.ess_ratio, backend=self.backend)


def _parse_sign(v):
    v = v.strip()
    if v in ("+", "+1", "1"):
        return 1.0
    if v in ("-", "-1", "0"):
        return -1.0
    raise ValueError(f"orthant entries must be +/-1, got {v!r}")


# ---------------------------------------------------------------------------
# formatting
# ---------------------------------------------------------------------------


def full(v):
    """17 significant digits, or ``NA`` for missing values."""
    if v is None or not np.isfinite(v):
        return "NA"
    return format(float(v), ".17g")


def times1000(v):
    """``1000 v`` rounded half away from zero, from the 17-digit representation."""
    if v is None or not np.isfinite(v):
        return "NA"
    d = Decimal(full(v)) * 1000
    return str(int(d.quantize(Decimal(1), rounding=ROUND_HALF_UP)))


def _write_tsv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(header) + "\n")
        for r in rows:
            fh.write("\t".join(str(c) for c in r) + "\n")


class _Diag:
    """Line-oriented ``key=value`` diagnostics file."""

    def __init__(self, path):
        self.fh = open(path, "w", encoding="utf-8", newline="\n")

    def write(self, line):
        self.fh.write(line)

    def kv(self, **items):
        self.fh.write(" ".join(f"{k}={_kv(v)}" for k, v in items.items()) + "\n")

    def close(self):
        self.fh.close()


def _kv(v):
    if isinstance(v, float):
        return full(v)
    return str(v).replace(" ", "_")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _load(cfg: RunConfig):
    path = cfg.data
    if path is None:
        path = str(sixcities_path())
    return ingest_csv(path, cfg.schema)


def _apply_threads(cfg: RunConfig):
    if cfg.threads is None:
        return
    try:
        import numba

        numba.set_num_threads(min(cfg.threads, numba.config.NUMBA_NUM_THREADS))
    except ImportError:
        pass


def cmd_fit(cfg: RunConfig) -> int:
    loaded = _load(cfg)
    ds, layout = loaded.dataset, loaded.layout
    mx = cfg.maximizer(layout)
    sched = cfg.schedule()
    mc = MCEMConfig(
        layout=layout, maximizer=mx, schedule=sched, vr_steps=min(cfg.vr_steps, len(sched)),
        recycle=cfg.recycle, final_particles=cfg.final_particles,
        smc=SMCConfig(ess_ratio=cfg.ess_ratio, backend=cfg.backend), seed=cfg.seed,
    )
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    diag = _Diag(out / "diagnostics.log")
    try:
        for k, v in asdict(cfg).items():
            if k != "out_dir":
                diag.kv(config=k, value=v)
        diag.kv(event="data", rows=ds.n, components=ds.p, layout=layout, source=loaded.source)

        def progress(it, tr):
            diag.kv(event="iteration", iteration=it, particles=tr.particles[-1], phase=tr.phase[-1],
                    loglik=tr.loglik[-1], ess_min=tr.ess_min[-1], inner_iterations=tr.inner_iters[-1])
            print(f"iter {it:3d}  M={tr.particles[-1]:5d}  loglik={tr.loglik[-1]:.3f}  "
                  f"{tr.seconds[-1]:.1f}s", file=sys.stderr, flush=True)

        t0 = time.perf_counter()
        trace = run_mcem(ds, mc, diag=diag, progress=progress)
        ident = trace.ident
        psi = trace.final_params
        names = identified_names(ds, layout, ident)
        est = identified_vector(psi, ident)
        if cfg.standard_errors:
            se_res = standard_errors(psi, ds, layout, ident, replace(mc.smc, n_particles=trace.final_batch.n_particles),
                                     h=cfg.se_step, batch=trace.final_batch)
            se = se_res.se
            diag.kv(event="standard_errors", available=se_res.available)
        else:
            se = np.full(est.size, np.nan)
        diag.kv(event="final", loglik=trace.final_loglik, ident=ident)
    finally:
        diag.close()
    rows = [(n, times1000(e), times1000(s), full(e), full(s)) for n, e, s in zip(names, est, se)]
    rows.append(("loglik", "NA", "NA", full(trace.final_loglik), "NA"))
    _write_tsv(out / "estimates.tsv", ["parameter", "estimate_x1000", "se_x1000", "estimate", "se"], rows)
    trace_rows = []
    for i in range(trace.iterations):
        trace_rows.append((i, trace.particles[i], trace.phase[i], full(trace.loglik[i]), full(trace.ess_min[i]),
                           full(trace.ess_mean[i]), full(trace.smc_steps[i]), trace.inner_iters[i],
                           *(full(v) for v in identified_vector(trace.params[i], ident))))
    _write_tsv(out / "loglik_trace.tsv",
               ["iteration", "particles", "phase", "loglik", "ess_min", "ess_mean", "mean_smc_steps",
                "inner_iterations", *names], trace_rows)
    print(f"final loglik {trace.final_loglik:.3f}; wall time {time.perf_counter() - t0:.1f}s; "
          f"outputs in {out}", file=sys.stderr)
    for n, e, s in zip(names, est, se):
        print(f"{n}\t{times1000(e)}\t({times1000(s)})")
    print(f"loglik\t{trace.final_loglik:.2f}")
    return EXIT_OK


def cmd_scaling(cfg: RunConfig) -> int:
    sc = ScalingConfig(dims=cfg.dim_list(), replicates=cfg.replicates, n_particles=cfg.particles,
                       log_prob_range=cfg.prob_range(), seed=cfg.seed,
                       smc=replace(ScalingConfig().smc, ess_ratio=cfg.ess_ratio, backend=cfg.backend))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    rows = run_scaling(sc, progress=lambda p, r: print(f"dim {p} done ({time.perf_counter() - t0:.1f}s)",
                                                        file=sys.stderr, flush=True))
    _write_tsv(out / "scaling.tsv", ["dim", "log_r0_over_r", "steps", "log_r0", "log_r", "cutoff"],
               [(r.dim, full(r.log_ratio), r.steps, full(r.log_r0), full(r.log_r), full(r.cutoff)) for r in rows])
    fits = fit_lines(rows)
    _write_tsv(out / "scaling_fit.tsv", ["dim", "slope", "intercept", "r2", "n"],
               [(f.dim, full(f.slope), full(f.intercept), full(f.r2), f.n) for f in fits])
    for f in fits:
        print(f"dim={f.dim}\tslope={f.slope:.3f}\tintercept={f.intercept:.3f}\tr2={f.r2:.4f}")
    return EXIT_OK


def cmd_sample_tmvn(cfg: RunConfig) -> int:
    mu, sigma, orth = cfg.tmvn_inputs()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    diag = _Diag(out / "diagnostics.log")
    try:
        system, log_prob = sample_tmvn(orth, mu, sigma, cfg.smc_config(), np.random.default_rng(cfg.seed), diag=diag)
        diag.kv(event="final", log_prob=log_prob)
    finally:
        diag.close()
    p = mu.size
    _write_tsv(out / "particles.tsv", ["weight", *(f"z{i + 1}" for i in range(p))],
               [(full(w), *(full(v) for v in z)) for w, z in zip(system.weights, system.particles)])
    _write_tsv(out / "summary.tsv", ["quantity", "value"],
               [("log_prob", full(log_prob)), ("prob", full(math.exp(log_prob))), ("ess", full(system.ess()))])
    print(f"log_prob={full(log_prob)}")
    print(f"prob={full(math.exp(log_prob))}")
    return EXIT_OK


def cmd_validate(cfg: RunConfig) -> int:
    path = cfg.data if cfg.data is not None else str(sixcities_path())
    summary = validate_csv(path, cfg.schema)
    for k, v in summary.items():
        print(f"{k}={v}")
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "scaling": cmd_scaling, "sample-tmvn": cmd_sample_tmvn, "validate-data": cmd_validate}


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


def _common(p):
    p.add_argument("--config", help="JSON file of settings (flags override it)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--threads", type=int, help="cap on worker threads for compiled kernels")
    p.add_argument("--backend", choices=["numba", "numpy"], help="kernel flavour (default: environment)")
    p.add_argument("--ess-ratio", type=float, help="resampling threshold as a fraction of particles")
    p.add_argument("--show-config", action="store_true", help="print the resolved settings and exit")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="smcprobit", description="SMC-EM for multivariate probit models")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="maximum likelihood fit by Monte Carlo EM")
    _common(fit)
    fit.add_argument("--data", help="input CSV (default: bundled wheeze data)")
    fit.add_argument("--schema", choices=["sixcities", "generic"])
    fit.add_argument("--mode", choices=["constrained", "unconstrained"])
    fit.add_argument("--objective", choices=["q", "qtilde"])
    fit.add_argument("--fix-sigma11", action="store_true", default=None, help="identify by sigma_11 = 1")
    fit.add_argument("--recycle", action="store_true", default=None, help="move particles between iterations")
    fit.add_argument("--particles-schedule", help="start:step:cap or comma list (growth phase)")
    fit.add_argument("--plateau", type=int, help="extra iterations at the final count before averaging")
    fit.add_argument("--vr-steps", type=int, help="variance-reduction iterations at the end")
    fit.add_argument("--final-particles", type=int, help="particles for the final likelihood evaluation")
    fit.add_argument("--no-se", dest="standard_errors", action="store_false", default=None)
    fit.add_argument("--se-step", type=float)
    fit.add_argument("--inner-tol", type=float)

    sc = sub.add_parser("scaling", help="step count versus target probability and dimension")
    _common(sc)
    sc.add_argument("--dims")
    sc.add_argument("--replicates", type=int)
    sc.add_argument("--particles", type=int)
    sc.add_argument("--log-prob-range")

    st = sub.add_parser("sample-tmvn", help="sample one orthant-truncated normal")
    _common(st)
    st.add_argument("--mu", help="comma separated mean")
    st.add_argument("--sigma", help="rows separated by ';', entries by ','")
    st.add_argument("--orthant", help="comma separated signs (+1/-1)")
    st.add_argument("--particles", type=int)

    vd = sub.add_parser("validate-data", help="check a CSV against its schema")
    _common(vd)
    vd.add_argument("--data")
    vd.add_argument("--schema", choices=["sixcities", "generic"])
    return parser


def resolve_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        known = {f.name for f in fields(RunConfig)}
        for k, v in loaded.items():
            key = k.replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown key {k!r} in config file")
            values[key] = v
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    values["command"] = args.command
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.show_config:
        for k, v in asdict(cfg).items():
            print(f"{k}={v}")
        return EXIT_OK
    _apply_threads(cfg)
    try:
        return COMMANDS[cfg.command](cfg)
    except DataError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        print(f"error: numerical: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
