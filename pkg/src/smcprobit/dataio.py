"""CSV ingestion, validation and a synthetic stand-in for the wheeze data.

Two schemas are understood.

``sixcities``
    Header ``y7,y8,y9,y10,smoke`` followed by one row per child (0/1 fields).
    Component ``i`` (age ``7 + i``) gets covariates
    ``(1, age - 9, smoke, (age - 9) * smoke)`` and all four components share
    the coefficient vector.

``generic``
    A first line ``# covariates: k1,k2,...,kp`` declaring the covariate count
    per component, then a header ``y1..yp`` followed by the covariate columns
    for component 1, then component 2, and so on.  Blocks are separate
    (one coefficient vector per component).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .probit import BLOCK, SHARED, Parameters, ProbitDataset

__all__ = [
    "DataError",
    "LoadedData",
    "SIXCITIES_HEADER",
    "ingest_csv",
    "validate_csv",
    "sixcities_path",
    "sixcities_covariates",
    "synthetic_sixcities",
    "write_sixcities_csv",
    "simulate_probit",
]

SIXCITIES_HEADER = ("y7", "y8", "y9", "y10", "smoke")
SIXCITIES_ROWS = 537


class DataError(ValueError):
    """Malformed input; the message names the offending row and column."""


@dataclass
class LoadedData:
    dataset: ProbitDataset
    layout: str
    schema: str
    source: str


def sixcities_path() -> Path:
    """Location of the bundled wheeze CSV."""
    return Path(str(resources.files("smcprobit") / "data" / "sixcities.csv"))


def sixcities_covariates(smoke):
    """Per-component covariate blocks ``(1, age-9, h, (age-9) h)`` for ages 7..10."""
    h = np.asarray(smoke, dtype=float)
    blocks = []
    for age in (7, 8, 9, 10):
        t = np.full_like(h, age - 9.0)
        blocks.append(np.column_stack([np.ones_like(h), t, h, t * h]))
    return blocks


def _parse_binary(value, row, col, name):
    v = value.strip()
    if v not in ("0", "1"):
        raise DataError(f"row {row}, column {col} ({name}): expected 0 or 1, got {value!r}")
    return int(v)


def _parse_float(value, row, col, name):
    try:
        out = float(value)
    except ValueError:
        raise DataError(f"row {row}, column {col} ({name}): not a number: {value!r}") from None
    if not np.isfinite(out):
        raise DataError(f"row {row}, column {col} ({name}): non-finite value {value!r}")
    return out


def _read_lines(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not text.strip():
        raise DataError(f"{path}: empty file")
    return text


def _ingest_sixcities(text, source, strict_rows=True):
    reader = csv.reader(io.StringIO(text))
    rows = [r for r in reader if r and any(c.strip() for c in r)]
    header = tuple(c.strip() for c in rows[0])
    if header != SIXCITIES_HEADER:
        raise DataError(f"row 1: expected header {','.join(SIXCITIES_HEADER)}, got {','.join(header)}")
    body = rows[1:]
    if not body:
        raise DataError(f"{source}: no data rows")
    y = np.empty((len(body), 4), dtype=np.int64)
    smoke = np.empty(len(body))
    for r, fields in enumerate(body, start=2):
        if len(fields) != 5:
            raise DataError(f"row {r}: expected 5 columns, found {len(fields)}")
        vals = [_parse_binary(v, r, c, SIXCITIES_HEADER[c - 1]) for c, v in enumerate(fields, start=1)]
        y[r - 2] = vals[:4]
        smoke[r - 2] = vals[4]
    if strict_rows and len(body) != SIXCITIES_ROWS:
        raise DataError(f"{source}: expected {SIXCITIES_ROWS} data rows, found {len(body)}")
    return ProbitDataset(y, sixcities_covariates(smoke))


def _ingest_generic(text, source):
    lines = text.splitlines()
    first = lines[0].strip()
    if not first.startswith("#") or "covariates:" not in first:
        raise DataError("row 1: generic schema needs a '# covariates: k1,...,kp' line")
    try:
        ks = [int(v) for v in first.split("covariates:", 1)[1].split(",")]
    except ValueError:
        raise DataError("row 1: covariate counts must be integers") from None
    if not ks or any(k < 1 for k in ks):
        raise DataError("row 1: covariate counts must be positive")
    p = len(ks)
    reader = csv.reader(io.StringIO("\n".join(lines[1:])))
    rows = [r for r in reader if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError("row 2: missing header")
    header = [c.strip() for c in rows[0]]
    ncol = p + sum(ks)
    if len(header) != ncol:
        raise DataError(f"row 2: expected {ncol} columns, found {len(header)}")
    for i in range(p):
        if header[i] != f"y{i + 1}":
            raise DataError(f"row 2, column {i + 1}: expected y{i + 1}, got {header[i]!r}")
    body = rows[1:]
    if not body:
        raise DataError(f"{source}: no data rows")
    y = np.empty((len(body), p), dtype=np.int64)
    x = np.empty((len(body), sum(ks)))
    for r, fields in enumerate(body, start=3):
        if len(fields) != ncol:
            raise DataError(f"row {r}: expected {ncol} columns, found {len(fields)}")
        for c in range(p):
            y[r - 3, c] = _parse_binary(fields[c], r, c + 1, header[c])
        for c in range(p, ncol):
            x[r - 3, c - p] = _parse_float(fields[c], r, c + 1, header[c])
    blocks = np.split(x, np.cumsum(ks)[:-1], axis=1)
    return ProbitDataset(y, blocks)


def ingest_csv(path, schema="sixcities", strict_rows=True) -> LoadedData:
    """Read a CSV into a dataset plus its coefficient layout.

    Raises
    ------
    DataError
        On an unreadable or empty file, wrong header, wrong column count or
        a non-binary response; messages give 1-based row and column numbers.
    """
    text = _read_lines(path)
    if schema == "sixcities":
        ds = _ingest_sixcities(text, str(path), strict_rows)
        return LoadedData(ds, SHARED, schema, str(path))
    if schema == "generic":
        return LoadedData(_ingest_generic(text, str(path)), BLOCK, schema, str(path))
    raise DataError(f"unknown schema {schema!r}")


def validate_csv(path, schema="sixcities", strict_rows=True):
    """Check a file against its schema; returns a short summary dict."""
    loaded = ingest_csv(path, schema, strict_rows)
    ds = loaded.dataset
    patterns = {tuple(r) for r in ds.responses}
    return {
        "schema": schema,
        "rows": ds.n,
        "components": ds.p,
        "coefficients": ds.n_coef(loaded.layout),
        "layout": loaded.layout,
        "distinct_patterns": len(patterns),
        "response_means": ",".join(f"{v:.4f}" for v in ds.responses.mean(axis=0)),
    }


def write_sixcities_csv(path, responses, smoke):
    y = np.asarray(responses, dtype=int)
    h = np.asarray(smoke, dtype=int)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SIXCITIES_HEADER)
        for row, s in zip(y, h):
            w.writerow([*row.tolist(), int(s)])


def simulate_probit(params: Parameters, covariates, layout=BLOCK, rng=None) -> ProbitDataset:
    """Draw responses from the probit model at ``params`` for given covariates."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    covs = [np.atleast_2d(np.asarray(x, dtype=float).T).T for x in covariates]
    n = covs[0].shape[0]
    template = ProbitDataset(np.zeros((n, len(covs)), dtype=int), covs)
    x = template.design(layout)
    mean = np.einsum("npk,k->np", x, params.beta)
    z = mean + rng.standard_normal((n, params.p)) @ np.linalg.cholesky(params.sigma).T
    return ProbitDataset((z > 0).astype(np.int64), covs)


def synthetic_sixcities(rng=None, n=SIXCITIES_ROWS, smoke_rate=0.35, params: Parameters | None = None):
    """SYNTHETIC stand-in with the wheeze-data layout (not the real survey).

    Default generating parameters are round numbers of the same magnitude as
    published fits; useful for exercising the full pipeline without the data.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if params is None:
        rho = np.array([[1.0, 0.6, 0.55, 0.5], [0.6, 1.0, 0.7, 0.55],
                        [0.55, 0.7, 1.0, 0.65], [0.5, 0.55, 0.65, 1.0]])
        params = Parameters(np.array([-1.1, -0.08, 0.15, 0.05]), rho)
    smoke = (rng.random(n) < smoke_rate).astype(float)
    return simulate_probit(params, sixcities_covariates(smoke), SHARED, rng)
