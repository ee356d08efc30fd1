"""CSV and JSON input/output for the command-line tools.

Formats are described in ``docs/formats.md``.  Reading is strict: every
selected cell must parse as a finite number.  Floats are written with 17
significant digits so that files round-trip exactly.
"""

from __future__ import annotations

import csv
import json
import math
import warnings

import numpy as np

from entrocal.errors import ConfigError, EntrocalWarning, MissingColumn, NonpositiveWeight

__all__ = [
    "POPULATION_SIZE_KEY",
    "read_table",
    "numeric_columns",
    "read_sample",
    "read_totals",
    "write_totals",
    "write_weights",
    "write_json",
    "dumps",
    "estimate_totals",
    "fmt",
    "warn_small_population",
]

POPULATION_SIZE_KEY = "_N"


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def _read_lines(path) -> list[str]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc


def read_table(path, lines=None) -> dict:
    """Columns of a headed CSV as lists of strings; ``#`` lines are skipped."""
    if lines is None:
        lines = _read_lines(path)
    lines = [ln for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
    rows = list(csv.reader(lines))
    if not rows:
        raise ConfigError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise ConfigError(f"{path}: duplicate column names")
    cols = {h: [] for h in header}
    for k, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ConfigError(f"{path}: row {k} has {len(row)} fields, expected {len(header)}")
        for h, v in zip(header, row):
            cols[h].append(v.strip())
    return cols


def _parse(values, column: str, path) -> np.ndarray:
    out = np.empty(len(values))
    for i, v in enumerate(values):
        if v == "":
            raise ConfigError(f"{path}: missing value in column '{column}', row {i + 2}")
        try:
            x = float(v)
        except ValueError:
            raise ConfigError(
                f"{path}: non-numeric value {v!r} in column '{column}', row {i + 2}"
            ) from None
        if not math.isfinite(x):
            raise ConfigError(f"{path}: non-finite value in column '{column}', row {i + 2}")
        out[i] = x
    return out


def numeric_columns(table: dict, names, path) -> np.ndarray:
    """Stack the named columns of a table into an n x k float matrix."""
    missing = [c for c in names if c not in table]
    if missing:
        raise MissingColumn(f"{path}: missing column(s) {', '.join(missing)}")
    n = len(next(iter(table.values()))) if table else 0
    if not names:
        return np.empty((n, 0))
    return np.column_stack([_parse(table[c], c, path) for c in names])


def read_sample(path, y: str, covariates, id_column: str = "id"):
    """Return ``(ids, design, y)``; ids default to 1..n when absent."""
    table = read_table(path)
    yv = numeric_columns(table, [y], path)[:, 0]
    X = numeric_columns(table, list(covariates), path)
    if yv.size == 0:
        raise ConfigError(f"{path}: no data rows")
    ids = table[id_column] if id_column in table else [str(i + 1) for i in range(yv.size)]
    return list(ids), X, yv


def read_totals(path, names=None) -> tuple[dict, bool]:
    """Totals keyed by variable, and whether the file is flagged as estimated."""
    lines = _read_lines(path)
    estimated = any(
        ln.strip().startswith("#") and ln.strip().lstrip("#").replace(" ", "") == "estimated=true"
        for ln in lines
    )
    table = read_table(path, lines)
    for c in ("variable", "total"):
        if c not in table:
            raise MissingColumn(f"{path}: totals file needs columns variable,total")
    vals = _parse(table["total"], "total", path)
    totals = {}
    for k, v in zip(table["variable"], vals):
        if k in totals:
            raise ConfigError(f"{path}: variable '{k}' listed twice")
        totals[k] = float(v)
    if POPULATION_SIZE_KEY not in totals:
        raise MissingColumn(f"{path}: no '{POPULATION_SIZE_KEY}' row for the population size")
    if names is not None:
        missing = [c for c in names if c not in totals]
        if missing:
            raise MissingColumn(f"{path}: no totals for {', '.join(missing)}")
    return totals, estimated


def write_totals(path, totals: dict, estimated: bool = False) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if estimated:
            fh.write("# estimated=true\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variable", "total"])
        for k, v in totals.items():
            w.writerow([k, fmt(v)])


def write_weights(path, ids, weights) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "weight"])
        for i, v in zip(ids, weights):
            w.writerow([i, fmt(v)])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    return obj


def write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def dumps(payload: dict) -> str:
    return json.dumps(_jsonable(payload), sort_keys=True)


def estimate_totals(path, weight_column: str, covariates) -> dict:
    """Design-weighted totals ``sum d v`` and ``_N = sum d`` from a reference sample."""
    table = read_table(path)
    d = numeric_columns(table, [weight_column], path)[:, 0]
    if np.any(d <= 0):
        bad = np.flatnonzero(d <= 0)[:10] + 2
        raise NonpositiveWeight(
            f"{path}: non-positive design weights in rows {', '.join(map(str, bad))}"
        )
    X = numeric_columns(table, list(covariates), path)
    totals = {POPULATION_SIZE_KEY: float(d.sum())}
    for j, c in enumerate(covariates):
        totals[c] = float(d @ X[:, j])
    return totals


def warn_small_population(N: float, n: int) -> None:
    if N < n:
        warnings.warn(
            f"population size {N:g} is smaller than the sample size {n}",
            EntrocalWarning,
            stacklevel=2,
        )
