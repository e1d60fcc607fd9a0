"""Observation tables, derived-outcome aggregation and outcome screening."""
from __future__ import annotations

import csv
import fnmatch
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


class SchemaError(ValueError):
    """Column-role mapping does not match the input file."""


class ValidationError(ValueError):
    """Input values violate an ObservationTable invariant."""


@dataclass(frozen=True)
class ObservationTable:
    """Subjects with a binary treatment, covariates and derived outcomes.

    ``covariates`` always starts with an intercept column of ones.
    Arrays are copied and marked read-only on construction.
    """

    treatment: np.ndarray
    covariates: np.ndarray
    outcomes: np.ndarray
    outcome_names: tuple
    covariate_names: tuple = ()

    def __post_init__(self):
        A = np.array(self.treatment, dtype=float)
        W = np.array(self.covariates, dtype=float)
        Y = np.array(self.outcomes, dtype=float)
        if A.ndim != 1:
            raise ValidationError("treatment must be a vector")
        if W.ndim == 1:
            W = W[:, None]
        if Y.ndim == 1:
            Y = Y[:, None]
        n = A.shape[0]
        if W.shape[0] != n or Y.shape[0] != n:
            raise ValidationError(
                f"row counts differ: treatment {n}, covariates {W.shape[0]}, outcomes {Y.shape[0]}"
            )
        bad = np.flatnonzero((A != 0) & (A != 1))
        if bad.size:
            raise ValidationError(f"treatment must be 0/1; row {int(bad[0])} has value {A[bad[0]]!r}")
        if A.sum() == 0 or A.sum() == n:
            raise ValidationError("both treatment arms must be non-empty")
        for name, M in (("covariates", W), ("outcomes", Y)):
            rows, cols = np.nonzero(~np.isfinite(M))
            if rows.size:
                raise ValidationError(f"non-finite value in {name} at row {int(rows[0])}, column {int(cols[0])}")
        if W.shape[1] == 0 or not np.all(W[:, 0] == 1.0):
            W = np.column_stack([np.ones(n), W])
            cov_names = ("intercept",) + tuple(self.covariate_names)
        else:
            cov_names = tuple(self.covariate_names)
        if len(cov_names) != W.shape[1]:
            cov_names = ("intercept",) + tuple(f"w{k}" for k in range(1, W.shape[1]))
        names = tuple(self.outcome_names) if self.outcome_names else tuple(f"y{j + 1}" for j in range(Y.shape[1]))
        if len(names) != Y.shape[1]:
            raise ValidationError(f"{len(names)} outcome names for {Y.shape[1]} outcome columns")
        for arr in (A, W, Y):
            arr.setflags(write=False)
        object.__setattr__(self, "treatment", A)
        object.__setattr__(self, "covariates", W)
        object.__setattr__(self, "outcomes", Y)
        object.__setattr__(self, "outcome_names", names)
        object.__setattr__(self, "covariate_names", cov_names)

    @property
    def n(self):
        return self.treatment.shape[0]

    @property
    def q(self):
        return self.covariates.shape[1]

    @property
    def p(self):
        return self.outcomes.shape[1]

    def arm(self, a):
        """Boolean mask of subjects with treatment ``a``."""
        return self.treatment == a

    def subset_rows(self, rows):
        return ObservationTable(
            self.treatment[rows],
            self.covariates[rows],
            self.outcomes[rows],
            self.outcome_names,
            self.covariate_names,
        )

    def select_outcomes(self, cols):
        cols = list(cols)
        return ObservationTable(
            self.treatment,
            self.covariates,
            self.outcomes[:, cols],
            tuple(self.outcome_names[j] for j in cols),
            self.covariate_names,
        )


def _delimiter_for(path, delimiter):
    if delimiter is not None:
        return "\t" if delimiter in ("tab", "\\t") else delimiter
    return "\t" if Path(path).suffix.lower() in (".tsv", ".tab", ".txt") else ","


def _resolve(header, spec, role):
    if spec is None:
        raise SchemaError(f"schema is missing {role}")
    patterns = [spec] if isinstance(spec, str) else list(spec)
    cols = []
    for pat in patterns:
        hits = [h for h in header if fnmatch.fnmatchcase(h, pat)]
        if not hits:
            raise SchemaError(f"{role}: no column matches {pat!r}")
        cols.extend(h for h in hits if h not in cols)
    return cols


def load_observations(path, schema, delimiter=None):
    """Read a dense CSV/TSV into an :class:`ObservationTable`.

    Parameters
    ----------
    path : str or Path
        Header row required; ``.tsv``/``.tab``/``.txt`` are tab separated,
        anything else comma separated unless ``delimiter`` is given.
    schema : mapping
        ``treatment_col`` (one name), ``covariate_cols`` and ``outcome_cols``
        (a name, glob, or list of names/globs).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    sep = _delimiter_for(path, delimiter)
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=sep)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path} is empty") from None
        rows = [r for r in reader if r]
    treat = schema.get("treatment_col")
    if not isinstance(treat, str):
        raise SchemaError("treatment_col must name exactly one column")
    if treat not in header:
        raise SchemaError(f"treatment column {treat!r} not in header")
    cov_cols = [c for c in _resolve(header, schema.get("covariate_cols"), "covariate_cols") if c != treat]
    out_cols = [c for c in _resolve(header, schema.get("outcome_cols"), "outcome_cols") if c != treat]
    if not cov_cols:
        raise SchemaError("at least one covariate column is required")
    if not out_cols:
        raise SchemaError("at least one outcome column is required")
    index = {h: k for k, h in enumerate(header)}
    wanted = [treat] + cov_cols + out_cols
    data = np.empty((len(rows), len(wanted)))
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise ValidationError(f"row {i + 1} has {len(row)} fields, header has {len(header)}")
        for k, col in enumerate(wanted):
            cell = row[index[col]].strip()
            try:
                value = float(cell)
            except ValueError:
                raise ValidationError(f"row {i + 1}, column {col!r}: cannot parse {cell!r}") from None
            if not np.isfinite(value):
                raise ValidationError(f"row {i + 1}, column {col!r}: non-finite value {cell!r}")
            data[i, k] = value
    A = data[:, 0]
    bad = np.flatnonzero((A != 0) & (A != 1))
    if bad.size:
        raise ValidationError(f"row {int(bad[0]) + 1}: treatment {treat!r} must be 0 or 1, got {A[bad[0]]:g}")
    ncov = len(cov_cols)
    return ObservationTable(
        treatment=A,
        covariates=data[:, 1 : 1 + ncov],
        outcomes=data[:, 1 + ncov :],
        outcome_names=tuple(out_cols),
        covariate_names=tuple(cov_cols),
    )


def write_observations(table, path, delimiter=None, treatment_col="A"):
    """Write ``table`` so that :func:`load_observations` restores it bit-exactly.

    The intercept column is not written. Floats use ``repr`` (shortest
    round-tripping form).
    """
    path = Path(path)
    sep = _delimiter_for(path, delimiter)
    cov_names = list(table.covariate_names[1:])
    header = [treatment_col] + cov_names + list(table.outcome_names)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, delimiter=sep, lineterminator="\n")
        writer.writerow(header)
        body = np.column_stack([table.treatment, table.covariates[:, 1:], table.outcomes])
        for row in body:
            writer.writerow([_fmt(v) for v in row])
    return {"treatment_col": treatment_col, "covariate_cols": cov_names, "outcome_cols": list(table.outcome_names)}


def _fmt(v):
    v = float(v)
    if v.is_integer() and abs(v) < 2**53:
        return str(int(v))
    return repr(v)


@dataclass(frozen=True)
class CellMatrixSet:
    """Per-subject cell-by-feature matrices; row counts may differ by subject."""

    cells: tuple
    aggregation: str = "mean"
    block_count: int = 1

    def __post_init__(self):
        cells = tuple(np.asarray(X, dtype=float) for X in self.cells)
        if not cells:
            raise ValueError("CellMatrixSet needs at least one subject")
        d = cells[0].shape[1] if cells[0].ndim == 2 else None
        for i, X in enumerate(cells):
            if X.ndim != 2 or X.shape[1] != d:
                raise ValueError(f"subject {i}: expected a 2-d matrix with {d} columns, got {X.shape}")
            if X.shape[0] < 1:
                raise ValueError(f"subject {i} has no cells")
        if self.aggregation not in ("mean", "sum", "median_of_means"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        object.__setattr__(self, "cells", cells)

    @property
    def d(self):
        return self.cells[0].shape[1]


def aggregate_cells(cells):
    """Collapse each subject's cells into one derived-outcome row.

    ``median_of_means`` splits a subject's cells, in order, into
    ``block_count`` contiguous blocks of near-equal size and takes the
    per-column median of the block means.
    """
    out = np.empty((len(cells.cells), cells.d))
    for i, X in enumerate(cells.cells):
        if cells.aggregation == "mean":
            out[i] = X.mean(axis=0)
        elif cells.aggregation == "sum":
            out[i] = X.sum(axis=0)
        else:
            k = int(cells.block_count)
            if k < 1 or k > X.shape[0]:
                raise ValueError(f"subject {i}: block_count {k} not in [1, {X.shape[0]}]")
            means = np.array([b.mean(axis=0) for b in np.array_split(X, k, axis=0)])
            out[i] = np.median(means, axis=0)
    return out


def screen_outcomes(table, min_nonzero):
    """Keep outcomes that are nonzero for at least ``min_nonzero`` subjects.

    Returns the reduced table and the kept (original, 0-based) indices.
    """
    if min_nonzero < 0:
        raise ValueError("min_nonzero must be >= 0")
    counts = np.count_nonzero(table.outcomes, axis=0)
    kept = np.flatnonzero(counts >= min_nonzero)
    if kept.size == 0:
        raise ValueError(f"no outcome has at least {min_nonzero} nonzero subjects")
    if kept.size < table.p:
        logger.info("screening kept %d of %d outcomes", kept.size, table.p)
    return table.select_outcomes(kept), kept.tolist()
