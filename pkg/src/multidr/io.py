"""On-disk formats for estimates, influence matrices, discoveries and simulation reports.

Floats are written in their shortest round-tripping form so that a result
read back from disk is bit-identical to the in-memory one. JSON files carry
``null`` in place of NaN.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .estimands import EstimandResult, InfluenceMatrix

INFLUENCE_FORMAT = "multidr-influence-v1"


def _clean(obj):
    """Recursively turn numpy values into JSON-ready Python values (NaN/inf -> None)."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (frozenset, set)):
        return sorted(_clean(v) for v in obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else None
    return obj


def dump_json(obj, path):
    """Deterministic JSON: sorted keys, two-space indent, trailing newline."""
    text = json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n")


def _floats(values):
    return np.array([np.nan if v is None else v for v in values], dtype=float)


def _fmt(v):
    v = float(v)
    return repr(v) if math.isfinite(v) else ("nan" if math.isnan(v) else repr(v))


# ------------------------------------------------------------------ results


def result_to_dict(result):
    return {
        "estimand": result.estimand,
        "n": result.n,
        "p": result.p,
        "crossfitted": result.crossfitted,
        "outcome_names": list(result.outcome_names),
        "tau": result.tau,
        "sigma": result.sigma,
        "t": result.t,
        "null_values": result.null_values,
        "degenerate": result.degenerate,
        "flags": [sorted(f) for f in result.flags],
        "components": dict(result.components),
    }


def write_result_json(result, path):
    dump_json(result_to_dict(result), path)


def read_result_json(path):
    d = json.loads(Path(path).read_text())
    try:
        return EstimandResult(
            estimand=d["estimand"],
            tau=_floats(d["tau"]),
            sigma=_floats(d["sigma"]),
            t=_floats(d["t"]),
            n=int(d["n"]),
            null_values=_floats(d["null_values"]),
            degenerate=np.array(d["degenerate"], dtype=bool),
            flags=tuple(frozenset(f) for f in d["flags"]),
            outcome_names=tuple(d["outcome_names"]),
            components={k: _floats(v) for k, v in d.get("components", {}).items()},
            crossfitted=bool(d.get("crossfitted", False)),
        )
    except KeyError as exc:
        raise ValueError(f"{path}: result file lacks field {exc.args[0]!r}") from None


def write_result_tsv(result, path):
    """One row per outcome: name, tau, sigma, t, flags (comma-joined)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["name", "tau", "sigma", "t", "flags"])
        for j, name in enumerate(result.outcome_names):
            w.writerow([name, _fmt(result.tau[j]), _fmt(result.sigma[j]), _fmt(result.t[j]), ",".join(sorted(result.flags[j]))])


# --------------------------------------------------------------- influence


def write_influence(influence, path, seed=None):
    """Little-endian float64, column-major payload plus ``<path>.json`` sidecar."""
    path = Path(path)
    values = np.asarray(influence.values, dtype="<f8")
    path.write_bytes(np.asfortranarray(values).tobytes(order="F"))
    sidecar = {
        "format": INFLUENCE_FORMAT,
        "n": values.shape[0],
        "p": values.shape[1],
        "dtype": "float64",
        "byte_order": "little",
        "order": "column-major",
        "estimand": influence.estimand,
        "centering": "column means subtracted; degenerate columns zeroed",
        "seed": seed,
    }
    dump_json(sidecar, sidecar_path(path))
    return sidecar


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def read_influence(path, column_flags=()):
    """Inverse of :func:`write_influence`; ``sigma`` is recomputed from the values."""
    path = Path(path)
    meta_path = sidecar_path(path)
    for p in (path, meta_path):
        if not p.exists():
            raise FileNotFoundError(str(p))
    meta = json.loads(meta_path.read_text())
    if meta.get("format") != INFLUENCE_FORMAT:
        raise ValueError(f"{meta_path}: unknown influence format {meta.get('format')!r}")
    n, p = int(meta["n"]), int(meta["p"])
    raw = np.frombuffer(path.read_bytes(), dtype="<f8")
    if raw.size != n * p:
        raise ValueError(f"{path}: expected {n * p} doubles, found {raw.size}")
    # C order, like the in-memory matrix, so reductions run in the same order
    values = np.ascontiguousarray(raw.reshape((n, p), order="F"), dtype=float)
    values.setflags(write=False)
    sigma = np.sqrt(np.var(values, axis=0))
    return InfluenceMatrix(values, sigma, meta["estimand"], tuple(column_flags)), meta


# ------------------------------------------------------------- discoveries


def discoveries_to_dict(ds, result=None):
    names = list(result.outcome_names) if result is not None else None

    def named(idx):
        return [names[j] for j in idx] if names else None

    out = {
        "params": ds.params,
        "candidates": list(ds.candidates),
        "discoveries": list(ds.discoveries),
        "discovery_names": named(ds.discoveries),
        "pre_augmentation": list(ds.pre_augmentation),
        "augmented_count": ds.augmented_count,
        "excluded": list(ds.excluded),
        "stepdown_trace": [
            {"iteration": r.iteration, "max_stat": r.max_stat, "quantile": r.quantile, "removed": r.removed}
            for r in ds.stepdown_trace
        ],
    }
    if result is not None:
        out["estimand"] = result.estimand
    return out


def write_discoveries_json(ds, path, result=None):
    dump_json(discoveries_to_dict(ds, result), path)


def write_decisions_tsv(ds, result, path):
    """Per-outcome decisions: index (0-based), name, t, status."""
    found = set(ds.discoveries)
    pre = set(ds.pre_augmentation)
    candidates = set(ds.candidates)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["index", "name", "t", "rejected", "status"])
        for j, name in enumerate(result.outcome_names):
            if j in found:
                status = "augmented" if (ds.augmented_count and j not in pre) else "rejected"
            elif j in candidates:
                status = "retained"
            else:
                status = "excluded"
            w.writerow([j, name, _fmt(result.t[j]), int(j in found), status])


# ------------------------------------------------------------ sim reports

REPLICATE_COLUMNS = ("replicate", "seed", "n", "estimand", "method", "fdp", "exceed", "power", "n_discoveries", "n_false", "n_true")
PLOT_COLUMNS = ("estimand", "method", "n", "replicates", "fdx", "fdr", "power", "mean_discoveries")


def write_replicates_tsv(records, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(REPLICATE_COLUMNS)
        for rec in records:
            w.writerow([_fmt(rec[c]) if isinstance(rec[c], float) else int(rec[c]) if isinstance(rec[c], (bool, np.bool_)) else rec[c] for c in REPLICATE_COLUMNS])


def write_plot_tsv(rows, path):
    """Rows are aggregate dicts carrying an ``n`` entry; one line per (estimand, method, n)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(PLOT_COLUMNS)
        for row in sorted(rows, key=lambda r: (r["estimand"], r["method"], r["n"])):
            w.writerow([_fmt(row[c]) if isinstance(row[c], float) else row[c] for c in PLOT_COLUMNS])
