"""Command-line entry point: ``multidr {simulate,estimate,test,benchmark,version}``.

Every command reads an optional flat JSON config (``--config``); command-line
flags override file values, unknown keys are rejected and ``--print-config``
prints the fully resolved configuration, which can be fed back verbatim.

Exit codes: 0 success (warnings allowed), 1 computational failure, 2 usage or
IO error. Failures print a JSON object ``{"error": {...}}`` on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import io as mio
from ._backend import DEFAULT as DEFAULT_BACKEND, available as available_backends
from .data import SchemaError, ValidationError, load_observations, screen_outcomes, write_observations
from .estimands import ESTIMANDS, estimate
from .glm import GlmError
from .nuisance import NuisanceConfig, NuisanceError, fit_nuisance
from .simulate import DgpConfig, ExperimentError, TestParams, generate_dgp, run_experiment
from .testing import run_method

logger = logging.getLogger("multidr")

LONG_RUNNING_WORK = 5e7  # reps * p * sum(n) above this is flagged long-running


class UsageError(Exception):
    """Bad flags, bad config or unreadable input (exit code 2)."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


# ------------------------------------------------------------------ config

COMMON = {"seed": 0, "threads": 0, "out": "multidr_out", "verbose": False}
NUISANCE = {
    "epsilon": 0.01,
    "crossfit_k": 0,
    "cdf_grid_points": 41,
    "bandwidth": "silverman",
    "outcome_family": "poisson_log",
    "y2_family": "gaussian_identity",
}
TESTING = {"method": "stepdown", "fdp_threshold": 0.1, "alpha": 0.05, "bootstrap": 1000, "screen": 0.01, "q": 0.05}
DGP = {
    "p": 500,
    "n": 400,
    "m": 50,
    "d": 5,
    "active_count": 20,
    "scenario": "mean_shift",
    "theta_max": None,
    "beta_r": None,
    "lognormal_mode": "mean_matched",
}
EXPERIMENT = {"reps": 1, "estimands": ["ate", "ste"], "methods": ["stepdown", "bh"], "rho": 0.5}

DEFAULTS = {
    "estimate": {
        **COMMON, **NUISANCE,
        "input": None, "delimiter": None, "treatment_col": "A", "covariate_cols": ["w*"],
        "outcome_cols": ["gene*"], "min_nonzero": 0, "estimand": "ate", "rho": 0.5, "write_influence": True,
    },
    "test": {**COMMON, **TESTING, "result": None, "influence": None},
    "simulate": {**COMMON, **NUISANCE, **DGP, **EXPERIMENT, **{k: v for k, v in TESTING.items() if k != "method"}, "save_data": False},
    "benchmark": {**COMMON, **NUISANCE, **DGP, **EXPERIMENT, **{k: v for k, v in TESTING.items() if k != "method"}, "n_values": None},
}

FLOAT_KEYS = {"epsilon", "fdp_threshold", "alpha", "screen", "q", "rho", "theta_max", "beta_r"}
INT_KEYS = {"seed", "threads", "crossfit_k", "cdf_grid_points", "bootstrap", "p", "n", "m", "d", "active_count", "reps", "min_nonzero"}
BOOL_KEYS = {"verbose", "write_influence", "save_data"}
LIST_KEYS = {"estimands", "methods", "n_values", "covariate_cols", "outcome_cols"}


def _coerce(key, value):
    if value is None:
        return None
    try:
        if key in BOOL_KEYS:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if key in INT_KEYS:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if key in FLOAT_KEYS:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if key in LIST_KEYS:
            items = [value] if isinstance(value, (str, int)) else list(value)
            return [int(v) for v in items] if key == "n_values" else [str(v) for v in items]
        if key == "bandwidth" and not isinstance(value, str):
            return float(value)
    except (TypeError, ValueError):
        raise UsageError(f"config key {key!r} has an invalid value {value!r}") from None
    return value


def resolve_config(command, file_values, flag_values):
    """defaults <- config file <- flags; unknown keys are an error."""
    defaults = DEFAULTS[command]
    unknown = sorted(set(file_values) - set(defaults))
    if unknown:
        raise UsageError(f"unknown config key(s) for '{command}': {', '.join(unknown)}")
    cfg = dict(defaults)
    for source in (file_values, flag_values):
        for key, value in source.items():
            if value is not None and key in defaults:
                cfg[key] = _coerce(key, value)
    return cfg


def _read_config_file(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}", path=str(p))
    try:
        values = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {p} is not valid JSON: {exc}", path=str(p)) from None
    if not isinstance(values, dict):
        raise UsageError(f"config file {p} must hold a JSON object", path=str(p))
    return values


# ------------------------------------------------------------------ helpers


def _nuisance_config(cfg):
    return NuisanceConfig(
        epsilon=cfg["epsilon"],
        crossfit_k=cfg["crossfit_k"],
        cdf_grid_points=cfg["cdf_grid_points"],
        bandwidth=cfg["bandwidth"],
        outcome_family=cfg["outcome_family"],
        y2_family=cfg["y2_family"],
        seed=cfg["seed"],
    )


def _dgp_config(cfg, n=None):
    return DgpConfig(
        p=cfg["p"], n=cfg["n"] if n is None else n, m=cfg["m"], d=cfg["d"],
        active_count=cfg["active_count"], scenario=cfg["scenario"],
        theta_max=cfg["theta_max"], beta_r=cfg["beta_r"], seed=cfg["seed"],
        lognormal_mode=cfg["lognormal_mode"],
    )


def _test_params(cfg):
    return TestParams(c=cfg["fdp_threshold"], alpha=cfg["alpha"], B=cfg["bootstrap"], c_n=cfg["screen"], q=cfg["q"])


def _out_dir(cfg):
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}", path=str(out)) from None
    return out


def _check_reps(cfg):
    if cfg["reps"] < 1:
        raise UsageError(f"--reps must be at least 1, got {cfg['reps']}")


def _validate_choices(cfg):
    if "estimand" in cfg and cfg["estimand"] not in ESTIMANDS:
        raise UsageError(f"unknown estimand {cfg['estimand']!r}; choose from {', '.join(ESTIMANDS)}")
    for e in cfg.get("estimands") or ():
        if e not in ESTIMANDS:
            raise UsageError(f"unknown estimand {e!r}; choose from {', '.join(ESTIMANDS)}")
    for m in cfg.get("methods") or ():
        if m not in ("stepdown", "fwer", "bh"):
            raise UsageError(f"unknown method {m!r}")


# ----------------------------------------------------------------- commands


def estimate_table(table, cfg):
    """In-process equivalent of ``multidr estimate`` on an already-loaded table."""
    nuis = fit_nuisance(table, _nuisance_config(cfg), (cfg["estimand"],))
    return estimate(table, nuis, cfg["estimand"], rho=cfg["rho"])


def write_estimate(out, result, influence, cfg):
    mio.write_result_tsv(result, out / "result.tsv")
    mio.write_result_json(result, out / "result.json")
    if cfg.get("write_influence", True):
        mio.write_influence(influence, out / "influence.bin", seed=cfg["seed"])


def apply_test(result, influence, cfg):
    """In-process equivalent of ``multidr test``."""
    return run_method(
        cfg["method"], result, influence,
        c=cfg["fdp_threshold"], alpha=cfg["alpha"], B=cfg["bootstrap"],
        c_n=cfg["screen"], seed=cfg["seed"], q=cfg["q"],
    )


def write_test(out, ds, result):
    mio.write_discoveries_json(ds, out / "discoveries.json", result)
    mio.write_decisions_tsv(ds, result, out / "decisions.tsv")


def cmd_estimate(cfg):
    if cfg["input"] is None:
        raise UsageError("estimate needs --input")
    schema = {k: cfg[k] for k in ("treatment_col", "covariate_cols", "outcome_cols")}
    try:
        table = load_observations(cfg["input"], schema, cfg["delimiter"])
    except FileNotFoundError as exc:
        raise UsageError(f"input file not found: {exc}", path=str(exc)) from None
    if cfg["min_nonzero"]:
        table, _ = screen_outcomes(table, cfg["min_nonzero"])
    result, influence = estimate_table(table, cfg)
    out = _out_dir(cfg)
    write_estimate(out, result, influence, cfg)
    n_deg = int(np.sum(result.degenerate))
    if n_deg:
        logger.warning("%d of %d outcomes are degenerate and will not be tested", n_deg, result.p)
    return {"out": str(out), "p": result.p, "n": result.n, "degenerate": n_deg}


def cmd_test(cfg):
    for key in ("result", "influence"):
        if cfg[key] is None:
            raise UsageError(f"test needs --{key}")
        if not Path(cfg[key]).exists():
            raise UsageError(f"{key} file not found: {cfg[key]}", path=str(cfg[key]))
    result = mio.read_result_json(cfg["result"])
    try:
        influence, _ = mio.read_influence(cfg["influence"], result.flags)
    except FileNotFoundError as exc:
        raise UsageError(f"influence file not found: {exc}", path=str(exc)) from None
    if influence.p != result.p:
        raise UsageError("result and influence files disagree on the number of outcomes")
    ds = apply_test(result, influence, cfg)
    out = _out_dir(cfg)
    write_test(out, ds, result)
    return {"out": str(out), "discoveries": len(ds.discoveries), "candidates": len(ds.candidates)}


def _experiment(cfg, n_values):
    reports = []
    for n in n_values:
        report = run_experiment(
            _dgp_config(cfg, n), cfg["reps"],
            estimands=tuple(cfg["estimands"]), methods=tuple(cfg["methods"]),
            test_params=_test_params(cfg), nuisance_config=_nuisance_config(cfg), rho=cfg["rho"],
        )
        reports.append((n, report))
    return reports


def _plot_rows(reports):
    rows = []
    for n, report in reports:
        for agg in report.aggregate().values():
            rows.append({**agg, "n": n})
    return rows


def cmd_simulate(cfg):
    _check_reps(cfg)
    out = _out_dir(cfg)
    (n, report), = _experiment(cfg, [cfg["n"]])
    mio.write_replicates_tsv(report.records, out / "replicates.tsv")
    mio.dump_json(report.summary(), out / "aggregate.json")
    mio.write_plot_tsv(_plot_rows([(n, report)]), out / "plot_data.tsv")
    if cfg["save_data"]:
        data_dir = out / "data"
        data_dir.mkdir(exist_ok=True)
        for r in range(cfg["reps"]):
            sim = generate_dgp(_seeded_dgp(cfg, cfg["seed"] + r))
            stem = f"rep{r:03d}"
            schema = write_observations(sim.table, data_dir / f"{stem}.csv")
            mio.dump_json(
                {"seed": cfg["seed"] + r, "truth": list(sim.truth), "effect_sizes": sim.effect_sizes,
                 "resampled": sim.resampled, "schema": schema},
                data_dir / f"{stem}.truth.json",
            )
    return {"out": str(out), "replicates": cfg["reps"], "failures": len(report.failures)}


def _seeded_dgp(cfg, seed):
    return DgpConfig(**{**_dgp_config(cfg).__dict__, "seed": seed})


def workload(cfg):
    """``(work, long_running)`` for a simulate/benchmark config; work is reps * p * sum(n)."""
    n_values = cfg.get("n_values") or [cfg["n"]]
    work = cfg["reps"] * cfg["p"] * sum(n_values)
    return work, bool(work > LONG_RUNNING_WORK or cfg["p"] >= 2000)


def cmd_benchmark(cfg):
    _check_reps(cfg)
    n_values = cfg["n_values"] or [cfg["n"]]
    work, long_running = workload(cfg)
    if long_running:
        logger.warning("large configuration: expect a long run (reps*p*sum(n) = %.3g)", work)
    out = _out_dir(cfg)
    t0 = time.perf_counter()
    reports = _experiment(cfg, n_values)
    wall = time.perf_counter() - t0
    mio.write_plot_tsv(_plot_rows(reports), out / "plot_data.tsv")
    records = [rec for _, rep in reports for rec in rep.records]
    mio.write_replicates_tsv(records, out / "replicates.tsv")
    meta = {
        "long_running": long_running,
        "work": work,
        "n_values": n_values,
        "backend": DEFAULT_BACKEND,
        "threads": cfg["threads"],
        "wall_seconds": round(wall, 3),
        "phases": {str(n): rep.timings for n, rep in reports},
        "aggregate": {str(n): rep.aggregate() for n, rep in reports},
        "failures": {str(n): len(rep.failures) for n, rep in reports},
        "config": cfg,
    }
    mio.dump_json(meta, out / "benchmark.json")
    return {"out": str(out), "long_running": long_running, "wall_seconds": round(wall, 3)}


def cmd_version(cfg):
    print(f"multidr {__version__} (irls backends: {', '.join(available_backends())}; default {DEFAULT_BACKEND})")
    return None


COMMANDS = {"estimate": cmd_estimate, "test": cmd_test, "simulate": cmd_simulate, "benchmark": cmd_benchmark}


# ------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p):
    p.add_argument("--config", help="flat JSON file of config keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="accepted for interface stability; computation is single-threaded")
    p.add_argument("--out", help="output directory")
    p.add_argument("--verbose", action="store_const", const=True)
    p.add_argument("--print-config", action="store_true", help="print the resolved config as JSON and exit")


def _add_nuisance(p):
    p.add_argument("--epsilon", type=float)
    p.add_argument("--crossfit-k", type=int, dest="crossfit_k")
    p.add_argument("--cdf-grid-points", type=int, dest="cdf_grid_points")
    p.add_argument("--bandwidth", help="'silverman', 'silverman_robust' or a positive number")
    p.add_argument("--outcome-family", dest="outcome_family", choices=["poisson_log", "gaussian_identity"])
    p.add_argument("--y2-family", dest="y2_family", choices=["poisson_log", "gaussian_identity"])


def _add_testing(p, with_method=True):
    if with_method:
        p.add_argument("--method", choices=["stepdown", "fwer", "bh"])
    p.add_argument("--fdp-threshold", type=float, dest="fdp_threshold")
    p.add_argument("--alpha", type=float)
    p.add_argument("--bootstrap", type=int)
    p.add_argument("--screen", type=float, help="variance screen c_n")
    p.add_argument("--q", type=float, help="BH level")


def _add_experiment(p):
    p.add_argument("--reps", type=int)
    for key in ("p", "n", "m", "d"):
        p.add_argument(f"--{key}", type=int)
    p.add_argument("--active-count", type=int, dest="active_count")
    p.add_argument("--scenario", choices=["mean_shift", "median_shift"])
    p.add_argument("--theta-max", type=float, dest="theta_max")
    p.add_argument("--beta-r", type=float, dest="beta_r")
    p.add_argument("--lognormal-mode", dest="lognormal_mode", choices=["mean_matched", "literal"])
    p.add_argument("--estimands", nargs="+")
    p.add_argument("--methods", nargs="+")
    p.add_argument("--rho", type=float)


def build_parser():
    parser = _Parser(prog="multidr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("estimate", help="doubly robust estimates and influence matrix from a CSV/TSV table")
    _add_common(p)
    _add_nuisance(p)
    p.add_argument("--input")
    p.add_argument("--delimiter")
    p.add_argument("--schema", help="JSON with treatment_col, covariate_cols, outcome_cols")
    p.add_argument("--treatment-col", dest="treatment_col")
    p.add_argument("--covariate-cols", dest="covariate_cols", nargs="+")
    p.add_argument("--outcome-cols", dest="outcome_cols", nargs="+")
    p.add_argument("--min-nonzero", type=int, dest="min_nonzero")
    p.add_argument("--estimand", choices=list(ESTIMANDS))
    p.add_argument("--rho", type=float)
    p.add_argument("--no-influence", dest="write_influence", action="store_const", const=False)

    p = sub.add_parser("test", help="multiple testing on stored estimates")
    _add_common(p)
    _add_testing(p)
    p.add_argument("--result", help="result.json written by 'estimate'")
    p.add_argument("--influence", help="influence.bin written by 'estimate'")

    p = sub.add_parser("simulate", help="replicated synthetic experiment")
    _add_common(p)
    _add_nuisance(p)
    _add_testing(p, with_method=False)
    _add_experiment(p)
    p.add_argument("--save-data", dest="save_data", action="store_const", const=True)

    p = sub.add_parser("benchmark", help="timed experiment over one or more sample sizes")
    _add_common(p)
    _add_nuisance(p)
    _add_testing(p, with_method=False)
    _add_experiment(p)
    p.add_argument("--n-values", dest="n_values", type=int, nargs="+")

    p = sub.add_parser("version", help="print version and IRLS backends")
    return parser


def _emit_error(kind, message, code, path=None):
    payload = {"error": {"type": kind, "message": message, "exit_code": code}}
    if path is not None:
        payload["error"]["path"] = path
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: simulate, estimate, test, benchmark or version")
        if args.command == "version":
            cmd_version({})
            return 0
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "print_config", "schema")}
        file_values = _read_config_file(args.config)
        if getattr(args, "schema", None):
            schema = _read_config_file(args.schema)
            file_values = {**file_values, **{k: schema[k] for k in ("treatment_col", "covariate_cols", "outcome_cols") if k in schema}}
        cfg = resolve_config(args.command, file_values, flags)
        _validate_choices(cfg)
        logging.basicConfig(level=logging.INFO if cfg["verbose"] else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        if args.print_config:
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return 0
        summary = COMMANDS[args.command](cfg)
        if summary is not None:
            print(json.dumps(summary, sort_keys=True))
        return 0
    except UsageError as exc:
        return _emit_error("usage", str(exc), 2, exc.path)
    except (SchemaError, ValidationError) as exc:
        return _emit_error("input", str(exc), 2)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        return _emit_error("io", str(exc), 2, getattr(exc, "filename", None))
    except (NuisanceError, GlmError, ExperimentError, np.linalg.LinAlgError, ValueError, ArithmeticError) as exc:
        return _emit_error("computation", str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
