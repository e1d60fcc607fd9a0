"""Synthetic pseudo-bulk count data with known active outcomes, and a replicate runner.

Each subject carries ``d`` standard-normal covariates; treatment follows
``P(A=1 | W) = 1 / (1 + exp(sum(W) / (d + 1)))``. Cell-level counts of
outcome ``j`` are Poisson with mean ``exp(W @ b_j)`` (``b_j[0] = 1``, other
entries N(0, 1/4)) and each subject's derived outcome is the sum over its
``m`` cells. Active outcomes get a different treated-arm law:

* ``mean_shift``: cell mean ``lambda + s * delta`` with ``delta = +-1``
  (floored at 0.01);
* ``median_shift``: cells are rounded LogNormal draws whose mean matches
  ``lambda`` while the median drops.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import estimands as est
from .data import ObservationTable
from .nuisance import NuisanceConfig, NuisanceError, fit_nuisance
from .testing import error_metrics, run_method

logger = logging.getLogger(__name__)

SCENARIO_DEFAULTS = {"mean_shift": (1.0, 0.5), "median_shift": (10.0, 2.0)}
LAMBDA_FLOOR = 0.01
PILOT_CELLS = 1000


class ExperimentError(RuntimeError):
    """Too many replicates failed."""


@dataclass(frozen=True)
class DgpConfig:
    p: int = 500
    n: int = 400
    m: int = 50
    d: int = 5
    active_count: int = 20
    scenario: str = "mean_shift"
    theta_max: float | None = None
    beta_r: float | None = None
    seed: int = 0
    lognormal_mode: str = "mean_matched"
    pilot_cells: int = PILOT_CELLS

    def __post_init__(self):
        for name in ("p", "n", "m", "d"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.active_count <= self.p:
            raise ValueError("active_count must lie in [0, p]")
        if self.scenario not in SCENARIO_DEFAULTS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.lognormal_mode not in ("mean_matched", "literal"):
            raise ValueError("lognormal_mode must be 'mean_matched' or 'literal'")
        theta_max, beta_r = SCENARIO_DEFAULTS[self.scenario]
        if self.theta_max is None:
            object.__setattr__(self, "theta_max", theta_max)
        if self.beta_r is None:
            object.__setattr__(self, "beta_r", beta_r)


@dataclass(frozen=True)
class SimData:
    table: ObservationTable
    truth: tuple
    effect_sizes: np.ndarray  # per-cell signed shift (mean_shift) or log-scale sd (median_shift)
    potential: tuple  # (Y(0), Y(1)), each (n, p)
    propensity: np.ndarray
    cell_means: np.ndarray  # (n, p) control-law cell means lambda
    resampled: int = 0


def treatment_probability(W):
    d = W.shape[1]
    return 1.0 / (1.0 + np.exp(W.sum(axis=1) / (d + 1)))


def _draw_active(rng, weights, k):
    """Distinct active set: multinomial draws, duplicates collapsed and redrawn."""
    p = weights.size
    chosen = np.zeros(p, dtype=bool)
    while chosen.sum() < k:
        w = np.where(chosen, 0.0, weights)
        if w.sum() <= 0:
            w = np.where(chosen, 0.0, 1.0)
        counts = rng.multinomial(k - int(chosen.sum()), w / w.sum())
        chosen |= counts > 0
    return np.flatnonzero(chosen)


def activity_weights(b, rng, cells=PILOT_CELLS):
    """Active-set probabilities: softmax of log pilot standard deviations (i.e. proportional to sd)."""
    Wp = rng.standard_normal((cells, b.shape[1]))
    pilot = rng.poisson(np.exp(Wp @ b.T))
    sd = pilot.std(axis=0, ddof=1)
    with np.errstate(divide="ignore"):
        logsd = np.log(sd)
    if not np.any(np.isfinite(logsd)):
        return np.full(b.shape[0], 1.0 / b.shape[0])
    z = np.exp(logsd - np.max(logsd[np.isfinite(logsd)]))
    return z / z.sum()


def generate_dgp(config):
    """Draw one dataset; fully determined by ``config.seed``."""
    ss = np.random.SeedSequence(config.seed)
    r_coef, r_cov, r_treat, r_active, r_signal, r_y0, r_y1 = (np.random.default_rng(s) for s in ss.spawn(7))
    n, p, d, m = config.n, config.p, config.d, config.m

    b = np.column_stack([np.ones(p), r_coef.normal(0.0, 0.5, size=(p, d - 1))]) if d > 1 else np.ones((p, 1))
    W = r_cov.standard_normal((n, d))
    prop = treatment_probability(W)
    A = (r_treat.random(n) < prop).astype(float)
    while A.min() == A.max():
        A = (r_treat.random(n) < prop).astype(float)
    lam = np.exp(W @ b.T)

    if config.active_count:
        weights = activity_weights(b, r_active, config.pilot_cells)
        active = _draw_active(r_active, weights, config.active_count)
    else:
        active = np.array([], dtype=np.int64)
    r = r_signal.beta(1.0, config.beta_r, size=active.size)
    s = config.theta_max * r
    effects = np.zeros(p)

    Y0 = r_y0.poisson(m * lam).astype(float)
    Y1 = r_y0.poisson(m * lam).astype(float)
    resampled = 0
    if active.size:
        if config.scenario == "mean_shift":
            delta = np.where(r_signal.random(active.size) < 0.5, -1.0, 1.0)
            effects[active] = s * delta
            shifted = np.maximum(lam[:, active] + s * delta, LAMBDA_FLOOR)
            Y1[:, active] = r_y1.poisson(m * shifted)
        else:
            effects[active] = s
            lam_a = lam[:, active]
            loc = np.log(lam_a) if config.lognormal_mode == "mean_matched" else lam_a
            loc = loc - s**2 / 2.0
            cells = r_y1.lognormal(loc[:, :, None], np.broadcast_to(s[None, :, None], loc.shape + (1,)), size=loc.shape + (m,))
            bad = ~np.isfinite(cells)
            while bad.any():
                resampled += int(bad.sum())
                redraw = r_y1.lognormal(np.broadcast_to(loc[:, :, None], cells.shape)[bad],
                                        np.broadcast_to(s[None, :, None], cells.shape)[bad])
                cells[bad] = redraw
                bad = ~np.isfinite(cells)
            if resampled:
                logger.warning("resampled %d non-finite LogNormal cells", resampled)
            Y1[:, active] = np.rint(cells).sum(axis=2)
    Y = np.where(A[:, None] == 1, Y1, Y0)
    table = ObservationTable(
        treatment=A,
        covariates=W,
        outcomes=Y,
        outcome_names=tuple(f"gene{j + 1}" for j in range(p)),
        covariate_names=tuple(f"w{k + 1}" for k in range(d)),
    )
    return SimData(
        table=table,
        truth=tuple(int(j) for j in active),
        effect_sizes=effects,
        potential=(Y0, Y1),
        propensity=prop,
        cell_means=lam,
        resampled=resampled,
    )


@dataclass(frozen=True)
class TestParams:
    __test__ = False  # not a pytest class despite the name

    c: float = 0.1
    alpha: float = 0.05
    B: int = 1000
    c_n: float = 0.01
    q: float = 0.05


@dataclass
class SimReport:
    config: dict
    records: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    replicates: int = 0

    def aggregate(self):
        """Empirical FDX, FDR and mean power per (estimand, method)."""
        groups = {}
        for rec in self.records:
            groups.setdefault((rec["estimand"], rec["method"]), []).append(rec)
        out = {}
        for (estimand, method), recs in sorted(groups.items()):
            fdp = np.array([r["fdp"] for r in recs])
            out[f"{estimand}/{method}"] = {
                "estimand": estimand,
                "method": method,
                "replicates": len(recs),
                "fdx": float(np.mean([r["exceed"] for r in recs])),
                "fdr": float(np.mean(fdp)),
                "power": float(np.mean([r["power"] for r in recs])),
                "mean_discoveries": float(np.mean([r["n_discoveries"] for r in recs])),
            }
        return out

    def summary(self):
        return {
            "config": self.config,
            "replicates": self.replicates,
            "failures": len(self.failures),
            "failure_messages": self.failures,
            "aggregate": self.aggregate(),
            "timings": self.timings,
        }


def run_experiment(
    config,
    replicates,
    estimands=("ate", "ste"),
    methods=("stepdown", "bh"),
    test_params=None,
    nuisance_config=None,
    rho=0.5,
    max_failure_rate=0.1,
):
    """Repeat generate -> fit -> estimate -> test -> score over seeded replicates.

    Replicate ``r`` uses seed ``config.seed + r`` for the data and for the
    bootstrap.
    """
    if replicates < 1:
        raise ValueError("replicates must be at least 1")
    test_params = test_params or TestParams()
    nuisance_config = nuisance_config or NuisanceConfig()
    estimands = tuple(e.lower() for e in estimands)
    report = SimReport(
        config={
            "dgp": asdict(config),
            "test": asdict(test_params),
            "nuisance": asdict(nuisance_config),
            "estimands": list(estimands),
            "methods": list(methods),
            "rho": rho,
        }
    )
    timings = {"dgp": 0.0, "nuisance": 0.0, "estimation": 0.0, "testing": 0.0}
    for rep in range(replicates):
        seed = config.seed + rep
        try:
            t0 = time.perf_counter()
            sim = generate_dgp(_with_seed(config, seed))
            t1 = time.perf_counter()
            nuis_cfg = _with_seed(nuisance_config, seed)
            nuis = fit_nuisance(sim.table, nuis_cfg, estimands)
            t2 = time.perf_counter()
            fits = {e: est.estimate(sim.table, nuis, e, rho=rho) for e in estimands}
            t3 = time.perf_counter()
            rows = []
            for e, (res, infl) in fits.items():
                for method in methods:
                    ds = run_method(
                        method, res, infl,
                        c=test_params.c, alpha=test_params.alpha, B=test_params.B,
                        c_n=test_params.c_n, seed=seed, q=test_params.q,
                    )
                    met = error_metrics(ds.discoveries, sim.truth, test_params.c)
                    rows.append({
                        "replicate": rep, "seed": seed, "n": config.n, "estimand": e, "method": method,
                        "fdp": met.fdp, "exceed": met.exceed, "power": met.power,
                        "n_discoveries": met.n_discoveries, "n_false": met.n_false,
                        "n_true": len(sim.truth),
                    })
            t4 = time.perf_counter()
        except (NuisanceError, ValueError, np.linalg.LinAlgError) as exc:
            logger.warning("replicate %d failed: %s", rep, exc)
            report.failures.append({"replicate": rep, "seed": seed, "error": str(exc)})
            continue
        report.records.extend(rows)
        for key, dt in zip(timings, (t1 - t0, t2 - t1, t3 - t2, t4 - t3)):
            timings[key] += dt
    report.replicates = replicates
    report.timings = {k: round(v, 6) for k, v in timings.items()}
    if len(report.failures) > max_failure_rate * replicates:
        raise ExperimentError(f"{len(report.failures)} of {replicates} replicates failed")
    return report


def _with_seed(cfg, seed):
    values = asdict(cfg)
    values["seed"] = seed
    return type(cfg)(**values)
