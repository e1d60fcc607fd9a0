"""Doubly robust estimates of ATE, STE, QTE and SQTE with influence columns.

Influence columns are stored centered, so ``sigma_j**2`` is simply the mean
of the squared column and the multiplier bootstrap reuses the same matrix.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

ESTIMANDS = ("ate", "ste", "qte", "sqte")
VAR_FLOOR = 1e-12
IQR_FLOOR = 1e-8


@dataclass(frozen=True)
class InfluenceMatrix:
    values: np.ndarray  # (n, p), centered columns
    sigma: np.ndarray
    estimand: str
    column_flags: tuple = ()

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def p(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class EstimandResult:
    estimand: str
    tau: np.ndarray
    sigma: np.ndarray
    t: np.ndarray
    n: int
    null_values: np.ndarray
    degenerate: np.ndarray
    flags: tuple
    outcome_names: tuple = ()
    components: dict = field(default_factory=dict)
    crossfitted: bool = False

    @property
    def p(self):
        return self.tau.shape[0]


def compute_phi(table, nuisance, a, k, j=None):
    """Uncentered DR pseudo-outcome ``1{A=a}/pi_a (Y**k - mu) + mu``.

    Returns the n-vector for outcome ``j``, or the ``(n, p)`` matrix when
    ``j`` is None.
    """
    mu = nuisance.mu[(a, k)]
    Y = table.outcomes
    if j is not None:
        mu = mu[:, j]
        Y = Y[:, j]
    ipw = (table.treatment == a) / nuisance.propensity(a)
    if Y.ndim == 2:
        ipw = ipw[:, None]
    return ipw * (Y**k - mu) + mu


def variance_from_influence(matrix):
    """Column variances with denominator n."""
    values = matrix.values if isinstance(matrix, InfluenceMatrix) else np.asarray(matrix, dtype=float)
    if values.shape[0] < 2:
        raise ValueError("need at least two rows")
    return np.var(values, axis=0)


def _finish(estimand, table, nuisance, tau, raw, degenerate, extra_flags, components, null_values):
    n, p = raw.shape
    values = raw - raw.mean(axis=0)
    values[:, degenerate] = 0.0
    sigma = np.sqrt(variance_from_influence(values))
    degenerate = degenerate | ~(sigma > 0)
    extra = [set(s) for s in extra_flags]
    for j in np.flatnonzero(degenerate):
        extra[j].add("degenerate")
    null = np.zeros(p) if null_values is None else np.broadcast_to(np.asarray(null_values, dtype=float), (p,)).copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.sqrt(n) * (tau - null) / sigma
    t[degenerate] = np.nan
    base = nuisance.flags if nuisance.flags else tuple(frozenset() for _ in range(p))
    flags = tuple(frozenset(base[j] | extra[j]) for j in range(p))
    values.setflags(write=False)
    infl = InfluenceMatrix(values, sigma, estimand, flags)
    result = EstimandResult(
        estimand=estimand,
        tau=tau,
        sigma=sigma,
        t=t,
        n=n,
        null_values=null,
        degenerate=degenerate,
        flags=flags,
        outcome_names=tuple(table.outcome_names),
        components=components,
        crossfitted=nuisance.crossfitted,
    )
    n_deg = int(degenerate.sum())
    if n_deg:
        logger.warning("%s: %d of %d outcomes degenerate", estimand, n_deg, p)
    return result, infl


def estimate_ate(table, nuisance, null_values=None):
    """Average treatment effect: mean of ``phi_11 - phi_01`` per outcome."""
    phi11 = compute_phi(table, nuisance, 1, 1)
    phi01 = compute_phi(table, nuisance, 0, 1)
    contrast = phi11 - phi01
    tau = contrast.mean(axis=0)
    p = table.p
    components = {"beta0": phi01.mean(axis=0), "beta1": phi11.mean(axis=0)}
    return _finish("ate", table, nuisance, tau, contrast, np.zeros(p, bool), [set() for _ in range(p)], components, null_values)


def ste_from_components(beta0, beta1, beta2):
    """STE point estimate from the three DR means; NaN where the control variance is below the floor."""
    var0 = beta2 - beta0**2
    ok = var0 >= VAR_FLOOR
    with np.errstate(invalid="ignore", divide="ignore"):
        tau = np.where(ok, (beta1 - beta0) / np.sqrt(np.where(ok, var0, 1.0)), np.nan)
    return tau, var0, ok


def estimate_ste(table, nuisance, null_values=None):
    """Standardized ATE: DR mean contrast over the DR control standard deviation."""
    phi11 = compute_phi(table, nuisance, 1, 1)
    phi01 = compute_phi(table, nuisance, 0, 1)
    phi02 = compute_phi(table, nuisance, 0, 2)
    beta1, beta0, beta2 = phi11.mean(axis=0), phi01.mean(axis=0), phi02.mean(axis=0)
    tau, var0, ok = ste_from_components(beta0, beta1, beta2)
    sd0 = np.sqrt(np.where(ok, var0, 1.0))
    tau_safe = np.where(ok, tau, 0.0)
    raw = (phi11 - phi01) / sd0 - tau_safe * (phi02 + beta2 - 2.0 * beta0 * phi01) / (2.0 * sd0**2)
    extra = [{"var_floor"} if not ok[j] else set() for j in range(table.p)]
    components = {"beta0": beta0, "beta1": beta1, "beta2": beta2}
    return _finish("ste", table, nuisance, tau, raw, ~ok, extra, components, null_values)


def one_step_quantiles(table, nuisance, a, rho):
    """One-step DR ``rho``-quantiles of arm ``a`` for all outcomes.

    Returns ``(theta, theta_init, density, influence, floored)`` where
    ``influence`` is the uncentered ``omega / f`` matrix.
    """
    n, p = table.n, table.p
    theta_init = nuisance.quantile_init(a, rho)
    ipw = (table.treatment == a) / nuisance.propensity(a)
    theta = np.empty(p)
    dens = np.empty(p)
    floored = np.zeros(p, dtype=bool)
    infl = np.empty((n, p))
    for j in range(p):
        th = theta_init[j]
        nu = nuisance.cdf(a, j, th) - rho
        psi = (table.outcomes[:, j] <= th) - rho
        omega = ipw * (nu - psi) - nu
        f, floored[j] = nuisance.density(a, j, th)
        dens[j] = f
        infl[:, j] = omega / f
        theta[j] = th + omega.mean() / f
    return theta, theta_init, dens, infl, floored


def estimate_qte(table, nuisance, rho=0.5, null_values=None):
    """Quantile treatment effect ``theta_1 - theta_0`` by one-step updates of IPW initial quantiles."""
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    th1, init1, f1, infl1, fl1 = one_step_quantiles(table, nuisance, 1, rho)
    th0, init0, f0, infl0, fl0 = one_step_quantiles(table, nuisance, 0, rho)
    tau = th1 - th0
    zero_quantile = (init0 == 0.0) & (init1 == 0.0)
    extra = []
    for j in range(table.p):
        s = set()
        if fl0[j] or fl1[j]:
            s.add("density_floor")
        if zero_quantile[j]:
            s.add("zero_quantile")
        extra.append(s)
    components = {
        "theta0": th0, "theta1": th1, "f0": f0, "f1": f1,
        "theta_init0": init0, "theta_init1": init1,
    }
    return _finish("qte", table, nuisance, tau, infl1 - infl0, zero_quantile, extra, components, null_values)


def estimate_sqte(table, nuisance, rho=0.5, null_values=None):
    """QTE divided by the DR control-arm interquartile range.

    The influence column follows from the quotient rule applied to the
    one-step influence columns of the numerator and of both quartiles.
    """
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    th1, init1, f1, infl1, fl1 = one_step_quantiles(table, nuisance, 1, rho)
    th0, init0, f0, infl0, fl0 = one_step_quantiles(table, nuisance, 0, rho)
    q75, init75, _, infl75, fl75 = one_step_quantiles(table, nuisance, 0, 0.75)
    q25, init25, _, infl25, fl25 = one_step_quantiles(table, nuisance, 0, 0.25)
    num = th1 - th0
    iqr = q75 - q25
    # a point-mass control has zero IPW quartile spread, but the one-step
    # correction (divided by a floored density) can still pull the quartiles apart
    ok = (iqr >= IQR_FLOOR) & (init75 - init25 >= IQR_FLOOR)
    safe = np.where(ok, iqr, 1.0)
    tau = np.where(ok, num / safe, np.nan)
    raw = (infl1 - infl0) / safe - (num / safe**2) * (infl75 - infl25)
    zero_quantile = (init0 == 0.0) & (init1 == 0.0)
    extra = []
    for j in range(table.p):
        s = set()
        if fl0[j] or fl1[j] or fl75[j] or fl25[j]:
            s.add("density_floor")
        if not ok[j]:
            s.add("iqr_floor")
        if zero_quantile[j]:
            s.add("zero_quantile")
        extra.append(s)
    components = {"theta0": th0, "theta1": th1, "q25": q25, "q75": q75, "iqr": iqr}
    return _finish("sqte", table, nuisance, tau, raw, ~ok | zero_quantile, extra, components, null_values)


def estimate(table, nuisance, estimand, rho=0.5, null_values=None):
    """Dispatch on the estimand name."""
    estimand = estimand.lower()
    if estimand == "ate":
        return estimate_ate(table, nuisance, null_values)
    if estimand == "ste":
        return estimate_ste(table, nuisance, null_values)
    if estimand == "qte":
        return estimate_qte(table, nuisance, rho, null_values)
    if estimand == "sqte":
        return estimate_sqte(table, nuisance, rho, null_values)
    raise ValueError(f"unknown estimand {estimand!r}; expected one of {ESTIMANDS}")
