"""Nuisance estimates for the doubly robust estimators.

Everything here is fitted with the GLM recipes in :mod:`multidr.glm`:
logistic propensity scores, per-outcome regressions of ``Y`` and ``Y**2``,
and conditional CDFs by distribution regression (one logistic fit per
threshold). Counterfactual densities and initial quantiles are then computed
from those fits on the full sample.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .glm import fit_glm, fit_glm_many, predict_glm

logger = logging.getLogger(__name__)

SQRT_2PI = np.sqrt(2.0 * np.pi)


class NuisanceError(RuntimeError):
    """A nuisance model could not be fitted."""


class FoldError(NuisanceError):
    """A cross-fitting training complement lacks one of the treatment arms."""


@dataclass(frozen=True)
class NuisanceConfig:
    epsilon: float = 0.01
    crossfit_k: int = 0
    cdf_grid_points: int = 41
    bandwidth: object = "silverman"
    outcome_family: str = "poisson_log"
    y2_family: str = "gaussian_identity"
    density_floor: float = 0.01
    # floor is density_floor / sd of the arm's outcome, i.e. applied on the standardized scale
    density_floor_relative: bool = True
    clamp_means: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 0.5)")
        if self.crossfit_k == 1 or self.crossfit_k < 0:
            raise ValueError("crossfit_k must be 0 (no splitting) or >= 2")
        if self.cdf_grid_points < 1:
            raise ValueError("cdf_grid_points must be positive")
        if not (self.bandwidth in BANDWIDTH_RULES or (isinstance(self.bandwidth, (int, float)) and self.bandwidth > 0)):
            raise ValueError(f"bandwidth must be one of {sorted(BANDWIDTH_RULES)} or a positive number")


# ---------------------------------------------------------------- propensity


def _propensity_model(design, treatment):
    fit = fit_glm(design, treatment, "logistic")
    if not fit.converged:
        raise NuisanceError(
            f"propensity logistic regression did not converge after {fit.iterations} iterations"
            + (" (treatment perfectly separated by covariates)" if fit.separated else "")
        )
    return fit


def fit_propensity(table, epsilon=0.01):
    """Logistic regression of treatment on covariates, clipped to ``[eps, 1 - eps]``.

    Returns the n-vector of treated-arm propensities.
    """
    if not 0.0 < epsilon < 0.5:
        raise ValueError("epsilon must lie in (0, 0.5)")
    fit = _propensity_model(table.covariates, table.treatment)
    return predict_glm(fit, table.covariates, clip=(epsilon, 1.0 - epsilon))


def arm_propensity(pi1, a):
    """Propensity of arm ``a`` given the treated-arm propensity."""
    return pi1 if a == 1 else 1.0 - pi1


# ------------------------------------------------------------ outcome means


@dataclass(frozen=True)
class OutcomeMeans:
    values: np.ndarray  # (n_target, p)
    clamped: np.ndarray  # (p,) bool
    unconverged: np.ndarray
    fallback: np.ndarray


def _outcome_means(design_train, Y_train, design_target, family, bounds=None):
    p = Y_train.shape[1]
    if Y_train.shape[0] == 0:
        raise NuisanceError("arm subsample is empty")
    fallback = np.zeros(p, dtype=bool)
    fam = np.full(p, family, dtype=object)
    if family == "poisson_log":
        fallback = np.any(Y_train < 0, axis=0)
        fam[fallback] = "gaussian_identity"
    values = np.empty((design_target.shape[0], p))
    unconverged = np.zeros(p, dtype=bool)
    for f in np.unique(fam):
        cols = np.flatnonzero(fam == f)
        batch = fit_glm_many(design_train, Y_train[:, cols], f)
        values[:, cols] = batch.predict(design_target)
        unconverged[cols] = ~batch.converged
    clamped = np.zeros(p, dtype=bool)
    if bounds is not None:
        lo, hi = bounds
        clamped = np.any((values < lo) | (values > hi), axis=0)
        values = np.clip(values, lo, hi)
    return OutcomeMeans(values, clamped, unconverged, fallback)


def fit_outcome_means(table, arm, power, family="poisson_log", clamp=True):
    """Per-outcome GLM of ``Y**power`` on covariates within one arm.

    Predictions are returned for all n subjects, shape ``(n, p)``. When
    ``clamp`` is set they are limited to the outcome's observed range over
    all subjects (both arms; a single arm's range would bias extrapolation
    whenever the arms differ in covariate distribution).
    """
    if power not in (1, 2):
        raise ValueError("power must be 1 or 2")
    mask = table.arm(arm)
    if not mask.any():
        raise NuisanceError(f"arm {arm} has no subjects")
    Yk = table.outcomes**power
    bounds = (Yk.min(axis=0), Yk.max(axis=0)) if clamp else None
    res = _outcome_means(table.covariates[mask], Yk[mask], table.covariates, family, bounds)
    return res.values


# ------------------------------------------------------- conditional CDFs


class CdfEvaluator:
    """Conditional CDF of one outcome in one arm from distribution regression.

    Knots are the arm minimum, the requested grid and the arm maximum. Each
    knot carries a logistic fit of ``1{Y <= knot}`` (or a constant when the
    indicator is constant). Evaluation interpolates linearly between knots
    after a running maximum over knots, and is exactly 0 below the minimum
    and 1 from the maximum on.
    """

    def __init__(self, knots, coefficients, constants):
        self.knots = np.asarray(knots, dtype=float)
        self.coefficients = np.asarray(coefficients, dtype=float)  # (G, q); rows unused where constant
        self.constants = np.asarray(constants, dtype=float)  # (G,), nan where fitted
        self.lower = self.knots[0]
        self.upper = self.knots[-1]

    def knot_values(self, design):
        """Monotonized CDF values at every knot, shape ``(n, G)``."""
        fitted = np.isnan(self.constants)
        vals = np.empty((design.shape[0], self.knots.size))
        if fitted.any():
            vals[:, fitted] = expit(design @ self.coefficients[fitted].T)
        vals[:, ~fitted] = self.constants[~fitted]
        vals[:, -1] = 1.0
        return np.maximum.accumulate(np.clip(vals, 0.0, 1.0), axis=1)

    def __call__(self, theta, design):
        design = np.atleast_2d(design)
        if theta < self.lower:
            return np.zeros(design.shape[0])
        if theta >= self.upper:
            return np.ones(design.shape[0])
        vals = self.knot_values(design)
        k = int(np.searchsorted(self.knots, theta, side="right")) - 1
        x0, x1 = self.knots[k], self.knots[k + 1]
        t = (theta - x0) / (x1 - x0)
        return (1.0 - t) * vals[:, k] + t * vals[:, k + 1]


def default_grid(y_arm, points=41):
    """Arm empirical quantiles at levels evenly spaced in [0.01, 0.99]."""
    if points == 1:
        levels = np.array([0.5])
    else:
        levels = np.linspace(0.01, 0.99, points)
    return np.unique(np.quantile(y_arm, levels, method="inverted_cdf"))


def _knots(y_arm, grid):
    lo, hi = float(np.min(y_arm)), float(np.max(y_arm))
    grid = np.asarray(grid, dtype=float)
    inner = grid[(grid > lo) & (grid < hi)]
    return np.unique(np.concatenate([[lo], inner, [hi]]))


# Indicator regressions on near-deterministic outcomes are often (quasi-)separated;
# past this many IRLS steps the fitted probabilities no longer move.
CDF_MAX_ITER = 25


def _fit_cdfs(design_arm, Y_arm, grids):
    """Distribution regressions for every outcome column; one batched GLM call."""
    n_arm, p = Y_arm.shape
    knot_sets = [_knots(Y_arm[:, j], grids[j]) for j in range(p)]
    responses, owners = [], []
    constants = []
    for j, knots in enumerate(knot_sets):
        ind = (Y_arm[:, j][:, None] <= knots[None, :]).astype(float)
        share = ind.mean(axis=0)
        const = np.where((share == 0.0) | (share == 1.0), share, np.nan)
        constants.append(const)
        for g in np.flatnonzero(np.isnan(const)):
            responses.append(ind[:, g])
            owners.append((j, g))
    coef_sets = [np.zeros((k.size, design_arm.shape[1])) for k in knot_sets]
    n_unconverged = 0
    if responses:
        batch = fit_glm_many(design_arm, np.column_stack(responses), "logistic", max_iter=CDF_MAX_ITER)
        n_unconverged = int(np.sum(~batch.converged))
        for (j, g), beta in zip(owners, batch.coefficients):
            coef_sets[j][g] = beta
    evaluators = [CdfEvaluator(k, c, const) for k, c, const in zip(knot_sets, coef_sets, constants)]
    return evaluators, n_unconverged


def fit_conditional_cdf(table, arm, j, theta_grid=None, grid_points=41):
    """Distribution-regression CDF of outcome ``j`` given covariates in arm ``arm``."""
    mask = table.arm(arm)
    if not mask.any():
        raise NuisanceError(f"arm {arm} has no subjects")
    y = table.outcomes[mask, j]
    if theta_grid is None:
        theta_grid = default_grid(y, grid_points)
    theta_grid = np.asarray(theta_grid, dtype=float)
    if theta_grid.size == 0 or np.any(np.diff(theta_grid) <= 0):
        raise ValueError("theta_grid must be non-empty and strictly increasing")
    evaluators, _ = _fit_cdfs(table.covariates[mask], y[:, None], [theta_grid])
    return evaluators[0]


# ------------------------------------------------- quantiles and densities


def ipw_quantile_init(table, pi1, arm, j, rho):
    """IPW initial quantile: weighted empirical ``rho``-quantile of the arm.

    Returns the smallest observed arm value whose normalized cumulative
    inverse-propensity weight reaches ``rho``.
    """
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    mask = table.arm(arm)
    if not mask.any():
        raise NuisanceError(f"arm {arm} has no subjects")
    return _weighted_quantile(table.outcomes[mask, j], 1.0 / arm_propensity(pi1, arm)[mask], rho)


def _weighted_quantile(values, weights, rho):
    total = weights.sum()
    if not total > 0:
        raise NuisanceError("total inverse-propensity weight is zero")
    order = np.argsort(values, kind="stable")
    cum = np.cumsum(weights[order]) / total
    k = int(np.searchsorted(cum, rho - 1e-12, side="left"))
    return float(values[order][min(k, values.size - 1)])


def silverman_bandwidth(y):
    """``1.06 * sd * n**(-1/5)``; a zero spread falls back to ``sd = 1``."""
    y = np.asarray(y, dtype=float)
    sd = float(np.std(y, ddof=1)) if y.size > 1 else 0.0
    return 1.06 * (sd if sd > 0 else 1.0) * y.size ** (-0.2)


def robust_silverman_bandwidth(y):
    """``0.9 * min(sd, IQR / 1.34) * n**(-1/5)``, less inflated by heavy tails."""
    y = np.asarray(y, dtype=float)
    sd = float(np.std(y, ddof=1)) if y.size > 1 else 0.0
    q75, q25 = np.percentile(y, [75, 25]) if y.size else (0.0, 0.0)
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * (spread if spread > 0 else 1.0) * y.size ** (-0.2)


BANDWIDTH_RULES = {"silverman": silverman_bandwidth, "silverman_robust": robust_silverman_bandwidth}


def dr_density(treatment, outcome, pi1, mu, arm, y, bandwidth, floor=0.0, kernel="gaussian"):
    """Doubly robust kernel estimate of the counterfactual density of arm ``arm`` at ``y``.

    Parameters
    ----------
    treatment, outcome, pi1, mu : ndarray, shape (n,)
        Treatment indicators, the outcome column, treated-arm propensities
        and the arm's fitted mean ``mu_hat(arm, W)``.
    y : float or ndarray
        Evaluation point(s).
    bandwidth : float
    floor : float
        Values below ``floor`` are raised to it.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    if kernel != "gaussian":
        raise ValueError("only the gaussian kernel is implemented")
    y_arr = np.atleast_1d(np.asarray(y, dtype=float))
    ind = (treatment == arm).astype(float)
    ipw = ind / arm_propensity(pi1, arm)
    h = float(bandwidth)
    k_obs = np.exp(-0.5 * ((y_arr[:, None] - outcome[None, :]) / h) ** 2) / SQRT_2PI
    k_fit = np.exp(-0.5 * ((y_arr[:, None] - mu[None, :]) / h) ** 2) / SQRT_2PI
    dens = np.mean(ipw[None, :] * (k_obs - k_fit) + k_fit, axis=1) / h
    dens = np.maximum(dens, floor)
    return dens if np.ndim(y) else float(dens[0])


# --------------------------------------------------------- assembled fits


@dataclass(frozen=True)
class NuisanceFit:
    """All nuisance values for one table, possibly cross-fitted.

    ``pi`` holds clipped treated-arm propensities; ``mu[(a, k)]`` is the
    ``(n, p)`` matrix of fitted ``E[Y**k | W, A=a]`` for every subject.
    Conditional CDFs are kept per fold and assembled per subject on demand.
    """

    table: object
    config: NuisanceConfig
    pi: np.ndarray
    mu: dict
    cdf_folds: tuple  # ((rows, {arm: [CdfEvaluator per outcome]}), ...)
    fold_assignment: np.ndarray = None
    flags: tuple = ()  # per-outcome frozensets
    diagnostics: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def epsilon(self):
        return self.config.epsilon

    @property
    def crossfitted(self):
        return self.fold_assignment is not None

    def propensity(self, a):
        return arm_propensity(self.pi, a)

    def has_cdf(self):
        return bool(self.cdf_folds)

    def cdf(self, a, j, theta):
        """Conditional CDF of outcome ``j`` in arm ``a`` at ``theta`` for every subject."""
        if not self.cdf_folds:
            raise NuisanceError("conditional CDFs were not fitted")
        out = np.empty(self.table.n)
        for rows, models in self.cdf_folds:
            out[rows] = models[a][j](theta, self.table.covariates[rows])
        return out

    def quantile_init(self, a, rho):
        """IPW initial ``rho``-quantiles of arm ``a`` for every outcome."""
        key = ("theta_init", a, rho)
        if key not in self._cache:
            mask = self.table.arm(a)
            w = 1.0 / self.propensity(a)[mask]
            Y = self.table.outcomes[mask]
            self._cache[key] = np.array([_weighted_quantile(Y[:, j], w, rho) for j in range(self.table.p)])
        return self._cache[key]

    def bandwidth(self, a):
        key = ("bandwidth", a)
        if key not in self._cache:
            Y = self.table.outcomes[self.table.arm(a)]
            if self.config.bandwidth in BANDWIDTH_RULES:
                rule = BANDWIDTH_RULES[self.config.bandwidth]
                h = np.array([rule(Y[:, j]) for j in range(self.table.p)])
            else:
                h = np.full(self.table.p, float(self.config.bandwidth))
            self._cache[key] = h
        return self._cache[key]

    def density_floor(self, a):
        key = ("floor", a)
        if key not in self._cache:
            floor = np.full(self.table.p, self.config.density_floor)
            if self.config.density_floor_relative:
                sd = np.std(self.table.outcomes[self.table.arm(a)], axis=0, ddof=1)
                floor = np.where(sd > 0, floor / np.where(sd > 0, sd, 1.0), floor)
            self._cache[key] = floor
        return self._cache[key]

    def density(self, a, j, y):
        """Floored DR density of outcome ``j`` in arm ``a`` at ``y``; also returns whether the floor fired."""
        t = self.table
        raw = dr_density(t.treatment, t.outcomes[:, j], self.pi, self.mu[(a, 1)][:, j], a, y, self.bandwidth(a)[j])
        floor = self.density_floor(a)[j]
        return max(raw, floor), bool(raw < floor)


def _check_arms(table, rows, what):
    A = table.treatment[rows]
    if A.size == 0 or A.min() == A.max():
        raise FoldError(f"{what} is missing a treatment arm; use a larger sample or fewer folds")


def _fit_components(table, train, target, config, need_y2, need_cdf):
    """Fit every nuisance model on ``train`` rows and predict on ``target`` rows."""
    W = table.covariates
    A = table.treatment
    Y = table.outcomes
    prop = _propensity_model(W[train], A[train])
    pi = predict_glm(prop, W[target], clip=(config.epsilon, 1.0 - config.epsilon))
    mu, cdfs = {}, {}
    p = table.p
    flags = {"mu_clamped": np.zeros(p, bool), "glm_unconverged": np.zeros(p, bool), "family_fallback": np.zeros(p, bool)}
    cdf_unconverged = 0
    for a in (0, 1):
        rows = train[A[train] == a]
        powers = [(1, config.outcome_family)]
        if need_y2 and a == 0:
            powers.append((2, config.y2_family))
        for k, family in powers:
            Yk = Y[train] ** k
            bounds = (Yk.min(axis=0), Yk.max(axis=0)) if config.clamp_means else None
            res = _outcome_means(W[rows], Y[rows] ** k, W[target], family, bounds)
            mu[(a, k)] = res.values
            flags["mu_clamped"] |= res.clamped
            flags["glm_unconverged"] |= res.unconverged
            flags["family_fallback"] |= res.fallback
        if need_cdf:
            grids = [default_grid(Y[rows, j], config.cdf_grid_points) for j in range(p)]
            cdfs[a], n_bad = _fit_cdfs(W[rows], Y[rows], grids)
            cdf_unconverged += n_bad
    return pi, mu, cdfs, flags, cdf_unconverged


def fold_assignment(n, k, seed):
    """Seeded uniform random partition of ``range(n)`` into ``k`` near-equal folds."""
    if k < 2:
        raise ValueError("need at least 2 folds")
    if k > n:
        raise ValueError(f"cannot split {n} subjects into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=np.int64)
    folds[perm] = np.arange(n) % k
    return folds


def crossfit(table, k, seed, config=None, need_y2=True, need_cdf=False):
    """K-fold cross-fitted nuisances: subject i is predicted by models trained without its fold."""
    config = config or NuisanceConfig(crossfit_k=k, seed=seed)
    folds = fold_assignment(table.n, k, seed)
    for f in range(k):
        train = np.flatnonzero(folds != f)
        _check_arms(table, train, f"training complement of fold {f}")
    n, p = table.n, table.p
    pi = np.empty(n)
    mu = {}
    cdf_folds = []
    agg = {"mu_clamped": np.zeros(p, bool), "glm_unconverged": np.zeros(p, bool), "family_fallback": np.zeros(p, bool)}
    cdf_bad = 0
    for f in range(k):
        target = np.flatnonzero(folds == f)
        train = np.flatnonzero(folds != f)
        pi_f, mu_f, cdf_f, flags_f, bad = _fit_components(table, train, target, config, need_y2, need_cdf)
        pi[target] = pi_f
        for key, vals in mu_f.items():
            mu.setdefault(key, np.empty((n, p)))[target] = vals
        if need_cdf:
            cdf_folds.append((target, cdf_f))
        for name in agg:
            agg[name] |= flags_f[name]
        cdf_bad += bad
    return _assemble(table, config, pi, mu, tuple(cdf_folds), folds, agg, cdf_bad)


def _assemble(table, config, pi, mu, cdf_folds, folds, flag_arrays, cdf_bad):
    flags = tuple(
        frozenset(name for name, arr in flag_arrays.items() if arr[j]) for j in range(table.p)
    )
    for arr in [pi, *mu.values()]:
        arr.setflags(write=False)
    diagnostics = {"cdf_unconverged_fits": cdf_bad, "crossfit_k": 0 if folds is None else int(folds.max()) + 1}
    return NuisanceFit(table, config, pi, mu, cdf_folds, folds, flags, diagnostics)


def fit_nuisance(table, config=None, estimands=("ate",)):
    """Fit all nuisances needed by ``estimands`` (in-sample or cross-fitted per ``config``)."""
    config = config or NuisanceConfig()
    estimands = {e.lower() for e in estimands}
    need_y2 = "ste" in estimands
    need_cdf = bool(estimands & {"qte", "sqte"})
    if config.crossfit_k:
        return crossfit(table, config.crossfit_k, config.seed, config, need_y2, need_cdf)
    rows = np.arange(table.n)
    pi, mu, cdfs, flag_arrays, bad = _fit_components(table, rows, rows, config, need_y2, need_cdf)
    cdf_folds = ((rows, cdfs),) if need_cdf else ()
    return _assemble(table, config, pi, mu, cdf_folds, None, flag_arrays, bad)
