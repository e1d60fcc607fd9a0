"""IRLS fitting for the three GLM families used by the nuisance regressions.

All three families use their canonical link, so IRLS is Newton's method and
the score is ``X^T w (y - mu)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import _backend

logger = logging.getLogger(__name__)

FAMILIES = ("logistic", "poisson_log", "gaussian_identity")
FAMILY_CODES = {name: code for code, name in enumerate(FAMILIES)}

MAX_ITER = 100
TOL = 1e-8
WEIGHT_FLOOR = 1e-10
RIDGE = 1e-8
SEPARATION_ETA = 30.0
SATURATION_ETA = float(np.log(1e6))
ETA_CAP = 700.0
MAX_HALVINGS = 30


class GlmError(ValueError):
    """Invalid inputs to a GLM fit or prediction."""


@dataclass(frozen=True)
class GlmFit:
    family: str
    coefficients: np.ndarray
    converged: bool
    iterations: int
    final_deviance: float
    weight_floor: float = WEIGHT_FLOOR
    rank_deficient: bool = False
    separated: bool = False
    deviance_trace: tuple = field(default=(), repr=False)


def _check_family(family):
    if family not in FAMILY_CODES:
        raise GlmError(f"unknown family {family!r}; expected one of {FAMILIES}")


def _check_response(y, family):
    if not np.all(np.isfinite(y)):
        raise GlmError("response contains non-finite values")
    if family == "logistic" and not np.all((y == 0) | (y == 1)):
        raise GlmError("logistic response must be 0/1")
    if family == "poisson_log" and np.any(y < 0):
        raise GlmError("poisson_log response must be non-negative")


def mean_from_eta(eta, family):
    if family == "logistic":
        return expit(eta)
    if family == "poisson_log":
        return np.exp(np.minimum(eta, ETA_CAP))
    return eta


def _start(y, family):
    if family == "logistic":
        mu = (y + 0.5) / 2.0
        return np.log(mu / (1.0 - mu))
    if family == "poisson_log":
        return np.log(y + 0.1)
    return y.astype(float)


def _deviance(y, eta, mu, w, family):
    if family == "logistic":
        return -2.0 * np.sum(w * (y * eta - np.logaddexp(0.0, eta)))
    if family == "poisson_log":
        pos = y > 0
        ylogy = np.zeros_like(mu)
        ylogy[pos] = y[pos] * np.log(y[pos] / mu[pos])
        return 2.0 * np.sum(w * (ylogy - (y - mu)))
    return float(np.sum(w * (y - mu) ** 2))


def _is_separated(y, eta, family):
    # every observation of one response class is saturated
    if family == "logistic":
        events, nonevents = y == 1, y == 0
        if np.all(eta[events] > SATURATION_ETA) and np.all(eta[nonevents] < -SATURATION_ETA):
            return True  # every fitted probability within 1e-6 of its label
        return bool(np.all(eta[events] > SEPARATION_ETA) or np.all(eta[nonevents] < -SEPARATION_ETA))
    if family == "poisson_log":
        # all-zero counts: the MLE sits at eta = -inf
        return bool(np.all(y == 0) and np.all(eta < -SATURATION_ETA))
    return False


def _quasi_separated(eta, dev_old, dev_new, family, tol):
    # deviance has stalled while some fitted values sit at the boundary:
    # the MLE does not exist and further iterations only inflate |beta|
    if family == "gaussian_identity" or not np.isfinite(dev_old):
        return False
    if abs(dev_old - dev_new) > tol * (abs(dev_new) + 0.1):
        return False
    if family == "logistic":
        return bool(np.any(np.abs(eta) > SEPARATION_ETA))
    # the weight floor keeps eta near log(1e-10) for zero counts, so use the milder cut
    return bool(np.any(eta < -SATURATION_ETA))


def solve_normal_equations(xtwx, xtwz):
    """Cholesky solve with the ridge fallback for (near) rank deficiency.

    Returns ``(beta, rank_deficient)``.
    """
    q = xtwx.shape[0]
    scale = max(float(np.max(np.diag(xtwx))), 0.0)
    ridge = 0.0
    deficient = False
    for _ in range(12):
        try:
            chol = np.linalg.cholesky(xtwx + ridge * np.eye(q))
            if ridge == 0.0 and np.min(np.diag(chol)) ** 2 <= 1e-10 * scale:
                raise np.linalg.LinAlgError
            z = np.linalg.solve(chol, xtwz)
            return np.linalg.solve(chol.T, z), deficient
        except np.linalg.LinAlgError:
            deficient = True
            ridge = RIDGE if ridge == 0.0 else ridge * 100.0
    raise GlmError("normal equations could not be solved")


def fit_glm(design, response, family, weights=None, max_iter=MAX_ITER, tol=TOL):
    """Fit a GLM by IRLS with step-halving.

    Parameters
    ----------
    design : ndarray, shape (n, q)
    response : ndarray, shape (n,)
    family : {"logistic", "poisson_log", "gaussian_identity"}
    weights : ndarray, shape (n,), optional
        Non-negative prior weights.
    max_iter : int
    tol : float
        Convergence requires ``max|X^T w (y - mu)| <= tol * sum(w)``.

    Returns
    -------
    GlmFit
        Never carries NaN coefficients. Separation or divergence is reported
        through ``converged=False``.
    """
    _check_family(family)
    X = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise GlmError(f"design {X.shape} and response {y.shape} do not align")
    n, q = X.shape
    if n < q:
        raise GlmError(f"need n >= q, got n={n}, q={q}")
    _check_response(y, family)
    if weights is None:
        w_prior = np.ones(n)
    else:
        w_prior = np.asarray(weights, dtype=float)
        if w_prior.shape != (n,) or np.any(w_prior < 0) or not np.all(np.isfinite(w_prior)):
            raise GlmError("weights must be a finite non-negative vector of length n")
    total_weight = float(np.sum(w_prior))

    eta = _start(y, family)
    mu = mean_from_eta(eta, family)
    beta = None
    dev = np.inf
    trace = []
    converged = separated = deficient = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        if family == "logistic":
            dmu = mu * (1.0 - mu)
            var = dmu
        elif family == "poisson_log":
            dmu = mu
            var = mu
        else:
            dmu = np.ones(n)
            var = np.ones(n)
        w = np.maximum(w_prior * dmu * dmu / np.maximum(var, WEIGHT_FLOOR), WEIGHT_FLOOR)
        z = eta + (y - mu) / np.maximum(dmu, WEIGHT_FLOOR)
        Xw = X * w[:, None]
        beta_new, flag = solve_normal_equations(Xw.T @ X, Xw.T @ z)
        deficient |= flag
        eta_new = X @ beta_new
        mu_new = mean_from_eta(eta_new, family)
        dev_new = _deviance(y, eta_new, mu_new, w_prior, family)
        if beta is not None:
            halvings = 0
            while not (dev_new <= dev * (1.0 + 1e-12) + 1e-12) and halvings < MAX_HALVINGS:
                beta_new = 0.5 * (beta + beta_new)
                eta_new = X @ beta_new
                mu_new = mean_from_eta(eta_new, family)
                dev_new = _deviance(y, eta_new, mu_new, w_prior, family)
                halvings += 1
            if not (dev_new <= dev * (1.0 + 1e-12) + 1e-12):
                # no descent direction left: keep the previous iterate
                score = X.T @ (w_prior * (y - mu))
                converged = bool(np.max(np.abs(score)) <= tol * total_weight)
                break
        if not np.all(np.isfinite(beta_new)):
            break
        step = np.inf if beta is None else float(np.max(np.abs(beta_new - beta)))
        dev_old = dev
        beta, eta, mu, dev = beta_new, eta_new, mu_new, dev_new
        trace.append(dev)
        if _is_separated(y, eta, family):
            separated = True
            break
        score = X.T @ (w_prior * (y - mu))
        if np.max(np.abs(score)) <= tol * total_weight and step <= 1e-6 * (1.0 + np.max(np.abs(beta))):
            converged = True
            break
        if _quasi_separated(eta, dev_old, dev, family, tol):
            separated = True
            break
    if beta is None or not np.all(np.isfinite(beta)):
        beta = np.zeros(q)
        converged = False
    fit = GlmFit(
        family=family,
        coefficients=beta,
        converged=converged,
        iterations=iterations,
        final_deviance=float(dev),
        rank_deficient=deficient,
        separated=separated,
        deviance_trace=tuple(trace),
    )
    if not converged:
        logger.debug("glm %s not converged after %d iterations (separated=%s)", family, iterations, separated)
    return fit


def predict_glm(fit, design, clip=None, allow_unconverged=False):
    """Mean-scale predictions, optionally clamped into ``[lo, hi]``."""
    if not fit.converged and not allow_unconverged:
        raise GlmError("fit did not converge; pass allow_unconverged=True to predict anyway")
    X = np.asarray(design, dtype=float)
    if X.ndim != 2 or X.shape[1] != fit.coefficients.shape[0]:
        raise GlmError(f"design has shape {X.shape}, expected (*, {fit.coefficients.shape[0]})")
    mu = mean_from_eta(X @ fit.coefficients, fit.family)
    if clip is not None:
        lo, hi = clip
        mu = np.clip(mu, lo, hi)
    return mu


@dataclass(frozen=True)
class GlmBatch:
    """Coefficients of many fits sharing one design (one row per response column)."""

    family: str
    coefficients: np.ndarray  # (C, q)
    converged: np.ndarray
    iterations: np.ndarray
    deviance: np.ndarray
    rank_deficient: np.ndarray
    separated: np.ndarray

    def predict(self, design):
        return mean_from_eta(np.asarray(design, dtype=float) @ self.coefficients.T, self.family)


def fit_glm_many(design, responses, family, max_iter=MAX_ITER, tol=TOL, backend=None):
    """Fit one GLM per column of ``responses`` against a shared design.

    Runs the compiled kernel when available, otherwise the numpy kernel.
    Each column follows exactly the IRLS recipe of :func:`fit_glm`.
    """
    _check_family(family)
    X = np.ascontiguousarray(design, dtype=float)
    Y = np.asarray(responses, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] != Y.shape[0]:
        raise GlmError(f"design {X.shape} and responses {Y.shape} do not align")
    if X.shape[0] < X.shape[1]:
        raise GlmError(f"need n >= q, got n={X.shape[0]}, q={X.shape[1]}")
    _check_response(Y, family)
    kernel = _backend.get_kernel(backend)
    out = kernel(X, np.ascontiguousarray(Y.T), FAMILY_CODES[family], max_iter, tol)
    coef, converged, iterations, deviance, deficient, separated = out
    return GlmBatch(
        family=family,
        coefficients=np.asarray(coef),
        converged=np.asarray(converged, dtype=bool),
        iterations=np.asarray(iterations, dtype=int),
        deviance=np.asarray(deviance),
        rank_deficient=np.asarray(deficient, dtype=bool),
        separated=np.asarray(separated, dtype=bool),
    )
