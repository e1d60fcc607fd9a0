"""Pure numpy batched IRLS kernel (fallback for ``_irls_ext``).

Fits one GLM per response column against a shared design, vectorized over
the columns that are still iterating. The per-column recipe is identical to
:func:`multidr.glm.fit_glm` with unit prior weights.
"""
import numpy as np
from scipy.special import expit

LOGISTIC, POISSON, GAUSSIAN = 0, 1, 2

WEIGHT_FLOOR = 1e-10
RIDGE = 1e-8
SEPARATION_ETA = 30.0
SATURATION_ETA = float(np.log(1e6))
ETA_CAP = 700.0
MAX_HALVINGS = 30


def _mean(eta, family):
    if family == LOGISTIC:
        return expit(eta)
    if family == POISSON:
        return np.exp(np.minimum(eta, ETA_CAP))
    return eta


def _deviance(y, eta, mu, family):
    # y, eta, mu: (C, n)
    if family == LOGISTIC:
        return -2.0 * np.sum(y * eta - np.logaddexp(0.0, eta), axis=1)
    if family == POISSON:
        with np.errstate(divide="ignore", invalid="ignore"):
            ylogy = np.where(y > 0, y * np.log(np.where(y > 0, y, 1.0) / mu), 0.0)
        return 2.0 * np.sum(ylogy - (y - mu), axis=1)
    return np.sum((y - mu) ** 2, axis=1)


def _separated(y, eta, family):
    if family == LOGISTIC:
        ev = y == 1
        events_sat = np.all(~ev | (eta > SEPARATION_ETA), axis=1)
        nonevents_sat = np.all(ev | (eta < -SEPARATION_ETA), axis=1)
        both = np.all(np.where(ev, eta > SATURATION_ETA, eta < -SATURATION_ETA), axis=1)
        return events_sat | nonevents_sat | both
    if family == POISSON:
        return np.all(y == 0, axis=1) & np.all(eta < -SATURATION_ETA, axis=1)
    return np.zeros(y.shape[0], dtype=bool)


def _quasi_separated(eta, dev_old, dev_new, family, tol):
    if family == GAUSSIAN:
        return np.zeros(eta.shape[0], dtype=bool)
    with np.errstate(invalid="ignore"):
        stalled = np.isfinite(dev_old) & (np.abs(dev_old - dev_new) <= tol * (np.abs(dev_new) + 0.1))
    if family == LOGISTIC:
        edge = np.any(np.abs(eta) > SEPARATION_ETA, axis=1)
    else:
        edge = np.any(eta < -SATURATION_ETA, axis=1)
    return stalled & edge


def _solve(A, b):
    """Batched Cholesky solve of ``A x = b`` with per-column ridge fallback."""
    C, q, _ = A.shape
    out = np.empty((C, q))
    deficient = np.zeros(C, dtype=bool)
    scale = np.maximum(np.max(np.diagonal(A, axis1=1, axis2=2), axis=1), 0.0)
    try:
        L = np.linalg.cholesky(A)
        ok = np.min(np.diagonal(L, axis1=1, axis2=2), axis=1) ** 2 > 1e-10 * scale
    except np.linalg.LinAlgError:
        L = None
        ok = np.zeros(C, dtype=bool)
    if L is not None and ok.any():
        Lk = L[ok]
        z = np.linalg.solve(Lk, b[ok][:, :, None])
        out[ok] = np.linalg.solve(np.swapaxes(Lk, 1, 2), z)[:, :, 0]
    eye = np.eye(q)
    for c in np.flatnonzero(~ok):
        ridge = 0.0
        for _ in range(12):
            try:
                Lc = np.linalg.cholesky(A[c] + ridge * eye)
                if ridge == 0.0 and np.min(np.diag(Lc)) ** 2 <= 1e-10 * scale[c]:
                    raise np.linalg.LinAlgError
                out[c] = np.linalg.solve(Lc.T, np.linalg.solve(Lc, b[c]))
                break
            except np.linalg.LinAlgError:
                deficient[c] = True
                ridge = RIDGE if ridge == 0.0 else ridge * 100.0
        else:
            out[c] = np.nan
    return out, deficient


def irls_many(X, YT, family, max_iter, tol):
    """Fit ``C`` GLMs; ``YT`` has shape ``(C, n)``.

    Returns ``(coef, converged, iterations, deviance, rank_deficient,
    separated)`` with leading dimension ``C``.
    """
    X = np.asarray(X, dtype=float)
    YT = np.asarray(YT, dtype=float)
    n, q = X.shape
    C = YT.shape[0]
    coef = np.zeros((C, q))
    converged = np.zeros(C, dtype=bool)
    separated = np.zeros(C, dtype=bool)
    deficient = np.zeros(C, dtype=bool)
    iterations = np.zeros(C, dtype=np.int64)
    deviance = np.full(C, np.inf)
    if C == 0:
        return coef, converged, iterations, deviance, deficient, separated

    if family == LOGISTIC:
        m0 = (YT + 0.5) / 2.0
        eta = np.log(m0 / (1.0 - m0))
    elif family == POISSON:
        eta = np.log(YT + 0.1)
    else:
        eta = YT.copy()
    mu = _mean(eta, family)
    has_beta = np.zeros(C, dtype=bool)
    active = np.arange(C)
    for it in range(1, max_iter + 1):
        if active.size == 0:
            break
        y = YT[active]
        e = eta[active]
        m = mu[active]
        if family == LOGISTIC:
            dmu = m * (1.0 - m)
            var = dmu
        elif family == POISSON:
            dmu = m
            var = m
        else:
            dmu = np.ones_like(m)
            var = dmu
        w = np.maximum(dmu * dmu / np.maximum(var, WEIGHT_FLOOR), WEIGHT_FLOOR)
        z = e + (y - m) / np.maximum(dmu, WEIGHT_FLOOR)
        A = np.einsum("ni,cn,nj->cij", X, w, X, optimize=True)
        b = (w * z) @ X
        beta_new, defc = _solve(A, b)
        deficient[active] |= defc
        eta_new = beta_new @ X.T
        mu_new = _mean(eta_new, family)
        dev_new = _deviance(y, eta_new, mu_new, family)
        beta_old = coef[active]
        dev_old = deviance[active]
        hb = has_beta[active]

        # step-halving on deviance increase
        bad = hb & ~(dev_new <= dev_old * (1.0 + 1e-12) + 1e-12)
        for _ in range(MAX_HALVINGS):
            if not bad.any():
                break
            idx = np.flatnonzero(bad)
            beta_new[idx] = 0.5 * (beta_old[idx] + beta_new[idx])
            eta_new[idx] = beta_new[idx] @ X.T
            mu_new[idx] = _mean(eta_new[idx], family)
            dev_new[idx] = _deviance(y[idx], eta_new[idx], mu_new[idx], family)
            bad[idx] = ~(dev_new[idx] <= dev_old[idx] * (1.0 + 1e-12) + 1e-12)

        iterations[active] = it
        finished = np.zeros(active.size, dtype=bool)

        stuck = bad
        if stuck.any():
            # keep the previous iterate
            idx = np.flatnonzero(stuck)
            score = (y[idx] - m[idx]) @ X
            converged[active[idx]] = np.max(np.abs(score), axis=1) <= tol * n
            finished |= stuck

        nonfinite = ~stuck & ~np.all(np.isfinite(beta_new), axis=1)
        finished |= nonfinite

        take = ~finished
        step = np.where(hb, np.max(np.abs(beta_new - beta_old), axis=1), np.inf)
        cols = active[take]
        coef[cols] = beta_new[take]
        eta[cols] = eta_new[take]
        mu[cols] = mu_new[take]
        deviance[cols] = dev_new[take]
        has_beta[cols] = True

        sep = take & _separated(y, eta_new, family)
        check = take & ~sep
        score = (y - mu_new) @ X
        conv = check & (np.max(np.abs(score), axis=1) <= tol * n) & (
            step <= 1e-6 * (1.0 + np.max(np.abs(beta_new), axis=1))
        )
        converged[active[conv]] = True
        sep |= check & ~conv & _quasi_separated(eta_new, dev_old, dev_new, family, tol)
        separated[active[sep]] = True
        finished |= sep | conv
        active = active[~finished]

    bad_coef = ~has_beta | ~np.all(np.isfinite(coef), axis=1)
    coef[bad_coef] = 0.0
    converged[bad_coef] = False
    return coef, converged, iterations, deviance, deficient, separated
