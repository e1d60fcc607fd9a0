# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled batched IRLS kernel.

Same contract and per-column recipe as ``multidr._irls_py.irls_many``; the
columns are fitted one after another with a q-by-q Cholesky solve, which
avoids the (C, q, q) temporaries of the vectorized fallback.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, fabs, sqrt, INFINITY, isfinite

cnp.import_array()

DEF LOGISTIC = 0
DEF POISSON = 1
DEF GAUSSIAN = 2

cdef double WEIGHT_FLOOR = 1e-10
cdef double RIDGE = 1e-8
cdef double SEPARATION_ETA = 30.0
cdef double SATURATION_ETA = log(1e6)
cdef double ETA_CAP = 700.0
cdef int MAX_HALVINGS = 30


cdef inline double _mean(double eta, int family) noexcept nogil:
    if family == LOGISTIC:
        if eta >= 0:
            return 1.0 / (1.0 + exp(-eta))
        return exp(eta) / (1.0 + exp(eta))
    if family == POISSON:
        if eta > ETA_CAP:
            eta = ETA_CAP
        return exp(eta)
    return eta


cdef double _deviance(const double[::1] y, const double[::1] eta, const double[::1] mu,
                      int n, int family) noexcept nogil:
    cdef double dev = 0.0
    cdef int i
    if family == LOGISTIC:
        # log(1 + e^eta) from the fitted mean: eta - log(mu) or -log1p(-mu)
        for i in range(n):
            if eta[i] >= 0:
                dev += y[i] * eta[i] - (eta[i] - log(mu[i]))
            else:
                dev += y[i] * eta[i] + log1p(-mu[i])
        return -2.0 * dev
    if family == POISSON:
        for i in range(n):
            if y[i] > 0:
                dev += y[i] * log(y[i] / mu[i])
            dev -= y[i] - mu[i]
        return 2.0 * dev
    for i in range(n):
        dev += (y[i] - mu[i]) * (y[i] - mu[i])
    return dev


cdef int _cholesky_solve(double[:, ::1] A, double[::1] b, double[::1] x,
                         double[:, ::1] L, int q, double ridge, double scale) noexcept nogil:
    """Return 0 on success, 1 if not positive definite or (without ridge) near-singular."""
    cdef int i, j, k
    cdef double s, min_piv = INFINITY
    for i in range(q):
        for j in range(i + 1):
            s = A[i, j]
            if i == j:
                s += ridge
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if s <= 0.0 or not isfinite(s):
                    return 1
                L[i, i] = sqrt(s)
                if s < min_piv:
                    min_piv = s
            else:
                L[i, j] = s / L[j, j]
    if ridge == 0.0 and min_piv <= 1e-10 * scale:
        return 1
    for i in range(q):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * x[k]
        x[i] = s / L[i, i]
    for i in range(q - 1, -1, -1):
        s = x[i]
        for k in range(i + 1, q):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]
    return 0


cdef int _is_separated(const double[::1] y, const double[::1] eta, int n, int family) noexcept nogil:
    cdef int i
    cdef bint ev_sat = True, nonev_sat = True, both = True
    if family == LOGISTIC:
        for i in range(n):
            if y[i] == 1.0:
                if not eta[i] > SEPARATION_ETA:
                    ev_sat = False
                if not eta[i] > SATURATION_ETA:
                    both = False
            else:
                if not eta[i] < -SEPARATION_ETA:
                    nonev_sat = False
                if not eta[i] < -SATURATION_ETA:
                    both = False
        return ev_sat or nonev_sat or both
    if family == POISSON:
        for i in range(n):
            if y[i] != 0.0 or not eta[i] < -SATURATION_ETA:
                return 0
        return 1
    return 0


cdef int _quasi_separated(const double[::1] eta, int n, double dev_old, double dev_new,
                          int family, double tol) noexcept nogil:
    cdef int i
    if family == GAUSSIAN or not isfinite(dev_old):
        return 0
    if fabs(dev_old - dev_new) > tol * (fabs(dev_new) + 0.1):
        return 0
    for i in range(n):
        if family == LOGISTIC and fabs(eta[i]) > SEPARATION_ETA:
            return 1
        if family == POISSON and eta[i] < -SATURATION_ETA:
            return 1
    return 0


cdef double _max_abs_score(const double[:, ::1] X, const double[::1] y, const double[::1] mu,
                           int n, int q) noexcept nogil:
    cdef int i, j
    cdef double s, best = 0.0
    for j in range(q):
        s = 0.0
        for i in range(n):
            s += X[i, j] * (y[i] - mu[i])
        if fabs(s) > best:
            best = fabs(s)
    return best


def irls_many(const double[:, ::1] X, const double[:, ::1] YT, int family, int max_iter, double tol):
    cdef int n = X.shape[0]
    cdef int q = X.shape[1]
    cdef int C = YT.shape[0]
    coef_a = np.zeros((C, q))
    conv_a = np.zeros(C, dtype=np.uint8)
    iter_a = np.zeros(C, dtype=np.int64)
    dev_a = np.full(C, np.inf)
    def_a = np.zeros(C, dtype=np.uint8)
    sep_a = np.zeros(C, dtype=np.uint8)
    cdef double[:, ::1] coef = coef_a
    cdef unsigned char[::1] conv = conv_a
    cdef long long[::1] iters = iter_a
    cdef double[::1] devs = dev_a
    cdef unsigned char[::1] defi = def_a
    cdef unsigned char[::1] sepa = sep_a

    cdef double[::1] eta = np.empty(n)
    cdef double[::1] mu = np.empty(n)
    cdef double[::1] eta_new = np.empty(n)
    cdef double[::1] mu_new = np.empty(n)
    cdef double[::1] w = np.empty(n)
    cdef double[::1] z = np.empty(n)
    cdef double[::1] beta = np.empty(q)
    cdef double[::1] beta_new = np.empty(q)
    cdef double[::1] rhs = np.empty(q)
    cdef double[:, ::1] A = np.empty((q, q))
    cdef double[:, ::1] L = np.empty((q, q))

    cdef int c, i, j, k, it, h, attempt
    cdef double m0, dmu, var, dev, dev_new, dev_old, s, scale, ridge, step, bmax, wi
    cdef bint has_beta, finite, solved
    cdef const double[::1] y

    for c in range(C):
        y = YT[c]
        with nogil:
            for i in range(n):
                if family == LOGISTIC:
                    m0 = (y[i] + 0.5) / 2.0
                    eta[i] = log(m0 / (1.0 - m0))
                elif family == POISSON:
                    eta[i] = log(y[i] + 0.1)
                else:
                    eta[i] = y[i]
                mu[i] = _mean(eta[i], family)
            has_beta = False
            dev = INFINITY
            for it in range(1, max_iter + 1):
                for i in range(n):
                    if family == LOGISTIC:
                        dmu = mu[i] * (1.0 - mu[i])
                        var = dmu
                    elif family == POISSON:
                        dmu = mu[i]
                        var = mu[i]
                    else:
                        dmu = 1.0
                        var = 1.0
                    wi = dmu * dmu / (var if var > WEIGHT_FLOOR else WEIGHT_FLOOR)
                    w[i] = wi if wi > WEIGHT_FLOOR else WEIGHT_FLOOR
                    z[i] = eta[i] + (y[i] - mu[i]) / (dmu if dmu > WEIGHT_FLOOR else WEIGHT_FLOOR)
                for j in range(q):
                    rhs[j] = 0.0
                    for k in range(j + 1):
                        A[j, k] = 0.0
                for i in range(n):
                    for j in range(q):
                        s = X[i, j] * w[i]
                        rhs[j] += s * z[i]
                        for k in range(j + 1):
                            A[j, k] += s * X[i, k]
                for j in range(q):
                    for k in range(j):
                        A[k, j] = A[j, k]
                scale = 0.0
                for j in range(q):
                    if A[j, j] > scale:
                        scale = A[j, j]
                ridge = 0.0
                solved = False
                for attempt in range(12):
                    if _cholesky_solve(A, rhs, beta_new, L, q, ridge, scale) == 0:
                        solved = True
                        break
                    defi[c] = 1
                    ridge = RIDGE if ridge == 0.0 else ridge * 100.0
                if not solved:
                    break
                for i in range(n):
                    s = 0.0
                    for j in range(q):
                        s += X[i, j] * beta_new[j]
                    eta_new[i] = s
                    mu_new[i] = _mean(s, family)
                dev_new = _deviance(y, eta_new, mu_new, n, family)
                iters[c] = it
                if has_beta:
                    h = 0
                    while not (dev_new <= dev * (1.0 + 1e-12) + 1e-12) and h < MAX_HALVINGS:
                        for j in range(q):
                            beta_new[j] = 0.5 * (beta[j] + beta_new[j])
                        for i in range(n):
                            s = 0.0
                            for j in range(q):
                                s += X[i, j] * beta_new[j]
                            eta_new[i] = s
                            mu_new[i] = _mean(s, family)
                        dev_new = _deviance(y, eta_new, mu_new, n, family)
                        h += 1
                    if not (dev_new <= dev * (1.0 + 1e-12) + 1e-12):
                        conv[c] = _max_abs_score(X, y, mu, n, q) <= tol * n
                        break
                finite = True
                for j in range(q):
                    if not isfinite(beta_new[j]):
                        finite = False
                if not finite:
                    break
                step = INFINITY
                if has_beta:
                    step = 0.0
                    for j in range(q):
                        if fabs(beta_new[j] - beta[j]) > step:
                            step = fabs(beta_new[j] - beta[j])
                bmax = 0.0
                for j in range(q):
                    beta[j] = beta_new[j]
                    if fabs(beta[j]) > bmax:
                        bmax = fabs(beta[j])
                for i in range(n):
                    eta[i] = eta_new[i]
                    mu[i] = mu_new[i]
                dev_old = dev
                dev = dev_new
                has_beta = True
                if _is_separated(y, eta, n, family):
                    sepa[c] = 1
                    break
                if _max_abs_score(X, y, mu, n, q) <= tol * n and step <= 1e-6 * (1.0 + bmax):
                    conv[c] = 1
                    break
                if _quasi_separated(eta, n, dev_old, dev, family, tol):
                    sepa[c] = 1
                    break
            if has_beta:
                for j in range(q):
                    coef[c, j] = beta[j]
                devs[c] = dev
            else:
                conv[c] = 0
    return coef_a, conv_a.astype(bool), iter_a, dev_a, def_a.astype(bool), sep_a.astype(bool)
