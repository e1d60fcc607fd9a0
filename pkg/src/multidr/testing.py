"""Simultaneous inference over many outcomes.

The step-down procedure rejects the largest ``|t_j|`` while it exceeds a
Gaussian multiplier bootstrap quantile of the max statistic over the
remaining candidates, then augments the discoveries to move from FWER to
FDP-exceedance control.
"""
from __future__ import annotations

import functools
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

logger = logging.getLogger(__name__)

BOOTSTRAP_CHUNK = 4096
CACHE_LIMIT = 500_000  # multiplier matrices up to this many entries are memoized


@dataclass(frozen=True)
class StepRecord:
    iteration: int
    max_stat: float
    quantile: float
    removed: int | None  # outcome index rejected at this step, None when the procedure stopped


@dataclass(frozen=True)
class DiscoverySet:
    candidates: tuple
    discoveries: tuple
    stepdown_trace: tuple
    augmented_count: int
    excluded: tuple = ()
    params: dict = field(default_factory=dict)

    @property
    def pre_augmentation(self):
        return tuple(rec.removed for rec in self.stepdown_trace if rec.removed is not None)


def screen_by_variance(sigma, c_n=0.01):
    """Indices (0-based, original order) with ``sigma_j**2 >= c_n``."""
    if c_n < 0:
        raise ValueError("c_n must be non-negative")
    sigma = np.asarray(sigma, dtype=float)
    with np.errstate(invalid="ignore"):
        keep = np.flatnonzero(sigma**2 >= c_n)
    if keep.size == 0:
        warnings.warn(f"no outcome passes the variance screen c_n={c_n}", RuntimeWarning, stacklevel=2)
    return keep.tolist()


def bootstrap_multipliers(n, B, seed, iteration=1, start=0):
    """Standard-normal multipliers for replicates ``start .. start+B-1``.

    Replicate ``b`` of iteration ``l`` reads its own Philox stream keyed by
    ``seed + l`` at counter block ``b``, so any subset of replicates can be
    regenerated independently of the others.
    """
    key = int(seed) + int(iteration)
    if key < 0:
        raise ValueError("seed + iteration must be non-negative")
    if n * B <= CACHE_LIMIT:
        return _cached_multipliers(int(n), int(B), key, int(start))
    return _multipliers(int(n), int(B), key, int(start))


def _multipliers(n, B, key, start):
    out = np.empty((B, n))
    for r in range(B):
        bitgen = np.random.Philox(key=key, counter=[0, start + r, 0, 0])
        out[r] = np.random.Generator(bitgen).standard_normal(n)
    out.setflags(write=False)
    return out


# step-down iterations share draws across estimands of one replicate
_cached_multipliers = functools.lru_cache(maxsize=32)(_multipliers)


def bootstrap_max_stats(values, sigma, B, seed, iteration=1):
    """``||g^(b)||_inf`` for ``b = 1..B`` with ``g = sum_i eps_i phi_i / (sqrt(n) sigma)``."""
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    scaled = values / (np.sqrt(n) * np.asarray(sigma, dtype=float))
    out = np.empty(B)
    chunk = max(1, min(BOOTSTRAP_CHUNK, 2**22 // max(n, 1)))
    for start in range(0, B, chunk):
        size = min(chunk, B - start)
        eps = bootstrap_multipliers(n, size, seed, iteration, start)
        out[start : start + size] = np.max(np.abs(eps @ scaled), axis=1)
    return out


def upper_quantile(draws, alpha):
    """``inf{x : mean(draws <= x) >= 1 - alpha}`` (right-continuous, no interpolation)."""
    draws = np.sort(np.asarray(draws, dtype=float))
    B = draws.size
    k = math.ceil(round(B * (1.0 - alpha), 9))
    return float(draws[max(k, 1) - 1])


def bootstrap_max_quantile(influence, sigma, alpha, B, seed, iteration=1):
    """Upper ``alpha`` bootstrap quantile of the standardized max statistic.

    Parameters
    ----------
    influence : ndarray, shape (n, s)
        Centered influence columns of the current hypothesis set.
    sigma : ndarray, shape (s,)
        Positive standard deviations of those columns.
    """
    if B < 1:
        raise ValueError("B must be at least 1")
    if np.asarray(influence).shape[1] == 0:
        raise ValueError("hypothesis set is empty")
    if np.any(~(np.asarray(sigma) > 0)):
        raise ValueError("sigma must be positive on the hypothesis set")
    return upper_quantile(bootstrap_max_stats(influence, sigma, B, seed, iteration), alpha)


def _testable(result, influence, c_n):
    usable = ~np.asarray(result.degenerate, dtype=bool) & np.isfinite(result.t) & (influence.sigma > 0)
    excluded = np.flatnonzero(~usable).tolist()
    screened = set(screen_by_variance(np.where(usable, influence.sigma, 0.0), c_n)) if usable.any() else set()
    candidates = [j for j in range(result.p) if usable[j] and j in screened]
    return candidates, excluded


def stepdown_fdx(result, influence, c=0.1, alpha=0.05, B=1000, c_n=0.01, seed=0):
    """Step-down max-t procedure with augmentation (FDP-exceedance control).

    Iteration ``l`` uses bootstrap seed ``seed + l``. Ties in ``|t_j|`` go to
    the smallest index. Degenerate outcomes are never tested.
    """
    if not 0.0 < c < 1.0:
        raise ValueError("c must lie in (0, 1)")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if influence.values.shape[1] != result.p:
        raise ValueError("result and influence matrix disagree on the number of outcomes")
    params = {"c": c, "alpha": alpha, "B": B, "c_n": c_n, "seed": seed, "method": "stepdown"}
    candidates, excluded = _testable(result, influence, c_n)
    abs_t = np.abs(result.t)
    active = list(candidates)
    rejected = []
    trace = []
    ell = 1
    while active:
        idx = np.array(active)
        stats = abs_t[idx]
        pos = int(np.argmax(stats))  # first occurrence = smallest index among ties
        m = float(stats[pos])
        q = bootstrap_max_quantile(influence.values[:, idx], influence.sigma[idx], alpha, B, seed, ell)
        if m > q:
            j = int(idx[pos])
            trace.append(StepRecord(ell, m, q, j))
            rejected.append(j)
            active.pop(pos)
            ell += 1
        else:
            trace.append(StepRecord(ell, m, q, None))
            break
    n_aug = math.floor(len(rejected) * c / (1.0 - c) + 1e-12)
    remaining = sorted(active, key=lambda j: (-abs_t[j], j))
    augmented = remaining[:n_aug]
    return DiscoverySet(
        candidates=tuple(candidates),
        discoveries=tuple(rejected + augmented),
        stepdown_trace=tuple(trace),
        augmented_count=len(augmented),
        excluded=tuple(excluded),
        params=params,
    )


def fwer_test(result, influence, alpha=0.05, B=1000, c_n=0.01, seed=0):
    """Single-step max-t test: reject ``|t_j| > q_1(alpha)`` over the screened set.

    Uses the same bootstrap draws as the first step-down iteration.
    """
    candidates, excluded = _testable(result, influence, c_n)
    params = {"alpha": alpha, "B": B, "c_n": c_n, "seed": seed, "method": "fwer"}
    if not candidates:
        return DiscoverySet((), (), (), 0, tuple(excluded), params)
    idx = np.array(candidates)
    q = bootstrap_max_quantile(influence.values[:, idx], influence.sigma[idx], alpha, B, seed, 1)
    abs_t = np.abs(result.t[idx])
    rejected = tuple(int(j) for j in idx[abs_t > q])
    trace = (StepRecord(1, float(abs_t.max()), q, None),)
    return DiscoverySet(tuple(candidates), rejected, trace, 0, tuple(excluded), params)


def two_sided_pvalues(t):
    return 2.0 * norm.sf(np.abs(np.asarray(t, dtype=float)))


def bh_procedure(pvalues, q=0.05):
    """Benjamini-Hochberg step-up; returns sorted 0-based rejected indices."""
    p = np.asarray(pvalues, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return []
    order = np.argsort(p, kind="stable")
    below = p[order] <= q * np.arange(1, m + 1) / m
    if not below.any():
        return []
    k = int(np.flatnonzero(below).max()) + 1
    return sorted(int(j) for j in order[:k])


def bh_test(result, influence, q=0.05, c_n=0.01):
    """BH on normal-calibrated two-sided p-values of the testable outcomes."""
    candidates, excluded = _testable(result, influence, c_n)
    params = {"q": q, "c_n": c_n, "method": "bh"}
    if not candidates:
        return DiscoverySet((), (), (), 0, tuple(excluded), params)
    idx = np.array(candidates)
    rej = bh_procedure(two_sided_pvalues(result.t[idx]), q)
    return DiscoverySet(tuple(candidates), tuple(int(idx[k]) for k in rej), (), 0, tuple(excluded), params)


@dataclass(frozen=True)
class ErrorMetrics:
    fdp: float
    exceed: bool
    power: float
    n_discoveries: int
    n_false: int


def error_metrics(discoveries, truth, c=0.1):
    """FDP, exceedance flag (FDP > c) and power; empty sets count as 0."""
    V = set(int(j) for j in discoveries)
    T = set(int(j) for j in truth)
    false = len(V - T)
    fdp = false / max(1, len(V))
    power = len(V & T) / max(1, len(T))
    return ErrorMetrics(fdp=fdp, exceed=fdp > c, power=power, n_discoveries=len(V), n_false=false)


def run_method(method, result, influence, c=0.1, alpha=0.05, B=1000, c_n=0.01, seed=0, q=0.05):
    method = method.lower()
    if method == "stepdown":
        return stepdown_fdx(result, influence, c=c, alpha=alpha, B=B, c_n=c_n, seed=seed)
    if method == "fwer":
        return fwer_test(result, influence, alpha=alpha, B=B, c_n=c_n, seed=seed)
    if method == "bh":
        return bh_test(result, influence, q=q, c_n=c_n)
    raise ValueError(f"unknown method {method!r}")
