import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multidr.data import ObservationTable
from multidr.estimands import (
    _finish,
    compute_phi,
    estimate,
    estimate_ate,
    estimate_qte,
    estimate_sqte,
    estimate_ste,
    ste_from_components,
    variance_from_influence,
)
from multidr.nuisance import NuisanceConfig, NuisanceFit, fit_nuisance


def _fixed_nuisance(table, pi1, mu):
    """A NuisanceFit with hand-chosen propensities and outcome means."""
    mu = {key: np.broadcast_to(np.asarray(v, dtype=float), (table.n, table.p)) for key, v in mu.items()}
    return NuisanceFit(table, NuisanceConfig(), np.asarray(pi1, dtype=float), mu, ())


def _two_subjects():
    table = ObservationTable(np.array([1.0, 0.0]), np.zeros((2, 1)), np.array([[2.0], [1.0]]), ("y",))
    nf = _fixed_nuisance(table, [0.5, 0.5], {(1, 1): 1.0, (0, 1): 1.0})
    return table, nf


def _sim(seed, n, p, effect=0.0, gaussian=False):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((n, 2))
    A = (rng.random(n) < 1 / (1 + np.exp(W.sum(axis=1) / 3))).astype(float)
    if gaussian:
        Y = 0.5 * W[:, :1] + rng.standard_normal((n, p)) + effect * A[:, None]
    else:
        Y = rng.poisson(np.exp(0.7 + 0.3 * W[:, :1] + effect * A[:, None]), (n, p)).astype(float)
    return ObservationTable(A, W, Y, tuple(f"g{j}" for j in range(p)))


# ----------------------------------------------------------- pseudo-outcomes


def test_phi_hand_examples():
    table, nf = _two_subjects()
    phi = compute_phi(table, nf, 1, 1, 0)
    assert phi[0] == 3.0  # (1/0.5)(2-1)+1
    assert phi[1] == 1.0  # A=0: indicator off, value is mu


def test_phi_zero_mean_is_horvitz_thompson():
    table = _sim(0, 200, 2)
    nf = fit_nuisance(table)
    zero = _fixed_nuisance(table, nf.pi, {(1, 1): 0.0, (0, 1): 0.0})
    ht = np.mean((table.treatment == 1)[:, None] * table.outcomes / nf.pi[:, None], axis=0)
    np.testing.assert_allclose(compute_phi(table, zero, 1, 1).mean(axis=0), ht, rtol=1e-14)


def test_ate_hand_case():
    table, nf = _two_subjects()
    result, infl = estimate_ate(table, nf)
    assert abs(result.tau[0] - 1.0) <= 1e-12
    np.testing.assert_allclose(infl.values[:, 0], [1.0, -1.0], atol=1e-12)
    assert abs(result.sigma[0] - 1.0) <= 1e-12


def test_ate_constant_outcome_is_zero():
    table = ObservationTable(np.array([1.0, 0, 1, 0]), np.zeros((4, 1)), np.full((4, 1), 4.0), ("y",))
    nf = _fixed_nuisance(table, [0.3, 0.6, 0.5, 0.5], {(1, 1): 4.0, (0, 1): 4.0})
    result, _ = estimate_ate(table, nf)
    assert result.tau[0] == 0.0
    assert result.degenerate[0] and np.isnan(result.t[0]) and "degenerate" in result.flags[0]


def test_ate_no_effect_coverage():
    hits = []
    for seed in range(4):
        table = _sim(seed, 4000, 50)
        result, _ = estimate_ate(table, fit_nuisance(table))
        hits.append(np.abs(result.tau) <= 3 * result.sigma / np.sqrt(table.n))
    assert np.mean(hits) >= 0.99


# ---------------------------------------------------------------------- STE


def test_ste_components_example():
    tau, var0, ok = ste_from_components(np.array([1.0]), np.array([2.0]), np.array([2.0]))
    assert tau[0] == 1.0 and var0[0] == 1.0 and ok[0]


def test_ste_constant_control_is_degenerate():
    A = np.array([1.0, 0, 1, 0, 1, 0])
    Y = np.array([[1.0], [3.0], [2.0], [3.0], [5.0], [3.0]])
    table = ObservationTable(A, np.zeros((6, 1)), Y, ("y",))
    nf = _fixed_nuisance(table, np.full(6, 0.5), {(1, 1): 2.0, (0, 1): 3.0, (0, 2): 9.0})
    result, infl = estimate_ste(table, nf)
    assert result.degenerate[0] and np.isnan(result.tau[0]) and "var_floor" in result.flags[0]
    assert np.all(infl.values[:, 0] == 0.0)


def test_ste_no_effect_coverage():
    hits = []
    for seed in range(4):
        table = _sim(100 + seed, 4000, 50, gaussian=True)
        cfg = NuisanceConfig(outcome_family="gaussian_identity")
        result, _ = estimate_ste(table, fit_nuisance(table, cfg, ("ste",)))
        hits.append(np.abs(result.tau) <= 3 * result.sigma / np.sqrt(table.n))
    assert np.mean(hits) >= 0.99


@settings(max_examples=8, deadline=None)
@given(lam=st.floats(0.05, 50.0), seed=st.integers(0, 1000))
def test_ste_scale_equivariance(lam, seed):
    table = _sim(seed, 300, 2, effect=0.4)
    Y = table.outcomes.copy()
    Y[:, 1] *= lam
    scaled = ObservationTable(table.treatment, table.covariates, Y, table.outcome_names)
    base, _ = estimate_ste(table, fit_nuisance(table, estimands=("ste",)))
    new, _ = estimate_ste(scaled, fit_nuisance(scaled, estimands=("ste",)))
    np.testing.assert_allclose(new.tau, base.tau, atol=1e-8, rtol=0)
    ate0, _ = estimate_ate(table, fit_nuisance(table))
    ate1, _ = estimate_ate(scaled, fit_nuisance(scaled))
    np.testing.assert_allclose(ate1.tau, ate0.tau * [1.0, lam], rtol=1e-8)


# ---------------------------------------------------------------------- QTE


def test_qte_one_step_bookkeeping():
    table = _sim(7, 400, 2, effect=0.5, gaussian=True)
    nf = fit_nuisance(table, NuisanceConfig(outcome_family="gaussian_identity"), ("qte",))
    result, infl = estimate_qte(table, nf)
    c = result.components
    np.testing.assert_allclose(result.tau, c["theta1"] - c["theta0"], atol=1e-14)
    assert np.all(c["f0"] > 0) and np.all(c["f1"] > 0)
    np.testing.assert_allclose(infl.values.mean(axis=0), 0.0, atol=1e-10)


@pytest.mark.parametrize("shift", [-3.25, 0.5, 17.0])
def test_qte_translation_equivariance(shift):
    table = _sim(8, 500, 2, effect=0.7, gaussian=True)
    Y = table.outcomes.copy()
    Y[:, 0] += shift
    moved = ObservationTable(table.treatment, table.covariates, Y, table.outcome_names)
    cfg = NuisanceConfig(outcome_family="gaussian_identity")
    a, _ = estimate_qte(table, fit_nuisance(table, cfg, ("qte",)))
    b, _ = estimate_qte(moved, fit_nuisance(moved, cfg, ("qte",)))
    assert abs(b.tau[0] - a.tau[0]) <= 1e-6
    assert abs(b.components["theta0"][0] - a.components["theta0"][0] - shift) <= 1e-6
    assert abs(b.components["theta1"][0] - a.components["theta1"][0] - shift) <= 1e-6
    np.testing.assert_allclose(b.tau[1], a.tau[1], atol=1e-12)


def test_qte_location_shift():
    rng = np.random.default_rng(9)
    n = 4000
    W = rng.standard_normal((n, 2))
    A = (rng.random(n) < 1 / (1 + np.exp(W.sum(axis=1) / 3))).astype(float)
    Y = (W[:, 0] + rng.standard_normal(n) + A)[:, None]
    table = ObservationTable(A, W, Y, ("y",))
    result, _ = estimate_qte(table, fit_nuisance(table, NuisanceConfig(outcome_family="gaussian_identity"), ("qte",)))
    assert abs(result.tau[0] - 1.0) <= 0.1


def test_sqte_uniform_control():
    rng = np.random.default_rng(10)
    n = 4000
    W = rng.standard_normal((n, 1))
    A = (rng.random(n) < 0.5).astype(float)
    Y = (rng.random(n) + 0.25 * A)[:, None]
    table = ObservationTable(A, W, Y, ("y",))
    nf = fit_nuisance(table, NuisanceConfig(outcome_family="gaussian_identity"), ("sqte",))
    result, infl = estimate_sqte(table, nf)
    assert abs(result.tau[0] - 0.5) <= 0.1
    assert abs(result.components["iqr"][0] - 0.5) <= 0.05
    assert result.sigma[0] > 0


def test_sqte_concentrated_control_flags_iqr():
    rng = np.random.default_rng(11)
    n = 400
    A = (rng.random(n) < 0.5).astype(float)
    Y = np.where(A == 1, rng.standard_normal(n) + 5.0, 2.0)[:, None]
    table = ObservationTable(A, rng.standard_normal((n, 1)), Y, ("y",))
    nf = fit_nuisance(table, NuisanceConfig(outcome_family="gaussian_identity"), ("sqte",))
    result, _ = estimate_sqte(table, nf)
    assert result.degenerate[0] and "iqr_floor" in result.flags[0]


def test_rho_validation_and_dispatch():
    table, nf = _two_subjects()
    with pytest.raises(ValueError):
        estimate_qte(table, nf, rho=1.5)
    with pytest.raises(ValueError):
        estimate(table, nf, "cate")
    assert estimate(table, nf, "ATE")[0].estimand == "ate"


# ----------------------------------------------------------------- variance


def test_variance_examples():
    assert variance_from_influence(np.array([[1.0], [-1.0]]))[0] == 1.0
    assert variance_from_influence(np.full((5, 1), 3.0))[0] == 0.0
    with pytest.raises(ValueError):
        variance_from_influence(np.ones((1, 3)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 200))
def test_variance_two_pass_oracle(seed, n):
    X = np.random.default_rng(seed).standard_normal((n, 3)) * 5 + 2
    mean = [sum(X[:, j]) / n for j in range(3)]
    oracle = [sum((x - mean[j]) ** 2 for x in X[:, j]) / n for j in range(3)]
    np.testing.assert_allclose(variance_from_influence(X), oracle, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), shift=st.floats(-100, 100))
def test_centering_invariants(seed, shift):
    rng = np.random.default_rng(seed)
    n, p = 50, 3
    table = ObservationTable(np.arange(n) % 2, rng.standard_normal((n, 1)), rng.standard_normal((n, p)), ("a", "b", "c"))
    nf = _fixed_nuisance(table, np.full(n, 0.5), {(1, 1): 0.0, (0, 1): 0.0})
    raw = rng.standard_normal((n, p)) * 3
    tau = raw.mean(axis=0)
    args = (np.zeros(p, bool), [set() for _ in range(p)], {}, None)
    r1, i1 = _finish("ate", table, nf, tau, raw, *args)
    raw2 = raw.copy()
    raw2[:, 1] += shift
    r2, i2 = _finish("ate", table, nf, tau, raw2, *args)
    np.testing.assert_allclose(i1.values.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(i1.sigma**2, np.var(i1.values, axis=0), rtol=1e-12)
    np.testing.assert_allclose(r2.t, r1.t, rtol=1e-9)
