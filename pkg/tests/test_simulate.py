import numpy as np
import pytest
from scipy.stats import spearmanr

import multidr.simulate as sim_mod
from multidr.nuisance import NuisanceError
from multidr.simulate import (
    DgpConfig,
    ExperimentError,
    SimReport,
    TestParams,
    _draw_active,
    activity_weights,
    generate_dgp,
    run_experiment,
)


def test_config_defaults_and_validation():
    assert (DgpConfig().theta_max, DgpConfig().beta_r) == (1.0, 0.5)
    med = DgpConfig(scenario="median_shift")
    assert (med.theta_max, med.beta_r) == (10.0, 2.0)
    assert DgpConfig(theta_max=3.0).theta_max == 3.0
    for bad in ({"p": 0}, {"active_count": 501}, {"scenario": "variance_shift"}, {"lognormal_mode": "x"}):
        with pytest.raises(ValueError):
            DgpConfig(**bad)


def test_large_run_config_accepted():
    cfg = DgpConfig(p=8000, active_count=200, d=5, m=100, n=400, scenario="mean_shift", theta_max=1.0, beta_r=0.5)
    data = generate_dgp(cfg)
    assert data.table.p == 8000 and len(data.truth) == 200 == len(set(data.truth))


def test_same_seed_bit_identical():
    cfg = DgpConfig(p=40, n=60, active_count=5, scenario="median_shift", seed=11)
    a, b = generate_dgp(cfg), generate_dgp(cfg)
    assert a.table.outcomes.tobytes() == b.table.outcomes.tobytes()
    assert a.table.covariates.tobytes() == b.table.covariates.tobytes()
    assert a.truth == b.truth
    c = generate_dgp(DgpConfig(p=40, n=60, active_count=5, scenario="median_shift", seed=12))
    assert c.table.outcomes.tobytes() != a.table.outcomes.tobytes()


def test_null_dgp():
    data = generate_dgp(DgpConfig(p=30, n=50, active_count=0))
    assert data.truth == ()
    assert np.all(data.effect_sizes == 0.0)


def test_treatment_and_structure():
    data = generate_dgp(DgpConfig(p=10, n=3000, d=5, active_count=2, seed=3))
    t = data.table
    assert (t.n, t.q, t.p) == (3000, 6, 10)
    assert t.outcome_names[0] == "gene1" and t.covariate_names[1:] == tuple(f"w{k}" for k in range(1, 6))
    assert np.all(t.outcomes == np.rint(t.outcomes)) and np.all(t.outcomes >= 0)
    expected = 1 / (1 + np.exp(t.covariates[:, 1:].sum(axis=1) / 6))
    np.testing.assert_allclose(data.propensity, expected)
    # realised treatment rate tracks the propensity model
    assert abs(t.treatment.mean() - expected.mean()) < 0.03
    Y = np.where(t.treatment[:, None] == 1, data.potential[1], data.potential[0])
    np.testing.assert_array_equal(Y, t.outcomes)


def test_mean_shift_gap_matches_signed_signal():
    cfg = DgpConfig(p=30, n=10_000, m=20, active_count=6, seed=5)
    data = generate_dgp(cfg)
    Y0, Y1 = data.potential
    lam = data.cell_means
    for j in data.truth:
        s_delta = data.effect_sizes[j]
        gap = (Y1[:, j] - Y0[:, j]).mean()
        se = (Y1[:, j] - Y0[:, j]).std(ddof=1) / np.sqrt(cfg.n)
        # conditional on W the expected gap is m * (max(lam + s delta, floor) - lam)
        expected = cfg.m * np.mean(np.maximum(lam[:, j] + s_delta, sim_mod.LAMBDA_FLOOR) - lam[:, j])
        assert abs(gap - expected) <= 4 * se
        if s_delta > 0:
            assert expected == pytest.approx(cfg.m * s_delta)
    inactive = [j for j in range(cfg.p) if j not in data.truth]
    assert np.all(data.effect_sizes[inactive] == 0)


def test_median_shift_matches_mean_not_median():
    cfg = DgpConfig(p=20, n=10_000, m=20, active_count=4, scenario="median_shift", theta_max=0.8, beta_r=1.0, seed=6)
    data = generate_dgp(cfg)
    Y0, Y1 = data.potential
    for j in data.truth:
        diff = Y1[:, j] - Y0[:, j]
        se = diff.std(ddof=1) / np.sqrt(cfg.n)
        # rounding LogNormal cells adds at most a small bias per cell
        assert abs(diff.mean()) <= 4 * se + 0.02 * cfg.m
        if data.effect_sizes[j] > 0.5:
            assert np.median(Y1[:, j]) < np.median(Y0[:, j])


def test_literal_lognormal_mode_runs():
    data = generate_dgp(DgpConfig(p=10, n=40, m=5, active_count=2, scenario="median_shift", lognormal_mode="literal", seed=1))
    assert np.all(np.isfinite(data.table.outcomes))


def test_active_draw_distinct_and_weighted():
    rng = np.random.default_rng(7)
    weights = np.linspace(0.1, 3.0, 50)
    weights /= weights.sum()
    counts = np.zeros(50)
    for _ in range(400):
        chosen = _draw_active(rng, weights, 5)
        assert chosen.size == 5 == np.unique(chosen).size
        counts[chosen] += 1
    assert spearmanr(counts, weights).statistic > 0.8


def test_activity_weights_follow_dispersion():
    rng = np.random.default_rng(8)
    b = np.column_stack([np.ones(40), rng.normal(0, 0.5, (40, 4))])
    w = activity_weights(b, np.random.default_rng(9))
    assert w.sum() == pytest.approx(1.0) and np.all(w > 0)
    # outcomes with larger spread of the log-mean get larger weights
    spread = np.exp(1 + 0.5 * (b[:, 1:] ** 2).sum(axis=1))
    assert spearmanr(w, spread).statistic > 0.5


# ----------------------------------------------------------------- runner


def test_null_experiment():
    cfg = DgpConfig(p=30, n=120, active_count=0, seed=2)
    report = run_experiment(cfg, 1, estimands=("ate",), methods=("stepdown",), test_params=TestParams(B=200))
    (rec,) = report.records
    assert rec["fdp"] == 0.0 and rec["power"] == 0.0 and rec["n_true"] == 0
    with pytest.raises(ValueError):
        run_experiment(cfg, 0)


def test_aggregate_is_mean_of_records():
    cfg = DgpConfig(p=40, n=150, active_count=5, seed=20)
    report = run_experiment(cfg, 3, estimands=("ate", "ste"), methods=("stepdown", "bh", "fwer"), test_params=TestParams(B=200))
    agg = report.aggregate()
    assert set(agg) == {f"{e}/{m}" for e in ("ate", "ste") for m in ("stepdown", "bh", "fwer")}
    for key, row in agg.items():
        recs = [r for r in report.records if f"{r['estimand']}/{r['method']}" == key]
        assert row["replicates"] == 3
        assert row["fdr"] == pytest.approx(np.mean([r["fdp"] for r in recs]))
        assert row["fdx"] == pytest.approx(np.mean([r["exceed"] for r in recs]))
        assert row["power"] == pytest.approx(np.mean([r["power"] for r in recs]))
    assert [r["seed"] for r in report.records if r["estimand"] == "ate" and r["method"] == "bh"] == [20, 21, 22]
    assert set(report.timings) == {"dgp", "nuisance", "estimation", "testing"}
    assert report.summary()["failures"] == 0


def test_replicate_failures(monkeypatch):
    real = sim_mod.fit_nuisance

    def flaky(table, config, estimands):
        if config.seed % 2:
            raise NuisanceError("boom")
        return real(table, config, estimands)

    monkeypatch.setattr(sim_mod, "fit_nuisance", flaky)
    cfg = DgpConfig(p=20, n=100, active_count=2)
    with pytest.raises(ExperimentError):
        run_experiment(cfg, 4, estimands=("ate",), methods=("bh",))
    report = run_experiment(cfg, 4, estimands=("ate",), methods=("bh",), max_failure_rate=0.5)
    assert [f["replicate"] for f in report.failures] == [1, 3]
    assert len(report.records) == 2


def test_report_empty_aggregate():
    assert SimReport(config={}).aggregate() == {}
