import json
import shutil
import subprocess

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multidr import cli
from multidr import io as mio
from multidr.data import ObservationTable, load_observations, write_observations
from multidr.estimands import estimate
from multidr.nuisance import fit_nuisance
from multidr.simulate import DgpConfig, generate_dgp


def _run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _toy_csv(path, n=10, p=3, seed=0, zeros=False):
    rng = np.random.default_rng(seed)
    A = np.array([0, 1] * (n // 2), dtype=float)
    W = rng.standard_normal((n, 1))
    Y = np.zeros((n, p)) if zeros else rng.poisson(3.0, (n, p)).astype(float)
    if zeros:
        Y[: n // 5] = rng.poisson(2.0, (n // 5, p)) + 1.0  # medians stay at zero
    table = ObservationTable(A, W, Y, tuple(f"gene{j + 1}" for j in range(p)), ("w1",))
    write_observations(table, path)
    return table


# ---------------------------------------------------------------------- io


def test_influence_roundtrip_bit_exact(tmp_path):
    data = generate_dgp(DgpConfig(p=15, n=80, active_count=3, seed=1))
    result, infl = estimate(data.table, fit_nuisance(data.table), "ate")
    meta = mio.write_influence(infl, tmp_path / "infl.bin", seed=1)
    assert meta["order"] == "column-major" and meta["byte_order"] == "little"
    raw = np.frombuffer((tmp_path / "infl.bin").read_bytes(), dtype="<f8")
    np.testing.assert_array_equal(raw[: infl.n], infl.values[:, 0])  # first column first
    back, meta2 = mio.read_influence(tmp_path / "infl.bin", result.flags)
    assert back.values.tobytes() == np.ascontiguousarray(infl.values).tobytes()
    assert back.sigma.tobytes() == infl.sigma.tobytes()
    assert meta2["n"] == 80 and meta2["p"] == 15 and meta2["seed"] == 1


def test_influence_missing_or_corrupt(tmp_path):
    with pytest.raises(FileNotFoundError):
        mio.read_influence(tmp_path / "none.bin")
    (tmp_path / "x.bin").write_bytes(b"\0" * 16)
    mio.dump_json({"format": "multidr-influence-v1", "n": 3, "p": 1, "estimand": "ate"}, tmp_path / "x.bin.json")
    with pytest.raises(ValueError):
        mio.read_influence(tmp_path / "x.bin")


@settings(max_examples=30, deadline=None)
@given(vals=st.lists(st.one_of(st.floats(allow_nan=False, allow_infinity=False), st.just(float("nan"))), min_size=1, max_size=6))
def test_result_json_roundtrip(tmp_path_factory, vals):
    from multidr.estimands import EstimandResult

    p = len(vals)
    arr = np.array(vals)
    res = EstimandResult(
        "ste", arr, np.abs(arr), arr, 10, np.zeros(p), np.isnan(arr), tuple(frozenset({"x"}) if v != v else frozenset() for v in vals),
        tuple(f"g{j}" for j in range(p)), {"beta0": arr}, False,
    )
    path = tmp_path_factory.mktemp("r") / "r.json"
    mio.write_result_json(res, path)
    back = mio.read_result_json(path)
    for a, b in ((res.tau, back.tau), (res.sigma, back.sigma), (res.components["beta0"], back.components["beta0"])):
        np.testing.assert_array_equal(a, b)
    assert back.flags == res.flags and back.outcome_names == res.outcome_names


# --------------------------------------------------------------------- cli


def test_estimate_toy_tsv_shape(tmp_path, capsys):
    _toy_csv(tmp_path / "toy.csv")
    code, out, err = _run(["estimate", "--input", tmp_path / "toy.csv", "--out", tmp_path / "o"], capsys)
    assert code == 0, err
    lines = (tmp_path / "o" / "result.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["name", "tau", "sigma", "t", "flags"]
    assert len(lines) == 4
    assert json.loads(out)["p"] == 3
    assert (tmp_path / "o" / "influence.bin.json").exists()


def test_estimate_is_reproducible(tmp_path, capsys):
    data = generate_dgp(DgpConfig(p=12, n=150, active_count=3, seed=2))
    write_observations(data.table, tmp_path / "d.csv")
    args = ["estimate", "--input", tmp_path / "d.csv", "--estimand", "ste", "--crossfit-k", 5, "--seed", 7]
    assert _run(args + ["--out", tmp_path / "a"], capsys)[0] == 0
    assert _run(args + ["--out", tmp_path / "b"], capsys)[0] == 0
    for name in ("result.tsv", "result.json", "influence.bin", "influence.bin.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_qte_zero_medians_all_degenerate(tmp_path, capsys, caplog):
    _toy_csv(tmp_path / "z.csv", n=40, p=2, zeros=True)
    code, _, _ = _run(["estimate", "--input", tmp_path / "z.csv", "--estimand", "qte", "--rho", 0.5, "--out", tmp_path / "o"], capsys)
    assert code == 0
    assert any(r.levelname == "WARNING" and "degenerate" in r.getMessage() for r in caplog.records)
    res = mio.read_result_json(tmp_path / "o" / "result.json")
    assert res.degenerate.all()
    assert all("zero_quantile" in f for f in res.flags)


def test_test_command_bh_and_errors(tmp_path, capsys):
    data = generate_dgp(DgpConfig(p=20, n=200, active_count=4, seed=3))
    write_observations(data.table, tmp_path / "d.csv")
    assert _run(["estimate", "--input", tmp_path / "d.csv", "--out", tmp_path / "e"], capsys)[0] == 0
    code, out, _ = _run(["test", "--result", tmp_path / "e" / "result.json", "--influence", tmp_path / "e" / "influence.bin",
                         "--method", "bh", "--q", 0.05, "--out", tmp_path / "t"], capsys)
    assert code == 0
    rows = (tmp_path / "t" / "decisions.tsv").read_text().splitlines()
    assert rows[0].split("\t") == ["index", "name", "t", "rejected", "status"] and len(rows) == 21
    ds = json.loads((tmp_path / "t" / "discoveries.json").read_text())
    assert ds["params"]["method"] == "bh"

    code, _, err = _run(["test", "--result", tmp_path / "e" / "result.json", "--influence", tmp_path / "nope.bin"], capsys)
    assert code == 2
    payload = json.loads(err.strip().splitlines()[-1])
    assert "nope.bin" in payload["error"]["path"]

    (tmp_path / "e" / "influence.bin.json").unlink()
    code, _, err = _run(["test", "--result", tmp_path / "e" / "result.json", "--influence", tmp_path / "e" / "influence.bin"], capsys)
    assert code == 2 and "influence.bin.json" in err


def test_usage_errors(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"bogus": 1}))
    assert _run(["simulate", "--config", tmp_path / "bad.json"], capsys)[0] == 2
    assert _run(["simulate", "--reps", 0, "--out", tmp_path / "s"], capsys)[0] == 2
    assert _run(["benchmark", "--reps", 0, "--out", tmp_path / "s"], capsys)[0] == 2
    assert _run(["estimate", "--input", tmp_path / "missing.csv"], capsys)[0] == 2
    assert _run(["frobnicate"], capsys)[0] == 2
    assert _run([], capsys)[0] == 2
    (tmp_path / "x.csv").write_text("A,w1,gene1\n0,1,2\n2,1,2\n")
    code, _, err = _run(["estimate", "--input", tmp_path / "x.csv"], capsys)
    assert code == 2 and "row 2" in err


def test_computation_error_exit_one(tmp_path, capsys):
    # treatment perfectly separated by the covariate: propensity fit cannot converge
    w = np.linspace(-1, 1, 20)
    table = ObservationTable((w > 0).astype(float), w[:, None], np.ones((20, 1)), ("gene1",), ("w1",))
    write_observations(table, tmp_path / "sep.csv")
    code, _, err = _run(["estimate", "--input", tmp_path / "sep.csv", "--out", tmp_path / "o"], capsys)
    assert code == 1
    assert json.loads(err.strip().splitlines()[-1])["error"]["type"] == "computation"


def test_print_config_roundtrip(tmp_path, capsys):
    code, out, _ = _run(["simulate", "--p", 30, "--n", 80, "--active-count", 3, "--reps", 2, "--bootstrap", 100,
                         "--estimands", "ate", "--seed", 4, "--out", tmp_path / "a", "--print-config"], capsys)
    assert code == 0
    cfg = json.loads(out)
    assert cfg["p"] == 30 and cfg["theta_max"] is None and cfg["estimands"] == ["ate"]
    (tmp_path / "cfg.json").write_text(out)
    code, out2, _ = _run(["simulate", "--config", tmp_path / "cfg.json", "--print-config"], capsys)
    assert json.loads(out2) == cfg
    # flags win over the file
    code, out3, _ = _run(["simulate", "--config", tmp_path / "cfg.json", "--p", 31, "--print-config"], capsys)
    assert json.loads(out3)["p"] == 31


def test_simulate_outputs_and_determinism(tmp_path, capsys):
    args = ["simulate", "--p", 30, "--n", 100, "--active-count", 3, "--reps", 2, "--bootstrap", 100,
            "--estimands", "ate", "--methods", "stepdown", "bh", "--seed", 5, "--save-data"]
    assert _run(args + ["--out", tmp_path / "a"], capsys)[0] == 0
    assert _run(args + ["--out", tmp_path / "b"], capsys)[0] == 0
    for name in ("replicates.tsv", "plot_data.tsv", "data/rep001.csv", "data/rep001.truth.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = (tmp_path / "a" / "replicates.tsv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 2
    agg = json.loads((tmp_path / "a" / "aggregate.json").read_text())
    assert set(agg["aggregate"]) == {"ate/stepdown", "ate/bh"}
    truth = json.loads((tmp_path / "a" / "data" / "rep000.truth.json").read_text())
    table = load_observations(tmp_path / "a" / "data" / "rep000.csv", truth["schema"])
    regen = generate_dgp(DgpConfig(p=30, n=100, active_count=3, seed=5))
    assert table.outcomes.tobytes() == regen.table.outcomes.tobytes()
    assert truth["truth"] == list(regen.truth)


def test_benchmark_plot_rows_and_long_running(tmp_path, capsys):
    code, out, _ = _run(["benchmark", "--p", 25, "--n-values", 80, 120, "--active-count", 3, "--reps", 1,
                         "--bootstrap", 100, "--estimands", "ate", "--methods", "stepdown", "--out", tmp_path / "b"], capsys)
    assert code == 0
    rows = (tmp_path / "b" / "plot_data.tsv").read_text().splitlines()
    assert rows[0].split("\t")[:3] == ["estimand", "method", "n"]
    assert [r.split("\t")[2] for r in rows[1:]] == ["80", "120"]
    meta = json.loads((tmp_path / "b" / "benchmark.json").read_text())
    assert meta["long_running"] is False
    assert set(meta["phases"]["80"]) == {"dgp", "nuisance", "estimation", "testing"}
    # a large configuration is flagged without running it
    code, out, _ = _run(["benchmark", "--p", 8000, "--reps", 50, "--print-config"], capsys)
    cfg = json.loads(out)
    assert cfg["reps"] * cfg["p"] * cfg["n"] > cli.LONG_RUNNING_WORK


def test_file_pipeline_matches_in_process(tmp_path, capsys):
    data = generate_dgp(DgpConfig(p=25, n=200, active_count=5, seed=8))
    write_observations(data.table, tmp_path / "d.csv")
    assert _run(["estimate", "--input", tmp_path / "d.csv", "--estimand", "ate", "--seed", 3, "--out", tmp_path / "e"], capsys)[0] == 0
    assert _run(["test", "--result", tmp_path / "e" / "result.json", "--influence", tmp_path / "e" / "influence.bin",
                 "--bootstrap", 300, "--seed", 3, "--out", tmp_path / "t"], capsys)[0] == 0

    cfg = cli.resolve_config("estimate", {}, {"estimand": "ate", "seed": 3})
    result, infl = cli.estimate_table(data.table, cfg)
    tcfg = cli.resolve_config("test", {}, {"bootstrap": 300, "seed": 3})
    ds = cli.apply_test(result, infl, tcfg)
    mem = tmp_path / "mem"
    mem.mkdir()
    cli.write_estimate(mem, result, infl, cfg)
    cli.write_test(mem, ds, result)
    for sub, name in (("e", "result.json"), ("e", "influence.bin"), ("t", "discoveries.json"), ("t", "decisions.tsv")):
        assert (tmp_path / sub / name).read_bytes() == (mem / name).read_bytes(), name


@pytest.mark.skipif(shutil.which("multidr") is None, reason="console script not installed")
def test_console_script_version():
    proc = subprocess.run(["multidr", "version"], capture_output=True, text=True, check=True)
    assert proc.stdout.startswith("multidr ")
