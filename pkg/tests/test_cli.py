import json
import warnings
from pathlib import Path

import pandas as pd
import pytest

from bbm_obstacles._branching import DICHOTOMY_WINDOW
from bbm_obstacles._config import SEED_ENV_VAR, ExperimentSpec
from bbm_obstacles._main import main


def _run(command: str, tmp_path: Path, *flags: str, out: str = "out") -> int:
    argv = [command, "--config", str(tmp_path / "missing.toml"), "--out", str(tmp_path / out)]
    try:
        main([*argv, *flags])
    except SystemExit as e:
        return e.code
    return 0


def _report(tmp_path: Path, name: str, out: str = "out") -> dict:
    return json.loads((tmp_path / out / name).read_text())


def _table(tmp_path: Path, name: str, out: str = "out") -> pd.DataFrame:
    return pd.read_csv(tmp_path / out / name, comment="#")


def test_gen_env_count(tmp_path: Path) -> None:
    code = _run("gen-env", tmp_path, "--nu", "1", "--box", "1e4", "--seed", "3")
    assert code == 0
    report = _report(tmp_path, "gen_env.json")
    assert 9700 <= report["count"] <= 10300
    assert report["provenance"]["seed"] == 3
    lines = (tmp_path / "out" / "points.csv").read_text().splitlines()
    assert lines[0].startswith("# spec_hash=")
    assert len(lines) == report["count"] + 1


def test_gen_env_empty_box(tmp_path: Path) -> None:
    assert _run("gen-env", tmp_path, "--box", "0") == 0
    report = _report(tmp_path, "gen_env.json")
    assert report["count"] == 0
    assert report["density"] is None


def test_gen_env_is_deterministic(tmp_path: Path) -> None:
    flags = ("--d", "2", "--nu", "0.5", "--box", "30", "--ell", "5", "--seed", "8")
    assert _run("gen-env", tmp_path, *flags, out="first") == 0
    assert _run("gen-env", tmp_path, *flags, out="second") == 0
    for name in ("points.csv", "gen_env.json"):
        assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes()


def test_growth_curve_independent_of_workers(tmp_path: Path) -> None:
    flags = ("--replicates", "6", "--t-max", "3", "--seed", "1")
    serial = _run("growth-curve", tmp_path, *flags, out="serial")
    parallel = _run("growth-curve", tmp_path, *flags, "--workers", "2", out="parallel")
    assert serial == parallel
    for name in ("growth_curve.csv", "replicates.csv", "growth_curve.json"):
        assert (tmp_path / "serial" / name).read_bytes() == (
            tmp_path / "parallel" / name
        ).read_bytes()


def test_growth_curve_columns(tmp_path: Path) -> None:
    _run("growth-curve", tmp_path, "--replicates", "4", "--t-max", "3")
    frame = _table(tmp_path, "growth_curve.csv")
    assert frame["t"].tolist() == [0.0, 1.0, 2.0, 3.0]
    for column in (
        "mean_count",
        "r_t",
        "(log t)^{2/d}*(r_t-beta)",
        "t^{2/(d+2)}*(r_t-beta)",
        "predicted_log_mass_quenched",
        "predicted_rate_annealed",
    ):
        assert column in frame.columns
    report = _report(tmp_path, "growth_curve.json")
    assert report["runs"] == 4
    assert report["mode"] == "quenched"
    assert report["pathwise_gate_checked"]


def test_growth_curve_without_obstacles(tmp_path: Path) -> None:
    code = _run("growth-curve", tmp_path, "--nu", "0", "--replicates", "3", "--annealed")
    assert code == 0
    frame = _table(tmp_path, "growth_curve.csv")
    assert "predicted_log_mass_quenched" not in frame.columns
    report = _report(tmp_path, "growth_curve.json")
    assert report["mode"] == "annealed"
    assert not report["pathwise_gate_checked"]


def test_growth_curve_truncation(tmp_path: Path) -> None:
    code = _run("growth-curve", tmp_path, "--nu", "0", "--cap", "2", "--t-max", "5", "--replicates", "5")
    assert code == 3
    assert _report(tmp_path, "growth_curve.json")["truncated_runs"] >= 1


def test_fk_compare_without_obstacles(tmp_path: Path) -> None:
    flags = ("--nu", "0", "--t-max", "2", "--dt", "0.1", "--paths", "10", "--replicates", "400")
    assert _run("fk-compare", tmp_path, *flags) == 0
    report = _report(tmp_path, "fk_compare.json")
    assert report["exact_free_mass"]
    frame = _table(tmp_path, "fk_compare.csv")
    assert frame["t"].tolist() == [1.0, 2.0]
    assert frame["se"].tolist() == [0.0, 0.0]


def test_fk_compare_needs_positive_time(tmp_path: Path) -> None:
    assert _run("fk-compare", tmp_path, "--obs", "0", "--t-max", "1") == 2


def test_clearing_stats(tmp_path: Path) -> None:
    assert _run("clearing-stats", tmp_path, "--replicates", "5", "--ell", "20") == 0
    frame = _table(tmp_path, "clearings.csv")
    assert list(frame.columns) == ["run", "center_0", "radius", "predicted"]
    assert (frame["radius"] >= frame["predicted"]).all()
    assert _report(tmp_path, "clearing_stats.json")["R_0"] == pytest.approx(0.5)


@pytest.mark.parametrize(
    "command, flags",
    [
        pytest.param("growth-curve", ["--beta", "0"], id="rate"),
        pytest.param("growth-curve", ["--d", "2", "--drift", "1"], id="drift"),
        pytest.param("growth-curve", ["--replicates", "0"], id="replicates"),
        pytest.param("dichotomy", ["--d", "2"], id="dichotomy-dimension"),
        pytest.param("dichotomy", ["--nu", "0"], id="dichotomy-obstacles"),
        pytest.param("gen-env", ["--obs", "one,two"], id="malformed-list"),
    ],
)
def test_invalid_configuration_exits_2(command: str, flags: list, tmp_path: Path) -> None:
    assert _run(command, tmp_path, *flags) == 2


def test_seed_from_environment(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv(SEED_ENV_VAR, "5")
    assert _run("gen-env", tmp_path, "--box", "10") == 0
    assert _report(tmp_path, "gen_env.json")["provenance"]["seed"] == 5
    assert _run("gen-env", tmp_path, "--box", "10", "--seed", "6") == 0
    assert _report(tmp_path, "gen_env.json")["provenance"]["seed"] == 6


def test_malformed_seed_in_environment(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv(SEED_ENV_VAR, "five")
    assert _run("gen-env", tmp_path) == 2


def test_configuration_file(tmp_path: Path) -> None:
    config = tmp_path / "experiment.toml"
    config.write_text("nu = 0.5\nbox = 10.0\nseed = 4\n")
    main(["gen-env", "--config", str(config), "--out", str(tmp_path / "out")])
    report = _report(tmp_path, "gen_env.json")
    assert report["box"] == 10.0
    assert report["provenance"]["seed"] == 4


def test_pyproject_table(tmp_path: Path) -> None:
    pyproject = tmp_path / "pyproject.toml"
    pyproject.write_text('[project]\nname = "x"\n\n[tool.bbm_obstacles]\nt-max = 2.5\nd = 2\n')
    spec = ExperimentSpec.from_file(pyproject)
    assert spec.t_max == 2.5
    assert spec.d == 2
    assert spec.obs_times() == (0.0, 1.0, 2.0, 2.5)


@pytest.mark.parametrize(
    "content",
    [
        pytest.param("colour = 'blue'\n", id="unknown-key"),
        pytest.param("nu = \n", id="invalid-toml"),
        pytest.param("beta = -1.0\n", id="invalid-value"),
    ],
)
def test_bad_configuration_file(content: str, tmp_path: Path) -> None:
    config = tmp_path / "experiment.toml"
    config.write_text(content)
    with pytest.raises(SystemExit) as excinfo:
        main(["gen-env", "--config", str(config), "--out", str(tmp_path / "out")])
    assert excinfo.value.code == 2


def test_spec_hash_ignores_how_a_campaign_runs() -> None:
    spec = ExperimentSpec()
    assert spec.override(workers=4, out="elsewhere").spec_hash == spec.spec_hash
    assert spec.override(seed=1).spec_hash != spec.spec_hash


def test_mrca_test_on_fixed_leaf_count(tmp_path: Path) -> None:
    config = tmp_path / "experiment.toml"
    config.write_text("alpha = 0.001\n")
    argv = ["mrca-test", "--config", str(config), "--out", str(tmp_path / "out")]
    main([*argv, "--t-max", "2", "--leaves", "4", "--pairs", "2000", "--seed", "3"])
    report = _report(tmp_path, "mrca_test.json")
    assert report["mean_leaves"] == 4.0
    assert len(report["seeds"]) == len(set(report["seeds"])) == 3
    assert [sum(counts) for counts in report["observed"]] == [2000, 2000, 2000]
    assert report["seeds_passed"] == sum(p > 0.001 for p in report["chi_square_pvalues"])
    assert report["seeds_passed"] >= 2
    assert report["passed"]


def test_mrca_test_needs_two_of_three_seeds(tmp_path: Path) -> None:
    # With alpha close to 1 no seed can pass.
    flags = ("--t-max", "2", "--leaves", "4", "--pairs", "200", "--seed", "3")
    config = tmp_path / "experiment.toml"
    config.write_text("alpha = 0.999999\n")
    argv = ["mrca-test", "--config", str(config), "--out", str(tmp_path / "out")]
    with pytest.raises(SystemExit) as excinfo:
        main([*argv, *flags])
    assert excinfo.value.code == 1
    report = _report(tmp_path, "mrca_test.json")
    assert report["seeds_passed"] < 2
    assert not report["passed"]


@pytest.mark.slow
def test_mrca_test_ks(tmp_path: Path) -> None:
    assert _run("mrca-test", tmp_path, "--t-max", "3", "--pairs", "50000", "--seed", "2") == 0
    report = _report(tmp_path, "mrca_test.json")
    assert report["ks_statistic"] < 0.01
    frame = _table(tmp_path, "mrca.csv")
    assert frame["F(u)"].iloc[-1] == pytest.approx(1.0)


def test_growth_curve_all_runs_truncated(tmp_path: Path) -> None:
    flags = ("--nu", "0", "--cap", "1", "--t-max", "10", "--replicates", "3")
    with warnings.catch_warnings():
        warnings.simplefilter("error", RuntimeWarning)
        code = _run("growth-curve", tmp_path, *flags)
    assert code == 3
    assert _report(tmp_path, "growth_curve.json")["truncated_runs"] == 3
    frame = _table(tmp_path, "growth_curve.csv")
    assert frame["mean_count"].isna().all()


def test_fk_compare_with_obstacles(tmp_path: Path) -> None:
    flags = (
        "--nu", "1", "--a", "0.3", "--t-max", "2", "--dt", "0.02",
        "--paths", "500", "--replicates", "400", "--envs", "4", "--seed", "2",
    )
    assert _run("fk-compare", tmp_path, *flags) == 0
    report = _report(tmp_path, "fk_compare.json")
    refinement = report["refinement"]
    assert abs(refinement["shift"]) <= 2 * refinement["combined_se"]
    annealed = report["annealed"]
    assert annealed["times"] == [1.0, 2.0]
    assert 0 < annealed["deficit"][0] < annealed["deficit"][1]
    assert annealed["predicted_slope"] == pytest.approx(1 / 3)
    frame = _table(tmp_path, "annealed.csv")
    assert frame["deficit"].tolist() == pytest.approx(annealed["deficit"])


@pytest.mark.slow
def test_fk_compare_at_t4(tmp_path: Path) -> None:
    flags = (
        "--nu", "0.5", "--a", "0.3", "--beta", "1", "--t-max", "4", "--obs", "4",
        "--dt", "0.005", "--paths", "4000", "--replicates", "2000", "--seed", "12",
        "--workers", "2",
    )
    assert _run("fk-compare", tmp_path, *flags) == 0
    report = _report(tmp_path, "fk_compare.json")
    assert report["max_abs_z"] <= 3.0
    assert report["truncated_runs"] == 0


@pytest.mark.slow
def test_dichotomy_command(tmp_path: Path) -> None:
    flags = (
        "--nu", "0.05", "--a", "0.1", "--drift", "1", "--betas", "0.3,0.8",
        "--t-max", "20", "--replicates", "40", "--seed", "1", "--workers", "2",
    )
    assert _run("dichotomy", tmp_path, *flags) == 0
    report = _report(tmp_path, "dichotomy.json")
    assert report["window"] == DICHOTOMY_WINDOW
    labels = [r["label"] for r in report["reports"]]
    assert labels == ["extinct-like", "growing"]
    assert report["reports"][1]["slope_within_tolerance"]
    frame = _table(tmp_path, "dichotomy.csv")
    assert list(frame.columns) == [
        "t",
        "median_log_local_0.3",
        "surviving_log_local_0.3",
        "median_log_local_0.8",
        "surviving_log_local_0.8",
    ]
