"""Command-line interface: exit codes, artifacts, determinism."""

import datetime
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from qfdyn import cli
from qfdyn.cli import RECOVERY_TRUTH, main
from qfdyn.mcmc import target_rate
from qfdyn.model import BLOCKS, N_PARAMS, NonFiniteLikelihoodError, read_xi
from qfdyn.var_scaling import read_external_forecasts, read_score_report

DATA = Path(__file__).parent / "data"

# small enough to keep every command in test time, large enough for the
# adaptation and the rolling window to do real work
TINY_SAMPLER = [
    "--n-epo", "120", "--n-disc", "30", "--j-min", "1", "--j-max", "1",
    "--eps-mapc", "0.5", "--n-delta", "30",
    "--n-sample", "300", "--n-sample-disc", "60",
]


def make_ticks(path, n_days=38, per_day=70, seed=5):
    """Minute prices with heavy-tailed innovations on consecutive dates."""
    rng = np.random.default_rng(seed)
    rows = ["timestamp,price"]
    d0 = datetime.date(2001, 3, 5)
    logp = np.log(100.0)
    for k in range(n_days):
        date = d0 + datetime.timedelta(days=k)
        minutes = 570 + np.arange(per_day) * 4
        for m, step in zip(minutes, 6e-4 * rng.standard_t(5, size=per_day)):
            logp += step
            rows.append(f"{date} {m // 60:02d}:{m % 60:02d},"
                        f"{np.exp(logp):.6f}")
    Path(path).write_text("\n".join(rows) + "\n")


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Shared clean -> symbolize -> fit artifacts for the read-only tests."""
    wd = tmp_path_factory.mktemp("cli")
    make_ticks(wd / "ticks.csv")
    assert main(["clean", "--ticks", str(wd / "ticks.csv"),
                 "--out", str(wd / "cleaned.csv"),
                 "--removals", str(wd / "removals.csv"),
                 "--instrument", "SPX"]) == 0
    assert main(["symbolize", "--ticks", str(wd / "cleaned.csv"),
                 "--out", str(wd / "xi.csv")]) == 0
    assert main(["fit", "--xi", str(wd / "xi.csv"),
                 "--draws", str(wd / "draws.csv"),
                 "--meta", str(wd / "meta.json"),
                 "--summary", str(wd / "summary.csv"),
                 "--seed", "4", *TINY_SAMPLER]) == 0
    return wd


# -- exit codes --------------------------------------------------------------


def test_usage_errors_exit_1(tmp_path):
    assert main([]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["clean"]) == 1
    assert main(["fit", "--ci", "--xi", "x", "--draws", "d",
                 "--meta", "m"]) == 1
    assert main(["var-backtest", "--xi", "x", "--returns", "r",
                 "--out", "o", "--scores", "s",
                 "--external", "nolabel"]) == 1


def test_help_exits_0():
    assert main(["--help"]) == 0


def test_missing_input_exits_2(tmp_path):
    assert main(["clean", "--ticks", str(tmp_path / "nope.csv"),
                 "--out", str(tmp_path / "o.csv"),
                 "--removals", str(tmp_path / "r.csv"),
                 "--instrument", "SPX"]) == 2
    assert main(["fit", "--xi", str(tmp_path / "nope.csv"),
                 "--draws", str(tmp_path / "d.csv"),
                 "--meta", str(tmp_path / "m.json")]) == 2


def test_exception_to_exit_code_mapping():
    assert cli._code_for(cli.UsageError("x")) == 1
    assert cli._code_for(ValueError("x")) == 2
    assert cli._code_for(OSError("x")) == 2
    assert cli._code_for(NonFiniteLikelihoodError("x")) == 3
    assert cli._code_for(np.linalg.LinAlgError("x")) == 3


def test_numerical_failure_exits_3(workdir, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NonFiniteLikelihoodError("log-likelihood is not finite")
    monkeypatch.setattr(cli, "run_adaptive", boom)
    assert main(["fit", "--xi", str(workdir / "xi.csv"),
                 "--draws", str(tmp_path / "d.csv"),
                 "--meta", str(tmp_path / "m.json")]) == 3


def test_console_script_installed():
    out = subprocess.run(["qfdyn", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "pipeline" in out.stdout


# -- clean -------------------------------------------------------------------


def test_clean_matches_shipped_fixture(tmp_path, capsys):
    assert main(["clean", "--ticks", str(DATA / "ticks_fixture.csv"),
                 "--out", str(tmp_path / "clean.csv"),
                 "--removals", str(tmp_path / "removals.csv"),
                 "--instrument", "SPX"]) == 0
    got = (tmp_path / "removals.csv").read_bytes()
    assert got == (DATA / "ticks_fixture_removals.csv").read_bytes()
    summary = capsys.readouterr().out
    assert "SPX" in summary and "16.47" in summary


def test_clean_rerun_on_own_output_is_identity(tmp_path):
    args = ["clean", "--removals", str(tmp_path / "rem.csv"),
            "--instrument", "SPX"]
    assert main(args + ["--ticks", str(DATA / "ticks_fixture.csv"),
                        "--out", str(tmp_path / "c1.csv")]) == 0
    assert main(args + ["--ticks", str(tmp_path / "c1.csv"),
                        "--out", str(tmp_path / "c2.csv")]) == 0
    assert (tmp_path / "c1.csv").read_bytes() == \
        (tmp_path / "c2.csv").read_bytes()
    assert len(pd.read_csv(tmp_path / "rem.csv")) == 0


def test_clean_empty_input(tmp_path, capsys):
    src = tmp_path / "empty.csv"
    src.write_text("timestamp,price\n")
    assert main(["clean", "--ticks", str(src),
                 "--out", str(tmp_path / "o.csv"),
                 "--removals", str(tmp_path / "r.csv"),
                 "--instrument", "SPX"]) == 0
    assert "0" in capsys.readouterr().out
    assert (tmp_path / "o.csv").read_text() == "timestamp,price\n"


# -- symbolize ---------------------------------------------------------------


def test_symbolize_output_feeds_the_model(workdir):
    xi = read_xi(workdir / "xi.csv")
    assert len(xi) == 38
    assert np.all(xi.values[:, 3] >= 0.0)


def test_symbolize_skips_short_days(workdir, tmp_path, capsys):
    assert main(["symbolize", "--ticks", str(workdir / "cleaned.csv"),
                 "--out", str(tmp_path / "xi.csv"),
                 "--min-obs", "1000"]) == 2
    assert "no day has enough observations" in capsys.readouterr().err


# -- fit ---------------------------------------------------------------------


def test_fit_artifacts(workdir):
    draws = pd.read_csv(workdir / "draws.csv")
    assert draws.shape == (240, N_PARAMS)
    meta = json.loads((workdir / "meta.json").read_text())
    assert meta["seed"] == 4
    assert meta["n_draws"] == 240
    assert len(meta["acceptance"]) == len(BLOCKS)
    summary = pd.read_csv(workdir / "summary.csv")
    assert list(summary.columns) == ["param", "mean", "ci_lo", "ci_hi"]
    assert len(summary) == N_PARAMS


def test_fit_rerun_is_bit_identical(workdir, tmp_path):
    assert main(["fit", "--xi", str(workdir / "xi.csv"),
                 "--draws", str(tmp_path / "draws.csv"),
                 "--meta", str(tmp_path / "meta.json"),
                 "--seed", "4", *TINY_SAMPLER]) == 0
    assert (tmp_path / "draws.csv").read_bytes() == \
        (workdir / "draws.csv").read_bytes()


# -- forecast ----------------------------------------------------------------


def test_forecast_rows_and_levels(workdir, tmp_path):
    out = tmp_path / "fc.csv"
    assert main(["forecast", "--xi", str(workdir / "xi.csv"),
                 "--draws", str(workdir / "draws.csv"),
                 "--out", str(out), "--levels", "0.05,0.5,0.95",
                 "--n-theta", "5"]) == 0
    df = pd.read_csv(out)
    assert list(df.columns) == ["day", "u", "forecast"]
    assert len(df) == 39 * 3
    assert df["day"].iloc[-1] == "next"
    wide = df.pivot(index="day", columns="u", values="forecast")
    assert (wide[0.05] < wide[0.5]).all() and (wide[0.5] < wide[0.95]).all()


def test_forecast_last_rows_only(workdir, tmp_path):
    out = tmp_path / "fc.csv"
    assert main(["forecast", "--xi", str(workdir / "xi.csv"),
                 "--draws", str(workdir / "draws.csv"),
                 "--out", str(out), "--levels", "0.05", "--n-theta", "3",
                 "--last", "2"]) == 0
    df = pd.read_csv(out)
    assert len(df) == 2
    # format doubles as the external-forecast input
    read_external_forecasts(out)


def test_forecast_rejects_foreign_draws(workdir, tmp_path):
    bad = tmp_path / "bad.csv"
    pd.DataFrame({"x": [1.0], "y": [2.0]}).to_csv(bad, index=False)
    assert main(["forecast", "--xi", str(workdir / "xi.csv"),
                 "--draws", str(bad), "--out", str(tmp_path / "o.csv")]) == 2


# -- signal-ratio ------------------------------------------------------------


def test_signal_ratio_table(workdir, tmp_path):
    out = tmp_path / "rsig.csv"
    assert main(["signal-ratio", "--draws", str(workdir / "draws.csv"),
                 "--out", str(out), "--thin", "10", "--m4-sims", "20000",
                 "--m4-thin", "8", "--seed", "1"]) == 0
    df = pd.read_csv(out)
    assert list(df.columns) == ["margin", "point", "lower", "upper", "method"]
    assert list(df["margin"]) == [1, 2, 3, 4]
    assert list(df["method"]) == ["closed-form"] * 3 + ["simulated"]
    assert (df["point"] >= 0).all()


# -- var-backtest ------------------------------------------------------------


def test_var_backtest_alignment_error(workdir, tmp_path, capsys):
    returns = tmp_path / "returns.csv"
    pd.DataFrame({"day": [1, 2, 3], "return": [0.1, -0.2, 0.3]}).to_csv(
        returns, index=False)
    assert main(["var-backtest", "--xi", str(workdir / "xi.csv"),
                 "--returns", str(returns),
                 "--out", str(tmp_path / "o.csv"),
                 "--scores", str(tmp_path / "s.csv")]) == 2
    assert "do not match" in capsys.readouterr().err


def test_var_backtest_with_external_model(workdir, tmp_path):
    xi_df = pd.read_csv(workdir / "xi.csv")
    closes = pd.read_csv(workdir / "cleaned.csv")
    closes["date"] = closes["timestamp"].str[:10]
    last = closes.groupby("date")["price"].last()
    rets = 100.0 * np.diff(np.log(last.to_numpy()))
    xi_df.iloc[1:].to_csv(tmp_path / "xi.csv", index=False)
    pd.DataFrame({"day": xi_df["day"].iloc[1:], "return": rets}).to_csv(
        tmp_path / "returns.csv", index=False)

    base = ["var-backtest", "--xi", str(tmp_path / "xi.csv"),
            "--returns", str(tmp_path / "returns.csv"),
            "--levels", "0.05", "--window", "26", "--refit-every", "7",
            "--n-theta", "3", "--seed", "4", *TINY_SAMPLER]
    out = tmp_path / "var.csv"
    assert main(base + ["--out", str(out),
                        "--scores", str(tmp_path / "scores.csv"),
                        "--s-factors", str(tmp_path / "sf.csv")]) == 0

    fc = pd.read_csv(out)
    assert list(fc.columns) == ["day", "u", "forecast", "realized"]
    sf = pd.read_csv(tmp_path / "sf.csv")
    assert list(sf.columns) == ["day", "u", "s"]
    scores = read_score_report(tmp_path / "scores.csv")
    assert np.isfinite(scores.loc[0.05, "dqf"])

    # an external file carrying the same forecasts must score identically
    fc[["day", "u", "forecast"]].to_csv(tmp_path / "ext.csv", index=False)
    assert main(base + ["--out", str(tmp_path / "var2.csv"),
                        "--scores", str(tmp_path / "scores2.csv"),
                        "--external", f"copy={tmp_path / 'ext.csv'}"]) == 0
    scores2 = read_score_report(tmp_path / "scores2.csv")
    assert scores2.loc[0.05, "copy"] == scores2.loc[0.05, "dqf"]


# -- pipeline ----------------------------------------------------------------

PIPELINE_ARGS = ["--instrument", "SPX", "--seed", "3",
                 "--levels", "0.05", "--window", "26", "--refit-every", "7",
                 "--n-theta", "3", "--rsig-thin", "10",
                 "--m4-sims", "20000", "--m4-thin", "10", *TINY_SAMPLER]

ARTIFACTS = ["cleaned.csv", "removals.csv", "xi.csv", "draws.csv",
             "meta.json", "summary.csv", "forecast.csv", "rsig.csv",
             "daily_returns.csv", "var_forecasts.csv", "s_factors.csv",
             "scores.csv"]


def test_pipeline_end_to_end_and_deterministic(workdir, tmp_path):
    wd1, wd2 = tmp_path / "run1", tmp_path / "run2"
    for wd in (wd1, wd2):
        assert main(["pipeline", "--ticks", str(workdir / "ticks.csv"),
                     "--workdir", str(wd), *PIPELINE_ARGS]) == 0
    for name in ARTIFACTS:
        assert (wd1 / name).exists(), name
        assert (wd1 / name).read_bytes() == (wd2 / name).read_bytes(), name
    scores = read_score_report(wd1 / "scores.csv")
    assert np.isfinite(scores.loc[0.05, "dqf"])
    assert scores.loc[0.05, "dqf"] > 0.0


def test_pipeline_missing_ticks_tags_clean_stage(tmp_path, capsys):
    assert main(["pipeline", "--ticks", str(tmp_path / "nope.csv"),
                 "--workdir", str(tmp_path / "wd"), *PIPELINE_ARGS]) == 2
    assert "stage 'clean' failed" in capsys.readouterr().err


def test_pipeline_tags_failing_stage(workdir, tmp_path, capsys,
                                     monkeypatch):
    def boom(*a, **k):
        raise NonFiniteLikelihoodError("log-likelihood is not finite")
    monkeypatch.setattr(cli, "run_adaptive", boom)
    assert main(["pipeline", "--ticks", str(workdir / "ticks.csv"),
                 "--workdir", str(tmp_path / "wd"), *PIPELINE_ARGS]) == 3
    assert "stage 'fit' failed" in capsys.readouterr().err


# -- simulate-recover --------------------------------------------------------


def test_simulate_recover_truth_column_exact(tmp_path):
    out = tmp_path / "report.csv"
    acc = tmp_path / "acc.csv"
    assert main(["simulate-recover", "--reps", "1", "--days", "60",
                 "--seed", "9", "--out", str(out), "--acceptance", str(acc),
                 *TINY_SAMPLER]) == 0
    report = pd.read_csv(out)
    assert list(report.columns) == ["param", "truth", "mc_mean",
                                    "mc_lo", "mc_hi"]
    assert np.array_equal(report["truth"].to_numpy(), RECOVERY_TRUTH)
    assert np.isfinite(report["mc_mean"]).all()
    acc_df = pd.read_csv(acc)
    assert list(acc_df["dim"]) == [len(b) for b in BLOCKS]
    expect = [target_rate(len(b)) for b in BLOCKS]
    assert np.allclose(acc_df["target"], expect)


def test_simulate_recover_rejects_bad_truth(tmp_path):
    bad = tmp_path / "truth.csv"
    pd.DataFrame({"name": ["a", "b"], "value": [1.0, 2.0]}).to_csv(
        bad, index=False)
    assert main(["simulate-recover", "--reps", "1", "--days", "60",
                 "--truth", str(bad)]) == 2


# -- config file and CI mode -------------------------------------------------


def test_config_file_fills_and_flags_override(workdir, tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text(f"""
[common]
seed = 3

[symbolize]
ticks = {workdir / 'cleaned.csv'}
min_obs = 30
""")
    assert main(["symbolize", "--config", str(ini),
                 "--out", str(tmp_path / "xi.csv")]) == 0
    assert len(read_xi(tmp_path / "xi.csv")) == 38
    # the explicit flag must beat the file value
    assert main(["symbolize", "--config", str(ini),
                 "--out", str(tmp_path / "xi2.csv"),
                 "--min-obs", "1000"]) == 2


def test_ci_mode_requires_seed(workdir, tmp_path):
    base = ["fit", "--xi", str(workdir / "xi.csv"),
            "--draws", str(tmp_path / "d.csv"),
            "--meta", str(tmp_path / "m.json"), *TINY_SAMPLER]
    assert main(base + ["--ci"]) == 1
    assert main(base + ["--ci", "--seed", "1"]) == 0


def test_atomic_write_leaves_no_temp_files(workdir, tmp_path):
    assert main(["forecast", "--xi", str(workdir / "xi.csv"),
                 "--draws", str(workdir / "draws.csv"),
                 "--out", str(tmp_path / "fc.csv"), "--levels", "0.5",
                 "--n-theta", "2"]) == 0
    leftovers = [p for p in tmp_path.iterdir() if p.suffix == ".tmp"]
    assert leftovers == []
