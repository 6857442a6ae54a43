"""Command-line front end.

Wires the pipeline: clean -> symbolize -> fit -> forecast -> scale ->
backtest, plus the simulation-recovery study and the signal-ratio report.
Every command is deterministic under a fixed --seed; outputs are plain CSV
or JSON written atomically (temp file in the target directory, then rename).

Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical failure.

Options can also come from an INI config file (--config): a [common]
section plus one section per subcommand, keys named like the long options
with dashes turned into underscores. Explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import configparser
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

from .gh import construct_symbols, write_gh_params
from .mcmc import (
    SamplerConfig,
    interval_ranks,
    read_draws,
    run_adaptive,
    summarize,
    target_rate,
    write_draws,
    write_meta,
)
from .model import (
    BLOCKS,
    N_PARAMS,
    PARAM_NAMES,
    NonFiniteLikelihoodError,
    PosteriorTarget,
    XiSeries,
    forecast_qf,
    read_xi,
    simulate,
)
from .signal_ratio import rsig_posterior, write_rsig
from .tickclean import (
    CleanConfig,
    SessionCalendar,
    clean_day,
    day_returns,
    read_ticks,
    write_clean,
    write_removal_log,
)
from .var_scaling import (
    combine_external_forecasts,
    read_daily_returns,
    read_external_forecasts,
    rolling_backtest,
    score_table,
    write_daily_returns,
    write_score_report,
    write_var_forecasts,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

# default data-generating vector for the recovery study: realistic
# persistence, heavy tails, an asymmetric copula
RECOVERY_TRUTH = np.array([
    0.0, 0.06, 0.91, 6e-8, 0.15, 0.84, 8.0, -0.16,
    -0.13, 0.43, 0.53, 5e-3, 0.06, 0.88, 15.0, 0.0,
    0.0, 0.05, 0.93, 7e-5, 0.07, 0.92, 18.0, 0.14,
    3e-3, 0.22, 0.74, 3.7, 0.03, 0.06, 6.0, 0.15, 1e-4,
    -0.30, -0.10, 0.20, -0.22, -0.60, 0.12, 15.0,
])


class UsageError(Exception):
    """Bad invocation discovered after argparse (missing required option)."""


_NUMERIC_ERRORS = (NonFiniteLikelihoodError, np.linalg.LinAlgError,
                   FloatingPointError, OverflowError, ZeroDivisionError)
_DATA_ERRORS = (OSError, ValueError, KeyError, configparser.Error)


def _code_for(exc) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, _NUMERIC_ERRORS):
        return EXIT_NUMERIC
    return EXIT_DATA


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage by default; the convention here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


# -- option plumbing ---------------------------------------------------------------
#
# Every option parses with default=None so a config file can fill the gaps;
# _OPTION_TYPES records how to cast config values and _DEFAULTS what to use
# when neither the command line nor the file says anything.


def _bool_cast(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _levels_cast(s) -> list:
    vals = [float(tok) for tok in str(s).split(",") if tok.strip()]
    if not vals:
        raise ValueError("empty level list")
    return vals


_COMMON_TYPES = {
    "seed": int, "ci": _bool_cast, "threads": int, "verbose": _bool_cast,
}
_COMMON_DEFAULTS = {"ci": False, "threads": 1, "verbose": False}

_SAMPLER_TYPES = {
    "n_epo": int, "n_disc": int, "j_min": int, "j_max": int,
    "eps_mapc": float, "n_delta": int, "n_sample": int, "n_sample_disc": int,
}

_CLEAN_TYPES = {
    "ticks": str, "out": str, "removals": str, "instrument": str,
    "calendar": str, "min_count": int, "static_run": int,
    "score_cutoff": float, "lam_trend": float, "lam_scale": float,
}

_OPTION_TYPES = {
    "clean": _CLEAN_TYPES,
    "symbolize": {"ticks": str, "out": str, "min_obs": int},
    "fit": {"xi": str, "draws": str, "meta": str, "summary": str,
            **_SAMPLER_TYPES},
    "simulate-recover": {"reps": int, "days": int, "truth": str, "out": str,
                         "acceptance": str, **_SAMPLER_TYPES},
    "forecast": {"xi": str, "draws": str, "out": str,
                 "levels": _levels_cast, "n_theta": int, "last": int},
    "signal-ratio": {"draws": str, "out": str, "thin": int,
                     "m4_sims": int, "m4_thin": int},
    "var-backtest": {"xi": str, "returns": str, "out": str, "scores": str,
                     "s_factors": str, "levels": _levels_cast,
                     "window": int, "refit_every": int, "n_theta": int,
                     **_SAMPLER_TYPES},
    "pipeline": {**_CLEAN_TYPES, "workdir": str, "min_obs": int,
                 "levels": _levels_cast, "window": int, "refit_every": int,
                 "n_theta": int, "rsig_thin": int, "m4_sims": int,
                 "m4_thin": int, **_SAMPLER_TYPES},
}

_DEFAULTS = {
    "clean": {"min_count": 60, "static_run": 31, "score_cutoff": 20.0,
              "lam_trend": 50.0, "lam_scale": 50_000.0},
    "symbolize": {"min_obs": 60},
    "fit": {},
    "simulate-recover": {"reps": 10, "days": 1500},
    "forecast": {"levels": [0.05, 0.25, 0.5, 0.75, 0.95], "n_theta": 50},
    "signal-ratio": {"thin": 10, "m4_sims": 100_000, "m4_thin": 10},
    "var-backtest": {"levels": [0.01, 0.05], "window": 3000,
                     "refit_every": 10, "n_theta": 50},
    "pipeline": {"min_count": 60, "static_run": 31, "score_cutoff": 20.0,
                 "lam_trend": 50.0, "lam_scale": 50_000.0, "min_obs": 60,
                 "levels": [0.01, 0.05], "window": 3000, "refit_every": 10,
                 "n_theta": 50, "rsig_thin": 10, "m4_sims": 100_000,
                 "m4_thin": 10},
}

_REQUIRED = {
    "clean": ["ticks", "out", "removals", "instrument"],
    "symbolize": ["ticks", "out"],
    "fit": ["xi", "draws", "meta"],
    "simulate-recover": [],
    "forecast": ["xi", "draws", "out"],
    "signal-ratio": ["draws", "out"],
    "var-backtest": ["xi", "returns", "out", "scores"],
    "pipeline": ["ticks", "workdir", "instrument"],
}


def _read_config(path):
    if path is None:
        return None
    cfg = configparser.ConfigParser()
    with open(path) as fh:
        cfg.read_file(fh)
    return cfg


def _fill_args(args, cfg) -> None:
    """Resolve each option: explicit flag, else config file, else default."""
    types = {**_COMMON_TYPES, **_OPTION_TYPES[args.command]}
    defaults = {**_COMMON_DEFAULTS, **_DEFAULTS[args.command]}
    for dest, cast in types.items():
        if getattr(args, dest, None) is not None:
            continue
        raw = None
        if cfg is not None:
            for section in (args.command, "common"):
                if cfg.has_option(section, dest):
                    raw = cfg.get(section, dest)
                    break
        if raw is not None:
            setattr(args, dest, cast(raw))
        else:
            setattr(args, dest, defaults.get(dest))
    if args.seed is None:
        if args.ci:
            raise UsageError("--seed is required in CI mode")
        args.seed = 0
    missing = [d for d in _REQUIRED[args.command]
               if getattr(args, d, None) is None]
    if missing:
        flags = ", ".join("--" + d.replace("_", "-") for d in missing)
        raise UsageError(f"missing required option(s): {flags}")


def _sampler_config(args) -> SamplerConfig:
    kw = {k: getattr(args, k) for k in _SAMPLER_TYPES
          if getattr(args, k, None) is not None}
    return SamplerConfig(**kw)


def _atomic(path, writer) -> None:
    """Write through a temp file in the target directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent or "."),
                               prefix=path.name + ".", suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass


def _mcmc_progress(args):
    if not args.verbose:
        return None

    def cb(phase, epoch, mapc):
        if phase == "tune":
            sys.stderr.write(f"  tune epoch {epoch}: mapc {mapc:.4g}\n")
        else:
            sys.stderr.write("  sampling\n")
    return cb


def _backtest_progress(args):
    if not args.verbose:
        return None

    def cb(i, n, p):
        sys.stderr.write(f"  refit {i + 1}/{n} at day index {p}\n")
    return cb


# -- subcommands -------------------------------------------------------------------


def cmd_clean(args) -> int:
    cal = SessionCalendar.from_file(args.calendar)
    days = read_ticks(args.ticks)
    config = CleanConfig(instrument=args.instrument, min_count=args.min_count,
                         static_run=args.static_run,
                         score_cutoff=args.score_cutoff,
                         lam_trend=args.lam_trend, lam_scale=args.lam_scale)
    cleaned = [clean_day(d, cal, config) for d in days]
    _atomic(args.out, lambda p: write_clean(p, cleaned))
    _atomic(args.removals, lambda p: write_removal_log(p, cleaned))

    n_obs = sum(d.times.size for d in cleaned)
    n_kept = sum(d.n_kept for d in cleaned)
    dead = sum(d.removed_day for d in cleaned)
    pct = 100.0 * (n_obs - n_kept) / n_obs if n_obs else 0.0
    print(f"{'instrument':<12}{'days':>8}{'obs':>12}{'del%':>8}")
    print(f"{args.instrument:<12}{len(cleaned):>8}{n_obs:>12}{pct:>8.2f}")
    if dead:
        print(f"days removed entirely: {dead}")
    return EXIT_OK


def _symbolize_days(days, min_obs: int):
    """Per-day return vectors long enough to fit, with their dates."""
    dates, vectors, short = [], [], 0
    for d in days:
        if d.n_kept < 2:
            short += 1
            continue
        r = day_returns(d)
        if r.size < min_obs:
            short += 1
            continue
        dates.append(d.date)
        vectors.append(r)
    return dates, vectors, short


def cmd_symbolize(args) -> int:
    days = read_ticks(args.ticks)
    dates, vectors, short = _symbolize_days(days, args.min_obs)
    if not vectors:
        raise ValueError("no day has enough observations to fit")
    params = construct_symbols(vectors)
    _atomic(args.out, lambda p: write_gh_params(p, params, days=dates))
    print(f"fitted {len(params)} days ({short} skipped as too short)")
    return EXIT_OK


def cmd_fit(args) -> int:
    xi = read_xi(args.xi)
    target = PosteriorTarget(xi)
    sample = run_adaptive(target, _sampler_config(args), seed=args.seed,
                          progress=_mcmc_progress(args))
    _atomic(args.draws, lambda p: write_draws(p, sample))
    _atomic(args.meta, lambda p: write_meta(p, sample))
    summ = summarize(sample)
    if args.summary is not None:
        _atomic(args.summary,
                lambda p: summ.to_csv(p, index_label="param"))
    rates = ", ".join(f"{r:.3f}" for r in sample.acceptance)
    print(f"retained {sample.draws.shape[0]} draws; "
          f"block acceptance: {rates}")
    print(summ.to_string(float_format=lambda v: f"{v: .5g}"))
    return EXIT_OK


def _load_truth(path) -> np.ndarray:
    if path is None:
        return RECOVERY_TRUTH.copy()
    df = pd.read_csv(path)
    if list(df.columns) != ["name", "value"]:
        raise ValueError("truth CSV needs columns name,value")
    if list(df["name"]) != PARAM_NAMES:
        raise ValueError("truth CSV must list every parameter in order")
    return df["value"].to_numpy(dtype=float)


def _recover_one(job):
    """One replicate: simulate at the truth, refit, return summaries."""
    truth, T, sim_seed, fit_seed, cfg = job
    sim = simulate(truth, T, np.random.default_rng(sim_seed))
    sample = run_adaptive(PosteriorTarget(sim.xi), cfg, seed=fit_seed)
    return sample.draws.mean(axis=0), sample.acceptance


def cmd_simulate_recover(args) -> int:
    truth = _load_truth(args.truth)
    cfg = _sampler_config(args)
    jobs = [(truth, args.days, args.seed + 2 * i, args.seed + 2 * i + 1, cfg)
            for i in range(args.reps)]
    if args.threads > 1:
        with concurrent.futures.ProcessPoolExecutor(
                max_workers=args.threads) as pool:
            results = list(pool.map(_recover_one, jobs))
    else:
        results = []
        for i, job in enumerate(jobs):
            if args.verbose:
                sys.stderr.write(f"replicate {i + 1}/{args.reps}\n")
            results.append(_recover_one(job))

    means = np.array([m for m, _ in results])
    acc = np.array([a for _, a in results])
    lo_rank, hi_rank = interval_ranks(args.reps)
    srt = np.sort(means, axis=0)
    report = pd.DataFrame({
        "param": PARAM_NAMES,
        "truth": truth,
        "mc_mean": means.mean(axis=0),
        "mc_lo": srt[lo_rank - 1],
        "mc_hi": srt[hi_rank - 1],
    })
    acc_table = pd.DataFrame({
        "block": np.arange(1, len(BLOCKS) + 1),
        "dim": [len(b) for b in BLOCKS],
        "target": [target_rate(len(b)) for b in BLOCKS],
        "rate": acc.mean(axis=0),
    })
    if args.out is not None:
        _atomic(args.out, lambda p: report.to_csv(p, index=False))
    if args.acceptance is not None:
        _atomic(args.acceptance, lambda p: acc_table.to_csv(p, index=False))
    print(f"{args.reps} replicates of T={args.days}")
    print(report.to_string(index=False,
                           float_format=lambda v: f"{v: .5g}"))
    print(acc_table.to_string(index=False,
                              float_format=lambda v: f"{v: .3f}"))
    return EXIT_OK


def _thin_indices(n: int, n_theta: int) -> np.ndarray:
    return np.unique(np.linspace(0, n - 1, min(n_theta, n)).astype(int))


def _mean_forecast_paths(draws, xi: XiSeries, levels, n_theta: int):
    """Forecast quantile paths averaged over thinned posterior draws."""
    take = _thin_indices(draws.shape[0], n_theta)
    q_sum = None
    for vec in draws[take]:
        _, quants = forecast_qf(vec, xi, levels)
        q_sum = quants if q_sum is None else q_sum + quants
    return q_sum / take.size


def _forecast_day_labels(xi: XiSeries):
    """Row labels: each in-sample day plus the one-step-ahead row."""
    days = list(xi.days)
    if np.issubdtype(xi.days.dtype, np.number):
        days.append(xi.days[-1] + 1)
    else:
        days.append("next")
    return days


def _write_forecast_csv(path, day_labels, levels, q) -> None:
    rows = {"day": np.repeat(day_labels, len(levels)),
            "u": np.tile(levels, len(day_labels)),
            "forecast": np.asarray(q).ravel()}
    pd.DataFrame(rows).to_csv(path, index=False)


def cmd_forecast(args) -> int:
    xi = read_xi(args.xi)
    draws, names = read_draws(args.draws)
    if names != PARAM_NAMES:
        raise ValueError("draws CSV does not hold the model parameters")
    q = _mean_forecast_paths(draws, xi, args.levels, args.n_theta)
    day_labels = _forecast_day_labels(xi)
    if args.last is not None:
        q = q[-args.last:]
        day_labels = day_labels[-args.last:]
    _atomic(args.out,
            lambda p: _write_forecast_csv(p, day_labels, args.levels, q))
    print(f"wrote {q.shape[0]} forecast days x {len(args.levels)} levels")
    return EXIT_OK


def cmd_signal_ratio(args) -> int:
    draws, names = read_draws(args.draws)
    if names != PARAM_NAMES:
        raise ValueError("draws CSV does not hold the model parameters")
    table = rsig_posterior(draws, thin=args.thin, m4_n_sim=args.m4_sims,
                           m4_thin=args.m4_thin, seed=args.seed)
    _atomic(args.out, lambda p: write_rsig(p, table))
    print(table.to_string(index=False,
                          float_format=lambda v: f"{v: .5g}"))
    return EXIT_OK


def _parse_external(specs):
    out = []
    for spec in specs or []:
        label, sep, path = spec.partition("=")
        if not sep or not label or not path:
            raise UsageError(f"--external wants LABEL=PATH, got {spec!r}")
        out.append((label, path))
    return out


def _external_models(specs, forecasts, levels):
    """Score externally supplied forecast files on the same scored days."""
    ref = forecasts.for_level(float(levels[0]))
    models = {}
    for label, path in specs:
        df = read_external_forecasts(path)
        models[label] = combine_external_forecasts(df, ref.day, ref.realized)
    return models


def cmd_var_backtest(args) -> int:
    external = _parse_external(args.external)
    xi = read_xi(args.xi)
    days, rets = read_daily_returns(args.returns)
    if (len(days) != len(xi)
            or not np.array_equal(days.astype(str), xi.days.astype(str))):
        raise ValueError("returns CSV days do not match the series days")
    res = rolling_backtest(xi, rets, args.levels, window=args.window,
                           refit_every=args.refit_every,
                           sampler_config=_sampler_config(args),
                           n_theta=args.n_theta, seed=args.seed,
                           progress=_backtest_progress(args))
    _atomic(args.out, lambda p: write_var_forecasts(p, res.forecasts))
    if args.s_factors is not None:
        _atomic(args.s_factors,
                lambda p: res.s_factors.to_csv(p, index=False))
    models = {"dqf": res.forecasts}
    models.update(_external_models(external, res.forecasts, args.levels))
    table = score_table(models)
    _atomic(args.scores, lambda p: write_score_report(p, table))
    print(table.to_string(float_format=lambda v: f"{v: .6g}"))
    return EXIT_OK


def _daily_close_returns(days, dates):
    """Close-to-close percent log returns across the symbolized dates."""
    closes = {d.date: d.prices[d.kept][-1] for d in days if d.n_kept}
    c = np.array([closes[date] for date in dates])
    return 100.0 * np.diff(np.log(c))


def cmd_pipeline(args) -> int:
    wd = Path(args.workdir)
    wd.mkdir(parents=True, exist_ok=True)
    stage = "clean"
    try:
        cal = SessionCalendar.from_file(args.calendar)
        days = read_ticks(args.ticks)
        config = CleanConfig(instrument=args.instrument,
                             min_count=args.min_count,
                             static_run=args.static_run,
                             score_cutoff=args.score_cutoff,
                             lam_trend=args.lam_trend,
                             lam_scale=args.lam_scale)
        cleaned = [clean_day(d, cal, config) for d in days]
        _atomic(wd / "cleaned.csv", lambda p: write_clean(p, cleaned))
        _atomic(wd / "removals.csv",
                lambda p: write_removal_log(p, cleaned))

        stage = "symbolize"
        dates, vectors, short = _symbolize_days(cleaned, args.min_obs)
        if len(vectors) < 2:
            raise ValueError("need at least two fit-length days")
        gh_params = construct_symbols(vectors)
        _atomic(wd / "xi.csv",
                lambda p: write_gh_params(p, gh_params, days=dates))
        xi = XiSeries(np.array([[q.a, q.b_star, q.g, q.h]
                                for q in gh_params]), days=np.array(dates))

        stage = "fit"
        cfg = _sampler_config(args)
        sample = run_adaptive(PosteriorTarget(xi), cfg, seed=args.seed,
                              progress=_mcmc_progress(args))
        _atomic(wd / "draws.csv", lambda p: write_draws(p, sample))
        _atomic(wd / "meta.json", lambda p: write_meta(p, sample))
        summ = summarize(sample)
        _atomic(wd / "summary.csv",
                lambda p: summ.to_csv(p, index_label="param"))

        stage = "forecast"
        q = _mean_forecast_paths(sample.draws, xi, args.levels, args.n_theta)
        _atomic(wd / "forecast.csv",
                lambda p: _write_forecast_csv(p, _forecast_day_labels(xi),
                                              args.levels, q))

        stage = "signal-ratio"
        rsig = rsig_posterior(sample.draws, thin=args.rsig_thin,
                              m4_n_sim=args.m4_sims, m4_thin=args.m4_thin,
                              seed=args.seed)
        _atomic(wd / "rsig.csv", lambda p: write_rsig(p, rsig))

        stage = "var-backtest"
        y = _daily_close_returns(cleaned, dates)
        xi_bt = XiSeries(xi.values[1:], days=xi.days[1:])
        _atomic(wd / "daily_returns.csv",
                lambda p: write_daily_returns(p, xi_bt.days, y))
        res = rolling_backtest(xi_bt, y, args.levels, window=args.window,
                               refit_every=args.refit_every,
                               sampler_config=cfg, n_theta=args.n_theta,
                               seed=args.seed + 1,
                               progress=_backtest_progress(args))
        _atomic(wd / "var_forecasts.csv",
                lambda p: write_var_forecasts(p, res.forecasts))
        _atomic(wd / "s_factors.csv",
                lambda p: res.s_factors.to_csv(p, index=False))
        table = score_table({"dqf": res.forecasts})
        _atomic(wd / "scores.csv", lambda p: write_score_report(p, table))
    except (UsageError,) + _NUMERIC_ERRORS + _DATA_ERRORS as exc:
        sys.stderr.write(f"pipeline stage '{stage}' failed: {exc}\n")
        return _code_for(exc)
    print(table.to_string(float_format=lambda v: f"{v: .6g}"))
    print(f"pipeline complete: artifacts in {wd}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


_DISPATCH = {
    "clean": cmd_clean,
    "symbolize": cmd_symbolize,
    "fit": cmd_fit,
    "simulate-recover": cmd_simulate_recover,
    "forecast": cmd_forecast,
    "signal-ratio": cmd_signal_ratio,
    "var-backtest": cmd_var_backtest,
    "pipeline": cmd_pipeline,
}


def _add_common(p) -> None:
    p.add_argument("--config", help="INI config file; flags override it")
    p.add_argument("--seed", type=int, help="RNG seed (default 0)")
    p.add_argument("--ci", action="store_true", default=None,
                   help="CI mode: --seed becomes mandatory")
    p.add_argument("--threads", type=int,
                   help="worker processes for replicate-level parallelism")
    p.add_argument("--verbose", action="store_true", default=None,
                   help="progress lines on stderr")


def _add_sampler(p) -> None:
    g = p.add_argument_group("sampler")
    g.add_argument("--n-epo", type=int, help="sweeps per tuning epoch")
    g.add_argument("--n-disc", type=int, help="sweeps discarded per epoch")
    g.add_argument("--j-min", type=int, help="earliest stopping epoch")
    g.add_argument("--j-max", type=int, help="tuning epoch cap")
    g.add_argument("--eps-mapc", type=float, help="MAPC stop threshold")
    g.add_argument("--n-delta", type=int,
                   help="sweeps between scale updates")
    g.add_argument("--n-sample", type=int, help="sampling-phase sweeps")
    g.add_argument("--n-sample-disc", type=int,
                   help="sampling-phase burn-in")


def _add_clean_opts(p) -> None:
    p.add_argument("--instrument", help="calendar instrument name")
    p.add_argument("--calendar",
                   help="session-times file (default: packaged)")
    p.add_argument("--min-count", type=int,
                   help="fewest surviving points that keep a day")
    p.add_argument("--static-run", type=int,
                   help="constant-run length treated as a dead feed")
    p.add_argument("--score-cutoff", type=float,
                   help="outlier score above which a point is removed")
    p.add_argument("--lam-trend", type=float, help="trend smoothing weight")
    p.add_argument("--lam-scale", type=float,
                   help="scale-curve smoothing weight")


def build_parser() -> _Parser:
    parser = _Parser(prog="qfdyn",
                     description="dynamic quantile-function models for "
                                 "intra-daily return distributions")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("clean", help="apply tick-cleaning rules I..VII")
    _add_common(p)
    p.add_argument("--ticks", help="raw tick CSV (timestamp,price)")
    p.add_argument("--out", help="cleaned tick CSV")
    p.add_argument("--removals", help="removal log CSV (timestamp,rule)")
    _add_clean_opts(p)

    p = sub.add_parser("symbolize",
                       help="fit per-day quantile-function parameters")
    _add_common(p)
    p.add_argument("--ticks", help="cleaned tick CSV")
    p.add_argument("--out", help="per-day parameter CSV")
    p.add_argument("--min-obs", type=int,
                   help="fewest intra-day returns worth fitting")

    p = sub.add_parser("fit", help="sample the joint model posterior")
    _add_common(p)
    p.add_argument("--xi", help="per-day parameter CSV")
    p.add_argument("--draws", help="output draws CSV")
    p.add_argument("--meta", help="output run-metadata JSON")
    p.add_argument("--summary", help="optional posterior-summary CSV")
    _add_sampler(p)

    p = sub.add_parser("simulate-recover",
                       help="simulate at a known truth and refit")
    _add_common(p)
    p.add_argument("--reps", type=int, help="replicate count")
    p.add_argument("--days", type=int, help="series length per replicate")
    p.add_argument("--truth", help="truth CSV (name,value); default built-in")
    p.add_argument("--out", help="optional recovery-report CSV")
    p.add_argument("--acceptance", help="optional acceptance-table CSV")
    _add_sampler(p)

    p = sub.add_parser("forecast",
                       help="one-step-ahead quantile forecasts from draws")
    _add_common(p)
    p.add_argument("--xi", help="per-day parameter CSV")
    p.add_argument("--draws", help="posterior draws CSV")
    p.add_argument("--out", help="forecast CSV (day,u,forecast)")
    p.add_argument("--levels", type=_levels_cast,
                   help="comma-separated u levels")
    p.add_argument("--n-theta", type=int,
                   help="posterior draws averaged per forecast")
    p.add_argument("--last", type=int, help="keep only the final N rows")

    p = sub.add_parser("signal-ratio",
                       help="posterior signal-to-noise ratios per margin")
    _add_common(p)
    p.add_argument("--draws", help="posterior draws CSV")
    p.add_argument("--out", help="output CSV")
    p.add_argument("--thin", type=int, help="draw thinning step")
    p.add_argument("--m4-sims", type=int,
                   help="simulation length per margin-4 evaluation")
    p.add_argument("--m4-thin", type=int,
                   help="extra thinning for margin-4 draws")

    p = sub.add_parser("var-backtest",
                       help="rolling scaled-VaR forecasts and scores")
    _add_common(p)
    p.add_argument("--xi", help="per-day parameter CSV")
    p.add_argument("--returns", help="daily returns CSV (day,return)")
    p.add_argument("--out", help="VaR forecast CSV")
    p.add_argument("--scores", help="score report CSV")
    p.add_argument("--s-factors", help="optional scaling-path CSV")
    p.add_argument("--levels", type=_levels_cast,
                   help="comma-separated u levels")
    p.add_argument("--window", type=int, help="estimation window length")
    p.add_argument("--refit-every", type=int, help="days between refits")
    p.add_argument("--n-theta", type=int,
                   help="posterior draws averaged per forecast")
    p.add_argument("--external", action="append", metavar="LABEL=PATH",
                   help="score an external forecast CSV too (repeatable)")
    _add_sampler(p)

    p = sub.add_parser("pipeline",
                       help="clean through var-backtest in one run")
    _add_common(p)
    p.add_argument("--ticks", help="raw tick CSV")
    p.add_argument("--workdir", help="directory for all artifacts")
    _add_clean_opts(p)
    p.add_argument("--min-obs", type=int,
                   help="fewest intra-day returns worth fitting")
    p.add_argument("--levels", type=_levels_cast,
                   help="comma-separated u levels")
    p.add_argument("--window", type=int, help="estimation window length")
    p.add_argument("--refit-every", type=int, help="days between refits")
    p.add_argument("--n-theta", type=int,
                   help="posterior draws averaged per forecast")
    p.add_argument("--rsig-thin", type=int,
                   help="draw thinning for the signal-ratio table")
    p.add_argument("--m4-sims", type=int,
                   help="simulation length per margin-4 evaluation")
    p.add_argument("--m4-thin", type=int,
                   help="extra thinning for margin-4 draws")
    _add_sampler(p)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _read_config(args.config)
        _fill_args(args, cfg)
        return _DISPATCH[args.command](args)
    except (UsageError,) + _NUMERIC_ERRORS + _DATA_ERRORS as exc:
        sys.stderr.write(f"qfdyn {args.command}: error: {exc}\n")
        return _code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
