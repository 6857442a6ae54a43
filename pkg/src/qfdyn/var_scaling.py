"""Daily VaR by quantile scaling of intra-daily quantile forecasts.

A level-u daily return quantile is taken to be a constant multiple s_u of
the same day's intra-daily u-quantile. The check-loss regression for s_u
is equivalent to an asymmetric-Laplace likelihood whose scale integrates
out in closed form, leaving a one-dimensional marginal posterior that the
block sampler handles as a single block. The rolling protocol refits the
dynamic model every `refit_every` days on a trailing window, forecasts
one day ahead with the newest posterior, scales, and evaluates with the
strictly consistent quantile score.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .mcmc import GenericTarget, SamplerConfig, run_adaptive
from .model import PosteriorTarget, XiSeries, forecast_qf


def checkloss(eps, u: float):
    """Check loss eps * (u - 1{eps < 0}), elementwise."""
    if not 0.0 < u < 1.0:
        raise ValueError("u must lie strictly inside (0, 1)")
    eps = np.asarray(eps, dtype=float)
    return eps * (u - (eps < 0.0))


def _validate_series(y_d, q_m, u: float):
    y = np.asarray(y_d, dtype=float)
    q = np.asarray(q_m, dtype=float)
    if y.ndim != 1 or y.shape != q.shape:
        raise ValueError("daily returns and intra-daily quantiles must be "
                         "equal-length vectors")
    if y.size == 0:
        raise ValueError("empty series")
    if not (np.isfinite(y).all() and np.isfinite(q).all()):
        raise ValueError("series must be finite")
    if not 0.0 < u < 1.0:
        raise ValueError("u must lie strictly inside (0, 1)")
    return y, q


def scaling_logposterior(s, y_d, q_m, u: float):
    """Marginal log posterior of the scaling factor, -T*log sum of check
    losses of y - s*q. Accepts scalar or array s. An exact fit (zero loss)
    returns +inf and warns; it cannot happen off contrived data."""
    y, q = _validate_series(y_d, q_m, u)
    s_arr = np.asarray(s, dtype=float)
    eps = y - s_arr[..., None] * q
    tot = checkloss(eps, u).sum(axis=-1)
    if np.any(tot == 0.0):
        warnings.warn("zero check loss: scaling posterior is degenerate",
                      RuntimeWarning)
    with np.errstate(divide="ignore"):
        out = -y.size * np.log(tot)
    return float(out) if np.isscalar(s) or s_arr.ndim == 0 else out


def fit_scaling(y_d, q_m, u: float) -> float:
    """Exact check-loss minimizer of the scaling regression.

    The objective is convex piecewise linear in s with kinks at the
    ratios y/q, so some kink attains the minimum; evaluate them all.
    """
    y, q = _validate_series(y_d, q_m, u)
    nz = q != 0.0
    if not nz.any():
        raise ValueError("all intra-daily quantiles are zero; the scaling "
                         "factor is unidentified")
    cand = np.unique(y[nz] / q[nz])
    best_s, best_val = cand[0], np.inf
    for lo in range(0, cand.size, 256):
        block = cand[lo:lo + 256]
        tot = checkloss(y - block[:, None] * q, u).sum(axis=1)
        k = int(np.argmin(tot))
        if tot[k] < best_val:
            best_val = float(tot[k])
            best_s = float(block[k])
    return best_s


# the kernel is one-dimensional and cheap, so short epochs tune it quickly
SCALING_SAMPLER = SamplerConfig(n_epo=1000, n_disc=200, j_min=2, j_max=6,
                                eps_mapc=0.05, n_delta=100,
                                n_sample=4000, n_sample_disc=500)


@dataclass
class ScalingPosterior:
    """Posterior draws of s_u with the plug-in quantile series they used."""

    u: float
    draws: np.ndarray
    q_m: np.ndarray
    acceptance: float = np.nan

    def __post_init__(self):
        if not 0.0 < self.u < 1.0:
            raise ValueError("u must lie strictly inside (0, 1)")
        self.draws = np.asarray(self.draws, dtype=float)
        self.q_m = np.asarray(self.q_m, dtype=float)
        if self.draws.ndim != 1 or not np.isfinite(self.draws).all():
            raise ValueError("draws must be a finite vector")

    def point(self) -> float:
        """Posterior-mean scaling factor."""
        return float(self.draws.mean())

    def daily_var_draws(self, q_m=None) -> np.ndarray:
        """(n_draws, T) posterior draws of the daily quantile s*q per day."""
        q = self.q_m if q_m is None else np.asarray(q_m, dtype=float)
        return np.outer(self.draws, q)


def sample_scaling(y_d, q_m, u: float, seed: int = 0,
                   config: SamplerConfig | None = None) -> ScalingPosterior:
    """Sample the marginal scaling posterior with a single-block chain."""
    y, q = _validate_series(y_d, q_m, u)
    if y.size < 2:
        raise ValueError("need at least two days")
    s0 = fit_scaling(y, q, u)
    if checkloss(y - s0 * q, u).sum() == 0.0:
        raise ValueError("exact fit: scaling posterior is degenerate")
    target = GenericTarget(lambda v: scaling_logposterior(v[0], y, q, u),
                           [[0]], [s0], [max(0.1 * abs(s0), 1e-2)])
    sample = run_adaptive(target, SCALING_SAMPLER if config is None
                          else config, seed=seed)
    return ScalingPosterior(u=u, draws=sample.draws[:, 0].copy(),
                            q_m=q.copy(),
                            acceptance=float(sample.acceptance[0]))


def quantile_score(forecast, realized, u: float):
    """Strictly consistent quantile score (1{f >= y} - u)(f - y), per day."""
    if not 0.0 < u < 1.0:
        raise ValueError("u must lie strictly inside (0, 1)")
    f = np.asarray(forecast, dtype=float)
    y = np.asarray(realized, dtype=float)
    return ((f >= y).astype(float) - u) * (f - y)


@dataclass
class VaRForecastSeries:
    """Rows of (day, u, forecast, realized), one per day and level."""

    day: np.ndarray
    u: np.ndarray
    forecast: np.ndarray
    realized: np.ndarray

    def __post_init__(self):
        self.day = np.asarray(self.day)
        self.u = np.asarray(self.u, dtype=float)
        self.forecast = np.asarray(self.forecast, dtype=float)
        self.realized = np.asarray(self.realized, dtype=float)
        n = self.day.shape[0]
        if not (self.u.shape == self.forecast.shape
                == self.realized.shape == (n,)):
            raise ValueError("day, u, forecast, realized must be "
                             "equal-length vectors")
        if n == 0:
            raise ValueError("empty forecast series")
        if np.any((self.u <= 0.0) | (self.u >= 1.0)):
            raise ValueError("u levels must lie strictly inside (0, 1)")
        if not (np.isfinite(self.forecast).all()
                and np.isfinite(self.realized).all()):
            raise ValueError("forecasts and realized returns must be finite")
        pairs = pd.DataFrame({"day": self.day, "u": self.u})
        if pairs.duplicated().any():
            raise ValueError("duplicate (day, u) rows")

    def __len__(self):
        return self.day.shape[0]

    def levels(self) -> np.ndarray:
        return np.unique(self.u)

    def for_level(self, u: float) -> "VaRForecastSeries":
        m = self.u == u
        if not m.any():
            raise ValueError(f"no rows at level {u}")
        return VaRForecastSeries(self.day[m], self.u[m],
                                 self.forecast[m], self.realized[m])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"day": self.day, "u": self.u,
                             "forecast": self.forecast,
                             "realized": self.realized})


def score_series(forecasts: VaRForecastSeries) -> float:
    """Mean consistent quantile score over the rows."""
    f, y = forecasts.forecast, forecasts.realized
    per_day = ((f >= y).astype(float) - forecasts.u) * (f - y)
    return float(per_day.mean())


def score_table(models: dict[str, VaRForecastSeries]) -> pd.DataFrame:
    """Mean score per (level, model); rows are u levels, columns models."""
    if not models:
        raise ValueError("no forecast series given")
    levels = sorted({float(u) for fs in models.values() for u in fs.levels()})
    out = pd.DataFrame(index=pd.Index(levels, name="u"),
                       columns=list(models), dtype=float)
    for name, fs in models.items():
        for u in fs.levels():
            out.loc[float(u), name] = score_series(fs.for_level(float(u)))
    return out


@dataclass
class BacktestResult:
    """Rolling forecasts, per-level mean scores, and the s_u path."""

    forecasts: VaRForecastSeries
    scores: pd.DataFrame               # index u, column "score"
    s_factors: pd.DataFrame            # one row per (refit day, u)
    refit_days: np.ndarray = field(default_factory=lambda: np.empty(0))


def rolling_backtest(xi: XiSeries, daily_returns, u_levels,
                     window: int = 3000, refit_every: int = 10,
                     sampler_config: SamplerConfig | None = None,
                     scaling_config: SamplerConfig | None = None,
                     n_theta: int = 50, seed: int = 0,
                     progress=None) -> BacktestResult:
    """Rolling one-day-ahead VaR forecasts with periodic refits.

    The joint model is refit on the trailing `window` days at every
    refit point; between refits the filter still advances on each new
    day, so every forecast is one-step-ahead from the newest data under
    the newest posterior. The scaling factor is re-estimated per refit on
    the same window (posterior-mean plug-in quantiles feed the scaling
    posterior), and daily forecasts are the posterior-mean s times the
    posterior-mean next-day quantile. Forecast days cover exactly
    window..T-1 with no gaps or overlaps.
    """
    y = np.asarray(daily_returns, dtype=float)
    T = len(xi)
    if y.shape != (T,):
        raise ValueError("daily returns must align with the series")
    if not np.isfinite(y).all():
        raise ValueError("daily returns must be finite")
    u_levels = np.sort(np.asarray(u_levels, dtype=float))
    if u_levels.size == 0 or np.any((u_levels <= 0) | (u_levels >= 1)):
        raise ValueError("u levels must lie strictly inside (0, 1)")
    if not 2 <= window < T:
        raise ValueError("need 2 <= window < series length")
    if refit_every < 1:
        raise ValueError("refit_every must be positive")
    if n_theta < 1:
        raise ValueError("n_theta must be positive")

    refits = list(range(window, T, refit_every))
    rows_day, rows_u, rows_fc, rows_re = [], [], [], []
    s_rows = []
    for r_i, p in enumerate(refits):
        if progress is not None:
            progress(r_i, len(refits), p)
        k = min(refit_every, T - p)
        win = XiSeries(xi.values[p - window:p], days=xi.days[p - window:p])
        fit_seed = seed + 1000003 * (r_i + 1)
        sample = run_adaptive(PosteriorTarget(win), sampler_config,
                              seed=fit_seed)
        take = np.unique(np.linspace(0, sample.draws.shape[0] - 1,
                                     min(n_theta, sample.draws.shape[0])
                                     ).astype(int))
        # one filter pass per retained draw covers the window's in-sample
        # one-step quantiles and the k out-of-sample days at once
        ext = XiSeries(xi.values[p - window:p + k - 1] if k > 1
                       else xi.values[p - window:p],
                       days=xi.days[p - window:p + k - 1] if k > 1
                       else xi.days[p - window:p])
        q_sum = np.zeros((window + k, u_levels.size))
        for draw in sample.draws[take]:
            _, quants = forecast_qf(draw, ext, u_levels)
            q_sum += quants
        q_mean = q_sum / take.size
        q_win, q_out = q_mean[:window], q_mean[window:]

        for j, u in enumerate(u_levels):
            sp = sample_scaling(y[p - window:p], q_win[:, j], float(u),
                                seed=fit_seed + 17 * (j + 1),
                                config=scaling_config)
            s_bar = sp.point()
            s_rows.append((xi.days[p], float(u), s_bar))
            rows_day.append(xi.days[p:p + k])
            rows_u.append(np.full(k, u))
            rows_fc.append(s_bar * q_out[:, j])
            rows_re.append(y[p:p + k])

    fs = VaRForecastSeries(np.concatenate(rows_day), np.concatenate(rows_u),
                           np.concatenate(rows_fc), np.concatenate(rows_re))
    scores = pd.DataFrame(
        {"score": [score_series(fs.for_level(float(u))) for u in u_levels]},
        index=pd.Index(u_levels, name="u"))
    s_factors = pd.DataFrame(s_rows, columns=["day", "u", "s"])
    return BacktestResult(forecasts=fs, scores=scores, s_factors=s_factors,
                          refit_days=np.asarray([xi.days[p] for p in refits]))


# -- CSV -------------------------------------------------------------------------


def write_var_forecasts(path, fs: VaRForecastSeries) -> None:
    fs.to_frame().to_csv(path, index=False)


def read_var_forecasts(path) -> VaRForecastSeries:
    df = pd.read_csv(path)
    need = ["day", "u", "forecast", "realized"]
    if not set(need).issubset(df.columns):
        raise ValueError(f"forecast CSV needs columns {need}")
    return VaRForecastSeries(df["day"].to_numpy(), df["u"].to_numpy(float),
                             df["forecast"].to_numpy(float),
                             df["realized"].to_numpy(float))


def write_daily_returns(path, days, returns) -> None:
    pd.DataFrame({"day": np.asarray(days),
                  "return": np.asarray(returns, dtype=float)}
                 ).to_csv(path, index=False)


def read_daily_returns(path) -> tuple[np.ndarray, np.ndarray]:
    df = pd.read_csv(path)
    if not {"day", "return"}.issubset(df.columns):
        raise ValueError("daily returns CSV needs columns ['day', 'return']")
    return df["day"].to_numpy(), df["return"].to_numpy(float)


def read_external_forecasts(path) -> pd.DataFrame:
    """Forecasts produced outside this package: day,u,forecast rows."""
    df = pd.read_csv(path)
    if not {"day", "u", "forecast"}.issubset(df.columns):
        raise ValueError("external forecast CSV needs columns "
                         "['day', 'u', 'forecast']")
    return df[["day", "u", "forecast"]]


def combine_external_forecasts(forecasts: pd.DataFrame, days,
                               returns) -> VaRForecastSeries:
    """Attach realized returns to external forecasts by day label."""
    ret = pd.Series(np.asarray(returns, dtype=float),
                    index=pd.Index(np.asarray(days)))
    if ret.index.duplicated().any():
        raise ValueError("duplicate days in the returns series")
    missing = ~forecasts["day"].isin(ret.index)
    if missing.any():
        raise ValueError("forecast days missing from the returns series: "
                         f"{sorted(set(forecasts['day'][missing]))[:5]}")
    realized = ret.loc[forecasts["day"]].to_numpy()
    return VaRForecastSeries(forecasts["day"].to_numpy(),
                             forecasts["u"].to_numpy(float),
                             forecasts["forecast"].to_numpy(float), realized)


def write_score_report(path, table: pd.DataFrame) -> None:
    table.to_csv(path, index_label="u")


def read_score_report(path) -> pd.DataFrame:
    return pd.read_csv(path, index_col="u")
