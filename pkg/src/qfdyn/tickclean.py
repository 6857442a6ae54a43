"""One-minute price cleaning: session filtering, the seven removal rules,
robust L1-spline outlier scores, and log-return construction.

The rules run in a fixed order and the surviving set is re-evaluated after
each one, so later rules only ever see what earlier rules kept. Removal
flags live alongside the original points; a flag of 0 means kept and 1..7
names the rule that removed the point.
"""

from __future__ import annotations

import datetime
import re
import warnings
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import pandas as pd
from scipy import linalg

RULE_NAMES = ("I", "II", "III", "IV", "V", "VI", "VII")

_RANGE_RE = re.compile(
    r"^(\d{4}-\d{2}-\d{2})\s*\.\.\s*(\d{4}-\d{2}-\d{2})\s+(.+)$")
_SESSION_RE = re.compile(r"^(\d{2}):(\d{2})-(\d{2}):(\d{2})$")


def _parse_hhmm(h, m):
    v = 60 * int(h) + int(m)
    if not 0 <= v < 1440:
        raise ValueError(f"time {h}:{m} outside a day")
    return v


class SessionCalendar:
    """Dated trading-session windows per instrument.

    Built from a plain text file: [INSTRUMENT] headers, then one line per
    inclusive date range with one or two HH:MM-HH:MM sessions. Ranges must
    tile the instrument's period with no gaps or overlaps.
    """

    def __init__(self, table: dict):
        self._table = table

    @classmethod
    def from_file(cls, path=None) -> "SessionCalendar":
        if path is None:
            src = resources.files("qfdyn").joinpath("data/session_times.txt")
            text = src.read_text()
        else:
            with open(path) as fh:
                text = fh.read()
        return cls.from_text(text)

    @classmethod
    def from_text(cls, text: str) -> "SessionCalendar":
        table: dict = {}
        current = None
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1].strip()
                if not current or current in table:
                    raise ValueError(
                        f"line {lineno}: bad or repeated instrument header")
                table[current] = []
                continue
            if current is None:
                raise ValueError(f"line {lineno}: range before any header")
            m = _RANGE_RE.match(line)
            if m is None:
                raise ValueError(f"line {lineno}: cannot parse {line!r}")
            d0 = datetime.date.fromisoformat(m.group(1))
            d1 = datetime.date.fromisoformat(m.group(2))
            if d1 < d0:
                raise ValueError(f"line {lineno}: range ends before start")
            sessions = []
            for tok in m.group(3).split():
                sm = _SESSION_RE.match(tok)
                if sm is None:
                    raise ValueError(f"line {lineno}: bad session {tok!r}")
                s = _parse_hhmm(sm.group(1), sm.group(2))
                e = _parse_hhmm(sm.group(3), sm.group(4))
                if e <= s:
                    raise ValueError(f"line {lineno}: session ends at or "
                                     "before start")
                sessions.append((s, e))
            if not 1 <= len(sessions) <= 2:
                raise ValueError(f"line {lineno}: need one or two sessions")
            if len(sessions) == 2 and sessions[1][0] <= sessions[0][1]:
                raise ValueError(f"line {lineno}: sessions overlap")
            table[current].append((d0, d1, sessions))
        if not table:
            raise ValueError("calendar file has no instruments")
        for name, ranges in table.items():
            for prev, cur in zip(ranges, ranges[1:]):
                if cur[0] != prev[1] + datetime.timedelta(days=1):
                    raise ValueError(
                        f"{name}: gap or overlap between date ranges")
        return cls(table)

    def instruments(self):
        return list(self._table)

    def sessions(self, instrument: str, date) -> list:
        """Session windows (start, end) in minutes of day, ends inclusive."""
        if instrument not in self._table:
            raise ValueError(f"unknown instrument {instrument!r}")
        if isinstance(date, str):
            date = datetime.date.fromisoformat(date)
        for d0, d1, sessions in self._table[instrument]:
            if d0 <= date <= d1:
                return list(sessions)
        raise ValueError(f"{instrument}: {date} outside the calendar")


@dataclass
class TickDay:
    """One instrument-day of one-minute prices with removal bookkeeping."""

    date: str
    times: np.ndarray    # minutes of day, strictly increasing
    prices: np.ndarray
    flags: np.ndarray = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.int64)
        self.prices = np.asarray(self.prices, dtype=float)
        if self.times.shape != self.prices.shape or self.times.ndim != 1:
            raise ValueError("times and prices must be equal-length vectors")
        if self.times.size and np.any(np.diff(self.times) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if self.flags is None:
            self.flags = np.zeros(self.times.size, dtype=np.int8)
        else:
            self.flags = np.asarray(self.flags, dtype=np.int8)
            if self.flags.shape != self.times.shape:
                raise ValueError("flags must align with times")

    @property
    def kept(self) -> np.ndarray:
        return self.flags == 0

    @property
    def n_kept(self) -> int:
        return int(self.kept.sum())

    @property
    def removed_day(self) -> bool:
        return self.n_kept == 0


@dataclass
class CleanConfig:
    instrument: str
    min_count: int = 60        # rule VII threshold
    static_run: int = 31       # rule V: constant runs this long lose all but the last point
    score_cutoff: float = 20.0
    lam_trend: float = 50.0
    lam_scale: float = 50_000.0


def _second_diff_banded(n: int, lam: float, mu: float) -> np.ndarray:
    """Upper-banded form of 2*lam*D'D + mu*I for the (n-2) x n second
    difference D; rows are diagonals at offsets 2, 1, 0."""
    c = 2.0 * lam
    ab = np.zeros((3, n))
    ab[0, 2:] = c
    ab[1, 1] = -2.0 * c
    ab[1, 2:n - 1] = -4.0 * c
    ab[1, n - 1] = -2.0 * c
    diag = np.full(n, 6.0 * c)
    diag[[0, n - 1]] = c
    diag[[1, n - 2]] = 5.0 * c
    ab[2] = diag + mu
    return ab


def _objective(z, y, lam):
    d2 = np.diff(z, n=2)
    return float(np.abs(z - y).sum() + lam * (d2 @ d2))


def split_bregman_l1_spline(y, lam: float, tol: float = 1e-8,
                            max_iter: int = 500, penalty: float = 1.0,
                            trace: list | None = None):
    """Minimize ||z - y||_1 + lam * ||second difference of z||_2^2.

    Operator splitting on d = z - y: the z-update is a pentadiagonal
    banded solve, the d-update a soft threshold. The split penalty only
    controls convergence speed, never the minimizer, so it is rebalanced
    every 10 iterations to keep the primal and dual residuals within a
    factor of 10 of each other (`penalty` is the starting value; the
    banded factorization is redone on each change, which is cheap).
    Stops when the split residuals vanish (true fixed point) or when the
    best objective improved by less than 10*tol (relative) over the
    trailing 100 iterations; only budget exhaustion while still
    materially improving warns. Returns the best iterate seen. Appending
    to `trace` records its objective per outer iteration, a nonincreasing
    sequence.
    """
    y = np.asarray(y, dtype=float)
    n = y.size
    if lam <= 0.0:
        raise ValueError("lam must be positive")
    if n < 4:
        raise ValueError("need at least 4 points")
    mu = float(penalty)
    cb = linalg.cholesky_banded(_second_diff_banded(n, lam, mu))
    d = np.zeros(n)
    b = np.zeros(n)
    z = y.copy()
    best_obj = _objective(z, y, lam)
    best_z = z
    ptol = tol * max(1.0, np.abs(y).max())
    hist = [best_obj]
    for k in range(1, max_iter + 1):
        z = linalg.cho_solve_banded((cb, False), mu * (y + d - b))
        r = z - y + b
        d_new = np.sign(r) * np.maximum(np.abs(r) - 1.0 / mu, 0.0)
        primal = np.abs(z - y - d_new).max()
        dual = mu * np.abs(d_new - d).max()
        d = d_new
        b = r - d
        obj = _objective(z, y, lam)
        if obj < best_obj:
            best_obj = obj
            best_z = z
        hist.append(best_obj)
        if trace is not None:
            trace.append(best_obj)
        if primal <= ptol and dual <= ptol:
            return best_z
        if (k >= 100 and hist[k - 100] - best_obj
                <= 10.0 * tol * max(1.0, abs(best_obj))):
            return best_z
        if k % 10 == 0:
            # b is the scaled dual variable, so it rescales with mu to
            # keep the underlying multiplier continuous
            if primal > 10.0 * dual and mu < 1e12:
                mu *= 2.0
                b *= 0.5
                cb = linalg.cholesky_banded(_second_diff_banded(n, lam, mu))
            elif dual > 10.0 * primal and mu > 1e-12:
                mu *= 0.5
                b *= 2.0
                cb = linalg.cholesky_banded(_second_diff_banded(n, lam, mu))
    warnings.warn("L1 spline stopped at iteration budget while still "
                  "improving", RuntimeWarning)
    return best_z


def outlier_scores(prices, lam_trend: float = 50.0,
                   lam_scale: float = 50_000.0):
    """Scale-invariant outlier score per price.

    Robust trend by L1 spline, scale curve from L1-smoothed log absolute
    residuals (the scale spline must be much stiffer), residuals
    standardized by the scale then centered and reduced by median/IQR.
    Degenerate days with IQR 0 score 0 everywhere.
    """
    zeta = np.asarray(prices, dtype=float)
    if zeta.size < 4:
        raise ValueError("need at least 4 points")
    # full trading days routinely need more than the default budget
    zhat = split_bregman_l1_spline(zeta, lam_trend, max_iter=2000)
    resid = zeta - zhat
    # exact zeros would send the log to -inf
    logabs = np.log(np.maximum(np.abs(resid), 1e-12))
    sighat = split_bregman_l1_spline(logabs, lam_scale, max_iter=2000)
    eps = resid / np.exp(sighat)
    q25, q50, q75 = np.percentile(eps, [25.0, 50.0, 75.0])
    iqr = q75 - q25
    if iqr == 0.0:
        warnings.warn("degenerate day: identical standardized residuals",
                      RuntimeWarning)
        return np.zeros(zeta.size)
    return np.abs((eps - q50) / iqr)


def _constant_runs(x):
    """(start, length) of maximal runs of equal adjacent values."""
    if x.size == 0:
        return []
    change = np.flatnonzero(x[1:] != x[:-1]) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [x.size]))
    return [(int(s), int(e - s)) for s, e in zip(starts, ends)]


def clean_day(day: TickDay, cal: SessionCalendar,
              config: CleanConfig) -> TickDay:
    """Apply removal rules I..VII in order, re-evaluating survivors after
    each rule. Points already flagged on input stay flagged; only the
    surviving points are examined. Returns a new TickDay."""
    flags = day.flags.copy()
    times = day.times
    prices = day.prices

    def alive():
        return np.flatnonzero(flags == 0)

    # I: outside session windows
    sessions = cal.sessions(config.instrument, day.date)
    idx = alive()
    in_session = np.zeros(idx.size, dtype=bool)
    for s, e in sessions:
        in_session |= (times[idx] >= s) & (times[idx] <= e)
    flags[idx[~in_session]] = 1

    # II: nonpositive prices
    idx = alive()
    flags[idx[prices[idx] <= 0.0]] = 2

    # III: leading constant run keeps only its last point
    idx = alive()
    if idx.size >= 2:
        runs = _constant_runs(prices[idx])
        s, ln = runs[0]
        if ln >= 2:
            flags[idx[:ln - 1]] = 3

    # IV: trailing constant run keeps only the final point
    idx = alive()
    if idx.size >= 2:
        runs = _constant_runs(prices[idx])
        s, ln = runs[-1]
        if ln >= 2:
            flags[idx[s:s + ln - 1]] = 4

    # V: long static gaps keep only their last point
    idx = alive()
    if idx.size >= config.static_run:
        for s, ln in _constant_runs(prices[idx]):
            if ln >= config.static_run:
                flags[idx[s:s + ln - 1]] = 5

    # VI: robust outlier score (an infinite cutoff disables the rule)
    idx = alive()
    if np.isfinite(config.score_cutoff) and idx.size >= 4:
        scores = outlier_scores(prices[idx], config.lam_trend,
                                config.lam_scale)
        flags[idx[scores > config.score_cutoff]] = 6

    # VII: too few survivors kills the whole day
    idx = alive()
    if idx.size < config.min_count:
        flags[idx] = 7

    return TickDay(day.date, times.copy(), prices.copy(), flags)


def day_returns(day: TickDay) -> np.ndarray:
    """Percent log returns over the surviving prices."""
    p = day.prices[day.kept]
    if p.size < 2:
        raise ValueError("need at least 2 surviving prices")
    return 100.0 * np.diff(np.log(p))


def read_ticks(path) -> list[TickDay]:
    """Load `timestamp,price` rows (timestamp YYYY-MM-DD HH:MM) grouped
    into one TickDay per calendar date, in file order."""
    df = pd.read_csv(path, dtype={"timestamp": str, "price": float})
    if list(df.columns) != ["timestamp", "price"]:
        raise ValueError("expected columns timestamp,price")
    ts = df["timestamp"].str.strip()
    if not ts.str.match(r"^\d{4}-\d{2}-\d{2} \d{2}:\d{2}$").all():
        raise ValueError("timestamps must look like YYYY-MM-DD HH:MM")
    dates = ts.str[:10]
    minutes = ts.str[11:13].astype(int) * 60 + ts.str[14:16].astype(int)
    days = []
    for date, grp in df.assign(_d=dates, _m=minutes).groupby("_d", sort=True):
        days.append(TickDay(str(date), grp["_m"].to_numpy(),
                            grp["price"].to_numpy()))
    return days


def _stamp(date, minutes):
    return [f"{date} {m // 60:02d}:{m % 60:02d}" for m in minutes]


def write_clean(path, days: list) -> None:
    """Surviving points only, `timestamp,price`."""
    stamps, prices = [], []
    for day in days:
        k = day.kept
        stamps += _stamp(day.date, day.times[k])
        prices += list(day.prices[k])
    pd.DataFrame({"timestamp": stamps, "price": prices}).to_csv(
        path, index=False)


def write_removal_log(path, days: list) -> None:
    """Removed points with the rule that took each one, `timestamp,rule`."""
    stamps, rules = [], []
    for day in days:
        r = np.flatnonzero(day.flags != 0)
        stamps += _stamp(day.date, day.times[r])
        rules += [RULE_NAMES[day.flags[i] - 1] for i in r]
    pd.DataFrame({"timestamp": stamps, "rule": rules}).to_csv(
        path, index=False)


def read_removal_log(path) -> pd.DataFrame:
    return pd.read_csv(path, dtype={"timestamp": str, "rule": str})
