"""Signal-ratio diagnostics: how much of a margin's unconditional variance
the conditional mean explains.

For the exponential-smoothing margins the ratio has the closed form
psi^2 / (1 - 2 psi phi - phi^2), free of the innovation variance. The
mixture margin has no closed form, so its ratio is estimated by simulating
the margin on its own and comparing Var(conditional mean) to Var(series).
Invertibility caps the ratio at (|gamma|+1)/2 for persistence gamma.
"""

from __future__ import annotations

import math

import numpy as np
import pandas as pd
from scipy import special

from .dists import _apat_mean
from .model import _M4, N_PARAMS, _Margin4Inverter
from .mcmc import interval_ranks


def rsig_closed(psi, phi):
    """Fraction of variance carried by the conditional mean; needs
    covariance stationarity |psi + phi| < 1."""
    psi = np.asarray(psi, dtype=float)
    phi = np.asarray(phi, dtype=float)
    gamma = psi + phi
    denom = 1.0 - 2.0 * psi * phi - phi ** 2
    if np.any(np.abs(gamma) >= 1.0) or np.any(denom <= 0.0):
        raise ValueError("need |psi + phi| < 1")
    out = psi ** 2 / denom
    return float(out) if out.ndim == 0 else out


def rsig_invertibility_bound(gamma):
    """Largest ratio an invertible process at persistence gamma can reach."""
    gamma = np.asarray(gamma, dtype=float)
    if np.any(np.abs(gamma) >= 1.0):
        raise ValueError("need |gamma| < 1")
    out = (np.abs(gamma) + 1.0) / 2.0
    return float(out) if out.ndim == 0 else out


def rsig_apatosaurus(theta4, n_sim: int = 1_000_000, seed: int = 0,
                     burn: int = 10_000) -> float:
    """Simulated signal ratio for the nonnegative mixture margin.

    theta4 is (delta, psi, phi, gamma_star, c, sigma, eta, lambda, iota).
    The margin is run standalone (no copula coupling); the ratio is
    Var(conditional mean) / Var(series) over the retained path.
    """
    d4, p4, f4, gs, c4, s4, e4, l4, io = (float(x) for x in theta4)
    if not (d4 >= 0.0 and p4 >= 0.0 and f4 >= 0.0 and p4 + f4 < 1.0):
        raise ValueError("margin-4 mean recursion must be stationary")
    inverter = _Margin4Inverter(s4, e4, l4, io)
    rng = np.random.default_rng(seed)
    total = burn + n_sim
    u = rng.random(total)
    mu_path = np.empty(total)
    w_path = np.empty(total)
    xi_path = np.empty(total)
    egs = math.exp(gs)
    m = d4 / (1.0 - p4 - f4) if p4 + f4 > 0.0 else d4
    for t in range(total):
        arg = egs * (m - c4)
        if arg > 700.0:
            wt = 1.0
        else:
            wt = 0.5 + 0.5 / (1.0 + math.exp(-arg))
        xt = inverter.invert(u[t], m, wt)
        mu_path[t] = m
        w_path[t] = wt
        xi_path[t] = xt
        m = d4 + p4 * xt + f4 * m
    mu_path = mu_path[burn:]
    w_path = w_path[burn:]
    xi_path = xi_path[burn:]
    cond_mean = _apat_mean(mu_path, s4, e4, l4, io, w_path)
    return float(cond_mean.var() / xi_path.var())


def rsig_posterior(draws, thin: int = 10, m4_n_sim: int = 100_000,
                   m4_thin: int = 10, seed: int = 0) -> pd.DataFrame:
    """Propagate posterior draws of the full parameter vector through the
    per-margin signal ratios.

    Margins 1-3 evaluate the closed form on every thin-th draw; margin 4
    simulates on a further-thinned subset (m4_thin on top of thin) with
    m4_n_sim steps each, since each evaluation costs a full path. Returns
    one row per margin: point (mean over draws), equal-tailed 95% bounds,
    and the method tag.
    """
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2 or draws.shape[1] != N_PARAMS:
        raise ValueError(f"draws must be (n, {N_PARAMS})")
    sub = draws[::thin]
    if sub.shape[0] < 2:
        raise ValueError("too few draws after thinning")
    rows = []
    for i, o in enumerate((0, 8, 16)):
        vals = rsig_closed(sub[:, o + 1], sub[:, o + 2])
        rows.append(_summary_row(i + 1, vals, "closed-form"))
    sub4 = sub[::m4_thin]
    vals4 = np.array([
        rsig_apatosaurus(row[_M4:_M4 + 9], n_sim=m4_n_sim, seed=seed + k,
                         burn=min(10_000, m4_n_sim // 10))
        for k, row in enumerate(sub4)])
    rows.append(_summary_row(4, vals4, "simulated"))
    return pd.DataFrame(rows, columns=["margin", "point", "lower", "upper",
                                       "method"])


def _summary_row(margin, vals, method):
    vals = np.sort(np.asarray(vals, dtype=float))
    n = vals.size
    lo, hi = interval_ranks(n)
    return (margin, float(vals.mean()), float(vals[lo - 1]),
            float(vals[hi - 1]), method)


def write_rsig(path, table: pd.DataFrame) -> None:
    table.to_csv(path, index=False)


def read_rsig(path) -> pd.DataFrame:
    return pd.read_csv(path)
