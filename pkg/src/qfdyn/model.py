"""Joint dynamic model for daily quantile-function parameter series.

The observable is a four-column series xi_t = (a_t, b*_t, g_t, h_t): per-day
g-and-h parameters with the scale on the log. Margins 1-3 follow AR(1)
conditional means with GARCH(1,1) variances and standardized skewed-t
innovations; margin 4 (the kurtosis h_t >= 0) follows the truncated
skewed-t / exponential mixture whose mode is AR(1) and whose mixture weight
is a logistic function of that mode. Cross-margin dependence is a Student-t
copula on the conditional PITs.

The likelihood is organized around `LikelihoodState`, a cache keyed to the
sampler's block structure: proposing a block recomputes only the pieces
that depend on it (one margin, the correlation, or the copula degrees of
freedom), and accepted proposals swap the pending pieces in. A full
recompute follows the identical code path, so cached and fresh evaluations
agree bit for bit.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import linalg, signal, special

from .dists import (
    PIT_CLAMP,
    _apat_cdf,
    _apat_logpdf,
    _apat_mean,
    _skt_cdf,
    _skt_logpdf,
    _skt_std_ab,
    _skt_std_quantile,
    _trskt_tail,
    t_cdf,
    t_logpdf,
    t_quantile,
)
from .gh import GHParams, gh_quantile

__all__ = [
    "N_PARAMS",
    "PARAM_NAMES",
    "BLOCKS",
    "XiSeries",
    "FilterInit",
    "FilterState",
    "DQFTheta",
    "SimResult",
    "in_region",
    "logprior",
    "filter_states",
    "loglik",
    "logposterior",
    "LikelihoodState",
    "PosteriorTarget",
    "default_start",
    "simulate",
    "forecast_qf",
    "read_xi",
    "write_xi",
]

# Flat parameter layout. Margins 1-3 are (delta, psi, phi, omega, alpha,
# beta, eta, lam); margin 4 is (delta, psi, phi, gamma_star, c, sigma, eta,
# lam, iota); then the six correlations in column-major lower-triangle
# order and the copula degrees of freedom.
PARAM_NAMES = []
for _i in (1, 2, 3):
    PARAM_NAMES += [f"{nm}{_i}" for nm in
                    ("delta", "psi", "phi", "omega", "alpha", "beta",
                     "eta", "lam")]
PARAM_NAMES += ["delta4", "psi4", "phi4", "gamma_star", "c", "sigma4",
                "eta4", "lam4", "iota"]
PARAM_NAMES += ["r21", "r31", "r41", "r32", "r42", "r43", "nu"]
N_PARAMS = len(PARAM_NAMES)

_M4 = 24          # offset of margin-4 parameters
_RHO = slice(33, 39)
_NU = 39

# Sampler blocks: per margin a mean block and a distribution block, margin
# 4's five mean-side parameters then its four distribution-side ones, the
# correlations, and nu alone.
BLOCKS = [
    np.arange(0, 3), np.arange(3, 8),
    np.arange(8, 11), np.arange(11, 16),
    np.arange(16, 19), np.arange(19, 24),
    np.arange(24, 29), np.arange(29, 33),
    np.arange(33, 39), np.array([39]),
]

# which margin (0..3) a block touches; None = copula-only
_BLOCK_MARGIN = [0, 0, 1, 1, 2, 2, 3, 3, None, None]

_LOWER_IDX = [(1, 0), (2, 0), (3, 0), (2, 1), (3, 1), (3, 2)]

_ETA_MAX = 40.0
_NU_MAX = 40.0
_GSTAR_BOUND = 6.0
_IOTA_PRIOR_SCALE = 1e-5


def corr_from_vector(rho):
    r = np.eye(4)
    for k, (i, j) in enumerate(_LOWER_IDX):
        r[i, j] = r[j, i] = rho[k]
    return r


def _chol_or_none(corr):
    try:
        return np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        return None


# -- containers ----------------------------------------------------------------


class NonFiniteLikelihoodError(ValueError):
    """Raised when a cold-start evaluation point gives a non-finite kernel."""


class XiSeries:
    """T x 4 series of fitted (a, b_star, g, h) with day labels."""

    def __init__(self, values, days=None):
        values = np.asarray(values, dtype=float)
        if values.ndim != 2 or values.shape[1] != 4:
            raise ValueError("values must be (T, 4)")
        if values.shape[0] < 2:
            raise ValueError("need at least two days")
        if not np.isfinite(values).all():
            raise ValueError("values must be finite")
        # h lives on [0, inf) as far as the margin is concerned; only the
        # quantile-function map needs it below 1, and that path clamps
        if np.any(values[:, 3] < 0.0):
            raise ValueError("fourth column (h) must be nonnegative")
        if np.any(values.var(axis=0) == 0.0):
            raise ValueError("a column is constant; the model is degenerate")
        self.values = values
        self.days = (np.arange(values.shape[0]) if days is None
                     else np.asarray(days))
        if self.days.shape[0] != values.shape[0]:
            raise ValueError("days and values disagree in length")

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class FilterInit:
    """Recursion start values: means/variances at t = 0."""

    mu0: np.ndarray      # (3,)
    sig20: np.ndarray    # (3,)
    mu40: float

    @staticmethod
    def from_data(xi: XiSeries) -> "FilterInit":
        v = xi.values
        return FilterInit(mu0=v[:, :3].mean(axis=0),
                          sig20=v[:, :3].var(axis=0),
                          mu40=float(v[:, 3].mean()))


@dataclass
class FilterState:
    mu: np.ndarray       # (T, 3) conditional means, margins 1-3
    sig2: np.ndarray     # (T, 3) conditional variances, margins 1-3
    mu4: np.ndarray      # (T,) conditional mode, margin 4
    w4: np.ndarray       # (T,) mixture weight, margin 4


@dataclass(frozen=True)
class DQFTheta:
    """Named view over the flat parameter vector."""

    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=float)
        if v.shape != (N_PARAMS,):
            raise ValueError(f"expected {N_PARAMS} parameters, got {v.shape}")
        object.__setattr__(self, "vector", v)

    @staticmethod
    def from_dict(d) -> "DQFTheta":
        return DQFTheta(np.array([d[k] for k in PARAM_NAMES], dtype=float))

    def as_dict(self) -> dict:
        return dict(zip(PARAM_NAMES, self.vector))

    @property
    def corr(self) -> np.ndarray:
        return corr_from_vector(self.vector[_RHO])

    @property
    def nu(self) -> float:
        return float(self.vector[_NU])


@dataclass
class SimResult:
    xi: XiSeries
    init: FilterInit
    pit: np.ndarray      # (T, 4) copula uniforms that generated the draws
    states: FilterState


# -- region and prior ------------------------------------------------------------


def in_region(vec) -> bool:
    """Allowable-region test; non-finite or out-of-bound parameters fail."""
    v = np.asarray(vec, dtype=float)
    if not np.isfinite(v).all():
        return False
    for o in (0, 8, 16):
        if not -1.0 < v[o + 1] + v[o + 2] < 1.0:
            return False
        if not v[o + 3] > 0.0:
            return False
        if v[o + 4] < 0.0 or v[o + 5] < 0.0 or v[o + 4] + v[o + 5] >= 1.0:
            return False
        if not 2.0 < v[o + 6] <= _ETA_MAX:
            return False
        if not -1.0 < v[o + 7] < 1.0:
            return False
    d4, p4, f4, gs, c4, s4, e4, l4, io = v[_M4:_M4 + 9]
    if d4 < 0.0 or p4 < 0.0 or f4 < 0.0 or p4 + f4 >= 1.0:
        return False
    if not -_GSTAR_BOUND <= gs <= _GSTAR_BOUND:
        return False
    if not 0.0 <= c4 <= 1.0:
        return False
    if not s4 > 0.0 or not io > 0.0:
        return False
    if not 2.0 < e4 <= _ETA_MAX:
        return False
    if not -1.0 < l4 < 1.0:
        return False
    rho = v[_RHO]
    if np.any(np.abs(rho) >= 1.0):
        return False
    if not 2.0 < v[_NU] <= _NU_MAX:
        return False
    return _chol_or_none(corr_from_vector(rho)) is not None


def logprior(vec) -> float:
    """Log of the improper reference prior over the allowable region."""
    v = np.asarray(vec, dtype=float)
    if not in_region(v):
        return -np.inf
    etas = np.array([v[6], v[14], v[22], v[_M4 + 6]])
    return float(
        -np.log(v[3]) - np.log(v[11]) - np.log(v[19])
        - 2.0 * np.sum(np.log(etas))
        - np.log1p((v[_M4 + 8] / _IOTA_PRIOR_SCALE) ** 2)
        - 2.0 * np.log(v[_NU]))


# -- filtering --------------------------------------------------------------------


def _ar_recursion(e, phi, x0):
    """x_t = e_t + phi x_{t-1} for t >= 1 given x_0; returns (T,) with x_0."""
    out = np.empty(e.shape[0] + 1)
    out[0] = x0
    if e.shape[0]:
        out[1:] = signal.lfilter([1.0], [1.0, -phi], e, zi=[phi * x0])[0]
    return out


def filter_states(vec, xi: XiSeries, init: FilterInit | None = None) -> FilterState:
    """Run all conditional-moment recursions over the observed series."""
    v = np.asarray(vec, dtype=float)
    data = xi.values
    T = data.shape[0]
    if init is None:
        init = FilterInit.from_data(xi)
    mu = np.empty((T, 3))
    sig2 = np.empty((T, 3))
    for i in range(3):
        o = 8 * i
        de, ps, ph, om, al, be = v[o:o + 6]
        x = data[:, i]
        mu[:, i] = _ar_recursion(de + ps * x[:-1], ph, init.mu0[i])
        eps = x - mu[:, i]
        sig2[:, i] = _ar_recursion(om + al * eps[:-1] ** 2, be,
                                   init.sig20[i])
    d4, p4, f4, gs, c4 = v[_M4:_M4 + 5]
    x4 = data[:, 3]
    mu4 = _ar_recursion(d4 + p4 * x4[:-1], f4, init.mu40)
    w4 = 0.5 + 0.5 * special.expit(np.exp(gs) * (mu4 - c4))
    return FilterState(mu=mu, sig2=sig2, mu4=mu4, w4=w4)


# -- likelihood cache --------------------------------------------------------------


class _MarginPiece:
    __slots__ = ("logf_sum", "u", "x", "logt_sum")

    def __init__(self, logf_sum, u, x, logt_sum):
        self.logf_sum = logf_sum
        self.u = u
        self.x = x
        self.logt_sum = logt_sum


def _margin_piece_garch(v, i, data, init, nu):
    """Density sum, PITs, and copula coordinates for margin i in {0,1,2}.

    The region only bounds psi+phi, so phi itself can exceed 1 and the
    recursion can diverge; overflow is silenced here and surfaces as a
    non-finite piece the caller must treat as log density -inf.
    """
    o = 8 * i
    de, ps, ph, om, al, be, eta, lam = v[o:o + 8]
    x = data[:, i]
    with np.errstate(all="ignore"):
        mu = _ar_recursion(de + ps * x[:-1], ph, init.mu0[i])
        eps = x - mu
        sig2 = _ar_recursion(om + al * eps[:-1] ** 2, be, init.sig20[i])
        sig = np.sqrt(sig2)
        z = eps / sig
        a, b = _skt_std_ab(eta, lam)
        logf = (np.log(b) + _skt_logpdf(a + b * z, 0.0, 1.0, eta, lam)
                - np.log(sig))
        u = np.clip(_skt_cdf(a + b * z, 0.0, 1.0, eta, lam),
                    PIT_CLAMP, 1.0 - PIT_CLAMP)
        if not np.isfinite(u).all():
            return _MarginPiece(-np.inf, u, u, -np.inf)
        xq = t_quantile(u, nu)
        return _MarginPiece(float(np.sum(logf)), u, xq,
                            float(np.sum(t_logpdf(xq, nu))))


def _margin_piece_apat(v, data, init, nu):
    d4, p4, f4, gs, c4, s4, e4, l4, io = v[_M4:_M4 + 9]
    x = data[:, 3]
    with np.errstate(all="ignore"):
        mu4 = _ar_recursion(d4 + p4 * x[:-1], f4, init.mu40)
        w4 = 0.5 + 0.5 * special.expit(np.exp(gs) * (mu4 - c4))
        logf = _apat_logpdf(x, mu4, s4, e4, l4, io, w4)
        u = np.clip(_apat_cdf(x, mu4, s4, e4, l4, io, w4),
                    PIT_CLAMP, 1.0 - PIT_CLAMP)
        if not np.isfinite(u).all():
            return _MarginPiece(-np.inf, u, u, -np.inf)
        xq = t_quantile(u, nu)
        return _MarginPiece(float(np.sum(logf)), u, xq,
                            float(np.sum(t_logpdf(xq, nu))))


def _piece_ok(piece: "_MarginPiece") -> bool:
    return math.isfinite(piece.logf_sum) and math.isfinite(piece.logt_sum)


def _margin_piece(v, i, data, init, nu):
    if i < 3:
        return _margin_piece_garch(v, i, data, init, nu)
    return _margin_piece_apat(v, data, init, nu)


def _copula_mst_sum(x_cols, chol, nu):
    """Sum over t of log f_MSt(x_t; R, nu), via the Cholesky factor."""
    xt = np.vstack(x_cols)
    y = linalg.solve_triangular(chol, xt, lower=True)
    q = np.einsum("ij,ij->j", y, y)
    T = xt.shape[1]
    const = (special.gammaln((nu + 4.0) / 2.0) - special.gammaln(nu / 2.0)
             - 2.0 * np.log(nu * np.pi) - np.sum(np.log(np.diag(chol))))
    return float(T * const - (nu + 4.0) / 2.0 * np.sum(np.log1p(q / nu)))


class LikelihoodState:
    """Blockwise-cached posterior kernel evaluation.

    propose() computes the candidate's log posterior touching only the
    invalidated pieces; accept()/reject() then commit or drop the pending
    recomputation. The arithmetic per piece is identical to a cold start,
    so a cached total equals a full recompute exactly.
    """

    def __init__(self, xi: XiSeries, vec, init: FilterInit | None = None):
        self.xi = xi
        self.init = FilterInit.from_data(xi) if init is None else init
        vec = np.asarray(vec, dtype=float).copy()
        if not in_region(vec):
            raise ValueError("starting parameters outside the allowable region")
        self.vec = vec
        self._pending = None
        self._rebuild_all()

    # every piece from scratch, canonical margin order
    def _rebuild_all(self):
        v = self.vec
        nu = v[_NU]
        self.margins = [_margin_piece(v, i, self.xi.values, self.init, nu)
                        for i in range(4)]
        if not all(_piece_ok(m) for m in self.margins):
            raise NonFiniteLikelihoodError(
                "log likelihood is not finite at the starting point")
        self.chol = np.linalg.cholesky(corr_from_vector(v[_RHO]))
        self.mst_sum = _copula_mst_sum([m.x for m in self.margins],
                                       self.chol, nu)
        self.logprior = logprior(v)
        self._refresh_total()
        if not math.isfinite(self.logpost):
            raise NonFiniteLikelihoodError(
                "log likelihood is not finite at the starting point")

    def _refresh_total(self):
        self.loglik = (sum(m.logf_sum for m in self.margins)
                       + self.mst_sum
                       - sum(m.logt_sum for m in self.margins))
        self.logpost = self.loglik + self.logprior

    def propose(self, block_id: int, values) -> float:
        """Candidate log posterior after writing `values` into the block."""
        cand = self.vec.copy()
        cand[BLOCKS[block_id]] = values
        if not in_region(cand):
            self._pending = None
            return -np.inf
        lp = logprior(cand)
        nu = cand[_NU]
        margin = _BLOCK_MARGIN[block_id]
        pend = {"vec": cand, "logprior": lp}
        if margin is not None:
            piece = _margin_piece(cand, margin, self.xi.values, self.init, nu)
            if not _piece_ok(piece):
                self._pending = None
                return -np.inf
            xs = [piece.x if i == margin else m.x
                  for i, m in enumerate(self.margins)]
            pend["margins"] = {margin: piece}
            pend["chol"] = self.chol
            pend["mst_sum"] = _copula_mst_sum(xs, self.chol, nu)
            # summed in the same order as a cold start so the totals match
            # a full recompute bit for bit
            logf = sum(p.logf_sum for p in
                       (piece if i == margin else m
                        for i, m in enumerate(self.margins)))
            logt = sum(p.logt_sum for p in
                       (piece if i == margin else m
                        for i, m in enumerate(self.margins)))
        elif block_id == 8:
            chol = _chol_or_none(corr_from_vector(cand[_RHO]))
            if chol is None:
                self._pending = None
                return -np.inf
            pend["chol"] = chol
            pend["mst_sum"] = _copula_mst_sum([m.x for m in self.margins],
                                              chol, nu)
            logf = sum(m.logf_sum for m in self.margins)
            logt = sum(m.logt_sum for m in self.margins)
        else:
            # nu moved: every copula coordinate is remapped from cached PITs
            pieces = {}
            for i, m in enumerate(self.margins):
                xq = t_quantile(m.u, nu)
                pieces[i] = _MarginPiece(m.logf_sum, m.u, xq,
                                         float(np.sum(t_logpdf(xq, nu))))
            pend["margins"] = pieces
            pend["chol"] = self.chol
            pend["mst_sum"] = _copula_mst_sum([pieces[i].x for i in range(4)],
                                              self.chol, nu)
            logf = sum(pieces[i].logf_sum for i in range(4))
            logt = sum(pieces[i].logt_sum for i in range(4))
        pend["loglik"] = logf + pend["mst_sum"] - logt
        pend["logpost"] = pend["loglik"] + lp
        if not math.isfinite(pend["logpost"]):
            self._pending = None
            return -np.inf
        self._pending = pend
        return pend["logpost"]

    def accept(self):
        p = self._pending
        if p is None:
            raise RuntimeError("nothing pending to accept")
        self.vec = p["vec"]
        for i, piece in p.get("margins", {}).items():
            self.margins[i] = piece
        self.chol = p["chol"]
        self.mst_sum = p["mst_sum"]
        self.logprior = p["logprior"]
        self.loglik = p["loglik"]
        self.logpost = p["logpost"]
        self._pending = None

    def reject(self):
        self._pending = None

    @property
    def theta(self):
        return self.vec


# -- public evaluation wrappers ------------------------------------------------------


def loglik(vec, xi: XiSeries, init: FilterInit | None = None) -> float:
    """Full log likelihood (margins plus copula) at one parameter point.

    Numerically divergent in-region points (the filter recursion is only
    stable for |phi| < 1, which the region does not require) come back
    as -inf rather than raising.
    """
    v = np.asarray(vec, dtype=float)
    if not in_region(v):
        return -np.inf
    try:
        return LikelihoodState(xi, v, init).loglik
    except NonFiniteLikelihoodError:
        return -np.inf


def logposterior(vec, xi: XiSeries, init: FilterInit | None = None) -> float:
    v = np.asarray(vec, dtype=float)
    if not in_region(v):
        return -np.inf
    try:
        return LikelihoodState(xi, v, init).logpost
    except NonFiniteLikelihoodError:
        return -np.inf


class PosteriorTarget:
    """Block-sampler adapter for the model posterior on a fixed dataset."""

    def __init__(self, xi: XiSeries, init: FilterInit | None = None,
                 start=None):
        self.xi = xi
        self.init = FilterInit.from_data(xi) if init is None else init
        self.blocks = BLOCKS
        self.dim = N_PARAMS
        self.param_names = list(PARAM_NAMES)
        self._start = (default_start(xi) if start is None
                       else np.asarray(start, dtype=float))

    def start_state(self):
        return self._start.copy()

    def init_proposal_scales(self):
        return default_proposal_scales(self._start)

    def context(self, vec):
        return LikelihoodState(self.xi, vec, self.init)


def default_start(xi: XiSeries) -> np.ndarray:
    """Moment-anchored starting point well inside the allowable region."""
    v = np.empty(N_PARAMS)
    data = xi.values
    for i in range(3):
        o = 8 * i
        v[o] = 0.1 * data[:, i].mean()
        v[o + 1], v[o + 2] = 0.2, 0.7
        v[o + 3] = max(0.08 * data[:, i].var(), 1e-12)
        v[o + 4], v[o + 5] = 0.1, 0.8
        v[o + 6], v[o + 7] = 8.0, 0.0
    m4 = data[:, 3].mean()
    v[_M4 + 0] = 0.1 * m4
    v[_M4 + 1], v[_M4 + 2] = 0.2, 0.7
    v[_M4 + 3] = 1.0
    v[_M4 + 4] = min(max(0.5 * m4, 0.0), 1.0)
    v[_M4 + 5] = max(0.5 * data[:, 3].std(), 1e-6)
    v[_M4 + 6], v[_M4 + 7] = 6.0, 0.0
    v[_M4 + 8] = 1e-4
    v[_RHO] = 0.0
    v[_NU] = 15.0
    return v


def default_proposal_scales(start) -> np.ndarray:
    """Rough per-parameter scales seeding the first tuning epoch."""
    v = np.asarray(start, dtype=float)
    s = np.empty(N_PARAMS)
    for o in (0, 8, 16):
        s[o] = max(0.1 * abs(v[o]), 1e-3)
        s[o + 1] = s[o + 2] = 0.1
        s[o + 3] = 0.5 * v[o + 3]
        s[o + 4] = s[o + 5] = 0.05
        s[o + 6] = 1.0
        s[o + 7] = 0.1
    s[_M4 + 0] = max(0.1 * abs(v[_M4]), 1e-4)
    s[_M4 + 1] = s[_M4 + 2] = 0.1
    s[_M4 + 3] = 0.5
    s[_M4 + 4] = 0.1
    s[_M4 + 5] = 0.3 * v[_M4 + 5]
    s[_M4 + 6] = 1.0
    s[_M4 + 7] = 0.1
    s[_M4 + 8] = 0.5 * v[_M4 + 8]
    s[_RHO] = 0.1
    s[_NU] = 1.0
    return s


# -- simulation ------------------------------------------------------------------


class _Margin4Inverter:
    """Scalar mixture-CDF inversion tuned for the simulation loop.

    The (sigma, eta, lam, iota)-only constants are precomputed; invert()
    costs a few scalar t-CDF calls per step (bracketed Newton), which keeps
    a 1e5-step simulation in seconds despite the sequential recursion.
    """

    def __init__(self, sigma, eta, lam, iota):
        self.sigma, self.eta, self.lam, self.iota = sigma, eta, lam, iota
        self.s = math.sqrt(eta / (eta - 2.0))
        self.logc = (special.gammaln((eta + 1.0) / 2.0)
                     - special.gammaln(eta / 2.0)
                     - 0.5 * math.log(math.pi * (eta - 2.0)))
        self.c = math.exp(self.logc)

    def _skt_cdf(self, t):
        # mode/scale skewed-t CDF at standardized offset t = (x - mu)/sigma
        if t < 0.0:
            d = 1.0 - self.lam
            return d * special.stdtr(self.eta, t * self.s / d)
        d = 1.0 + self.lam
        return d * special.stdtr(self.eta, t * self.s / d) - self.lam

    def _skt_pdf(self, t):
        d = (1.0 - self.lam) if t < 0.0 else (1.0 + self.lam)
        r = t / d
        return self.c / self.sigma * (1.0 + r * r / (self.eta - 2.0)) \
            ** (-(self.eta + 1.0) / 2.0)

    def invert(self, u, mu, w):
        sig, iota, lam = self.sigma, self.iota, self.lam
        f0 = self._skt_cdf(-mu / sig)
        tail = 1.0 - f0
        # upper bracket from the dominant truncated component
        utr = min(u / w, 1.0 - 1e-14) * tail + f0
        if utr < (1.0 - lam) / 2.0:
            d = 1.0 - lam
            arg = utr / d
        else:
            d = 1.0 + lam
            arg = (utr + lam) / d
        arg = min(max(arg, PIT_CLAMP), 1.0 - PIT_CLAMP)
        hi = mu + sig * d / self.s * special.stdtrit(self.eta, arg)
        hi = max(hi, 10.0 * iota) + 1e-6
        lo = 0.0
        h = 0.5 * hi
        for _ in range(100):
            fh = (w * (self._skt_cdf((h - mu) / sig) - f0) / tail
                  - (1.0 - w) * math.expm1(-h / iota))
            if fh < u:
                lo = h
            else:
                hi = h
            if hi - lo < 1e-12 * (1.0 + h):
                break
            dens = (w * self._skt_pdf((h - mu) / sig) / tail
                    + (1.0 - w) * math.exp(-h / iota) / iota)
            h_new = h - (fh - u) / dens if dens > 0.0 else h
            h = h_new if lo < h_new < hi else 0.5 * (lo + hi)
        return 0.5 * (lo + hi)


def simulate(vec, T, rng, burn=500) -> SimResult:
    """Draw a length-T series from the model under fixed parameters.

    Copula uniforms arrive from a multivariate-t draw mapped through the t
    CDF; margins 1-3 invert their standardized innovations up front and the
    recursions advance in one sequential pass, inverting margin 4's mixture
    conditionally at each step. The returned init reproduces the filter
    states of the retained segment, and pit holds the generating uniforms.
    """
    v = np.asarray(vec, dtype=float)
    if not in_region(v):
        raise ValueError("parameters outside the allowable region")
    if T < 2:
        raise ValueError("T must be at least 2")
    nu = v[_NU]
    n = T + burn

    z = rng.standard_normal((n, 4)) @ np.linalg.cholesky(
        corr_from_vector(v[_RHO])).T
    chi = rng.chisquare(nu, size=n) / nu
    pit = t_cdf(z / np.sqrt(chi)[:, None], nu)
    pit = np.clip(pit, PIT_CLAMP, 1.0 - PIT_CLAMP)

    # margin 1-3 innovations are unconditional, so invert them in bulk
    vs = np.empty((n, 3))
    for i in range(3):
        o = 8 * i
        vs[:, i] = _skt_std_quantile(pit[:, i], v[o + 6], v[o + 7])

    d4, p4, f4, gs, c4, s4, e4, l4, io = v[_M4:_M4 + 9]
    gamma = np.exp(gs)
    inverter = _Margin4Inverter(s4, e4, l4, io)

    mu = np.empty((n, 3))
    sig2 = np.empty((n, 3))
    mu4 = np.empty(n)
    w4 = np.empty(n)
    x = np.empty((n, 4))

    # start at unconditional values; burn-in washes the choice out
    for i in range(3):
        o = 8 * i
        mu[0, i] = v[o] / (1.0 - v[o + 1] - v[o + 2])
        sig2[0, i] = v[o + 3] / (1.0 - v[o + 4] - v[o + 5])
    mu4[0] = d4 / (1.0 - p4 - f4) if p4 + f4 < 1.0 else d4

    # plain-float recursion state: the loop is sequential by construction
    m = [float(mu[0, i]) for i in range(3)]
    s2 = [float(sig2[0, i]) for i in range(3)]
    m4 = float(mu4[0])
    coef = [tuple(float(c) for c in v[8 * i:8 * i + 6]) for i in range(3)]
    for t in range(n):
        if t > 0:
            for i in range(3):
                de, ps, ph, om, al, be = coef[i]
                eps = x[t - 1, i] - m[i]
                m[i] = de + ps * x[t - 1, i] + ph * m[i]
                s2[i] = om + al * eps * eps + be * s2[i]
            m4 = d4 + p4 * x[t - 1, 3] + f4 * m4
            mu[t, 0], mu[t, 1], mu[t, 2] = m
            sig2[t, 0], sig2[t, 1], sig2[t, 2] = s2
            mu4[t] = m4
        arg = gamma * (m4 - c4)
        wt = 1.0 if arg > 700.0 else 0.5 + 0.5 / (1.0 + math.exp(-arg))
        w4[t] = wt
        for i in range(3):
            x[t, i] = m[i] + math.sqrt(s2[i]) * vs[t, i]
        x[t, 3] = inverter.invert(pit[t, 3], m4, wt)

    keep = slice(burn, n)
    init = FilterInit(mu0=mu[burn].copy(), sig20=sig2[burn].copy(),
                      mu40=float(mu4[burn]))
    xi = XiSeries(x[keep])
    states = FilterState(mu=mu[keep], sig2=sig2[keep], mu4=mu4[keep],
                         w4=w4[keep])
    return SimResult(xi=xi, init=init, pit=pit[keep], states=states)


# -- forecasting -----------------------------------------------------------------


def forecast_qf(vec, xi: XiSeries, u_levels,
                init: FilterInit | None = None, last: int | None = None):
    """One-step-ahead quantile-function forecasts for days 1..T+1.

    Row t is built from information through day t-1 (row 0 reflects the
    filter initialization); the final row is the out-of-sample forecast for
    day T+1. The plug-in map sends the conditional means to (a, b*, g) and
    the margin-4 conditional mean to h, clamped below 1 so the quantile
    function stays monotone. `last` keeps only the final rows, which the
    rolling backtest uses to avoid evaluating the whole window per draw.
    Returns (params, quantiles).
    """
    v = np.asarray(vec, dtype=float)
    if not in_region(v):
        raise ValueError("parameters outside the allowable region")
    u_levels = np.asarray(u_levels, dtype=float)
    if np.any((u_levels <= 0.0) | (u_levels >= 1.0)):
        raise ValueError("u levels must lie strictly inside (0, 1)")
    st = filter_states(v, xi, init)
    data = xi.values
    T = data.shape[0]

    mu_next = np.empty(3)
    for i in range(3):
        o = 8 * i
        mu_next[i] = v[o] + v[o + 1] * data[T - 1, i] + v[o + 2] * st.mu[T - 1, i]
    d4, p4, f4, gs, c4, s4, e4, l4, io = v[_M4:_M4 + 9]
    mu4_next = d4 + p4 * data[T - 1, 3] + f4 * st.mu4[T - 1]
    w4_next = 0.5 + 0.5 * special.expit(np.exp(gs) * (mu4_next - c4))

    a_path = np.append(st.mu[:, 0], mu_next[0])
    bstar_path = np.append(st.mu[:, 1], mu_next[1])
    g_path = np.append(st.mu[:, 2], mu_next[2])
    mu4_path = np.append(st.mu4, mu4_next)
    w4_path = np.append(st.w4, w4_next)
    if last is not None:
        a_path, bstar_path, g_path = (a_path[-last:], bstar_path[-last:],
                                      g_path[-last:])
        mu4_path, w4_path = mu4_path[-last:], w4_path[-last:]
    h_path = _apat_mean(mu4_path, s4, e4, l4, io, w4_path)
    if np.any(h_path > 0.99):
        warnings.warn("conditional-mean h above 0.99 clamped for the "
                      "quantile map", RuntimeWarning)
    h_path = np.clip(h_path, 0.0, 0.99)

    params = [GHParams(a=float(a_path[t]), b_star=float(bstar_path[t]),
                       g=float(g_path[t]), h=float(h_path[t]))
              for t in range(a_path.size)]
    quants = np.empty((len(params), u_levels.size))
    for t, p in enumerate(params):
        quants[t] = gh_quantile(u_levels, p)
    return params, quants


# -- CSV -------------------------------------------------------------------------


def read_xi(path) -> XiSeries:
    df = pd.read_csv(path)
    need = ["day", "a", "b_star", "g", "h"]
    if not set(need).issubset(df.columns):
        raise ValueError(f"series CSV needs columns {need}")
    return XiSeries(df[["a", "b_star", "g", "h"]].to_numpy(float),
                    days=df["day"].to_numpy())


def write_xi(path, xi: XiSeries) -> None:
    df = pd.DataFrame(xi.values, columns=["a", "b_star", "g", "h"])
    df.insert(0, "day", xi.days)
    df.to_csv(path, index=False)
