"""Distribution zoo backing the generative model and its diagnostics.

Everything here is parameterized the way the model consumes it:

* skewed Student-t in mode/scale form (the mode is the location parameter,
  not the mean), plus its standardized mean-zero/variance-one version used
  for margin innovations;
* the same family left-truncated at zero, with a closed-form mean;
* a two-part mixture of the truncated skewed-t with a small-scale
  exponential, for a margin whose observations are nonnegative and pile up
  near zero;
* the Student-t copula density on arbitrary dimension;
* the asymmetric-Laplace log density whose kernel is the quantile check
  loss.

Private underscore functions broadcast over location/weight arrays because
the model's filters feed time-varying parameters; the public wrappers take
validated scalar parameter bundles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg, special

__all__ = [
    "SktParams",
    "ApatParams",
    "t_logpdf",
    "t_cdf",
    "t_quantile",
    "skt_pdf",
    "skt_cdf",
    "skt_quantile",
    "skt_std_pdf",
    "skt_std_cdf",
    "skt_std_quantile",
    "trskt_pdf",
    "trskt_cdf",
    "trskt_quantile",
    "trskt_mean",
    "apat_pdf",
    "apat_cdf",
    "apat_quantile",
    "apat_mean",
    "apat_sample",
    "t_copula_logdensity",
    "al_logpdf",
]

# Probabilities are clamped to this band before any t-quantile transform.
PIT_CLAMP = 1e-12


def _validate_eta_lam(eta, lam):
    if not eta > 2.0:
        raise ValueError(f"eta must exceed 2, got {eta!r}")
    if not -1.0 < lam < 1.0:
        raise ValueError(f"lambda must lie in (-1, 1), got {lam!r}")


@dataclass(frozen=True)
class SktParams:
    """Skewed Student-t in mode/scale form: mode mu, scale sigma."""

    mu: float
    sigma: float
    eta: float
    lam: float

    def __post_init__(self):
        if not np.isfinite([self.mu, self.sigma, self.eta, self.lam]).all():
            raise ValueError("parameters must be finite")
        if not self.sigma > 0.0:
            raise ValueError(f"sigma must be positive, got {self.sigma!r}")
        _validate_eta_lam(self.eta, self.lam)


@dataclass(frozen=True)
class ApatParams:
    """Mixture of a zero-truncated skewed-t (weight w) and Exp(iota)."""

    mu: float
    sigma: float
    eta: float
    lam: float
    iota: float
    w: float

    def __post_init__(self):
        vals = [self.mu, self.sigma, self.eta, self.lam, self.iota, self.w]
        if not np.isfinite(vals).all():
            raise ValueError("parameters must be finite")
        if self.mu < 0.0:
            raise ValueError("mode mu must be nonnegative")
        if not self.sigma > 0.0:
            raise ValueError("sigma must be positive")
        if not self.iota > 0.0:
            raise ValueError("iota must be positive")
        if not 0.5 <= self.w <= 1.0:
            raise ValueError(f"w must lie in [1/2, 1], got {self.w!r}")
        _validate_eta_lam(self.eta, self.lam)


# -- Student t ----------------------------------------------------------------

def t_logpdf(x, nu):
    x = np.asarray(x, dtype=float)
    return (special.gammaln((nu + 1.0) / 2.0) - special.gammaln(nu / 2.0)
            - 0.5 * np.log(nu * np.pi)
            - (nu + 1.0) / 2.0 * np.log1p(x * x / nu))


def t_cdf(x, nu):
    return special.stdtr(nu, np.asarray(x, dtype=float))


def t_quantile(u, nu):
    """Student-t quantile, vectorized.

    Halley iteration on the CDF from Hill's normal-quantile expansion;
    entries in the far tails or not converged in eight steps fall back to
    the library inverse. Agrees with it to ~1e-11 relative and is several
    times faster on the vector sizes the sampler feeds through here.
    """
    u = np.asarray(u, dtype=float)
    scalar = u.ndim == 0
    u = np.atleast_1d(u)
    if np.any((u <= 0.0) | (u >= 1.0)):
        raise ValueError("u must lie strictly inside (0, 1)")
    z = special.ndtri(u)
    z2 = z * z
    g1 = (z2 + 1.0) * z / 4.0
    g2 = ((5.0 * z2 + 16.0) * z2 + 3.0) * z / 96.0
    g3 = (((3.0 * z2 + 19.0) * z2 + 17.0) * z2 - 15.0) * z / 384.0
    g4 = ((((79.0 * z2 + 776.0) * z2 + 1482.0) * z2 - 1920.0) * z2
          - 945.0) * z / 92160.0
    x = z + g1 / nu + g2 / nu**2 + g3 / nu**3 + g4 / nu**4

    extreme = (u < 1e-8) | (u > 1.0 - 1e-8)
    if np.any(extreme):
        x[extreme] = special.stdtrit(nu, u[extreme])
    idx = np.nonzero(~extreme)[0]
    xa = x[idx]
    ua = u[idx]
    done = False
    for _ in range(8):
        f = special.stdtr(nu, xa) - ua
        step = f * np.exp(-t_logpdf(xa, nu))
        # Halley correction, guarded away from sign flips
        corr = 1.0 - step * ((nu + 1.0) * xa / (nu + xa * xa)) / 2.0
        step = step / np.where(np.abs(corr) > 0.5, corr, 1.0)
        xa = xa - step
        if np.all(np.abs(step) <= 1e-12 * (1.0 + np.abs(xa))):
            done = True
            break
    if not done and idx.size:
        bad = np.abs(special.stdtr(nu, xa) - ua) > 1e-12
        xa[bad] = special.stdtrit(nu, ua[bad])
    x[idx] = xa
    return x[0] if scalar else x


# -- skewed Student t (mode/scale form) ---------------------------------------

def _skt_const(eta):
    """Normalizing constant c of the mode/scale skewed t."""
    return np.exp(special.gammaln((eta + 1.0) / 2.0) - special.gammaln(eta / 2.0)
                  - 0.5 * np.log(np.pi * (eta - 2.0)))


def _skt_logpdf(x, mu, sigma, eta, lam):
    x = np.asarray(x, dtype=float)
    t = (x - mu) / sigma
    d = np.where(t < 0.0, 1.0 - lam, 1.0 + lam)
    logc = (special.gammaln((eta + 1.0) / 2.0) - special.gammaln(eta / 2.0)
            - 0.5 * np.log(np.pi * (eta - 2.0)))
    return (logc - np.log(sigma)
            - (eta + 1.0) / 2.0 * np.log1p((t / d) ** 2 / (eta - 2.0)))


def _skt_cdf(x, mu, sigma, eta, lam):
    x = np.asarray(x, dtype=float)
    t = (x - mu) / sigma
    s = np.sqrt(eta / (eta - 2.0))
    lo = (1.0 - lam) * special.stdtr(eta, t * s / (1.0 - lam))
    hi = (1.0 + lam) * special.stdtr(eta, t * s / (1.0 + lam)) - lam
    return np.where(t < 0.0, lo, hi)


def _skt_quantile(u, mu, sigma, eta, lam):
    u = np.asarray(u, dtype=float)
    s = np.sqrt((eta - 2.0) / eta)
    split = (1.0 - lam) / 2.0
    # inverse of the two CDF branches; the upper one needs (u + lam)/(1 + lam)
    # so the branches meet at u = (1 - lam)/2
    arg = np.where(u < split, u / (1.0 - lam), (u + lam) / (1.0 + lam))
    q = t_quantile(np.clip(arg, PIT_CLAMP, 1.0 - PIT_CLAMP), eta)
    d = np.where(u < split, 1.0 - lam, 1.0 + lam)
    return mu + sigma * d * s * q


def skt_pdf(x, params: SktParams):
    out = np.exp(_skt_logpdf(x, params.mu, params.sigma, params.eta, params.lam))
    return out if out.ndim else float(out)


def skt_cdf(x, params: SktParams):
    out = _skt_cdf(x, params.mu, params.sigma, params.eta, params.lam)
    return out if out.ndim else float(out)


def skt_quantile(u, params: SktParams):
    u = np.asarray(u, dtype=float)
    if np.any((u <= 0.0) | (u >= 1.0)):
        raise ValueError("u must lie strictly inside (0, 1)")
    out = _skt_quantile(u, params.mu, params.sigma, params.eta, params.lam)
    return out if out.ndim else float(out)


# -- standardized (mean 0, variance 1) skewed t --------------------------------

def _skt_std_ab(eta, lam):
    c = _skt_const(eta)
    a = 4.0 * lam * c * (eta - 2.0) / (eta - 1.0)
    b = np.sqrt(1.0 + 3.0 * lam * lam - a * a)
    return a, b


def _skt_std_logpdf(v, eta, lam):
    a, b = _skt_std_ab(eta, lam)
    return np.log(b) + _skt_logpdf(a + b * np.asarray(v, float), 0.0, 1.0, eta, lam)


def _skt_std_cdf(v, eta, lam):
    a, b = _skt_std_ab(eta, lam)
    return _skt_cdf(a + b * np.asarray(v, float), 0.0, 1.0, eta, lam)


def _skt_std_quantile(u, eta, lam):
    a, b = _skt_std_ab(eta, lam)
    return (_skt_quantile(u, 0.0, 1.0, eta, lam) - a) / b


def skt_std_pdf(v, eta, lam):
    """Density of the mean-zero unit-variance skewed t."""
    _validate_eta_lam(eta, lam)
    out = np.exp(_skt_std_logpdf(v, eta, lam))
    return out if out.ndim else float(out)


def skt_std_cdf(v, eta, lam):
    _validate_eta_lam(eta, lam)
    out = _skt_std_cdf(v, eta, lam)
    return out if out.ndim else float(out)


def skt_std_quantile(u, eta, lam):
    _validate_eta_lam(eta, lam)
    u = np.asarray(u, dtype=float)
    if np.any((u <= 0.0) | (u >= 1.0)):
        raise ValueError("u must lie strictly inside (0, 1)")
    out = _skt_std_quantile(u, eta, lam)
    return out if out.ndim else float(out)


# -- zero-truncated skewed t ---------------------------------------------------

def _require_nonneg(x):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0.0):
        raise ValueError("truncated support is x >= 0")
    return x


def _trskt_tail(mu, sigma, eta, lam):
    """Survivor mass above zero, 1 - F_Skt(0)."""
    return 1.0 - _skt_cdf(np.asarray(-mu / sigma, dtype=float), 0.0, 1.0, eta, lam)


def trskt_pdf(x, params: SktParams):
    x = _require_nonneg(x)
    p = params
    if p.mu < 0.0:
        raise ValueError("truncated form requires mode mu >= 0")
    out = np.exp(_skt_logpdf(x, p.mu, p.sigma, p.eta, p.lam)) \
        / _trskt_tail(p.mu, p.sigma, p.eta, p.lam)
    return out if out.ndim else float(out)


def trskt_cdf(x, params: SktParams):
    x = _require_nonneg(x)
    p = params
    if p.mu < 0.0:
        raise ValueError("truncated form requires mode mu >= 0")
    tail = _trskt_tail(p.mu, p.sigma, p.eta, p.lam)
    f0 = 1.0 - tail
    out = (_skt_cdf(x, p.mu, p.sigma, p.eta, p.lam) - f0) / tail
    return out if out.ndim else float(out)


def trskt_quantile(u, params: SktParams):
    u = np.asarray(u, dtype=float)
    if np.any((u < 0.0) | (u >= 1.0)):
        raise ValueError("u must lie in [0, 1)")
    p = params
    if p.mu < 0.0:
        raise ValueError("truncated form requires mode mu >= 0")
    tail = _trskt_tail(p.mu, p.sigma, p.eta, p.lam)
    f0 = 1.0 - tail
    out = _skt_quantile(u * tail + f0, p.mu, p.sigma, p.eta, p.lam)
    return out if out.ndim else float(out)


def _trskt_mean(mu, sigma, eta, lam):
    """Closed-form mean of the zero-truncated skewed t (mode mu >= 0).

    Integrating sigma * t * f over the sub-mode band [0, mu) and the
    upper branch [mu, oo) gives, with u0 = 1 + (mu / (sigma (1-lam)))^2
    / (eta - 2):

        c sigma (eta-2)/(eta-1) {(1+lam)^2
            - (1-lam)^2 [1 - u0^{(1-eta)/2}]} / (1 - F_Skt(0)) + mu
    """
    c = _skt_const(eta)
    u0 = 1.0 + (mu / (sigma * (1.0 - lam))) ** 2 / (eta - 2.0)
    num = c * sigma * (eta - 2.0) / (eta - 1.0) * (
        (1.0 + lam) ** 2
        - (1.0 - lam) ** 2 * (1.0 - u0 ** ((1.0 - eta) / 2.0)))
    return num / _trskt_tail(mu, sigma, eta, lam) + mu


def trskt_mean(params: SktParams) -> float:
    if params.mu < 0.0:
        raise ValueError("truncated form requires mode mu >= 0")
    if not params.eta > 2.0:
        raise ValueError("mean requires eta > 2")
    return float(_trskt_mean(params.mu, params.sigma, params.eta, params.lam))


# -- truncated-skewed-t / exponential mixture ----------------------------------

def _apat_logpdf(x, mu, sigma, eta, lam, iota, w):
    x = np.asarray(x, dtype=float)
    log_tr = _skt_logpdf(x, mu, sigma, eta, lam) \
        - np.log(_trskt_tail(mu, sigma, eta, lam))
    log_exp = -x / iota - np.log(iota)
    with np.errstate(divide="ignore"):  # w = 1 gives log(0) = -inf, fine
        return np.logaddexp(np.log(w) + log_tr, np.log1p(-w) + log_exp)


def _apat_cdf(x, mu, sigma, eta, lam, iota, w):
    x = np.asarray(x, dtype=float)
    tail = _trskt_tail(mu, sigma, eta, lam)
    f0 = 1.0 - tail
    tr = (_skt_cdf(x, mu, sigma, eta, lam) - f0) / tail
    return w * tr + (1.0 - w) * (-np.expm1(-x / iota))


def _apat_mean(mu, sigma, eta, lam, iota, w):
    return w * _trskt_mean(mu, sigma, eta, lam) + (1.0 - w) * iota


def apat_pdf(x, params: ApatParams):
    x = _require_nonneg(x)
    p = params
    out = np.exp(_apat_logpdf(x, p.mu, p.sigma, p.eta, p.lam, p.iota, p.w))
    return out if out.ndim else float(out)


def apat_cdf(x, params: ApatParams):
    x = _require_nonneg(x)
    p = params
    out = _apat_cdf(x, p.mu, p.sigma, p.eta, p.lam, p.iota, p.w)
    return out if out.ndim else float(out)


def apat_mean(params: ApatParams) -> float:
    p = params
    return float(_apat_mean(p.mu, p.sigma, p.eta, p.lam, p.iota, p.w))


def _apat_quantile(u, mu, sigma, eta, lam, iota, w, tol=1e-10):
    """Invert the mixture CDF by bisection plus a Newton polish.

    Vectorized over u and the location/weight arrays. The upper bracket
    comes from the truncated component's quantile (conservatively padded
    because the exponential component only adds mass near zero).
    """
    u = np.asarray(u, dtype=float)
    mu_b, w_b = np.broadcast_arrays(np.asarray(mu, float), np.asarray(w, float))
    u, mu_b, w_b = np.broadcast_arrays(u, mu_b, w_b)
    shape = u.shape
    u, mu_b, w_b = u.ravel(), mu_b.ravel(), w_b.ravel()

    lo = np.zeros_like(u)
    tail = 1.0 - _skt_cdf(-mu_b / sigma, 0.0, 1.0, eta, lam)
    f0 = 1.0 - tail
    # F_mix(h) >= w F_tr(h), so the h solving F_tr = min(u/w, 1-) bounds above
    utr = np.minimum(u / w_b, 1.0 - 1e-14)
    hi = _skt_quantile(utr * tail + f0, mu_b, sigma, eta, lam)
    hi = np.maximum(hi, 10.0 * iota) + 1e-6
    for _ in range(90):
        mid = 0.5 * (lo + hi)
        too_low = _apat_cdf(mid, mu_b, sigma, eta, lam, iota, w_b) < u
        lo = np.where(too_low, mid, lo)
        hi = np.where(too_low, hi, mid)
        if np.max(hi - lo) < tol:
            break
    h = 0.5 * (lo + hi)
    f = np.exp(_apat_logpdf(h, mu_b, sigma, eta, lam, iota, w_b))
    step = (_apat_cdf(h, mu_b, sigma, eta, lam, iota, w_b) - u) / f
    h = np.clip(h - step, lo, hi)
    return h.reshape(shape)


def apat_quantile(u, params: ApatParams):
    u = np.asarray(u, dtype=float)
    if np.any((u < 0.0) | (u >= 1.0)):
        raise ValueError("u must lie in [0, 1)")
    p = params
    out = _apat_quantile(u, p.mu, p.sigma, p.eta, p.lam, p.iota, p.w)
    return out if out.ndim else float(out)


def apat_sample(n, params: ApatParams, rng):
    """Draw n variates by component label, then component inversion."""
    p = params
    labels = rng.random(n) < p.w
    u = rng.random(n)
    out = np.empty(n)
    k = int(labels.sum())
    if k:
        tail = _trskt_tail(p.mu, p.sigma, p.eta, p.lam)
        out[labels] = _skt_quantile(u[labels] * tail + (1.0 - tail),
                                    p.mu, p.sigma, p.eta, p.lam)
    out[~labels] = -p.iota * np.log1p(-u[~labels])
    return out


# -- Student t copula ----------------------------------------------------------

def t_copula_logdensity(u, corr, nu):
    """Log density of the t copula at PIT rows u (clamped to (0, 1)).

    corr must be a valid correlation matrix; nu > 2. Accepts a single
    point or an (n, d) array and returns matching shape.
    """
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    u = np.atleast_2d(u)
    corr = np.asarray(corr, dtype=float)
    d = corr.shape[0]
    if corr.shape != (d, d) or u.shape[1] != d:
        raise ValueError("dimension mismatch between u and corr")
    if not np.allclose(corr, corr.T, atol=1e-12):
        raise ValueError("corr must be symmetric")
    if not np.allclose(np.diag(corr), 1.0, atol=1e-12):
        raise ValueError("corr must have unit diagonal")
    if not nu > 2.0:
        raise ValueError("nu must exceed 2")
    try:
        chol = linalg.cholesky(corr, lower=True)
    except linalg.LinAlgError as exc:
        raise ValueError("corr is not positive definite") from exc

    uc = np.clip(u, PIT_CLAMP, 1.0 - PIT_CLAMP)
    x = np.column_stack([t_quantile(uc[:, j], nu) for j in range(d)])
    y = linalg.solve_triangular(chol, x.T, lower=True)
    q = np.sum(y * y, axis=0)
    log_mst = (special.gammaln((nu + d) / 2.0) - special.gammaln(nu / 2.0)
               - d / 2.0 * np.log(nu * np.pi)
               - np.sum(np.log(np.diag(chol)))
               - (nu + d) / 2.0 * np.log1p(q / nu))
    log_marg = t_logpdf(x, nu).sum(axis=1)
    out = log_mst - log_marg
    return float(out[0]) if single else out


# -- asymmetric Laplace --------------------------------------------------------

def al_logpdf(x, u, mu, sigma):
    """Asymmetric-Laplace log density; its kernel is the u-quantile check loss."""
    if not 0.0 < u < 1.0:
        raise ValueError("u must lie strictly inside (0, 1)")
    if not sigma > 0.0:
        raise ValueError("sigma must be positive")
    e = (np.asarray(x, dtype=float) - mu) / sigma
    rho = e * (u - (e < 0.0))
    out = np.log(u * (1.0 - u) / sigma) - rho
    return out if out.ndim else float(out)
