"""Adaptive blocked random-walk Metropolis.

The 40-dimensional posterior is updated in a fixed sweep over ten parameter
blocks. Each block move proposes from a three-component normal mixture whose
covariance is a scaled copy of a per-block matrix Sigma. Tuning runs in
epochs: scales are nudged toward block-size-dependent target acceptance
rates every n_delta sweeps, Sigma is re-estimated from each epoch's draws,
and adaptation stops once the mean absolute percentage change (MAPC) of the
per-parameter chain standard deviations between consecutive epochs falls
under a threshold. A final sampling phase runs with everything frozen.

The machinery is target-agnostic: anything exposing blocks, a start vector,
and a propose/accept/reject evaluation context can be sampled, which is how
the tests substitute tractable targets for the real posterior.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import special

# proposal mixture: mostly unit-scale moves, occasional big jumps, and a
# small-step component that keeps sticky blocks moving
MIX_WEIGHTS = (0.7, 0.15, 0.15)
MIX_SCALES = (1.0, 100.0, 0.01)

_MIX_CUM = (MIX_WEIGHTS[0], MIX_WEIGHTS[0] + MIX_WEIGHTS[1])
_MIX_ROOT = tuple(math.sqrt(s) for s in MIX_SCALES)


def target_rate(d: int) -> float:
    """Target acceptance rate by block dimension."""
    if d == 1:
        return 0.44
    if d <= 4:
        return 0.35
    return 0.234


@dataclass
class SamplerConfig:
    """Adaptation and sampling-phase constants."""

    n_epo: int = 12000          # sweeps per tuning epoch
    n_disc: int = 2000          # sweeps discarded at the start of each epoch
    j_min: int = 2              # earliest epoch allowed to stop tuning
    j_max: int = 30             # hard cap on tuning epochs
    eps_mapc: float = 0.1       # MAPC stopping threshold
    n_delta: int = 200          # sweeps between scale updates
    n_sample: int = 105_000     # sampling-phase sweeps
    n_sample_disc: int = 5000   # sampling-phase burn-in dropped from draws

    def __post_init__(self):
        if not 0 <= self.n_disc < self.n_epo:
            raise ValueError("need 0 <= n_disc < n_epo")
        if not 0 <= self.n_sample_disc < self.n_sample:
            raise ValueError("need 0 <= n_sample_disc < n_sample")
        if self.n_delta < 1 or self.j_max < self.j_min or self.j_min < 1:
            raise ValueError("bad adaptation constants")


@dataclass
class PosteriorSample:
    """Retained sampling-phase draws plus run diagnostics."""

    draws: np.ndarray               # (n_retained, dim)
    acceptance: np.ndarray          # (n_blocks,) sampling-phase rates
    seed: int
    epoch_log: list = field(default_factory=list)
    param_names: list = field(default_factory=list)


class GenericTarget:
    """Wrap a plain log-density as a block-sampler target (used in tests)."""

    def __init__(self, logpdf, blocks, start, scales=None):
        self._logpdf = logpdf
        self.blocks = [np.asarray(b, dtype=int) for b in blocks]
        self._start = np.asarray(start, dtype=float).copy()
        self.dim = self._start.size
        covered = np.sort(np.concatenate(self.blocks))
        if not np.array_equal(covered, np.arange(self.dim)):
            raise ValueError("blocks must partition the coordinates")
        self._scales = (np.ones(self.dim) if scales is None
                        else np.asarray(scales, dtype=float).copy())

    def start_state(self):
        return self._start.copy()

    def init_proposal_scales(self):
        return self._scales.copy()

    def context(self, vec):
        return _GenericState(self._logpdf, self.blocks, vec)


class _GenericState:
    def __init__(self, logpdf, blocks, vec):
        self._logpdf = logpdf
        self._blocks = blocks
        self.vec = np.asarray(vec, dtype=float).copy()
        self.logpost = float(logpdf(self.vec))
        if not np.isfinite(self.logpost):
            raise ValueError("start point has non-finite log density")
        self._pending = None

    def propose(self, block_id, values):
        cand = self.vec.copy()
        cand[self._blocks[block_id]] = values
        lp = float(self._logpdf(cand))
        if lp == -np.inf:
            self._pending = None
            return -np.inf
        self._pending = (cand, lp)
        return lp

    def accept(self):
        if self._pending is None:
            raise RuntimeError("nothing pending to accept")
        self.vec, self.logpost = self._pending
        self._pending = None

    def reject(self):
        self._pending = None


# -- proposal and scale tuning -----------------------------------------------------


def _mixture_step(current, delta, chol, rng):
    r = rng.random()
    if r < _MIX_CUM[0]:
        root = _MIX_ROOT[0]
    elif r < _MIX_CUM[1]:
        root = _MIX_ROOT[1]
    else:
        root = _MIX_ROOT[2]
    return current + delta * root * (chol @ rng.standard_normal(current.size))


def propose_block(current, delta, cov, rng):
    """One mixture-normal proposal around `current` with covariance
    delta^2 * s_j * cov, the component j drawn with the fixed weights."""
    current = np.asarray(current, dtype=float)
    chol = np.linalg.cholesky(np.asarray(cov, dtype=float))
    return _mixture_step(current, delta, chol, rng)


def tune_scale(delta, r_obs, r_tar, n_clamp=None):
    """Rescale a proposal step so the realized acceptance rate moves toward
    the target: delta' = delta * ppf(r_tar/2) / ppf(r_obs/2)."""
    if n_clamp is not None:
        r_obs = min(max(r_obs, 1.0 / n_clamp), 1.0 - 1.0 / n_clamp)
    if not (0.0 < r_obs < 1.0 and 0.0 < r_tar < 1.0):
        raise ValueError("acceptance rates must lie in (0, 1)")
    return delta * special.ndtri(r_tar / 2.0) / special.ndtri(r_obs / 2.0)


def sweep(state, blocks, deltas, chols, rng, hits=None):
    """One Metropolis pass over all blocks.

    Proposals falling outside the support reject without burning an
    acceptance draw. `hits` accumulates per-block acceptance counts in
    place when given.
    """
    for b, idx in enumerate(blocks):
        cand = _mixture_step(state.vec[idx], deltas[b], chols[b], rng)
        lp = state.propose(b, cand)
        if lp == -np.inf:
            state.reject()
            continue
        if math.log(rng.random()) < lp - state.logpost:
            state.accept()
            if hits is not None:
                hits[b] += 1
        else:
            state.reject()


# -- the adaptive driver -----------------------------------------------------------


def _chol_with_ridge(cov, dim, fallback):
    try:
        return np.linalg.cholesky(cov), cov
    except np.linalg.LinAlgError:
        pass
    ridge = 1e-10 * np.trace(cov) / dim
    if ridge > 0.0:
        try:
            cov = cov + ridge * np.eye(dim)
            return np.linalg.cholesky(cov), cov
        except np.linalg.LinAlgError:
            pass
    # zero or hopeless epoch covariance (block never moved): keep the old one
    return fallback


def run_adaptive(target, config: SamplerConfig | None = None, seed: int = 0,
                 progress=None) -> PosteriorSample:
    """Tune, then sample, the block Metropolis chain on `target`.

    Deterministic for a fixed (target, config, seed). Returns the retained
    sampling-phase draws with per-block acceptance rates and an epoch log
    holding the MAPC trace and tuned scales.
    """
    cfg = SamplerConfig() if config is None else config
    rng = np.random.default_rng(seed)
    blocks = [np.asarray(b, dtype=int) for b in target.blocks]
    nb = len(blocks)
    dims = [b.size for b in blocks]
    rates = [target_rate(d) for d in dims]
    deltas = [2.38 / math.sqrt(d) for d in dims]

    seed_scales = np.asarray(target.init_proposal_scales(), dtype=float)
    covs = [np.diag(seed_scales[idx] ** 2) for idx in blocks]
    chols = [np.diag(seed_scales[idx]) for idx in blocks]

    state = target.context(target.start_state())
    dim = state.vec.size
    draws = np.empty((cfg.n_epo, dim))
    epoch_log = []
    prev_std = None
    post_mean = state.vec.copy()
    delta_means = list(deltas)

    for epoch in range(1, cfg.j_max + 1):
        hits = np.zeros(nb)
        window = np.zeros(nb)
        tuned = [[] for _ in range(nb)]
        for s in range(cfg.n_epo):
            before = hits.copy()
            sweep(state, blocks, deltas, chols, rng, hits)
            window += hits - before
            draws[s] = state.vec
            if (s + 1) % cfg.n_delta == 0:
                for b in range(nb):
                    deltas[b] = tune_scale(deltas[b], window[b] / cfg.n_delta,
                                           rates[b], n_clamp=cfg.n_delta)
                    tuned[b].append(deltas[b])
                window[:] = 0.0
        post = draws[cfg.n_disc:]
        cur_std = post.std(axis=0, ddof=1)
        if prev_std is None:
            mapc = None
        else:
            diff = np.abs(cur_std - prev_std)
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = np.where(diff == 0.0, 0.0, diff / prev_std)
            mapc = float(np.mean(rel))
        prev_std = cur_std
        post_mean = post.mean(axis=0)
        delta_means = [float(np.mean(t)) if t else deltas[b]
                       for b, t in enumerate(tuned)]
        for b, idx in enumerate(blocks):
            cov = np.atleast_2d(np.cov(post[:, idx], rowvar=False))
            chols[b], covs[b] = _chol_with_ridge(cov, idx.size,
                                                 (chols[b], covs[b]))
        epoch_log.append({
            "epoch": epoch,
            "mapc": mapc,
            "acceptance": (hits / cfg.n_epo).tolist(),
            "delta": list(deltas),
            "delta_mean": list(delta_means),
        })
        if progress is not None:
            progress("tune", epoch, mapc)
        if epoch >= cfg.j_min and mapc is not None and mapc <= cfg.eps_mapc:
            break

    # sampling phase: scales frozen at the final epoch's mean tuned values,
    # Sigma at the final epoch's covariance, chain restarted at the final
    # epoch's post-discard mean
    deltas = delta_means
    state = target.context(post_mean)
    keep = cfg.n_sample - cfg.n_sample_disc
    out = np.empty((keep, dim))
    hits = np.zeros(nb)
    for s in range(cfg.n_sample):
        sweep(state, blocks, deltas, chols, rng, hits)
        if s >= cfg.n_sample_disc:
            out[s - cfg.n_sample_disc] = state.vec
    if progress is not None:
        progress("sample", None, None)
    names = list(getattr(target, "param_names", [])) or [
        f"x{i}" for i in range(dim)]
    return PosteriorSample(draws=out, acceptance=hits / cfg.n_sample,
                           seed=seed, epoch_log=epoch_log, param_names=names)


# -- summaries and persistence -------------------------------------------------------


def interval_ranks(n: int) -> tuple[int, int]:
    """1-indexed order-statistic ranks of the equal-tailed 95% interval."""
    return math.ceil(0.025 * n), math.floor(0.975 * n)


def summarize(sample: PosteriorSample) -> pd.DataFrame:
    """Posterior mean and equal-tailed 95% interval per parameter."""
    draws = sample.draws
    if draws.size == 0:
        raise ValueError("empty sample")
    n = draws.shape[0]
    lo_rank, hi_rank = interval_ranks(n)
    srt = np.sort(draws, axis=0)
    return pd.DataFrame({
        "mean": draws.mean(axis=0),
        "ci_lo": srt[lo_rank - 1],
        "ci_hi": srt[hi_rank - 1],
    }, index=sample.param_names)


def write_draws(path, sample: PosteriorSample) -> None:
    pd.DataFrame(sample.draws, columns=sample.param_names).to_csv(
        path, index=False)


def read_draws(path) -> tuple[np.ndarray, list]:
    df = pd.read_csv(path)
    return df.to_numpy(dtype=float), list(df.columns)


def write_meta(path, sample: PosteriorSample) -> None:
    meta = {
        "seed": sample.seed,
        "n_draws": int(sample.draws.shape[0]),
        "acceptance": sample.acceptance.tolist(),
        "epochs": sample.epoch_log,
        "param_names": sample.param_names,
    }
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=1)


def read_meta(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
