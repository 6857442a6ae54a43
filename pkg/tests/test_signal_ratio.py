"""Signal-ratio diagnostics: closed form against simulation, invertibility
bound sweeps, the simulated margin-4 ratio, and posterior propagation."""

import numpy as np
import pandas as pd
import pytest
from scipy import signal

from qfdyn.dists import skt_std_quantile
from qfdyn.model import N_PARAMS
from qfdyn.signal_ratio import (
    read_rsig,
    rsig_apatosaurus,
    rsig_closed,
    rsig_invertibility_bound,
    rsig_posterior,
    write_rsig,
)

from test_model import THETA

# margin blocks of the canonical truth vector: (delta, psi, phi, omega,
# alpha, beta, eta, lam) per margin, then the nine margin-4 parameters
MARGIN_DYNAMICS = [(0.06, 0.91), (0.43, 0.53), (0.05, 0.93)]
MARGIN_GARCH = [
    (0.0, 6e-8, 0.15, 0.84, 8.0, -0.16),
    (-0.13, 5e-3, 0.06, 0.88, 15.0, 0.0),
    (0.0, 7e-5, 0.07, 0.92, 18.0, 0.14),
]
THETA4 = (3e-3, 0.22, 0.74, 3.7, 0.03, 0.06, 6.0, 0.15, 1e-4)


def closed_direct(psi, phi):
    return psi ** 2 / (1.0 - 2.0 * psi * phi - phi ** 2)


def simulate_margin(delta, psi, phi, omega, alpha, beta, eta, lam, n, rng,
                    warm=10_000):
    """Standalone margin path with GARCH noise; returns (xi, mu)."""
    v = skt_std_quantile(rng.random(n + warm), eta, lam)
    xi = np.empty(n + warm)
    mu = np.empty(n + warm)
    uvar = omega / (1.0 - alpha - beta)
    m, s2, e = 0.0, uvar, 0.0
    for t in range(n + warm):
        s2 = omega + alpha * e * e + beta * s2
        e = np.sqrt(s2) * v[t]
        x = m + e
        mu[t] = m
        xi[t] = x
        m = delta + psi * x + phi * m
    return xi[warm:], mu[warm:]


class TestClosedForm:
    def test_pinned_value_at_first_margin_truth(self):
        val = rsig_closed(0.06, 0.91)
        assert val == pytest.approx(0.0036 / 0.0627, abs=1e-12)
        assert abs(val - 0.05742) < 1e-5

    def test_zero_signal_when_mean_ignores_data(self):
        for phi in (0.0, 0.5, 0.9, -0.4):
            assert rsig_closed(0.0, phi) == 0.0

    def test_persistence_form_is_the_same_number(self):
        psi, phi = 0.43, 0.53
        gamma = psi + phi
        direct = rsig_closed(psi, phi)
        via_gamma = psi ** 2 / (1.0 - gamma ** 2 + psi ** 2)
        assert abs(direct - via_gamma) < 1e-12

    def test_persistence_form_holds_across_random_points(self):
        rng = np.random.default_rng(7)
        psi = rng.uniform(-0.9, 0.9, 500)
        phi = rng.uniform(-0.9, 0.9, 500)
        keep = np.abs(psi + phi) < 0.999
        psi, phi = psi[keep], phi[keep]
        gamma = psi + phi
        direct = rsig_closed(psi, phi)
        via_gamma = psi ** 2 / (1.0 - gamma ** 2 + psi ** 2)
        assert np.max(np.abs(direct - via_gamma)) < 1e-12

    def test_array_input_matches_scalar_loop(self):
        psi = np.array([0.06, 0.43, 0.05])
        phi = np.array([0.91, 0.53, 0.93])
        vec = rsig_closed(psi, phi)
        one_by_one = [rsig_closed(p, f) for p, f in zip(psi, phi)]
        assert np.allclose(vec, one_by_one, rtol=0, atol=0)

    def test_rejects_nonstationary_pairs(self):
        with pytest.raises(ValueError):
            rsig_closed(0.3, 0.8)
        with pytest.raises(ValueError):
            rsig_closed(-0.5, -0.6)
        with pytest.raises(ValueError):
            rsig_closed(0.5, 0.5)

    def test_output_stays_in_unit_interval(self):
        rng = np.random.default_rng(21)
        # includes |phi| > 1 points: stationarity only constrains psi + phi
        psi = rng.uniform(-2.0, 2.0, 5000)
        phi = rng.uniform(-2.0, 2.0, 5000)
        keep = np.abs(psi + phi) < 0.999
        keep &= 1.0 - 2.0 * psi * phi - phi ** 2 > 0.0
        vals = rsig_closed(psi[keep], phi[keep])
        assert vals.size > 500
        assert np.all(vals >= 0.0)
        assert np.all(vals < 1.0)


class TestInvertibilityBound:
    def test_pinned_values(self):
        assert rsig_invertibility_bound(0.0) == 0.5
        assert rsig_invertibility_bound(0.97) == pytest.approx(0.985)
        assert rsig_invertibility_bound(-0.8) == pytest.approx(0.9)

    def test_rejects_unit_root(self):
        with pytest.raises(ValueError):
            rsig_invertibility_bound(1.0)
        with pytest.raises(ValueError):
            rsig_invertibility_bound(-1.2)

    def test_closed_form_never_exceeds_bound_on_grid(self):
        # invertible set: |phi| < 1 on top of stationarity
        psi = np.linspace(-0.99, 0.99, 60)
        phi = np.linspace(-0.99, 0.99, 60)
        pp, ff = np.meshgrid(psi, phi)
        keep = np.abs(pp + ff) < 0.999
        pp, ff = pp[keep], ff[keep]
        vals = rsig_closed(pp, ff)
        bound = rsig_invertibility_bound(pp + ff)
        assert vals.size > 2000
        assert np.all(vals <= bound + 1e-12)

    def test_bound_is_tight_near_extremes(self):
        # psi -> gamma, phi -> 0+ pushes the ratio toward the bound's
        # gamma^2/(1 - gamma^2 + gamma^2) = gamma^2 which is below; the
        # supremum is approached along phi -> -1 with psi = gamma - phi
        gamma = 0.9
        phi = -0.999
        val = rsig_closed(gamma - phi, phi)
        assert val > 0.93
        assert val <= rsig_invertibility_bound(gamma)


class TestSimulationAgreement:
    def test_closed_form_matches_long_linear_simulation(self):
        # ARMA(1,1) form of the mean recursion with unit normal noise:
        # xi_t = gamma xi_{t-1} + e_t - phi e_{t-1}, mu = xi - e
        psi, phi = 0.06, 0.91
        gamma = psi + phi
        rng = np.random.default_rng(99)
        eps = rng.standard_normal(2_000_000 + 2000)
        xi = signal.lfilter([1.0, -phi], [1.0, -gamma], eps)
        mu = xi - eps
        xi, mu = xi[2000:], mu[2000:]
        sim = mu.var() / xi.var()
        assert abs(sim - rsig_closed(psi, phi)) < 0.01

    @pytest.mark.parametrize("margin", [0, 1, 2])
    def test_closed_form_matches_garch_margin_simulation(self, margin):
        # the ratio does not depend on the innovation law as long as the
        # noise is a martingale difference, so the GARCH margins obey the
        # same closed form
        psi, phi = MARGIN_DYNAMICS[margin]
        delta, omega, alpha, beta, eta, lam = MARGIN_GARCH[margin]
        rng = np.random.default_rng(1234 + margin)
        xi, mu = simulate_margin(delta, psi, phi, omega, alpha, beta, eta,
                                 lam, 300_000, rng)
        sim = mu.var() / xi.var()
        assert abs(sim - rsig_closed(psi, phi)) < 0.01


class TestApatosaurusRatio:
    def test_fixed_seed_is_deterministic(self):
        a = rsig_apatosaurus(THETA4, n_sim=20_000, seed=5)
        b = rsig_apatosaurus(THETA4, n_sim=20_000, seed=5)
        assert a == b

    def test_zero_signal_when_mean_ignores_data(self):
        theta = (3e-3, 0.0, 0.74, 3.7, 0.03, 0.06, 6.0, 0.15, 1e-4)
        val = rsig_apatosaurus(theta, n_sim=20_000, seed=1)
        assert val < 1e-6

    def test_truth_value_stable_across_seeds(self):
        vals = [rsig_apatosaurus(THETA4, n_sim=200_000, seed=s, burn=2000)
                for s in (0, 1, 2)]
        assert max(vals) - min(vals) < 0.01
        assert all(0.0 <= v < 1.0 for v in vals)

    def test_rejects_nonstationary_mean_recursion(self):
        with pytest.raises(ValueError):
            rsig_apatosaurus((0.0, 0.5, 0.5, 3.7, 0.03, 0.06, 6.0, 0.15,
                              1e-4), n_sim=1000)


class TestPosteriorPropagation:
    def _fake_draws(self, n=40, scale=0.01, seed=3):
        rng = np.random.default_rng(seed)
        draws = np.tile(THETA, (n, 1))
        for o in (1, 2, 9, 10, 17, 18, 25, 26):
            draws[:, o] = draws[:, o] + scale * rng.standard_normal(n)
        # keep each jittered pair stationary; margin 3 sits at 0.98
        for o in (1, 9, 17, 25):
            draws[:, o + 1] = np.minimum(draws[:, o + 1],
                                         0.995 - draws[:, o])
        return draws

    def test_table_has_one_row_per_margin(self):
        tab = rsig_posterior(self._fake_draws(), thin=2, m4_n_sim=20_000,
                             m4_thin=5)
        assert list(tab.columns) == ["margin", "point", "lower", "upper",
                                     "method"]
        assert list(tab["margin"]) == [1, 2, 3, 4]
        assert list(tab["method"]) == ["closed-form"] * 3 + ["simulated"]

    def test_intervals_ordered_and_inside_unit_interval(self):
        tab = rsig_posterior(self._fake_draws(), thin=2, m4_n_sim=20_000,
                             m4_thin=2)
        assert np.all(tab["lower"] <= tab["upper"])
        assert np.all(tab["lower"] >= 0.0)
        assert np.all(tab["upper"] < 1.0)
        assert np.all((tab["point"] >= 0.0) & (tab["point"] < 1.0))

    def test_point_estimates_sit_near_truth(self):
        tab = rsig_posterior(self._fake_draws(scale=0.002), thin=1,
                             m4_n_sim=40_000, m4_thin=10)
        for row, (psi, phi) in zip(tab.itertuples(), MARGIN_DYNAMICS):
            assert abs(row.point - rsig_closed(psi, phi)) < 0.02

    def test_rejects_wrong_width(self):
        with pytest.raises(ValueError):
            rsig_posterior(np.zeros((20, N_PARAMS - 1)))

    def test_rejects_too_few_draws(self):
        with pytest.raises(ValueError):
            rsig_posterior(np.tile(THETA, (5, 1)), thin=10)


class TestCsvRoundTrip:
    def test_write_then_read_preserves_table(self, tmp_path):
        tab = pd.DataFrame({
            "margin": [1, 2, 3, 4],
            "point": [0.05, 0.6, 0.04, 0.3],
            "lower": [0.04, 0.5, 0.03, 0.2],
            "upper": [0.06, 0.7, 0.05, 0.4],
            "method": ["closed-form"] * 3 + ["simulated"],
        })
        path = tmp_path / "rsig.csv"
        write_rsig(path, tab)
        back = read_rsig(path)
        pd.testing.assert_frame_equal(back, tab)
