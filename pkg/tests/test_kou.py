import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from tll.kou import (
    InvalidParameterError,
    KouParams,
    call_price,
    levy_density,
    psi,
    psi_params,
    sample_jumps,
)


def compound_poisson_terminals(params, mu, T, n, seed):
    """Exact simulation of Z(T) = mu*T + sum of double-exponential jumps."""
    rng = np.random.default_rng(seed)
    counts = rng.poisson(params.lam * T, n)
    total = np.zeros(n)
    idx = np.repeat(np.arange(n), counts)
    np.add.at(total, idx, sample_jumps(params, idx.size, rng))
    return mu * T + total


class TestParams:
    def test_validation(self):
        with pytest.raises(InvalidParameterError):
            KouParams(lam=-1.0, lam1=10.0, lam2=10.0, p=0.5)
        with pytest.raises(InvalidParameterError):
            KouParams(lam=1.0, lam1=1.0, lam2=10.0, p=0.5)
        with pytest.raises(InvalidParameterError):
            KouParams(lam=1.0, lam1=10.0, lam2=0.0, p=0.5)
        with pytest.raises(InvalidParameterError):
            KouParams(lam=1.0, lam1=10.0, lam2=10.0, p=1.0)

    def test_star_params(self):
        par = KouParams(lam=2.0, lam1=15.0, lam2=10.0, p=0.45)
        s = par.star()
        z = 0.45 * 15 / 14 + 0.55 * 10 / 11 - 1.0
        assert s.zeta == pytest.approx(z, rel=1e-14)
        assert s.lam_star == pytest.approx(2.0 * (z + 1.0), rel=1e-14)
        assert s.lam1_star == 14.0
        assert s.lam2_star == 11.0
        assert s.p_star == pytest.approx(0.45 / (1 + z) * 15 / 14, rel=1e-14)


class TestLevyDensity:
    def test_continuity_at_zero(self):
        # p*lam1 == (1-p)*lam2 makes the density continuous at 0
        par = KouParams(lam=1.5, lam1=12.0, lam2=12.0 * 0.4 / 0.6, p=0.4)
        left = levy_density(par, -1e-12)
        right = levy_density(par, 1e-12)
        assert left == pytest.approx(right, rel=1e-9)

    def test_point_value(self):
        par = KouParams(lam=1.0, lam1=10.0, lam2=10.0, p=0.5)
        assert levy_density(par, 0.1) == pytest.approx(0.5 * 10 * np.exp(-1.0), rel=1e-12)

    def test_total_mass(self):
        par = KouParams(lam=2.3, lam1=14.0, lam2=9.0, p=0.35)
        total, _ = quad(lambda x: levy_density(par, x), -np.inf, np.inf, limit=200)
        assert total == pytest.approx(par.lam, rel=1e-8)


class TestPsi:
    def test_zero_intensity_limit(self):
        val = psi(0.1, 1e-300, 0.5, 10.0, 10.0, np.array([-1.0, 0.05, 0.2]), 1.0)
        # a - mu*T <= 0 iff a <= 0.1
        assert np.allclose(val, [1.0, 1.0, 0.0])

    def test_tail_limits(self):
        par = KouParams(lam=1.0, lam1=12.0, lam2=9.0, p=0.4)
        assert psi_params(0.0, par, -50.0, 0.5) == pytest.approx(1.0, abs=1e-12)
        assert psi_params(0.0, par, 50.0, 0.5) == pytest.approx(0.0, abs=1e-12)

    def test_monotone_in_threshold(self):
        par = KouParams(lam=3.0, lam1=8.0, lam2=6.0, p=0.55)
        a = np.linspace(-1.0, 1.0, 201)
        vals = psi_params(0.12, par, a, 0.7)
        assert np.all(np.diff(vals) <= 1e-14)

    def test_atom_at_drift_point(self):
        # Z(T) = mu*T exactly with probability e^{-lam T}
        par = KouParams(lam=1.0, lam1=12.0, lam2=9.0, p=0.4)
        mu, T = 0.2, 0.5
        a = mu * T
        below = psi_params(mu, par, a - 1e-13, T)
        at = psi_params(mu, par, a, T)
        above = psi_params(mu, par, a + 1e-13, T)
        assert at == pytest.approx(below, abs=1e-9)
        assert at - above == pytest.approx(np.exp(-par.lam * T), abs=1e-9)

    def test_against_monte_carlo(self):
        par = KouParams(lam=1.0, lam1=12.0, lam2=9.0, p=0.4)
        T, n = 0.5, 1_000_000
        z = compound_poisson_terminals(par, 0.0, T, n, seed=1234)
        for a in [-0.3, -0.05, 0.05, 0.2]:
            est = float((z >= a).mean())
            se = np.sqrt(est * (1 - est) / n)
            assert abs(psi_params(0.0, par, a, T) - est) <= 3 * se

    def test_large_intensity_no_overflow(self):
        # lam*T ~ 80 forces the series past n = 100; log-space keeps it finite
        val = psi(0.0, 80.0, 0.3, 5.0, 4.0, 0.5, 1.0)
        assert np.isfinite(val) and 0.0 <= val <= 1.0


class TestCallPrice:
    def test_zero_jump_limit(self):
        par = KouParams(lam=1e-300, lam1=15.0, lam2=10.0, p=0.45)
        K = np.array([80.0, 100.0, 120.0])
        assert np.allclose(call_price(par, 100.0, K, 0.5), np.maximum(100.0 - K, 0.0), atol=1e-10)

    def test_small_strike_limit(self):
        par = KouParams(lam=2.0, lam1=15.0, lam2=10.0, p=0.45)
        assert call_price(par, 100.0, 1e-8, 0.25) == pytest.approx(100.0, abs=1e-6)

    def test_against_monte_carlo(self):
        par = KouParams(lam=2.0, lam1=15.0, lam2=10.0, p=0.45)
        S, T, n = 100.0, 0.25, 1_000_000
        mu = -par.lam * par.zeta
        z = compound_poisson_terminals(par, mu, T, n, seed=99)
        terminal = S * np.exp(z)
        for K in [90.0, 100.0, 110.0]:
            payoff = np.maximum(terminal - K, 0.0)
            se = payoff.std() / np.sqrt(n)
            assert abs(call_price(par, S, K, T) - payoff.mean()) <= 3 * se

    def test_strike_monotone_convex(self):
        par = KouParams(lam=1.5, lam1=10.0, lam2=7.0, p=0.4)
        K = np.linspace(60.0, 140.0, 81)
        c = call_price(par, 100.0, K, 0.5) / 100.0
        assert np.all(np.diff(c) <= 1e-9)
        assert np.all(np.diff(c, 2) >= -1e-9)

    def test_calendar_monotone(self):
        par = KouParams(lam=1.5, lam1=10.0, lam2=7.0, p=0.4)
        prices = [call_price(par, 100.0, 105.0, T) for T in [0.1, 0.25, 0.5, 0.75, 1.0]]
        assert np.all(np.diff(prices) >= -1e-12)

    def test_invalid_strike(self):
        par = KouParams(lam=1.0, lam1=10.0, lam2=10.0, p=0.5)
        with pytest.raises(InvalidParameterError):
            call_price(par, 100.0, -1.0, 0.5)


@settings(max_examples=30, deadline=None)
@given(
    lam=st.floats(0.1, 5.0),
    lam1=st.floats(2.0, 30.0),
    lam2=st.floats(0.5, 30.0),
    p=st.floats(0.05, 0.95),
    a=st.floats(-1.0, 1.0),
    T=st.floats(0.01, 1.0),
)
def test_psi_in_unit_interval(lam, lam1, lam2, p, a, T):
    val = psi(0.0, lam, p, lam1, lam2, a, T)
    assert 0.0 <= val <= 1.0


@settings(max_examples=20, deadline=None)
@given(
    lam=st.floats(0.1, 4.0),
    lam1=st.floats(2.0, 25.0),
    lam2=st.floats(0.5, 25.0),
    p=st.floats(0.05, 0.95),
    T=st.floats(0.05, 1.0),
)
def test_price_bounds(lam, lam1, lam2, p, T):
    par = KouParams(lam=lam, lam1=lam1, lam2=lam2, p=p)
    K = np.array([50.0, 90.0, 100.0, 110.0, 160.0])
    c = call_price(par, 100.0, K, T)
    assert np.all(c >= np.maximum(100.0 - K, 0.0) - 1e-12)
    assert np.all(c <= 100.0 + 1e-12)
