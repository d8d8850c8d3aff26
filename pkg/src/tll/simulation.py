"""Monte Carlo simulation of arbitrage-free volatility surface paths.

Euler evolution of the additive density in relative maturity with a
scaling factor keeping it nonnegative, Fourier (Lewis) pricing for the
smooth model, matrix propagation for the atomic model, implied-vol
inversion, and compound-Poisson simulation of the underlying.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from . import dtl as dtl_mod
from .dtl import JumpGrid
from .dynamics import (
    FactorModel,
    dtl_drift,
    detl_drift,
    project_dtl_constraints,
    support_slice,
)

log = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    pass


class BoundaryError(ValueError):
    """Price at or outside the no-arbitrage band for implied vol."""


@dataclass
class SimConfig:
    horizon: int
    n_paths: int
    dt: float = 1.0 / 252
    epsilon: float = 1e-6
    tau_bar: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0 or self.epsilon <= 0:
            raise ValueError("dt and epsilon must be positive")


@dataclass
class DetlState:
    """Smooth-density state kappa-hat(tau, x) on a rectangular grid."""

    tau_grid: np.ndarray
    x_grid: np.ndarray
    values: np.ndarray   # (n_tau, n_x)

    def copy(self):
        return DetlState(self.tau_grid, self.x_grid, self.values.copy())


@dataclass
class DtlState:
    """Atomic state kappa-hat^j(tau) on the full jump grid."""

    grid: JumpGrid
    tau_grid: np.ndarray
    values: np.ndarray   # (n_tau, n_atoms)

    def copy(self):
        return DtlState(self.grid, self.tau_grid, self.values.copy())


@dataclass
class SurfacePath:
    prices: np.ndarray        # (days+1, n_T, n_x) or None
    implied_vols: np.ndarray  # same shape or None
    gammas: np.ndarray        # (days,)
    states: list = None
    spot: np.ndarray = None   # (days+1,) when the underlying is simulated
    clip_count: int = 0
    clip_total: int = 0
    error: str = None


def gamma(state, epsilon: float, tau_bar: float) -> float:
    """Scaling factor (inf kappa-hat over [0, tau_bar] wedge eps)/eps."""
    rows = state.tau_grid <= tau_bar + 1e-12
    vals = state.values[rows]
    if isinstance(state, DtlState):
        keep = np.arange(state.values.shape[1]) != state.grid.center
        vals = vals[:, keep]
    lo = float(vals.min()) if vals.size else epsilon
    return min(max(lo, 0.0), epsilon) / epsilon


def _state_betas(state, factors: FactorModel) -> np.ndarray:
    """Factor surfaces evaluated on the state grid, (m, n_tau, n_pts)."""
    if isinstance(state, DetlState):
        return factors.beta_hat(state.tau_grid, state.x_grid)
    # atomic model: interpolate in x onto the support window, zero
    # outside, then re-project the linear constraints exactly
    sl = support_slice(state.grid)
    x_full = state.grid.x
    raw = factors.beta_hat(state.tau_grid, x_full[sl])
    out = np.zeros((factors.m, state.tau_grid.size, state.grid.n))
    proj, _ = project_dtl_constraints(raw, x_full[sl])
    out[:, :, sl] = proj
    return out


def base_drift(state, factors: FactorModel) -> np.ndarray:
    """Maturity-coordinate drift alpha(t+tau) induced by the factors.

    Constant in t because the factors are stationary in relative
    maturity; computed once per run.
    """
    betas = _state_betas(state, factors)
    if isinstance(state, DetlState):
        return detl_drift(betas, 0.0, state.tau_grid, state.x_grid)
    return dtl_drift(betas, 0.0, state.tau_grid, state.grid)


def alpha_hat(state, base: np.ndarray) -> np.ndarray:
    """Relative-maturity drift: base plus the maturity transport term
    of the current state."""
    dk = np.gradient(state.values, state.tau_grid, axis=0)
    return base + dk


def euler_step(state, betas, base, config: SimConfig, noise):
    """One day of the scaled Euler scheme; returns (gamma, clips)."""
    g = gamma(state, config.epsilon, config.tau_bar)
    drift = alpha_hat(state, base)
    diff = np.tensordot(noise, betas, axes=(0, 0))
    new = (state.values + g * g * drift * config.dt
           + g * np.sqrt(config.dt) * diff)
    if not np.all(np.isfinite(new)):
        raise SimulationError("non-finite density after Euler step")
    clips = int(np.sum(new < 0.0))
    state.values = np.maximum(new, 0.0)
    return g, clips


def kappa_to_eta(state, tau: float) -> np.ndarray:
    """Maturity-average density (1/tau) int_0^tau kappa-hat(s,.) ds.

    Exact for the piecewise-linear maturity interpolant of the state.
    """
    taus = state.tau_grid
    if tau <= taus[0]:
        return state.values[0].copy()
    if tau > taus[-1] + 1e-12:
        raise SimulationError(f"maturity {tau} beyond state support")
    i = int(np.searchsorted(taus, tau, side="right") - 1)
    i = min(i, taus.size - 2)
    # flat extension on [0, tau_grid[0]]
    seg = np.concatenate([[0.0], taus[: i + 1], [tau]])
    frac = (tau - taus[i]) / (taus[i + 1] - taus[i])
    last = state.values[i] * (1 - frac) + state.values[i + 1] * frac
    rows = np.vstack([state.values[:1], state.values[: i + 1], last])
    return np.trapezoid(rows, seg, axis=0) / tau


def _eta_moments(eta, x_grid):
    lam = float(np.trapezoid(eta, x_grid))
    omega = float(np.trapezoid((np.exp(x_grid) - 1.0) * eta, x_grid))
    return lam, omega


def lewis_price_batch(etas, x_grid, tau: float, x_out, u_max=400.0,
                      panel=4.0, nodes=32, tail_tol=1e-13):
    """Normalized call prices via the Fourier representation, batched
    over density rows.

    The flat asymptote of the characteristic function is integrated in
    closed form; the remainder (which decays like u^-2 or faster for a
    piecewise-linear density) is integrated by composite Gauss-Legendre,
    truncated once |phi - phi_inf|/(u^2+1/4) falls below tail_tol.
    The Fourier transform of the tabulated density uses the exact
    transform of its piecewise-linear interpolant, so there is no
    aliasing at large u.
    """
    etas = np.atleast_2d(np.asarray(etas, float))
    x_grid = np.asarray(x_grid, float)
    x_out = np.atleast_1d(np.asarray(x_out, float))
    dx = x_grid[1] - x_grid[0]
    w_omega = np.exp(x_grid) - 1.0
    lam = np.trapezoid(etas, x_grid, axis=1)          # (n_b,)
    omega = np.trapezoid(w_omega * etas, x_grid, axis=1)

    front = np.exp(-tau * (lam + 0.5 * omega))        # (n_b,)
    base = 1.0 - np.exp(0.5 * x_out)[None, :] * front[:, None] * np.exp(
        -0.5 * np.abs(x_out[None, :] + tau * omega[:, None]))
    floor = np.maximum(1.0 - np.exp(x_out), 0.0)
    if tau <= 0.0 or np.all(lam <= 0.0):
        return np.clip(base, floor[None, :], 1.0)

    g = np.exp(0.5 * x_grid)[None, :] * etas          # (n_b, n_grid)
    gl_x, gl_w = np.polynomial.legendre.leggauss(nodes)

    total = np.zeros((etas.shape[0], x_out.size))
    lo = 0.0
    while lo < u_max:
        hi = min(lo + panel, u_max)
        u = 0.5 * (hi - lo) * gl_x + 0.5 * (hi + lo)  # (n_u,)
        w = 0.5 * (hi - lo) * gl_w
        arg = np.sinc(u * dx / (2.0 * np.pi)) ** 2
        kern = np.exp(1j * np.outer(u, x_grid))       # (n_u, n_grid)
        psi = dx * arg[None, :] * (g @ kern.T)        # (n_b, n_u)
        expo = np.outer(tau * omega, -1j * u - 0.5)
        phi = np.exp(expo + tau * (psi - lam[:, None]))
        phi_inf = np.exp(expo - tau * lam[:, None])
        diff = (phi - phi_inf) / (u ** 2 + 0.25)[None, :]
        cosm = np.cos(np.outer(x_out, u))             # (n_x, n_u)
        sinm = np.sin(np.outer(x_out, u))
        total += (diff.real * w) @ cosm.T + (diff.imag * w) @ sinm.T
        if np.max(np.abs(diff)) < tail_tol:
            break
        lo = hi
    prices = base - np.exp(0.5 * x_out)[None, :] / np.pi * total
    return np.clip(prices, floor[None, :], 1.0)


def lewis_price(eta, x_grid, tau: float, x_out, **kwargs):
    """Single-surface wrapper around lewis_price_batch."""
    return lewis_price_batch(np.asarray(eta, float)[None, :], x_grid, tau,
                             x_out, **kwargs)[0]


def dtl_prices(state: DtlState, maturities, x_out):
    """Normalized call prices of the atomic model via the maturity
    recursion of the time-value ODE."""
    grid = state.grid
    x = grid.x
    mask = np.arange(grid.n) != grid.center
    maturities = np.asarray(maturities, float)
    out = np.empty((maturities.size, np.size(x_out)))
    x_out = np.atleast_1d(np.asarray(x_out, float))
    prev_v = np.zeros(grid.n)
    t_prev = 0.0
    omega_int = 0.0
    for i, tau in enumerate(maturities):
        dT = tau - t_prev
        eta = kappa_to_eta_interval(state, t_prev, tau)
        theta = np.where(mask, eta, 0.0)
        omega_bar = float(np.sum(theta * (np.exp(x) - 1.0)))
        G, b = dtl_mod.build_system(theta, grid, omega_bar, 1.0)
        prev_v = dtl_mod.propagate_time_values(prev_v, G, b, dT)
        omega_int += omega_bar * dT
        v_true = dtl_mod.true_time_values(prev_v, grid, omega_int, 1.0)
        xq = x - omega_int
        tv_out = np.interp(x_out, xq, v_true)
        out[i] = tv_out + np.maximum(1.0 - np.exp(x_out), 0.0)
        t_prev = tau
    return np.clip(out, 0.0, 1.0)


def kappa_to_eta_interval(state, tau_lo: float, tau_hi: float) -> np.ndarray:
    """Average of kappa-hat over [tau_lo, tau_hi]."""
    if tau_hi <= tau_lo:
        raise SimulationError("empty maturity interval")
    hi = kappa_to_eta(state, tau_hi) * tau_hi
    lo = kappa_to_eta(state, tau_lo) * tau_lo if tau_lo > 0 else 0.0
    return (hi - lo) / (tau_hi - tau_lo)


def bs_price(sigma, x, tau):
    """Normalized Black-Scholes call (spot 1, strike e^x, zero rates)."""
    sigma = np.asarray(sigma, float)
    st = sigma * np.sqrt(tau)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = -x / st + 0.5 * st
        d2 = d1 - st
    intrinsic = np.maximum(1.0 - np.exp(x), 0.0)
    out = norm.cdf(d1) - np.exp(x) * norm.cdf(d2)
    return np.where(st > 0, out, intrinsic)


def implied_vol(price, x, tau, tol=1e-10, max_iter=100):
    """Vectorized safeguarded Newton inversion of the normalized call.

    Raises BoundaryError when any price is at or outside
    ((1-e^x)^+, 1).
    """
    price = np.asarray(price, float)
    scalar = price.ndim == 0
    price = np.atleast_1d(price).astype(float)
    x = np.broadcast_to(np.asarray(x, float), price.shape).astype(float)
    intrinsic = np.maximum(1.0 - np.exp(x), 0.0)
    if np.any(price <= intrinsic) or np.any(price >= 1.0):
        raise BoundaryError("price outside the invertible band")
    lo = np.full(price.shape, 1e-8)
    hi = np.full(price.shape, 5.0)
    sig = np.full(price.shape, 0.3)
    sqrt_tau = np.sqrt(tau)
    for _ in range(max_iter):
        val = bs_price(sig, x, tau)
        err = val - price
        if np.max(np.abs(err)) <= tol:
            break
        hi = np.where(err > 0, np.minimum(hi, sig), hi)
        lo = np.where(err < 0, np.maximum(lo, sig), lo)
        st = sig * sqrt_tau
        d1 = -x / st + 0.5 * st
        vega = norm.pdf(d1) * sqrt_tau
        step = np.where(vega > 1e-14, err / np.maximum(vega, 1e-14), 0.0)
        cand = sig - step
        bad = (cand <= lo) | (cand >= hi) | (vega <= 1e-14)
        sig = np.where(bad, 0.5 * (lo + hi), cand)
    out = sig
    return float(out[0]) if scalar else out


class JumpSampler:
    """Inverse-CDF sampler for a tabulated jump density."""

    def __init__(self, density, x_grid):
        density = np.maximum(np.asarray(density, float), 0.0)
        x_grid = np.asarray(x_grid, float)
        cdf = np.concatenate([[0.0], np.cumsum(
            0.5 * (density[1:] + density[:-1]) * np.diff(x_grid))])
        self.total = cdf[-1]
        self.x_grid = x_grid
        self.cdf = cdf / self.total if self.total > 0 else cdf

    def draw(self, size, rng):
        return np.interp(rng.random(size), self.cdf, self.x_grid)


def step_underlying(spot: float, state, dt: float, rng) -> float:
    """One compound-Poisson step of the underlying at immediate maturity."""
    if isinstance(state, DtlState):
        kap = state.values[0]
        mask = np.arange(state.grid.n) != state.grid.center
        lam = float(np.sum(kap[mask]))
        comp = float(np.sum((np.exp(state.grid.x) - 1.0)[mask] * kap[mask]))
        if not np.isfinite(lam):
            raise SimulationError("non-finite jump intensity")
        n = rng.poisson(lam * dt)
        jumps = 0.0
        if n > 0 and lam > 0:
            probs = np.maximum(kap[mask], 0.0) / lam
            jumps = float(rng.choice(state.grid.x[mask], size=n, p=probs).sum())
        return spot * np.exp(-comp * dt + jumps)
    kap = state.values[0]
    sampler = JumpSampler(kap, state.x_grid)
    lam = sampler.total
    if not np.isfinite(lam):
        raise SimulationError("non-finite jump intensity")
    comp = float(np.trapezoid((np.exp(state.x_grid) - 1.0) * kap,
                              state.x_grid))
    n = rng.poisson(lam * dt)
    jumps = float(sampler.draw(n, rng).sum()) if n > 0 and lam > 0 else 0.0
    return spot * np.exp(-comp * dt + jumps)


def price_surface(state, maturities, x_out):
    if isinstance(state, DtlState):
        return dtl_prices(state, maturities, x_out)
    out = np.empty((len(maturities), np.size(x_out)))
    for i, tau in enumerate(maturities):
        eta = kappa_to_eta(state, float(tau))
        out[i] = lewis_price(eta, state.x_grid, float(tau), x_out)
    return out


def _vol_surface(prices, maturities, x_out):
    vols = np.full_like(prices, np.nan)
    for i, tau in enumerate(maturities):
        for j, xx in enumerate(np.atleast_1d(x_out)):
            try:
                vols[i, j] = implied_vol(prices[i, j], float(xx), float(tau))
            except BoundaryError:
                pass
    return vols


def _run_path(path_index, initial, factors, config, betas, base,
              output_maturities, output_x, with_underlying, spot,
              store_states, with_vols):
    rng = np.random.default_rng([config.seed, path_index])
    state = initial.copy()
    days = config.horizon
    do_price = output_maturities is not None
    n_T = len(output_maturities) if do_price else 0
    n_x = np.size(output_x) if do_price else 0
    prices = np.empty((days + 1, n_T, n_x)) if do_price else None
    gammas = np.empty(days)
    spots = np.empty(days + 1) if with_underlying else None
    states = [] if store_states else None
    clip_count = 0
    s = spot
    try:
        for d in range(days + 1):
            if do_price:
                prices[d] = price_surface(state, output_maturities, output_x)
            if with_underlying:
                spots[d] = s
            if store_states:
                states.append(state.copy())
            if d == days:
                break
            if with_underlying:
                s = step_underlying(s, state, config.dt, rng)
            noise = rng.standard_normal(factors.m) if factors is not None \
                else np.zeros(0)
            if factors is not None:
                g, clips = euler_step(state, betas, base, config, noise)
            else:
                g, clips = gamma(state, config.epsilon, config.tau_bar), 0
            gammas[d] = g
            clip_count += clips
    except SimulationError as exc:
        return SurfacePath(prices=None, implied_vols=None, gammas=gammas,
                           error=f"path {path_index} day {d}: {exc}")
    vols = (_vol_surface_all(prices, output_maturities, output_x)
            if (do_price and with_vols) else None)
    total = (days + 1) * n_T * n_x if do_price else state.values.size * days
    return SurfacePath(prices=prices, implied_vols=vols, gammas=gammas,
                       states=states, spot=spots, clip_count=clip_count,
                       clip_total=max(total, 1))


def _vol_surface_all(prices, maturities, x_out):
    vols = np.empty_like(prices)
    for d in range(prices.shape[0]):
        vols[d] = _vol_surface(prices[d], maturities, x_out)
    return vols


def simulate(initial, factors, config: SimConfig, output_maturities=None,
             output_x=None, with_underlying=False, spot=1.0,
             store_states=False, with_vols=False, threads=1):
    """Simulate independent surface paths.

    Each path uses its own generator seeded by (master seed, path
    index), so results are identical for any thread count.  A run fails
    if more than 1% of paths abort.
    """
    if factors is not None:
        betas = _state_betas(initial, factors)
        base = base_drift(initial, factors)
    else:
        betas = base = None
    args = (initial, factors, config, betas, base, output_maturities,
            output_x, with_underlying, spot, store_states, with_vols)
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            paths = list(pool.map(lambda i: _run_path(i, *args),
                                  range(config.n_paths)))
    else:
        paths = [_run_path(i, *args) for i in range(config.n_paths)]
    failed = [p for p in paths if p.error is not None]
    for p in failed:
        log.warning("aborted: %s", p.error)
    if len(failed) > 0.01 * config.n_paths:
        raise SimulationError(
            f"{len(failed)} of {config.n_paths} paths aborted")
    return paths


def static_arbitrage_report(prices, maturities, x_out, tol=1e-8):
    """Count violations of strike monotonicity/convexity and calendar
    monotonicity on a normalized price surface (n_T, n_x)."""
    prices = np.asarray(prices, float)
    k = np.exp(np.asarray(x_out, float))
    bad = 0
    for row in prices:
        slopes = np.diff(row) / np.diff(k)
        bad += int(np.sum(slopes > tol))
        bad += int(np.sum(np.diff(slopes) < -tol))
    bad += int(np.sum(np.diff(prices, axis=0) < -tol))
    return bad
