"""Stochastic-volatility baseline for the surface comparison.

Hagan asymptotic implied volatility, daily calibration of (alpha, nu,
rho) with a fixed elasticity beta, and log-Euler simulation of the
forward and its volatility.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .simulation import bs_price, implied_vol

log = logging.getLogger(__name__)

ATM_SWITCH = 1e-6


@dataclass(frozen=True)
class SabrParams:
    alpha: float
    beta: float
    nu: float
    rho: float

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.nu < 0:
            raise ValueError("nu must be non-negative")
        if not -1.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (-1, 1)")


def _z_over_x(z, rho):
    """z / x(z) with a series branch near z = 0."""
    z = np.asarray(z, float)
    small = np.abs(z) < ATM_SWITCH
    zs = np.where(small, 0.0, z)
    with np.errstate(divide="ignore", invalid="ignore"):
        xz = np.log((np.sqrt(1.0 - 2.0 * rho * zs + zs ** 2) + zs - rho)
                    / (1.0 - rho))
        ratio = zs / xz
    series = 1.0 + rho * z / 2.0 + (3.0 * rho ** 2 - 2.0) * z ** 2 / 12.0
    return np.where(small, series, ratio)


def hagan_vol(params: SabrParams, F, K, tau):
    """Asymptotic lognormal implied volatility of the SABR model.

    Vectorized over K.  The at-the-money limit is taken by the series
    expansion of z/x(z), switching at |log(F/K)| < 1e-6.
    """
    if tau <= 0:
        raise ValueError("time to maturity must be positive")
    if F <= 0:
        raise ValueError("forward must be positive")
    K = np.asarray(K, float)
    if np.any(K <= 0):
        raise ValueError("strikes must be positive")
    a, b, nu, rho = params.alpha, params.beta, params.nu, params.rho
    lk = np.log(F / K)
    fk = (F * K) ** ((1.0 - b) / 2.0)
    denom = fk * (1.0 + (1.0 - b) ** 2 / 24.0 * lk ** 2
                  + (1.0 - b) ** 4 / 1920.0 * lk ** 4)
    z = nu / a * fk * lk
    correction = 1.0 + ((1.0 - b) ** 2 / 24.0 * a ** 2 / fk ** 2
                        + rho * b * nu * a / (4.0 * fk)
                        + (2.0 - 3.0 * rho ** 2) / 24.0 * nu ** 2) * tau
    return a / denom * _z_over_x(z, rho) * correction


@dataclass(frozen=True)
class SabrFit:
    params: SabrParams
    objective: float
    initial_objective: float
    converged: bool


def _panel_arrays(panel, maturity, tol=1e-9):
    xs, mids, weights = [], [], []
    for q in panel.quotes:
        if abs(q.maturity - maturity) <= tol:
            xs.append(q.x)
            mids.append(q.mid / panel.spot)
            weights.append(q.weight)
    return np.array(xs), np.array(mids), np.array(weights)


def calibrate(panel, beta: float, maturity: float) -> SabrFit:
    """Fit (alpha, nu, rho) to one maturity by weighted least squares on
    normalized call prices, beta held fixed.
    """
    xs, mids, weights = _panel_arrays(panel, maturity)
    if xs.size < 3:
        raise ValueError(f"need at least 3 quotes at maturity {maturity}")
    F = 1.0
    sw = np.sqrt(weights)

    atm = int(np.argmin(np.abs(xs)))
    try:
        atm_vol = float(implied_vol(mids[atm], xs[atm], maturity))
    except Exception:
        atm_vol = 0.2
    x0 = np.array([atm_vol * F ** (1.0 - beta), 0.5, -0.3])

    def resid(p):
        params = SabrParams(alpha=max(p[0], 1e-8), beta=beta,
                            nu=max(p[1], 0.0),
                            rho=np.clip(p[2], -0.999, 0.999))
        sig = hagan_vol(params, F, np.exp(xs), maturity)
        return sw * (bs_price(sig, xs, maturity) - mids)

    f0 = float(np.sum(resid(x0) ** 2))
    sol = least_squares(resid, x0,
                        bounds=([1e-8, 0.0, -0.999], [10.0, 10.0, 0.999]),
                        xtol=1e-14, ftol=1e-14, gtol=1e-14)
    fopt = float(np.sum(sol.fun ** 2))
    if not sol.success:
        log.warning("calibration did not fully converge: %s", sol.message)
    params = SabrParams(alpha=float(sol.x[0]), beta=beta,
                        nu=float(sol.x[1]), rho=float(sol.x[2]))
    return SabrFit(params=params, objective=fopt, initial_objective=f0,
                   converged=bool(sol.success))


def step_sabr(F, alpha, params: SabrParams, dt: float, noise2):
    """One log-Euler step of (forward, volatility).

    noise2 holds two standard normals (each possibly vectorized over
    paths).  The effective lognormal vol over the step is alpha
    F^(beta-1).
    """
    F = np.asarray(F, float)
    alpha = np.asarray(alpha, float)
    z1, z2 = noise2
    nu, rho = params.nu, params.rho
    sd = np.sqrt(dt)
    sig = alpha * F ** (params.beta - 1.0)
    F_new = F * np.exp(-0.5 * sig ** 2 * dt + sig * sd * z1)
    # for beta < 1 the effective vol explodes as F -> 0 and the explicit
    # scheme can underflow; floor keeps the process strictly positive
    F_new = np.maximum(F_new, 1e-12)
    alpha_new = alpha * np.exp(-0.5 * nu ** 2 * dt
                               + nu * sd * (rho * z1
                                            + np.sqrt(1.0 - rho ** 2) * z2))
    return F_new, alpha_new


def simulate_terminal(F0, params: SabrParams, n_steps: int, n_paths: int,
                      dt: float, rng) -> np.ndarray:
    """Terminal forwards after n_steps log-Euler steps, one row per path."""
    F = np.full(n_paths, float(F0))
    alpha = np.full(n_paths, params.alpha)
    for _ in range(n_steps):
        z = rng.standard_normal((2, n_paths))
        F, alpha = step_sabr(F, alpha, params, dt, z)
    return F, alpha


def price_calls(F, alpha, params: SabrParams, strikes, tau: float):
    """Normalized model call prices at the given absolute strikes for a
    (possibly path-vectorized) forward/vol state.
    """
    F = np.atleast_1d(np.asarray(F, float))
    alpha = np.atleast_1d(np.asarray(alpha, float))
    strikes = np.asarray(strikes, float)
    out = np.empty((F.size, strikes.size))
    for i in range(F.size):
        p = SabrParams(alpha=float(alpha[i]), beta=params.beta,
                       nu=params.nu, rho=params.rho)
        sig = hagan_vol(p, float(F[i]), strikes, tau)
        x = np.log(strikes / F[i])
        out[i] = F[i] * bs_price(sig, x, tau)
    return out
