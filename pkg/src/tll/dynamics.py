"""Factor dynamics of the additive jump density.

PCA of daily density increments in relative-maturity coordinates,
linear-constraint projection for the atomic model, and the
no-dynamic-arbitrage drift restrictions for both model classes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import RegularGridInterpolator
from scipy.signal import fftconvolve

from .dtl import JumpGrid

log = logging.getLogger(__name__)

TRADING_DAYS = 252


class IncrementError(ValueError):
    pass


@dataclass(frozen=True)
class IncrementPanel:
    """Daily surfaces kappa-hat(tau, x) and their first differences."""

    dates: tuple
    tau_grid: np.ndarray
    x_grid: np.ndarray
    values: np.ndarray      # (n_days, n_tau, n_x)

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)

    @property
    def n_points(self) -> int:
        return self.tau_grid.size * self.x_grid.size


def to_relative_maturity(dates, surfaces, tau_grid, x_grid, evaluator):
    """Evaluate each day's surface at fixed relative maturities.

    evaluator(surface, tau) must return kappa-hat values on x_grid.
    Maturities beyond any surface's support are dropped with a warning.
    """
    if len(surfaces) < 2:
        raise IncrementError("need at least two consecutive days")
    tau_grid = np.asarray(tau_grid, float)
    supports = [max(s.maturities() if callable(getattr(s, "maturities", None))
                    else s.maturities) for s in surfaces]
    limit = min(float(np.max(np.atleast_1d(s))) for s in supports)
    keep = tau_grid <= limit + 1e-12
    if not np.all(keep):
        log.warning("dropping %d maturities beyond surface support (%.4f)",
                    int(np.sum(~keep)), limit)
    tau_grid = tau_grid[keep]
    if tau_grid.size == 0:
        raise IncrementError("no maturities inside the common support")
    x_grid = np.asarray(x_grid, float)
    values = np.empty((len(surfaces), tau_grid.size, x_grid.size))
    for d, (date, surf) in enumerate(zip(dates, surfaces)):
        for i, tau in enumerate(tau_grid):
            row = np.asarray(evaluator(surf, float(tau)), float)
            if not np.all(np.isfinite(row)):
                raise IncrementError(f"non-finite density on {date}")
            values[d, i] = row
    return IncrementPanel(tuple(dates), tau_grid, x_grid, values)


def detl_evaluator(surface, tau):
    """kappa-hat row for a smooth-density maturity surface."""
    return surface.kappa(np.array([tau]))[0]


def dtl_evaluator(var_indices):
    """kappa-hat row builder for an atomic surface, restricted to
    selected variable indices."""
    idx = np.asarray(var_indices, int)

    def _eval(surface, tau):
        return surface.kappa_var(tau)[idx]

    return _eval


def select_top_indices(values, k):
    """Indices of the k columns with largest time-averaged magnitude,
    returned in ascending index order."""
    avg = np.mean(np.abs(values), axis=tuple(range(values.ndim - 1)))
    top = np.sort(np.argsort(avg)[::-1][:k])
    return top


@dataclass
class FactorModel:
    """Constant-in-time volatility factors of the density dynamics.

    factors[n] holds beta-hat^n = sqrt(lambda_n) f^n on the reduced
    (tau, x) grid; eigenvalues are annualized.
    """

    model_kind: str
    tau_grid: np.ndarray
    x_grid: np.ndarray
    factors: np.ndarray        # (m, n_tau, n_x)
    eigenvalues: np.ndarray    # all eigenvalues, descending, per year
    explained: np.ndarray      # cumulative explained fraction, per mode

    @property
    def m(self) -> int:
        return self.factors.shape[0]

    def explained_fraction(self) -> float:
        return float(self.explained[self.m - 1])

    def beta_hat(self, tau_grid, x_grid) -> np.ndarray:
        """Bilinear interpolation onto a new grid, clamped at the edges."""
        tq = np.clip(np.asarray(tau_grid, float),
                     self.tau_grid[0], self.tau_grid[-1])
        xq = np.clip(np.asarray(x_grid, float),
                     self.x_grid[0], self.x_grid[-1])
        out = np.empty((self.m, tq.size, xq.size))
        pts = np.stack(np.meshgrid(tq, xq, indexing="ij"), axis=-1)
        for n in range(self.m):
            interp = RegularGridInterpolator(
                (self.tau_grid, self.x_grid), self.factors[n])
            out[n] = interp(pts)
        return out

    def to_json(self) -> str:
        return json.dumps({
            "model_kind": self.model_kind,
            "tau_grid": self.tau_grid.tolist(),
            "x_grid": self.x_grid.tolist(),
            "factors": self.factors.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "explained": self.explained.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "FactorModel":
        d = json.loads(text)
        return cls(
            model_kind=d["model_kind"],
            tau_grid=np.array(d["tau_grid"]),
            x_grid=np.array(d["x_grid"]),
            factors=np.array(d["factors"]),
            eigenvalues=np.array(d["eigenvalues"]),
            explained=np.array(d["explained"]),
        )


def pca(panel: IncrementPanel, m: int, dt: float = 1.0 / TRADING_DAYS,
        model_kind: str = "detl") -> FactorModel:
    """Top-m eigenpairs of the sample covariance of daily increments.

    Eigenvalues are annualized by 1/dt.  Each eigenvector is oriented so
    its largest-magnitude entry is positive.
    """
    inc = panel.increments.reshape(panel.increments.shape[0], -1)
    if inc.shape[0] <= inc.shape[1]:
        log.warning("sample size %d not larger than grid size %d",
                    inc.shape[0], inc.shape[1])
    if not np.all(np.isfinite(inc)):
        bad = np.flatnonzero(~np.isfinite(inc).all(axis=1))[0]
        raise IncrementError(f"non-finite increment on {panel.dates[bad + 1]}")
    cov = np.cov(inc, rowvar=False)
    cov = np.atleast_2d(cov)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.maximum(evals[order], 0.0)
    evecs = evecs[:, order]
    for n in range(evecs.shape[1]):
        if evecs[np.argmax(np.abs(evecs[:, n])), n] < 0:
            evecs[:, n] = -evecs[:, n]
    total = evals.sum()
    explained = (np.cumsum(evals) / total if total > 0
                 else np.ones_like(evals))
    ann = evals / dt
    shape = (panel.tau_grid.size, panel.x_grid.size)
    factors = np.array([
        np.sqrt(ann[n]) * evecs[:, n].reshape(shape) for n in range(m)
    ])
    return FactorModel(
        model_kind=model_kind,
        tau_grid=panel.tau_grid.copy(),
        x_grid=panel.x_grid.copy(),
        factors=factors,
        eigenvalues=ann,
        explained=explained,
    )


def support_slice(grid: JumpGrid) -> slice:
    """0-based index range of the factor support window.

    The window is the (N+1)/4 <= k <= 3(N+1)/4 band (1-based) on which
    the atomic drift restriction and symmetry constraints act.
    """
    lo = int(np.ceil((grid.n + 1) / 4.0)) - 1
    hi = int(np.floor(3 * (grid.n + 1) / 4.0)) - 1
    return slice(lo, hi + 1)


def project_dtl_constraints(factors, x_values):
    """Orthogonal projection of each factor row onto the constraint set
    {sum beta = 0} intersect {sum beta (e^x - 1) = 0}.

    Returns (projected, distances) with one distance per factor.
    """
    factors = np.asarray(factors, float)
    x = np.asarray(x_values, float)
    A = np.vstack([np.ones_like(x), np.exp(x) - 1.0])
    AAt_inv = np.linalg.inv(A @ A.T)
    out = np.empty_like(factors)
    dist = np.zeros(factors.shape[0])
    for n in range(factors.shape[0]):
        rows = factors[n]
        proj = rows - (rows @ A.T) @ AAt_inv @ A
        out[n] = proj
        dist[n] = float(np.linalg.norm(rows - proj))
    return out, dist


def _beta_bar(betas, t, T_grid):
    """Integral of each factor from t to T on the maturity grid.

    betas: (m, n_T, ...) sampled at T_grid; factors are taken flat on
    [t, T_grid[0]] if the grid starts after t.
    """
    T_grid = np.asarray(T_grid, float)
    bar = cumulative_trapezoid(betas, T_grid, axis=1, initial=0.0)
    lead = T_grid[0] - t
    if lead > 0:
        bar = bar + lead * betas[:, :1]
    return bar


def detl_drift(betas, t, T_grid, x_grid):
    """Arbitrage-free drift of the smooth-density model.

    alpha(T,x) = -sum_n { (beta_bar * beta)(x) - beta_bar(x) int beta
    - beta(x) int beta_bar }, with the convolution and integrals on a
    uniform x grid (trapezoid; fft convolution).
    """
    betas = np.asarray(betas, float)
    x_grid = np.asarray(x_grid, float)
    dx = x_grid[1] - x_grid[0]
    if not np.allclose(np.diff(x_grid), dx, rtol=1e-8):
        raise ValueError("x_grid must be uniform")
    bars = _beta_bar(betas, t, T_grid)
    alpha = np.zeros(betas.shape[1:])
    for n in range(betas.shape[0]):
        for i in range(betas.shape[1]):
            b = betas[n, i]
            bb = bars[n, i]
            conv = fftconvolve(bb, b, mode="same") * dx
            ib = np.trapezoid(b, x_grid)
            ibb = np.trapezoid(bb, x_grid)
            alpha[i] -= conv - bb * ib - b * ibb
    return alpha


def dtl_drift(betas, t, T_grid, grid: JumpGrid):
    """Arbitrage-free drift of the atomic model.

    alpha^j(T) = -sum_n sum_{k in support} beta^{k,n}(T)
    beta_bar^{j+M-k,n}(T); out-of-range indices contribute zero.
    betas: (m, n_T, N) on the full atom grid.
    """
    betas = np.asarray(betas, float)
    n_fac, n_T, N = betas.shape
    if N != grid.n:
        raise ValueError("betas must be sampled on the full atom grid")
    bars = _beta_bar(betas, t, T_grid)
    sl = support_slice(grid)
    mask = np.zeros(N)
    mask[sl] = 1.0
    mi = grid.center
    alpha = np.zeros((n_T, N))
    for n in range(n_fac):
        for i in range(n_T):
            b = betas[n, i] * mask
            conv = np.convolve(b, bars[n, i])
            alpha[i] -= conv[mi:mi + N]
    return alpha


def to_alpha_hat(alpha, dkappa_dT):
    """Relative-maturity drift: alpha-hat = alpha(t+tau) + d kappa / dT."""
    return np.asarray(alpha, float) + np.asarray(dkappa_dT, float)
