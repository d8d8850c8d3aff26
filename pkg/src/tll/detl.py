"""Static fitting of the double-exponential tangent Levy model.

Per-maturity weighted least squares on time values (three variables on
day 0, two variables with the symmetry constraint afterwards), the
symmetry-index function, and recovery of the additive density kappa from
the per-maturity Levy densities eta.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import curve_fit, minimize
from scipy.special import expit

from .kou import InvalidParameterError, KouParams, call_price, levy_density

log = logging.getLogger(__name__)

_PENALTY = 1e12
_MIN_TAU = 1e-6


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class SymmetryIndex:
    """Piecewise-linear symmetry index Xi(tau), flat beyond the knots."""

    taus: tuple
    values: tuple

    def __post_init__(self):
        if len(self.taus) != len(self.values) or not self.taus:
            raise ValueError("knots and values must be non-empty and aligned")
        if np.any(np.diff(self.taus) <= 0):
            raise ValueError("knot maturities must be strictly increasing")

    def __call__(self, tau):
        return float(np.interp(tau, self.taus, self.values))


@dataclass(frozen=True)
class MaturityFit:
    params: KouParams
    objective: float
    n_quotes: int


@dataclass
class EtaSurface:
    """Per-maturity double-exponential densities for one trading day."""

    trade_date: object
    entries: dict  # maturity tau -> MaturityFit
    skipped: list = field(default_factory=list)  # (tau, reason)

    def maturities(self):
        return sorted(self.entries)

    def params(self, tau):
        return self.entries[tau].params


def symmetry_value(params: KouParams) -> float:
    """Xi = integral of (e^x - 1) eta(x) dx in closed form."""
    return params.lam * (
        params.p / (params.lam1 - 1.0) - params.q / (params.lam2 + 1.0)
    )


def constrained_p(lam: float, lam1: float, xi: float) -> float:
    """Solve the symmetry condition for p under the continuity constraint.

    With lam2 = p lam1/(1-p), the symmetry condition is linear in p.
    Admissible lam1: (1, inf) when xi <= 0, (1, 1 + lam/xi) when xi > 0.
    """
    if lam <= 0:
        raise DomainError("lam must be positive")
    if lam1 <= 1.0:
        raise DomainError("lam1 must exceed 1")
    if xi > 0 and lam1 >= 1.0 + lam / xi:
        raise DomainError(
            f"lam1={lam1} outside admissible interval (1, {1.0 + lam / xi})"
        )
    s = xi / lam
    m = lam1 - 1.0
    p = -(1.0 + s) * m / (s * m * m - 2.0 * m - 1.0)
    if not 0.0 < p < 1.0:
        raise DomainError(f"constrained p={p} left (0,1)")
    return p


def _objective(params, spot, strikes, mids, weights, tau):
    model = call_price(params, spot, strikes, tau)
    return float(np.sum(weights * (model - mids) ** 2))


def _quote_arrays(panel, tau):
    qs = panel.quotes_at(tau)
    strikes = panel.spot * np.exp(np.array([q.x for q in qs]))
    mids = np.array([q.mid for q in qs])
    weights = np.array([q.weight for q in qs])
    return strikes, mids, weights


def _multi_start(fun, starts, maxiter=400, n_polish=2):
    ranked = sorted(starts, key=fun)[:n_polish]
    best = None
    for x0 in ranked:
        res = minimize(fun, x0, method="Nelder-Mead",
                       options={"maxiter": maxiter, "xatol": 1e-8, "fatol": 1e-12})
        if best is None or res.fun < best.fun:
            best = res
    return best


_START_LAM = np.array([0.3, 0.8, 1.5, 3.0, 6.0])
_START_LAM1 = np.array([25.0, 15.0, 10.0, 6.0, 4.0])


def fit_day0(panel, min_quotes=4):
    """Three-variable fits per maturity and the implied symmetry index."""
    surface = EtaSurface(trade_date=panel.trade_date, entries={})
    knots = []
    for tau in panel.maturities():
        strikes, mids, weights = _quote_arrays(panel, tau)
        if strikes.size < min_quotes:
            surface.skipped.append((tau, "under-determined"))
            log.warning("maturity %.4f skipped: %d quotes", tau, strikes.size)
            continue

        def fun(v):
            lam, lam1, p = np.exp(v[0]), 1.0 + np.exp(v[1]), expit(v[2])
            try:
                par = KouParams(lam=lam, lam1=lam1, lam2=p * lam1 / (1 - p), p=p)
            except InvalidParameterError:
                return _PENALTY
            val = _objective(par, panel.spot, strikes, mids, weights, tau)
            return val if np.isfinite(val) else _PENALTY

        starts = [
            np.array([np.log(l0), np.log(l1 - 1.0), 0.0])
            for l0, l1 in zip(_START_LAM, _START_LAM1)
        ]
        res = _multi_start(fun, starts)
        if res is None or not np.isfinite(res.fun) or res.fun >= _PENALTY:
            surface.skipped.append((tau, "non-convergent"))
            continue
        lam, lam1, p = np.exp(res.x[0]), 1.0 + np.exp(res.x[1]), expit(res.x[2])
        par = KouParams(lam=lam, lam1=lam1, lam2=p * lam1 / (1 - p), p=p)
        surface.entries[tau] = MaturityFit(par, float(res.fun), strikes.size)
        knots.append((tau, symmetry_value(par)))
    if not surface.entries:
        raise DomainError("no maturity could be fitted")
    knots.sort()
    xi = SymmetryIndex(
        taus=tuple(k for k, _ in knots), values=tuple(v for _, v in knots)
    )
    return surface, xi


def fit_day(panel, xi: SymmetryIndex, min_quotes=3):
    """Two-variable fits per maturity under continuity + symmetry."""
    surface = EtaSurface(trade_date=panel.trade_date, entries={})
    for tau in panel.maturities():
        strikes, mids, weights = _quote_arrays(panel, tau)
        if strikes.size < min_quotes:
            surface.skipped.append((tau, "under-determined"))
            log.warning("maturity %.4f skipped: %d quotes", tau, strikes.size)
            continue
        xi_tau = xi(tau)

        def make_params(v):
            lam = np.exp(v[0])
            if xi_tau > 0:
                lam1 = 1.0 + (lam / xi_tau) * expit(v[1])
            else:
                lam1 = 1.0 + np.exp(v[1])
            p = constrained_p(lam, lam1, xi_tau)
            return KouParams(lam=lam, lam1=lam1, lam2=p * lam1 / (1 - p), p=p)

        def fun(v):
            try:
                par = make_params(v)
            except (DomainError, InvalidParameterError, OverflowError):
                return _PENALTY
            val = _objective(par, panel.spot, strikes, mids, weights, tau)
            return val if np.isfinite(val) else _PENALTY

        starts = []
        for l0, l1 in zip(_START_LAM, _START_LAM1):
            if xi_tau > 0:
                frac = min((l1 - 1.0) * xi_tau / l0, 0.95)
                if frac <= 0.05:
                    frac = 0.5
                u = float(np.log(frac / (1 - frac)))
            else:
                u = float(np.log(l1 - 1.0))
            starts.append(np.array([np.log(l0), u]))
        res = _multi_start(fun, starts)
        if res is None or not np.isfinite(res.fun) or res.fun >= _PENALTY:
            surface.skipped.append((tau, "non-convergent"))
            continue
        par = make_params(res.x)
        surface.entries[tau] = MaturityFit(par, float(res.fun), strikes.size)
    if not surface.entries:
        raise DomainError("no maturity could be fitted")
    return surface


DEFAULT_X_GRID = np.round(np.linspace(-0.4, 0.3, 21), 10)


def default_regime_rule(taus, eta_values):
    """Decreasing family when the long end sits below the short end."""
    return "decreasing" if eta_values[-1] < eta_values[0] else "polynomial"


def _dec_family(tau, c1, c2, c3, c4, c5):
    return c1 * tau ** c2 + c3 * tau * np.exp(-c4 * tau) + c5


@dataclass
class KappaSurfaceC:
    """Continuous-x additive density, parametric in maturity per x node.

    For each x node a five-coefficient family interpolates eta across
    maturities; kappa and its maturity derivative come from the family's
    closed forms, clipped at zero.
    """

    trade_date: object
    x_grid: np.ndarray
    taus: np.ndarray
    eta_values: np.ndarray          # (L, n_x) fitted eta at the knots
    regimes: list                   # per x node: "decreasing" | "polynomial"
    coeffs: np.ndarray              # (n_x, 5)
    warnings: list = field(default_factory=list)
    clip_fraction: float = 0.0

    @property
    def max_tau(self):
        return float(self.taus[-1])

    def _eval(self, tau, clip=True, deriv=False):
        tau = np.maximum(np.atleast_1d(np.asarray(tau, float)), _MIN_TAU)
        n_x = self.x_grid.size
        kap = np.empty((tau.size, n_x))
        dkap = np.empty((tau.size, n_x))
        for j in range(n_x):
            c1, c2, c3, c4, c5 = self.coeffs[j]
            if self.regimes[j] == "decreasing":
                e = np.exp(-c4 * tau)
                kap[:, j] = c1 * (c2 + 1.0) * tau ** c2 + e * (
                    2.0 * c3 * tau - c3 * c4 * tau ** 2
                ) + c5
                dkap[:, j] = c1 * (c2 + 1.0) * c2 * tau ** (c2 - 1.0) + e * (
                    2.0 * c3 - 4.0 * c3 * c4 * tau + c3 * c4 ** 2 * tau ** 2
                )
            else:
                kap[:, j] = (
                    5 * c1 * tau ** 4 + 4 * c2 * tau ** 3
                    + 3 * c3 * tau ** 2 + 2 * c4 * tau + c5
                )
                dkap[:, j] = 20 * c1 * tau ** 3 + 12 * c2 * tau ** 2 + 6 * c3 * tau + 2 * c4
        if clip:
            dkap = np.where(kap > 0.0, dkap, 0.0)
            kap = np.maximum(kap, 0.0)
        return (kap, dkap) if deriv else kap

    def kappa(self, tau):
        """kappa(t + tau, x) on the x grid; rows follow tau."""
        return self._eval(tau)

    def dkappa_dT(self, tau):
        _, d = self._eval(tau, deriv=True)
        return d

    def eta(self, tau):
        """Average density implied by the fitted families."""
        tau = np.maximum(np.atleast_1d(np.asarray(tau, float)), _MIN_TAU)
        n_x = self.x_grid.size
        out = np.empty((tau.size, n_x))
        for j in range(n_x):
            c1, c2, c3, c4, c5 = self.coeffs[j]
            if self.regimes[j] == "decreasing":
                out[:, j] = _dec_family(tau, c1, c2, c3, c4, c5)
            else:
                out[:, j] = (
                    c1 * tau ** 4 + c2 * tau ** 3 + c3 * tau ** 2 + c4 * tau + c5
                )
        return out


def eta_to_kappa(surface: EtaSurface, x_grid=None, regime_rule=None,
                 residual_threshold=0.05) -> KappaSurfaceC:
    """Fit eta across maturities per x node and differentiate to kappa."""
    if x_grid is None:
        x_grid = DEFAULT_X_GRID
    if regime_rule is None:
        regime_rule = default_regime_rule
    x_grid = np.asarray(x_grid, float)
    taus = np.array(surface.maturities())
    if taus.size < 3:
        raise DomainError("need at least 3 fitted maturities")
    eta_mat = np.stack(
        [levy_density(surface.params(t), x_grid) for t in taus]
    )  # (L, n_x)

    n_x = x_grid.size
    coeffs = np.zeros((n_x, 5))
    regimes = []
    warnings = []
    for j in range(n_x):
        y = eta_mat[:, j]
        if np.ptp(y) <= 1e-12 * max(abs(y).max(), 1.0):
            regimes.append("polynomial")
            coeffs[j] = [0.0, 0.0, 0.0, 0.0, y.mean()]
            continue
        regime = regime_rule(taus, y)
        fitted = None
        if regime == "decreasing":
            p0 = [max(y[0] - y[-1], 1e-3), -0.5, 0.0, 1.0, max(y[-1], 0.0)]
            bounds = ([0.0, -0.95, -np.inf, 0.0, 0.0],
                      [np.inf, 3.0, np.inf, 50.0, np.inf])
            try:
                popt, _ = curve_fit(_dec_family, taus, y, p0=p0, bounds=bounds,
                                    maxfev=20000)
                fitted = popt
            except (RuntimeError, ValueError):
                regime = "polynomial"
                warnings.append((float(x_grid[j]), "decreasing fit failed"))
        if regime == "polynomial":
            deg = min(4, taus.size - 1)
            design = np.vander(taus, deg + 1)  # columns tau^deg .. 1
            sol, *_ = np.linalg.lstsq(design, y, rcond=None)
            fitted = np.concatenate([np.zeros(5 - sol.size), sol])
        coeffs[j] = fitted
        regimes.append(regime)
        model = (
            _dec_family(taus, *fitted) if regime == "decreasing"
            else np.polyval(fitted, taus)
        )
        rel = np.max(np.abs(model - y)) / max(abs(y).max(), 1e-12)
        if rel > residual_threshold:
            warnings.append((float(x_grid[j]), f"fit residual {rel:.3g}"))

    out = KappaSurfaceC(
        trade_date=surface.trade_date,
        x_grid=x_grid,
        taus=taus,
        eta_values=eta_mat,
        regimes=regimes,
        coeffs=coeffs,
        warnings=warnings,
    )
    dense = np.linspace(_MIN_TAU, taus[-1], 101)
    raw = out._eval(dense, clip=False)
    out.clip_fraction = float(np.mean(raw < 0.0))
    return out
