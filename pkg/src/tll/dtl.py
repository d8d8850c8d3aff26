"""Discrete tangent Levy model on an atomic jump grid.

Matrix-exponential propagation of modified time values, penalized
non-parametric calibration of average jump intensities theta, and
recovery of the exponential-in-maturity density kappa.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.optimize import brentq, minimize, minimize_scalar

log = logging.getLogger(__name__)

C_MIN, C_MAX = -300.0, 20.0
_THETA_LB = 1e-8
_THETA_UB = 1e4


class NumericError(RuntimeError):
    pass


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class JumpGrid:
    """Equally spaced jump sizes with zero at the center.

    group_map maps each 0-based grid index to a variable index in
    [0, nvar); the center and permanently zeroed indices map to -1.
    """

    n: int
    dx: float
    group_map: tuple

    def __post_init__(self):
        if self.n % 2 == 0 or self.n < 3:
            raise ValueError("n must be odd and >= 3")
        if len(self.group_map) != self.n:
            raise ValueError("group_map must have length n")
        if self.group_map[self.center] != -1:
            raise ValueError("center index must not be a variable")

    @property
    def center(self) -> int:
        return (self.n - 1) // 2

    @property
    def half_width(self) -> float:
        return self.center * self.dx

    @property
    def x(self) -> np.ndarray:
        return (np.arange(self.n) - self.center) * self.dx

    @property
    def nvar(self) -> int:
        return max(self.group_map) + 1

    @property
    def free_mask(self) -> np.ndarray:
        return np.array(self.group_map) >= 0

    def expand(self, theta_var) -> np.ndarray:
        """Scatter per-variable values onto the full grid (zeros elsewhere)."""
        theta_var = np.asarray(theta_var, float)
        gm = np.array(self.group_map)
        out = np.zeros(self.n)
        mask = gm >= 0
        out[mask] = theta_var[gm[mask]]
        return out

    def group_sum(self, grid_values) -> np.ndarray:
        """Sum full-grid values into per-variable totals."""
        gm = np.array(self.group_map)
        out = np.zeros(self.nvar)
        mask = gm >= 0
        np.add.at(out, gm[mask], np.asarray(grid_values, float)[mask])
        return out

    def group_x(self) -> np.ndarray:
        """Representative (intensity-weighted center) x per variable group."""
        gm = np.array(self.group_map)
        out = np.zeros(self.nvar)
        cnt = np.zeros(self.nvar)
        mask = gm >= 0
        np.add.at(out, gm[mask], self.x[mask])
        np.add.at(cnt, gm[mask], 1.0)
        return out / cnt

    @classmethod
    def ungrouped(cls, n, dx, zero_beyond_offset=None):
        """One variable per non-center index, optionally zeroing the tails."""
        center = (n - 1) // 2
        gm = []
        k = 0
        for j in range(n):
            off = abs(j - center)
            if j == center or (zero_beyond_offset is not None and off > zero_beyond_offset):
                gm.append(-1)
            else:
                gm.append(k)
                k += 1
        return cls(n=n, dx=dx, group_map=tuple(gm))

    @classmethod
    def default(cls):
        """The production grid: N=301, dx=0.005, 24 variable groups.

        Singleton groups for the 6 offsets nearest zero on each side,
        then widening groups out to |x| = 0.25, zero intensity beyond.
        """
        return cls.build(n=301, dx=0.005, singleton_offsets=6,
                         group_widths=(4, 5, 7, 8, 10, 10), zero_beyond_offset=50)

    @classmethod
    def build(cls, n, dx, singleton_offsets, group_widths, zero_beyond_offset):
        center = (n - 1) // 2
        gm = [-1] * n
        # offset -> group id per side; negative side groups come first
        def side_groups(sign, base):
            g = base
            off = 1
            for _ in range(singleton_offsets):
                gm[center + sign * off] = g
                g += 1
                off += 1
            for w in group_widths:
                for _ in range(w):
                    if off > zero_beyond_offset:
                        break
                    gm[center + sign * off] = g
                    off += 1
                g += 1
            while off <= zero_beyond_offset:
                gm[center + sign * off] = g - 1
                off += 1
            return g

        g = side_groups(-1, 0)
        side_groups(+1, g)
        return cls(n=n, dx=dx, group_map=tuple(gm))


def build_system(theta_full, grid: JumpGrid, omega_bar_l: float, spot: float):
    """Assemble the constant-coefficient ODE d/dT v = G v + b.

    theta_full is the length-N vector of average intensities (the center
    entry is ignored); omega_bar_l is the average symmetry index on the
    current maturity interval.
    """
    theta = np.asarray(theta_full, float).copy()
    n, mi = grid.n, grid.center
    theta[mi] = 0.0
    x = grid.x
    total = theta.sum() + omega_bar_l

    w = np.exp(x) * theta  # weight per offset index
    idx = np.arange(n)
    K = idx[:, None] - idx[None, :] + mi
    valid = (K >= 0) & (K < n)
    G = np.where(valid, w[np.clip(K, 0, n - 1)], 0.0)
    np.fill_diagonal(G, -total)

    intrinsic = spot * np.maximum(1.0 - np.exp(x), 0.0)
    # (1 - e^{x_i - x_k})^+ over pairs
    pay = np.maximum(1.0 - np.exp(x[:, None] - x[None, :]), 0.0)
    b = -intrinsic * total + spot * pay @ w
    return G, b


def propagate_time_values(prev, G, b, dT: float):
    """One maturity step of the linear ODE via the augmented exponential.

    v(dT) = e^{dT G} v(0) + dT phi1(dT G) b, with phi1 obtained from the
    top-right block of expm([[G, b], [0, 0]] dT); no inverse of G.
    """
    n = G.shape[0]
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = G
    aug[:n, n] = b
    E = expm(dT * aug)
    out = E[:n, :n] @ np.asarray(prev, float) + E[:n, n]
    if not np.all(np.isfinite(out)):
        raise NumericError("matrix exponential produced non-finite entries")
    return out


def true_time_values(tilde_v, grid: JumpGrid, omega_integral: float, spot: float):
    """Undo the symmetry shift: V = Vt + S(1-e^x)^+ - S(1-e^{x-int Omega})^+."""
    x = grid.x
    return (
        np.asarray(tilde_v, float)
        + spot * np.maximum(1.0 - np.exp(x), 0.0)
        - spot * np.maximum(1.0 - np.exp(x - omega_integral), 0.0)
    )


def default_theta_weight(x):
    """Penalty weight on neighbor differences, heavier for larger jumps."""
    return 1.0 + 100.0 * np.asarray(x, float) ** 2


def penalties(theta_var_l, theta_var_prev, grid: JumpGrid, weight_fn=None):
    """The three regularizers (F1, F2, F3) of the penalized calibration.

    F1 and F3 act on the variable vector; F2 acts on the expanded grid,
    differencing consecutive non-zeroed indices on each side of zero.
    """
    if weight_fn is None:
        weight_fn = default_theta_weight
    th = np.asarray(theta_var_l, float)
    prev = np.asarray(theta_var_prev, float)
    f1 = float(np.sum((th - prev) ** 2))

    full = grid.expand(th)
    mask = grid.free_mask
    mi = grid.center
    x = grid.x
    f2 = 0.0
    left = np.flatnonzero(mask[:mi])
    for a, bidx in zip(left[1:], left[:-1]):
        f2 += (full[a] - full[bidx]) ** 2 * weight_fn(x[a])
    right = np.flatnonzero(mask)
    right = right[right > mi]
    for a, bidx in zip(right[:-1], right[1:]):
        f2 += (full[a] - full[bidx]) ** 2 * weight_fn(x[a])

    if np.any(th <= 0.0):
        f3 = np.inf
    else:
        f3 = float(np.sum(1.0 / th))
    return f1, float(f2), f3


@dataclass
class ThetaPanel:
    """Calibrated normalized average intensities for one day."""

    trade_date: object
    grid: JumpGrid
    maturities: np.ndarray           # tau_1..tau_L (years from trade date)
    theta_tilde: np.ndarray          # (L, nvar) normalized averages
    rho: np.ndarray                  # (nvar,) normalization scale
    omega_bar: np.ndarray            # (L,) average symmetry index per maturity
    objectives: np.ndarray
    statuses: list = field(default_factory=list)

    def theta(self, l):
        """Actual per-variable averages at maturity index l."""
        return self.rho * self.theta_tilde[l]

    def theta_grid(self, l):
        return self.grid.expand(self.theta(l))

    def omega_integral(self, l):
        """int_t^{T_l} Omega(u - t) du with piecewise-constant Omega-bar."""
        taus = np.concatenate([[0.0], self.maturities])
        return float(np.sum(self.omega_bar[: l + 1] * np.diff(taus)[: l + 1]))


def symmetry_coefficients(grid: JumpGrid, rho):
    """Per-variable coefficients of sum rho theta (e^x - 1)."""
    contrib = (np.exp(grid.x) - 1.0) * grid.free_mask
    return grid.group_sum(contrib) * np.asarray(rho, float)


class DayCalibrator:
    """Sequential per-maturity fitting of theta-tilde for one panel."""

    def __init__(self, panel, grid: JumpGrid, rho, epsilons=(0.0, 0.0, 0.0),
                 weight_fn=None, maxiter=200):
        self.panel = panel
        self.grid = grid
        self.rho = np.asarray(rho, float)
        self.epsilons = tuple(epsilons)
        self.weight_fn = weight_fn
        self.maxiter = maxiter
        self.spot = panel.spot
        self.taus = np.array(panel.maturities())
        self._quote_cache = {}

    def _quotes(self, tau):
        if tau not in self._quote_cache:
            qs = self.panel.quotes_at(tau)
            xs = np.array([q.x for q in qs])
            order = np.argsort(xs)
            intrinsic = self.spot * np.maximum(1.0 - np.exp(xs), 0.0)
            self._quote_cache[tau] = (
                xs[order],
                (np.array([q.mid for q in qs]) - intrinsic)[order],
                (np.array([q.bid for q in qs]) - intrinsic)[order],
                (np.array([q.ask for q in qs]) - intrinsic)[order],
            )
        return self._quote_cache[tau]

    def market_targets(self, tau, omega_int):
        """Market time values and weights at the shifted grid strikes.

        Returns (indices, values, weights) for grid indices whose shifted
        log-moneyness falls inside the quoted range.
        """
        xs, v_mid, v_bid, v_ask = self._quotes(tau)
        xq = self.grid.x - omega_int
        inside = (xq >= xs[0]) & (xq <= xs[-1])
        idx = np.flatnonzero(inside)
        vm = np.interp(xq[idx], xs, v_mid)
        spread = np.interp(xq[idx], xs, v_ask - v_bid)
        spread = np.maximum(spread, 1e-12)
        return idx, vm, spread ** -2

    def model_time_values(self, theta_var_tilde, l, prev_tilde_v, omega_bar_l,
                          omega_int_prev):
        theta_full = self.grid.expand(self.rho * theta_var_tilde)
        tau_prev = 0.0 if l == 0 else self.taus[l - 1]
        dT = self.taus[l] - tau_prev
        G, b = build_system(theta_full, self.grid, omega_bar_l, self.spot)
        tilde_v = propagate_time_values(prev_tilde_v, G, b, dT)
        omega_int = omega_int_prev + omega_bar_l * dT
        v = true_time_values(tilde_v, self.grid, omega_int, self.spot)
        return tilde_v, v, omega_int

    def _endogenous_omega(self, theta_var_tilde):
        coeff = symmetry_coefficients(self.grid, self.rho)
        return float(coeff @ theta_var_tilde)

    def data_fit(self, theta_var_tilde, l, prev_tilde_v, omega_bar_l,
                 omega_int_prev, min_coverage=0):
        if omega_bar_l is None:
            omega_bar_l = self._endogenous_omega(theta_var_tilde)
        tilde_v, v, omega_int = self.model_time_values(
            theta_var_tilde, l, prev_tilde_v, omega_bar_l, omega_int_prev)
        idx, vm, w = self.market_targets(self.taus[l], omega_int)
        fit = float(np.sum(w * (v[idx] - vm) ** 2))
        if idx.size < min_coverage:
            # a runaway symmetry index can shift every target strike out
            # of the quoted range and fake a perfect fit; penalize lost
            # coverage so the optimizer is pushed back
            fit += 1e8 * (min_coverage - idx.size) * (1.0 + omega_int ** 2)
        return fit, tilde_v

    def fit_maturity(self, l, prev_tilde_v, prev_theta_tilde, omega_bar_l,
                     omega_int_prev, epsilons=None, theta_init=None):
        """Minimize data fit + penalties for one maturity.

        omega_bar_l None runs unconstrained with the candidate's own
        symmetry index (day-0 convention).
        """
        if epsilons is None:
            epsilons = self.epsilons
        e1, e2, e3 = epsilons
        if theta_init is None:
            theta_init = prev_theta_tilde
        om0 = (self._endogenous_omega(theta_init) if omega_bar_l is None
               else omega_bar_l)
        tau_prev = 0.0 if l == 0 else self.taus[l - 1]
        om_int0 = omega_int_prev + om0 * (self.taus[l] - tau_prev)
        n0 = self.market_targets(self.taus[l], om_int0)[0].size

        def objective(th):
            fit, _ = self.data_fit(th, l, prev_tilde_v, omega_bar_l,
                                   omega_int_prev, min_coverage=n0)
            if e1 or e2 or e3:
                f1, f2, f3 = penalties(th, prev_theta_tilde, self.grid,
                                       self.weight_fn)
                fit = fit + e1 * f1 + e2 * f2 + e3 * f3
            return fit if np.isfinite(fit) else 1e18

        bounds = [(_THETA_LB, _THETA_UB)] * self.grid.nvar
        constraints = []
        if omega_bar_l is not None:
            coeff = symmetry_coefficients(self.grid, self.rho)
            constraints.append({
                "type": "eq",
                "fun": lambda th: coeff @ th - omega_bar_l,
                "jac": lambda th: coeff,
            })
        res = minimize(objective, np.asarray(theta_init, float),
                       method="SLSQP", bounds=bounds, constraints=constraints,
                       options={"maxiter": self.maxiter, "ftol": 1e-14})
        theta = np.clip(res.x, _THETA_LB, _THETA_UB)
        return theta, res


def initial_rho(panel, grid: JumpGrid, scale_init=0.5, maxiter=200):
    """Day-0 first-maturity unpenalized unconstrained fit, floored at 1e-8.

    Returns (rho_var, f0, theta_tilde) where rho_var is the fitted theta
    itself, f0 the data-fit value, and theta_tilde the normalized (unit)
    solution.
    """
    cal = DayCalibrator(panel, grid, rho=np.ones(grid.nvar), maxiter=maxiter)
    prev_v = np.zeros(grid.n)
    init = np.full(grid.nvar, scale_init)
    theta, res = cal.fit_maturity(0, prev_v, init, None, 0.0,
                                  epsilons=(0.0, 0.0, 0.0), theta_init=init)
    rho = np.maximum(theta, 1e-8)
    return rho, float(res.fun), theta / rho


def tune_epsilons(panel, grid: JumpGrid, rho=None, max_halvings=60,
                  maxiter=120):
    """Bisection for the penalty coefficients, each tuned in isolation.

    Starts every epsilon at 5 and halves until the data-fit term is
    within 5% of the unpenalized optimum f0; the post-check halving is
    applied literally, so an insensitive objective returns 2.5.
    """
    if rho is None:
        rho, f0, _ = initial_rho(panel, grid, maxiter=maxiter)
    else:
        cal0 = DayCalibrator(panel, grid, rho=rho, maxiter=maxiter)
        theta, res = cal0.fit_maturity(0, np.zeros(grid.n), np.ones(grid.nvar),
                                       None, 0.0, epsilons=(0.0, 0.0, 0.0),
                                       theta_init=np.ones(grid.nvar))
        f0 = float(res.fun)
    cal = DayCalibrator(panel, grid, rho=rho, maxiter=maxiter)
    prev_v = np.zeros(grid.n)
    ones = np.ones(grid.nvar)
    out = []
    warnings = []
    for i in range(3):
        eps = 5.0
        accepted = False
        for _ in range(max_halvings):
            trio = [0.0, 0.0, 0.0]
            trio[i] = eps
            theta, _ = cal.fit_maturity(0, prev_v, ones, None, 0.0,
                                        epsilons=tuple(trio), theta_init=ones)
            f, _ = cal.data_fit(theta, 0, prev_v, None, 0.0)
            eps = eps / 2.0
            if f <= 1.05 * f0:
                accepted = True
                break
        if not accepted:
            warnings.append(f"epsilon_{i + 1} hit the halving cap")
            log.warning("tune_epsilons: epsilon_%d hit the halving cap", i + 1)
        out.append(eps)
    return tuple(out), warnings


def calibrate_day(panel, grid: JumpGrid, rho, omega_bar=None,
                  epsilons=(0.0, 0.0, 0.0), weight_fn=None,
                  maxiter=200) -> ThetaPanel:
    """Fit theta-tilde maturity by maturity for one day.

    omega_bar None (day 0) runs unconstrained and records each
    maturity's own symmetry index; otherwise it must be a callable
    tau -> Omega-bar used as the equality constraint.
    """
    cal = DayCalibrator(panel, grid, rho, epsilons, weight_fn, maxiter)
    taus = cal.taus
    L = taus.size
    theta_tilde = np.zeros((L, grid.nvar))
    omega_out = np.zeros(L)
    objectives = np.zeros(L)
    statuses = []
    prev_v = np.zeros(grid.n)
    prev_theta = np.ones(grid.nvar)
    omega_int = 0.0
    for l in range(L):
        target = None if omega_bar is None else float(omega_bar(taus[l]))
        theta, res = cal.fit_maturity(l, prev_v, prev_theta, target, omega_int)
        if not res.success:
            statuses.append(f"T={taus[l]:.4f}: {res.message}")
        omega_l = target if target is not None else cal._endogenous_omega(theta)
        prev_v, _, omega_int = cal.model_time_values(
            theta, l, prev_v, omega_l, omega_int)
        theta_tilde[l] = theta
        omega_out[l] = omega_l
        objectives[l] = float(res.fun)
        prev_theta = theta
    return ThetaPanel(
        trade_date=panel.trade_date,
        grid=grid,
        maturities=taus,
        theta_tilde=theta_tilde,
        rho=np.asarray(rho, float),
        omega_bar=omega_out,
        objectives=objectives,
        statuses=statuses,
    )


def _segment_average(kappa_prev, c, dT):
    """[0, dT]-average of kappa_prev e^{c u}."""
    cd = c * dT
    if abs(cd) < 1e-8:
        return kappa_prev * (1.0 + cd / 2.0 + cd * cd / 6.0)
    return kappa_prev * np.expm1(cd) / cd


def _solve_c(kappa_prev, target, dT):
    """Solve target = kappa_prev (e^{c dT}-1)/(c dT) for c, clamped.

    The left side is strictly increasing in c for kappa_prev > 0, so a
    sign change brackets the root.  Returns (c, achieved_average).
    """
    if kappa_prev <= 0.0:
        return 0.0, 0.0
    lo = _segment_average(kappa_prev, C_MIN, dT)
    hi = _segment_average(kappa_prev, C_MAX, dT)
    if target <= lo:
        return C_MIN, lo
    if target >= hi:
        return C_MAX, hi
    c = brentq(lambda cc: _segment_average(kappa_prev, cc, dT) - target,
               C_MIN, C_MAX, xtol=1e-14, rtol=1e-15)
    return float(c), _segment_average(kappa_prev, c, dT)


@dataclass
class KappaSurfaceD:
    """Atomic additive density, exponential between maturity knots."""

    trade_date: object
    grid: JumpGrid
    maturities: np.ndarray       # tau_1..tau_L
    rho: np.ndarray              # (nvar,)
    kappa_tilde_knots: np.ndarray  # (L+1, nvar) at tau_0=0..tau_L
    exponents: np.ndarray        # (L, nvar) per segment
    residuals: np.ndarray        # (nvar,) fitting residual per variable
    omega_bar: np.ndarray        # (L,)

    @property
    def knot_taus(self):
        return np.concatenate([[0.0], self.maturities])

    def _locate(self, tau):
        taus = self.knot_taus
        l = int(np.clip(np.searchsorted(taus, tau, side="left") - 1,
                        0, self.maturities.size - 1))
        return l, tau - taus[l]

    def kappa_var(self, tau):
        """Per-variable kappa = rho kappa-tilde at relative maturity tau."""
        l, dt = self._locate(float(tau))
        return self.rho * self.kappa_tilde_knots[l] * np.exp(self.exponents[l] * dt)

    def kappa_grid(self, tau):
        return self.grid.expand(self.kappa_var(tau))

    def kappa_center(self, tau):
        """The center atom set to the negative sum (price-irrelevant)."""
        return -float(np.sum(self.kappa_var(tau)))

    def dkappa_dT_var(self, tau):
        l, dt = self._locate(float(tau))
        return (self.rho * self.kappa_tilde_knots[l]
                * self.exponents[l] * np.exp(self.exponents[l] * dt))

    def average_var(self, l):
        """Closed-form [T_{l-1}, T_l] average per variable."""
        taus = self.knot_taus
        dT = taus[l + 1] - taus[l]
        return self.rho * np.array([
            _segment_average(self.kappa_tilde_knots[l, j],
                             self.exponents[l, j], dT)
            for j in range(self.rho.size)
        ])

    def integral_var(self, tau):
        """int_0^tau kappa_var(u) du, closed form per segment."""
        taus = self.knot_taus
        total = np.zeros(self.rho.size)
        for l in range(self.maturities.size):
            if tau <= taus[l]:
                break
            dT = min(tau, taus[l + 1]) - taus[l]
            total += np.array([
                _segment_average(self.kappa_tilde_knots[l, j],
                                 self.exponents[l, j], dT)
                for j in range(self.rho.size)
            ]) * dT
        if tau > taus[-1]:
            total += self.kappa_tilde_knots[-1] * (tau - taus[-1])
        return total * self.rho


def _trajectory(y, theta_seq, dTs):
    """Forward pass: per-segment c and achieved averages from kappa(0)=y."""
    kap = y
    cs = np.empty(theta_seq.size)
    achieved = np.empty(theta_seq.size)
    for l, (th, dT) in enumerate(zip(theta_seq, dTs)):
        c, avg = _solve_c(kap, th, dT)
        cs[l] = c
        achieved[l] = avg
        kap = kap * np.exp(c * dT)
    return cs, achieved


def theta_to_kappa(theta_panel: ThetaPanel, grid: JumpGrid = None) -> KappaSurfaceD:
    """Recover the exponential-form kappa whose averages reproduce theta.

    Per variable, the initial value y is chosen by a single-variable
    search; exact fits are non-unique in y, so ties are broken toward
    the smoothest trajectory (minimal variance of the segment
    exponents), which also selects c = 0 for maturity-constant theta.
    """
    if grid is None:
        grid = theta_panel.grid
    taus = np.concatenate([[0.0], theta_panel.maturities])
    dTs = np.diff(taus)
    L, nvar = theta_panel.theta_tilde.shape
    knots = np.zeros((L + 1, nvar))
    cs = np.zeros((L, nvar))
    residuals = np.zeros(nvar)
    for j in range(nvar):
        th = theta_panel.theta_tilde[:, j]
        ymax = max(3.0 * th.max(), 1e-6)

        def resid_sq(y):
            _, achieved = _trajectory(y, th, dTs)
            return float(np.sum((achieved - th) ** 2))

        res = minimize_scalar(resid_sq, bounds=(0.0, ymax), method="bounded",
                              options={"xatol": 1e-12})
        best = res.fun

        def tie_break(y):
            c, achieved = _trajectory(y, th, dTs)
            r = float(np.sum((achieved - th) ** 2))
            return 1e8 * r + np.var(c)

        res2 = minimize_scalar(tie_break, bounds=(0.0, ymax), method="bounded",
                               options={"xatol": 1e-12})
        y = res2.x if resid_sq(res2.x) <= best + 1e-14 else res.x
        c, achieved = _trajectory(y, th, dTs)
        residuals[j] = float(np.sum((achieved - th) ** 2))
        knots[0, j] = y
        kap = y
        for l in range(L):
            kap = kap * np.exp(c[l] * dTs[l])
            knots[l + 1, j] = kap
            cs[l, j] = c[l]
    return KappaSurfaceD(
        trade_date=theta_panel.trade_date,
        grid=grid,
        maturities=theta_panel.maturities.copy(),
        rho=theta_panel.rho.copy(),
        kappa_tilde_knots=knots,
        exponents=cs,
        residuals=residuals,
        omega_bar=theta_panel.omega_bar.copy(),
    )
