"""Minimum-variance option portfolio experiment.

Sample covariance of simulated terminal instrument prices, closed-form
budget-constrained weights, the Q/P/K summary metrics, and the backtest
driver that runs them over a range of initial days for a given model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import sabr as sabr_mod
from . import simulation
from .market_data import Quote, QuotePanel
from .simulation import SimConfig, SimulationError, kappa_to_eta, \
    lewis_price, lewis_price_batch, dtl_prices

log = logging.getLogger(__name__)

DAYS_PER_YEAR = 365.0
TRADING_DT = 1.0 / 252


class InstrumentError(ValueError):
    pass


@dataclass(frozen=True)
class PortfolioSpec:
    """Instrument rule and sizing of the experiment.

    The portfolio holds calls of one maturity plus the underlying, with
    every-other-strike selection around the money; maturity is chosen so
    that time to maturity is maturity_extra_days when the horizon ends.
    """

    n_strikes: int = 5
    budget: float = 1.0
    horizon_days: int = 8
    maturity_extra_days: int = 30

    def __post_init__(self):
        if self.n_strikes not in (3, 4, 5):
            raise ValueError("n_strikes must be 3, 4 or 5")
        if self.budget <= 0 or self.horizon_days < 1:
            raise ValueError("budget must be positive, horizon >= 1 day")


# 0-based offsets from the first strike above spot, one pattern per size
STRIKE_OFFSETS = {5: (-3, -1, 1, 3, 5), 4: (-3, -1, 1, 3), 3: (-1, 1, 3)}


def select_strike_slots(strikes, spot: float, n_strikes: int) -> np.ndarray:
    """Indices of the every-other-strike pattern around the money.

    With strikes K_1 < ... < K_n and K_{i-1} < spot <= K_i, the 5-strike
    pattern is {i-3, i-1, i+1, i+3, i+5} (1-based).
    """
    strikes = np.asarray(strikes, float)
    if np.any(np.diff(strikes) <= 0):
        raise InstrumentError("strikes must be strictly increasing")
    idx = int(np.searchsorted(strikes, spot, side="right"))
    slots = idx + np.array(STRIKE_OFFSETS[n_strikes])
    if slots[0] < 0 or slots[-1] >= strikes.size:
        raise InstrumentError(
            f"strike ladder too narrow around spot {spot:.2f}")
    return slots


def sample_covariance(simulated, current) -> np.ndarray:
    """Second-moment matrix of terminal prices about the current price.

    Lambda = (1/(N-1)) sum_j (C_j - C_d)(C_j - C_d)^T; deviations are
    about the current price vector, not the sample mean.
    """
    sim = np.asarray(simulated, float)
    cur = np.asarray(current, float)
    if sim.shape[0] < 2:
        raise ValueError("need at least two simulated samples")
    dev = sim - cur
    return dev.T @ dev / (sim.shape[0] - 1)


def optimal_weights(cov, current, budget: float,
                    ridge: float = 1e-10) -> np.ndarray:
    """Variance-minimizing weights under the exact budget constraint.

    omega = M Lambda^-1 C / (C^T Lambda^-1 C), with a relative ridge on
    the diagonal so nearly collinear instruments stay solvable.
    """
    cov = np.asarray(cov, float)
    cur = np.asarray(current, float)
    n = cov.shape[0]
    reg = cov + ridge * np.trace(cov) / n * np.eye(n)
    try:
        y = np.linalg.solve(reg, cur)
    except np.linalg.LinAlgError as exc:
        raise InstrumentError(f"singular covariance: {exc}") from exc
    denom = float(cur @ y)
    if not np.isfinite(denom) or denom <= 0:
        raise InstrumentError("covariance solve produced invalid weights")
    return budget * y / denom


@dataclass(frozen=True)
class DayResult:
    day: int
    strikes: np.ndarray
    weights: np.ndarray        # call weights then underlying weight
    predicted_var: float       # omega^T Lambda omega
    realized_return: float     # omega^T C_{d+u} / M


def metrics(results, budget: float):
    """Aggregate (Q, P, K) over the per-day results.

    Q is the root mean square of realized return deviations from 1, P
    the root mean predicted variance, and K the mean absolute day-over-
    day weight change per instrument slot (None with fewer than 2 days).
    """
    if not results:
        raise ValueError("no successful days to aggregate")
    r = np.array([d.realized_return for d in results])
    q = float(np.sqrt(np.mean((r - 1.0) ** 2)))
    p = float(np.sqrt(np.mean([d.predicted_var for d in results])))
    k = None
    if len(results) >= 2:
        w = np.array([d.weights for d in results])
        k = float(np.mean(np.sum(np.abs(np.diff(w, axis=0)), axis=0)
                          / len(results)))
    return q, p, k


@dataclass
class PortfolioReport:
    model: str
    n_strikes: int
    Q: float
    P: float
    K: float
    results: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def coverage(self) -> float:
        total = len(self.results) + len(self.failures)
        return len(self.results) / total if total else 0.0


def _day_seed(seed: int, day: int) -> int:
    return int(np.random.SeedSequence([seed, day]).generate_state(1)[0])


class TangentLevyAdapter:
    """Terminal-price simulator backed by a tangent Levy factor model.

    state_for_day(day) must return the calibrated surface state of the
    initial day; the factor model is fixed (trained on prior data).
    """

    def __init__(self, model_kind: str, factors, state_for_day,
                 sim_kwargs=None, threads: int = 1):
        self.model_kind = model_kind
        self.factors = factors
        self.state_for_day = state_for_day
        self.sim_kwargs = dict(sim_kwargs or {})
        self.threads = threads

    def simulate_terminal(self, day, spot, strikes, tau_rem, horizon_days,
                          n_paths, seed):
        state = self.state_for_day(day)
        config = SimConfig(horizon=horizon_days, n_paths=n_paths,
                           seed=_day_seed(seed, day), **self.sim_kwargs)
        paths = simulation.simulate(state, self.factors, config,
                                    with_underlying=True, spot=spot,
                                    store_states=True, threads=self.threads)
        s_term = np.array([p.spot[-1] for p in paths])
        strikes = np.asarray(strikes, float)
        xq = np.log(strikes[None, :] / s_term[:, None])
        lo, hi = xq.min() - 0.01, xq.max() + 0.01
        grid = np.arange(lo, hi + 0.0025, 0.005)
        if self.model_kind == "detl":
            etas = np.array([kappa_to_eta(p.states[-1], tau_rem)
                             for p in paths])
            norm = lewis_price_batch(etas, state.x_grid, tau_rem, grid)
        else:
            norm = np.array([
                dtl_prices(p.states[-1], [tau_rem], grid)[0] for p in paths])
        calls = np.empty_like(xq)
        for j in range(s_term.size):
            calls[j] = s_term[j] * np.interp(xq[j], grid, norm[j])
        return s_term, calls


class SabrAdapter:
    """Terminal-price simulator for the stochastic-volatility baseline.

    Calibrated fresh each initial day to the market smile at the
    portfolio maturity (no use of historical data).
    """

    def __init__(self, beta: float, market):
        self.beta = beta
        self.market = market
        self.last_fit = None

    def simulate_terminal(self, day, spot, strikes, tau_rem, horizon_days,
                          n_paths, seed):
        tau0 = tau_rem + horizon_days / DAYS_PER_YEAR
        ladder = np.asarray(self.market.strikes(day, tau0), float)
        mids = np.asarray(self.market.price(day, ladder, tau0), float)
        xs = np.log(ladder / spot)
        keep = (mids / spot > np.maximum(1 - np.exp(xs), 0) + 1e-10) \
            & (mids / spot < 1 - 1e-10)
        quotes = tuple(
            Quote(maturity=tau0, x=float(x), mid=float(m), bid=float(m),
                  ask=float(m), weight=1.0)
            for x, m in zip(xs[keep], mids[keep]))
        panel = QuotePanel(trade_date=None, spot=spot, dividend_yield=0.0,
                           rates=((1.0, 0.0),), quotes=quotes)
        fit = sabr_mod.calibrate(panel, self.beta, tau0)
        self.last_fit = fit
        params = sabr_mod.SabrParams(
            alpha=fit.params.alpha * spot ** (1.0 - self.beta),
            beta=self.beta, nu=fit.params.nu, rho=fit.params.rho)
        rng = np.random.default_rng(_day_seed(seed, day))
        f_term, a_term = sabr_mod.simulate_terminal(
            spot, params, horizon_days, n_paths, TRADING_DT, rng)
        calls = sabr_mod.price_calls(f_term, a_term, params, strikes, tau_rem)
        return f_term, calls


class SimulatedMarket:
    """Synthetic market read off one simulated path of a known model.

    Holds the daily surface states and spots; prices calls on demand at
    any (strike, maturity), so realized prices are exact under the
    generating model.  The strike ladder is fixed over time, like listed
    options.
    """

    def __init__(self, model_kind, states, spots, strikes):
        self.model_kind = model_kind
        self.states = states
        self.spots = np.asarray(spots, float)
        self._strikes = np.asarray(strikes, float)

    @classmethod
    def generate(cls, model_kind, initial_state, factors, days, seed,
                 spot0=100.0, strike_x=None):
        config = SimConfig(horizon=days - 1, n_paths=1, seed=seed)
        paths = simulation.simulate(initial_state, factors, config,
                                    with_underlying=True, spot=spot0,
                                    store_states=True)
        p = paths[0]
        if strike_x is None:
            strike_x = np.arange(-0.30, 0.2001, 0.02)
        strikes = spot0 * np.exp(np.asarray(strike_x, float))
        return cls(model_kind, p.states, p.spot, strikes)

    @property
    def n_days(self) -> int:
        return self.spots.size

    def spot(self, day) -> float:
        return float(self.spots[day])

    def strikes(self, day, tau=None) -> np.ndarray:
        return self._strikes

    def price(self, day, strikes, tau) -> np.ndarray:
        state = self.states[day]
        s = self.spots[day]
        x = np.log(np.asarray(strikes, float) / s)
        if self.model_kind == "detl":
            eta = kappa_to_eta(state, tau)
            norm = lewis_price(eta, state.x_grid, tau, x)
        else:
            norm = dtl_prices(state, [tau], x)[0]
        return s * norm


class PanelMarket:
    """Market interface over a series of daily quote panels.

    Strikes are absolute (spot times e^x of the day's quotes); prices
    interpolate normalized time values linearly in log-moneyness within
    a maturity and linearly in maturity between quoted maturities,
    clamping at the ends of the quoted range.
    """

    def __init__(self, panels):
        self.panels = list(panels)
        if not self.panels:
            raise ValueError("no panels")

    @property
    def n_days(self) -> int:
        return len(self.panels)

    def spot(self, day) -> float:
        return float(self.panels[day].spot)

    def strikes(self, day, tau=None) -> np.ndarray:
        panel = self.panels[day]
        taus = np.array(panel.maturities())
        pick = taus[np.argmin(np.abs(taus - tau))] if tau is not None \
            else taus[-1]
        xs = sorted({q.x for q in panel.quotes
                     if abs(q.maturity - pick) <= 1e-9})
        return panel.spot * np.exp(np.array(xs))

    def _time_value_row(self, panel, tau, xq):
        xs, vs = [], []
        for q in panel.quotes:
            if abs(q.maturity - tau) <= 1e-9:
                xs.append(q.x)
                vs.append(q.mid / panel.spot
                          - max(1.0 - np.exp(q.x), 0.0))
        order = np.argsort(xs)
        return np.interp(xq, np.array(xs)[order], np.array(vs)[order])

    def price(self, day, strikes, tau) -> np.ndarray:
        panel = self.panels[day]
        s = panel.spot
        xq = np.log(np.asarray(strikes, float) / s)
        taus = np.array(panel.maturities())
        i = int(np.clip(np.searchsorted(taus, tau) - 1, 0, taus.size - 2))
        lo, hi = taus[i], taus[i + 1]
        w = float(np.clip((tau - lo) / (hi - lo), 0.0, 1.0))
        tv = ((1 - w) * self._time_value_row(panel, lo, xq)
              + w * self._time_value_row(panel, hi, xq))
        return s * (tv + np.maximum(1.0 - np.exp(xq), 0.0))


def run_backtest(model_name, adapter, market, spec: PortfolioSpec,
                 n_paths: int, seed: int, initial_days=None):
    """Run the experiment over all feasible initial days.

    For each day: select instruments, simulate to day+u, estimate the
    covariance, form weights, and mark the realized return from the
    market at day+u.  Per-day failures are recorded, not fatal.
    """
    u = spec.horizon_days
    tau_rem = spec.maturity_extra_days / DAYS_PER_YEAR
    tau0 = (u + spec.maturity_extra_days) / DAYS_PER_YEAR
    if initial_days is None:
        initial_days = range(market.n_days - u)
    results, failures = [], []
    for d in initial_days:
        try:
            s0 = market.spot(d)
            ladder = np.asarray(market.strikes(d, tau0), float)
            slots = select_strike_slots(ladder, s0, spec.n_strikes)
            ks = ladder[slots]
            c_now = np.append(market.price(d, ks, tau0), s0)
            s_term, calls = adapter.simulate_terminal(
                d, s0, ks, tau_rem, u, n_paths, seed)
            c_paths = np.column_stack([calls, s_term])
            lam = sample_covariance(c_paths, c_now)
            w = optimal_weights(lam, c_now, spec.budget)
            c_real = np.append(market.price(d + u, ks, tau_rem),
                               market.spot(d + u))
            results.append(DayResult(
                day=d, strikes=ks, weights=w,
                predicted_var=float(w @ lam @ w),
                realized_return=float(w @ c_real) / spec.budget))
        except (InstrumentError, SimulationError, ValueError) as exc:
            log.warning("day %s failed: %s", d, exc)
            failures.append((d, str(exc)))
    q, p, k = metrics(results, spec.budget)
    return PortfolioReport(model=model_name, n_strikes=spec.n_strikes,
                           Q=q, P=p, K=k, results=results,
                           failures=failures)
