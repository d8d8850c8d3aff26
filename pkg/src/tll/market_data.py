"""Call-quote panel ingestion, adjustment, time values, and synthesis.

File convention for a day's panel: quotes at ``<base>.csv`` with columns
``trade_date,maturity_date,strike,bid,ask,open_interest``, a header file
``<base>.header.csv`` with columns ``spot,dividend_yield``, and a rates
file ``<base>.rates.csv`` with columns ``maturity_date,rate``.  Dates are
ISO-8601, prices are decimals.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DAYS_PER_YEAR = 365.0


class PanelError(Exception):
    """Base class for panel ingestion failures."""


class ParseError(PanelError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class EmptyPanelError(PanelError):
    pass


@dataclass(frozen=True)
class RawQuote:
    trade_date: dt.date
    maturity: dt.date
    strike: float
    bid: float
    ask: float
    open_interest: int


@dataclass(frozen=True)
class Quote:
    """One adjusted quote: prices scaled by e^{q tau}, x shifted by (r-q) tau.

    x is adjusted log-moneyness; the effective strike is spot * e^x.
    """

    maturity: float
    x: float
    mid: float
    bid: float
    ask: float
    weight: float


@dataclass(frozen=True)
class QuotePanel:
    trade_date: dt.date
    spot: float
    dividend_yield: float
    rates: tuple  # ((tau, rate), ...) sorted by tau
    quotes: tuple  # of Quote

    def maturities(self):
        return sorted({q.maturity for q in self.quotes})

    def quotes_at(self, maturity, tol=1e-12):
        return [q for q in self.quotes if abs(q.maturity - maturity) <= tol]

    def rate(self, tau):
        return interp_rate(self.rates, tau)


@dataclass
class TimeValueTable:
    """Time values V = C - S(1 - e^x)^+ of mid, bid, and ask quotes."""

    values: dict  # (maturity, x) -> {"market", "bid", "ask"}
    negative: list = field(default_factory=list)  # (maturity, x) with V_mid < 0


def interp_rate(rates, tau):
    if not rates:
        return 0.0
    taus = np.array([r[0] for r in rates])
    vals = np.array([r[1] for r in rates])
    return float(np.interp(tau, taus, vals))


def _parse_date(text, path, line_no):
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError as exc:
        raise ParseError(path, line_no, f"bad date {text!r}") from exc


def _parse_float(text, path, line_no, name):
    try:
        return float(text)
    except (TypeError, ValueError) as exc:
        raise ParseError(path, line_no, f"bad {name} {text!r}") from exc


def _read_rows(path, expected):
    path = Path(path)
    if not path.exists():
        raise PanelError(f"missing file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        raise ParseError(path, 1, "empty file")
    header = [h.strip() for h in rows[0]]
    if header != expected:
        raise ParseError(path, 1, f"expected header {expected}, got {header}")
    return path, rows[1:]


def load_raw_quotes(path):
    """Read the quotes CSV into RawQuote records (no filtering)."""
    path, rows = _read_rows(
        path, ["trade_date", "maturity_date", "strike", "bid", "ask", "open_interest"]
    )
    out = []
    for i, row in enumerate(rows, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 6:
            raise ParseError(path, i, f"expected 6 columns, got {len(row)}")
        trade = _parse_date(row[0], path, i)
        maturity = _parse_date(row[1], path, i)
        strike = _parse_float(row[2], path, i, "strike")
        bid = _parse_float(row[3], path, i, "bid")
        ask = _parse_float(row[4], path, i, "ask")
        try:
            oi = int(row[5])
        except ValueError as exc:
            raise ParseError(path, i, f"bad open_interest {row[5]!r}") from exc
        if maturity <= trade:
            raise ParseError(path, i, "maturity must be after trade date")
        if strike <= 0:
            raise ParseError(path, i, "strike must be positive")
        out.append(RawQuote(trade, maturity, strike, bid, ask, oi))
    return out


def _load_header(base):
    path, rows = _read_rows(Path(str(base)).with_suffix(".header.csv"),
                            ["spot", "dividend_yield"])
    if len(rows) != 1:
        raise ParseError(path, 2, "header file must contain exactly one row")
    spot = _parse_float(rows[0][0], path, 2, "spot")
    q = _parse_float(rows[0][1], path, 2, "dividend_yield")
    if spot <= 0:
        raise ParseError(path, 2, "spot must be positive")
    return spot, q


def _load_rates(base, trade_date):
    path, rows = _read_rows(Path(str(base)).with_suffix(".rates.csv"),
                            ["maturity_date", "rate"])
    out = []
    for i, row in enumerate(rows, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        mat = _parse_date(row[0], path, i)
        rate = _parse_float(row[1], path, i, "rate")
        tau = (mat - trade_date).days / DAYS_PER_YEAR
        if tau > 0:
            out.append((tau, rate))
    out.sort()
    return tuple(out)


def build_panel(raw_quotes, trade_date, spot, dividend_yield, rates):
    """Filter and adjust raw quotes into a QuotePanel.

    Keeps quotes with time-to-maturity in (0, 1] years, positive open
    interest, and a strictly positive uncrossed spread.  Prices are scaled
    by e^{q tau} and log-moneyness shifted by -(r - q) tau.
    """
    quotes = []
    dropped_crossed = 0
    for rq in raw_quotes:
        if rq.trade_date != trade_date:
            continue
        tau = (rq.maturity - trade_date).days / DAYS_PER_YEAR
        if tau <= 0 or tau > 1.0 + 1e-12:
            continue
        if rq.open_interest <= 0:
            continue
        if rq.ask < rq.bid:
            dropped_crossed += 1
            log.warning(
                "dropping crossed quote %s K=%s bid=%s ask=%s",
                rq.maturity, rq.strike, rq.bid, rq.ask,
            )
            continue
        r = interp_rate(rates, tau)
        scale = np.exp(dividend_yield * tau)
        bid = rq.bid * scale
        ask = rq.ask * scale
        spread = ask - bid
        if spread <= 0:
            log.warning("dropping zero-spread quote %s K=%s", rq.maturity, rq.strike)
            continue
        x = np.log(rq.strike / spot) - (r - dividend_yield) * tau
        quotes.append(
            Quote(
                maturity=tau,
                x=float(x),
                mid=0.5 * (bid + ask),
                bid=float(bid),
                ask=float(ask),
                weight=float(spread ** -2),
            )
        )
    if not quotes:
        raise EmptyPanelError(f"no usable quotes on {trade_date}")
    quotes.sort(key=lambda q: (q.maturity, q.x))
    return QuotePanel(
        trade_date=trade_date,
        spot=float(spot),
        dividend_yield=float(dividend_yield),
        rates=tuple(rates),
        quotes=tuple(quotes),
    )


def load_panel(path, trade_date) -> QuotePanel:
    """Load one day's panel from ``<base>.csv`` plus its sibling files."""
    base = Path(path)
    raw = load_raw_quotes(base)
    spot, q = _load_header(base)
    rates = _load_rates(base, trade_date)
    return build_panel(raw, trade_date, spot, q, rates)


def time_values(panel: QuotePanel) -> TimeValueTable:
    table = TimeValueTable(values={})
    for q in panel.quotes:
        intrinsic = panel.spot * max(1.0 - np.exp(q.x), 0.0)
        entry = {
            "market": q.mid - intrinsic,
            "bid": q.bid - intrinsic,
            "ask": q.ask - intrinsic,
        }
        table.values[(q.maturity, q.x)] = entry
        if entry["market"] < 0:
            table.negative.append((q.maturity, q.x))
    return table


def write_panel_csv(base, trade_date, spot, dividend_yield, rows):
    """Write a day's panel files; rows are (maturity_date, strike, bid, ask, oi)."""
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    with base.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trade_date", "maturity_date", "strike", "bid", "ask", "open_interest"])
        for maturity, strike, bid, ask, oi in rows:
            w.writerow([trade_date.isoformat(), maturity.isoformat(),
                        f"{strike:.10g}", f"{bid:.12g}", f"{ask:.12g}", oi])
    with base.with_suffix(".header.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["spot", "dividend_yield"])
        w.writerow([f"{spot:.12g}", f"{dividend_yield:.12g}"])
    with base.with_suffix(".rates.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["maturity_date", "rate"])
        w.writerow([(trade_date + dt.timedelta(days=365)).isoformat(), "0"])


@dataclass(frozen=True)
class SyntheticSpec:
    """Ground truth for synthetic panel generation.

    kappa0: initial surface values on (tau_grid, x_grid) in relative
    maturity.  factors: FactorModel driving daily increments (may have
    zero factors for a static world).  Quotes are written at the given
    maturities and log-moneyness values with a symmetric spread.
    """

    kappa0: np.ndarray
    tau_grid: np.ndarray
    x_grid: np.ndarray
    factors: object
    quote_maturities: tuple
    quote_x: tuple
    spread: float
    spot: float = 100.0
    start_date: dt.date = dt.date(2020, 1, 6)


def synthesize_panel_series(ground_truth: SyntheticSpec, days: int, seed: int):
    """Generate arbitrage-free daily panels from a known model state.

    The surface state evolves with the simulation module's Euler scheme
    (one path); each day's call prices come from the Lewis formula, and
    bid/ask are mid -+ spread/2.
    """
    from . import simulation

    gt = ground_truth
    if gt.spread <= 0:
        raise ValueError("spread must be positive (weights are spread^-2)")
    state = simulation.DetlState(
        tau_grid=np.asarray(gt.tau_grid, float),
        x_grid=np.asarray(gt.x_grid, float),
        values=np.asarray(gt.kappa0, float).copy(),
    )
    config = simulation.SimConfig(horizon=max(days - 1, 0), n_paths=1, seed=seed)
    paths = simulation.simulate(
        state, gt.factors, config,
        output_maturities=gt.quote_maturities, output_x=gt.quote_x,
    )
    path = paths[0]
    panels = []
    for d in range(days):
        prices = path.prices[d] * gt.spot  # (n_T, n_x)
        date = gt.start_date + dt.timedelta(days=d)
        quotes = []
        for i, T in enumerate(gt.quote_maturities):
            for j, x in enumerate(gt.quote_x):
                mid = float(prices[i, j])
                quotes.append(
                    Quote(
                        maturity=float(T),
                        x=float(x),
                        mid=mid,
                        bid=mid - gt.spread / 2,
                        ask=mid + gt.spread / 2,
                        weight=float(gt.spread ** -2),
                    )
                )
        quotes.sort(key=lambda q: (q.maturity, q.x))
        panels.append(
            QuotePanel(
                trade_date=date,
                spot=gt.spot,
                dividend_yield=0.0,
                rates=((1.0, 0.0),),
                quotes=tuple(quotes),
            )
        )
    return panels
