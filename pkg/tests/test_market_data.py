import datetime as dt

import numpy as np
import pytest

from tll.market_data import (
    EmptyPanelError,
    ParseError,
    RawQuote,
    SyntheticSpec,
    build_panel,
    load_panel,
    synthesize_panel_series,
    time_values,
    write_panel_csv,
)

TRADE = dt.date(2020, 1, 6)


def make_raw(maturity_days=90, strike=100.0, bid=4.0, ask=4.4, oi=10):
    return RawQuote(
        trade_date=TRADE,
        maturity=TRADE + dt.timedelta(days=maturity_days),
        strike=strike,
        bid=bid,
        ask=ask,
        open_interest=oi,
    )


class TestBuildPanel:
    def test_identity_adjustment(self):
        panel = build_panel([make_raw()], TRADE, 100.0, 0.0, ())
        q = panel.quotes[0]
        assert q.mid == pytest.approx(4.2, rel=1e-14)
        assert q.x == pytest.approx(0.0, abs=1e-14)
        assert q.weight == pytest.approx(0.4 ** -2, rel=1e-14)

    def test_rate_dividend_adjustment(self):
        tau = 365 / 365.0
        raw = make_raw(maturity_days=365, strike=100.0, bid=9.8, ask=10.2)
        rates = ((tau, 0.05),)
        panel = build_panel([raw], TRADE, 100.0, 0.02, rates)
        q = panel.quotes[0]
        assert q.mid == pytest.approx(10.0 * np.exp(0.02), rel=1e-12)
        assert q.x == pytest.approx(0.0 - 0.03, abs=1e-12)

    def test_round_trip_inverse(self):
        raw = make_raw(maturity_days=180, strike=95.0, bid=7.0, ask=7.5)
        rates = ((180 / 365.0, 0.04),)
        panel = build_panel([raw], TRADE, 100.0, 0.015, rates)
        q = panel.quotes[0]
        tau = q.maturity
        back_mid = q.mid * np.exp(-0.015 * tau)
        back_logk = q.x + (0.04 - 0.015) * tau + np.log(100.0)
        assert back_mid == pytest.approx(7.25, rel=1e-12)
        assert back_logk == pytest.approx(np.log(95.0), rel=1e-12)

    def test_filters(self):
        raws = [
            make_raw(oi=0),                       # zero open interest
            make_raw(maturity_days=500),          # beyond one year
            make_raw(bid=5.0, ask=4.0),           # crossed
            make_raw(bid=4.0, ask=4.0),           # zero spread
            make_raw(strike=105.0),               # kept
        ]
        panel = build_panel(raws, TRADE, 100.0, 0.0, ())
        assert len(panel.quotes) == 1
        assert panel.quotes[0].x == pytest.approx(np.log(1.05), rel=1e-12)

    def test_empty_after_filtering(self):
        with pytest.raises(EmptyPanelError):
            build_panel([make_raw(oi=0)], TRADE, 100.0, 0.0, ())

    def test_weights_positive_finite(self):
        raws = [make_raw(strike=k, bid=3.0, ask=3.0 + s)
                for k, s in [(90.0, 0.2), (100.0, 0.4), (110.0, 0.8)]]
        panel = build_panel(raws, TRADE, 100.0, 0.0, ())
        for q in panel.quotes:
            assert np.isfinite(q.weight) and q.weight > 0


class TestTimeValues:
    def panel(self):
        raws = [
            make_raw(strike=70.0, bid=30.0, ask=30.4),    # deep ITM
            make_raw(strike=90.0, bid=12.3, ask=12.7),
            make_raw(strike=100.0, bid=4.0, ask=4.4),     # ATM
            make_raw(strike=140.0, bid=0.4, ask=0.6),     # deep OTM
        ]
        return build_panel(raws, TRADE, 100.0, 0.0, ())

    def test_values(self):
        panel = self.panel()
        table = time_values(panel)
        by_x = {round(float(np.exp(x)) * 100): v for (_, x), v in table.values.items()}
        assert by_x[70]["market"] == pytest.approx(30.2 - 30.0, rel=1e-9)
        assert by_x[90]["market"] == pytest.approx(12.5 - 10.0, rel=1e-9)
        assert by_x[100]["market"] == pytest.approx(4.2, rel=1e-12)
        assert by_x[140]["market"] == pytest.approx(0.5, rel=1e-12)

    def test_negative_flagged(self):
        raws = [make_raw(strike=80.0, bid=19.0, ask=19.5)]  # mid below intrinsic
        panel = build_panel(raws, TRADE, 100.0, 0.0, ())
        table = time_values(panel)
        assert len(table.negative) == 1
        key = table.negative[0]
        assert table.values[key]["market"] < 0


class TestLoadPanel:
    def test_round_trip_files(self, tmp_path):
        base = tmp_path / "day0.csv"
        rows = [
            (TRADE + dt.timedelta(days=90), 95.0, 6.8, 7.2, 12),
            (TRADE + dt.timedelta(days=90), 105.0, 1.9, 2.1, 7),
        ]
        write_panel_csv(base, TRADE, 100.0, 0.0, rows)
        panel = load_panel(base, TRADE)
        assert panel.spot == 100.0
        assert len(panel.quotes) == 2
        assert panel.quotes[0].mid == pytest.approx(7.0, rel=1e-12)

    def test_parse_error_line_number(self, tmp_path):
        base = tmp_path / "day0.csv"
        write_panel_csv(base, TRADE, 100.0, 0.0,
                        [(TRADE + dt.timedelta(days=90), 95.0, 6.8, 7.2, 12)])
        with base.open("a") as fh:
            fh.write("2020-01-06,2020-04-05,not_a_number,1,2,3\n")
        with pytest.raises(ParseError) as exc:
            load_panel(base, TRADE)
        assert exc.value.line_no == 3

    def test_missing_header_file(self, tmp_path):
        base = tmp_path / "day0.csv"
        write_panel_csv(base, TRADE, 100.0, 0.0,
                        [(TRADE + dt.timedelta(days=90), 95.0, 6.8, 7.2, 12)])
        base.with_suffix(".header.csv").unlink()
        with pytest.raises(Exception):
            load_panel(base, TRADE)


class TestSynthesize:
    def make_spec(self):
        from tll.dynamics import FactorModel
        from tll.kou import KouParams, levy_density

        x = np.arange(-0.75, 0.7501, 0.005)
        taus = np.array([0.05, 0.5, 1.0])
        eta = levy_density(KouParams(lam=1.5, lam1=10.0, lam2=8.0, p=0.45), x)
        factors = FactorModel(
            model_kind="detl", tau_grid=taus, x_grid=x,
            factors=0.05 * np.exp(-np.abs(x))[None, None, :]
            * np.ones((1, taus.size, 1)),
            eigenvalues=np.zeros(1), explained=np.ones(1))
        return SyntheticSpec(
            kappa0=np.tile(eta, (taus.size, 1)),
            tau_grid=taus, x_grid=x, factors=factors,
            quote_maturities=(0.25, 0.5), quote_x=(-0.2, -0.1, 0.0, 0.1),
            spread=0.2)

    def test_panels_well_formed(self):
        panels = synthesize_panel_series(self.make_spec(), days=3, seed=9)
        assert len(panels) == 3
        for p in panels:
            assert len(p.quotes) == 8
            for q in p.quotes:
                assert q.ask - q.bid == pytest.approx(0.2)
                assert q.weight == pytest.approx(0.2 ** -2)
            # prices decrease in strike within a maturity
            for T in (0.25, 0.5):
                mids = [q.mid for q in p.quotes if q.maturity == T]
                assert all(a > b for a, b in zip(mids, mids[1:]))

    def test_deterministic_and_moving(self):
        spec = self.make_spec()
        a = synthesize_panel_series(spec, days=3, seed=9)
        b = synthesize_panel_series(spec, days=3, seed=9)
        assert all(pa.quotes == pb.quotes for pa, pb in zip(a, b))
        assert a[0].quotes != a[2].quotes
