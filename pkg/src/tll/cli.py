"""Batch front-end: calibrate, fit-dynamics, simulate, backtest,
synthesize.

All intermediate artifacts are JSON/CSV files under the configured
output directory, so every stage is diff-able and re-runnable.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import gzip
import io
import json
import logging
import sys

import numpy as np

from . import detl, dtl, dynamics, market_data, portfolio, simulation
from .config import ConfigError, load_config

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

DAYS_PER_YEAR = 365.0


class DataError(RuntimeError):
    pass


def _panel_files(data_path):
    out = []
    for p in sorted(data_path.glob("*.csv")):
        if p.name.endswith(".header.csv") or p.name.endswith(".rates.csv"):
            continue
        try:
            date = dt.date.fromisoformat(p.stem)
        except ValueError:
            continue
        out.append((date, p))
    return out


def _load_panels(config):
    files = _panel_files(config.data_path)
    if not files:
        raise DataError(f"no daily panel files in {config.data_path}")
    return [market_data.load_panel(p, date) for date, p in files]


def _refuse_existing(path, force):
    if path.exists() and any(path.iterdir() if path.is_dir() else [path]):
        if not force:
            raise ConfigError(
                f"{path} already has outputs; rerun with --force")


def _write_json(path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))


def _synthetic_factors(section, tau_grid, x_grid):
    """Deterministic independent factor shapes for the synthetic world.

    Shapes are proportional to the base density so relative
    perturbations stay bounded in the tails and the state keeps its
    distance from the nonnegativity boundary."""
    from .kou import KouParams, levy_density

    eta = levy_density(KouParams(**section.kou), x_grid)
    xmax = float(np.max(np.abs(x_grid)))
    shapes = []
    for n in range(section.n_factors):
        row = (section.factor_scale * 0.5 ** n * eta
               * np.cos(n * np.pi * x_grid / (2.0 * xmax)))
        shapes.append(np.tile(row, (tau_grid.size, 1)))
    factors = np.array(shapes)
    ev = np.array([section.factor_scale ** 2 * 0.25 ** n
                   for n in range(section.n_factors)])
    explained = np.cumsum(ev) / ev.sum()
    return dynamics.FactorModel(model_kind="detl", tau_grid=tau_grid,
                                x_grid=x_grid, factors=factors,
                                eigenvalues=ev, explained=explained)


def cmd_synthesize(config, force=False):
    from .kou import KouParams, levy_density

    section = config.synthesize
    config.data_path.mkdir(parents=True, exist_ok=True)
    existing = _panel_files(config.data_path)
    if existing and not force:
        raise ConfigError(
            f"{config.data_path} already has panels; rerun with --force")
    par = KouParams(**section.kou)
    x = section.state_x_grid
    taus = section.state_tau_grid
    eta = levy_density(par, x)
    factors = _synthetic_factors(section, taus, x)
    start = dt.date.fromisoformat(section.start_date)
    spec = market_data.SyntheticSpec(
        kappa0=np.tile(eta, (taus.size, 1)), tau_grid=taus, x_grid=x,
        factors=factors, quote_maturities=tuple(section.quote_maturities),
        quote_x=tuple(section.quote_x), spread=section.spread,
        spot=section.spot, start_date=start)
    panels = market_data.synthesize_panel_series(spec, section.days,
                                                 config.seed)
    for panel in panels:
        rows = []
        for q in panel.quotes:
            mat = panel.trade_date + dt.timedelta(
                days=round(q.maturity * DAYS_PER_YEAR))
            strike = panel.spot * np.exp(q.x)
            rows.append((mat, strike, q.bid, q.ask, 10))
        market_data.write_panel_csv(
            config.data_path / f"{panel.trade_date.isoformat()}.csv",
            panel.trade_date, panel.spot, 0.0, rows)
    _write_json(config.data_path / "ground_truth.json", {
        "kou": section.kou, "factor_scale": section.factor_scale,
        "n_factors": section.n_factors, "seed": config.seed,
        "factors": json.loads(factors.to_json())})
    print(f"wrote {len(panels)} synthetic panels to {config.data_path}")
    return EXIT_OK


def _common_taus(config, max_taus):
    taus = config.dynamics.tau_grid
    limit = min(max_taus)
    keep = taus[taus <= limit + 1e-12]
    if keep.size < 2:
        raise DataError("dynamics tau grid has no overlap with the data")
    return keep


def _calibrate_detl(config, panels):
    x_grid = config.pricing_x_grid
    surfaces, dates, failures = [], [], []
    surface0, xi = detl.fit_day0(panels[0])
    surfaces.append(detl.eta_to_kappa(surface0, x_grid=x_grid))
    dates.append(panels[0].trade_date)
    for panel in panels[1:]:
        try:
            fit = detl.fit_day(panel, xi)
            surfaces.append(detl.eta_to_kappa(fit, x_grid=x_grid))
            dates.append(panel.trade_date)
        except detl.DomainError as exc:
            log.warning("%s failed: %s", panel.trade_date, exc)
            failures.append((panel.trade_date.isoformat(), str(exc)))
    taus = _common_taus(config, [s.max_tau for s in surfaces])
    values = np.array([s.kappa(taus) for s in surfaces])
    day0 = {"symmetry_index": {"taus": list(xi.taus),
                               "values": list(xi.values)}}
    return dates, taus, x_grid, values, day0, failures


def _calibrate_dtl(config, panels):
    grid = config.dtl_grid.build()
    rho, f0, _ = dtl.initial_rho(panels[0], grid)
    epsilons, eps_warnings = dtl.tune_epsilons(panels[0], grid, rho=rho)
    panel0 = dtl.calibrate_day(panels[0], grid, rho, None, epsilons)

    def omega_bar(tau):
        return float(np.interp(tau, panel0.maturities, panel0.omega_bar))

    surfaces, dates, failures = [], [], []
    surfaces.append(dtl.theta_to_kappa(panel0))
    dates.append(panels[0].trade_date)
    for panel in panels[1:]:
        try:
            tp = dtl.calibrate_day(panel, grid, rho, omega_bar, epsilons)
            surfaces.append(dtl.theta_to_kappa(tp))
            dates.append(panel.trade_date)
        except (dtl.CalibrationError, dtl.NumericError) as exc:
            log.warning("%s failed: %s", panel.trade_date, exc)
            failures.append((panel.trade_date.isoformat(), str(exc)))
    taus = _common_taus(config, [float(s.maturities[-1]) for s in surfaces])
    values = np.array([[s.kappa_grid(t) for t in taus] for s in surfaces])
    day0 = {"rho": rho.tolist(), "epsilons": list(epsilons),
            "epsilon_warnings": eps_warnings, "f0": f0,
            "omega_bar": {"taus": panel0.maturities.tolist(),
                          "values": panel0.omega_bar.tolist()},
            "grid": {"kind": config.dtl_grid.kind, "n": grid.n,
                     "dx": grid.dx}}
    return dates, taus, grid.x, values, day0, failures


def cmd_calibrate(config, force=False):
    panels = _load_panels(config)
    out = config.output_path / "calibration"
    _refuse_existing(out, force)
    if config.model_kind == "detl":
        dates, taus, x_grid, values, day0, failures = \
            _calibrate_detl(config, panels)
    else:
        dates, taus, x_grid, values, day0, failures = \
            _calibrate_dtl(config, panels)
    _write_json(out / "kappa_series.json", {
        "model_kind": config.model_kind,
        "dates": [d.isoformat() for d in dates],
        "tau_grid": np.asarray(taus).tolist(),
        "x_grid": np.asarray(x_grid).tolist(),
        "values": values.tolist()})
    _write_json(out / "day0.json", day0)
    _write_json(out / "failures.json", failures)
    total = len(dates) + len(failures)
    print(f"calibrated {len(dates)}/{total} days -> {out}")
    if failures and len(failures) > 0.1 * total:
        print(f"too many failed days: {len(failures)}/{total}",
              file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _load_series(config):
    path = config.output_path / "calibration" / "kappa_series.json"
    if not path.exists():
        raise DataError(f"missing calibration artifact {path}; "
                        "run `tll calibrate` first")
    d = json.loads(path.read_text())
    if d["model_kind"] != config.model_kind:
        raise ConfigError(
            f"calibration was for model_kind={d['model_kind']!r}")
    return (d["dates"], np.array(d["tau_grid"]), np.array(d["x_grid"]),
            np.array(d["values"]))


def cmd_fit_dynamics(config, force=False):
    dates, taus, x_grid, values = _load_series(config)
    out = config.output_path / "dynamics"
    _refuse_existing(out, force)
    if values.shape[0] < 11:
        raise DataError(
            f"need at least 10 increment days, have {values.shape[0] - 1}")
    if config.model_kind == "detl":
        dyn_x = config.dynamics.x_grid
        sub = np.empty((values.shape[0], taus.size, dyn_x.size))
        for d in range(values.shape[0]):
            for i in range(taus.size):
                sub[d, i] = np.interp(dyn_x, x_grid, values[d, i])
        panel = dynamics.IncrementPanel(tuple(dates), taus, dyn_x, sub)
        model = dynamics.pca(panel, config.dynamics.n_factors,
                             model_kind="detl")
        distances = []
    else:
        grid = config.dtl_grid.build()
        sl = dynamics.support_slice(grid)
        dyn_x = x_grid[sl]
        panel = dynamics.IncrementPanel(tuple(dates), taus, dyn_x,
                                        values[:, :, sl])
        model = dynamics.pca(panel, config.dynamics.n_factors,
                             model_kind="dtl")
        projected, distances = dynamics.project_dtl_constraints(
            model.factors, dyn_x)
        model.factors = projected
        distances = np.asarray(distances).tolist()
    out.mkdir(parents=True, exist_ok=True)
    (out / "factors.json").write_text(model.to_json())
    _write_json(out / "report.json", {
        "n_factors": model.m,
        "explained_fraction": model.explained_fraction(),
        "explained": model.explained.tolist(),
        "eigenvalues": model.eigenvalues.tolist(),
        "projection_distances": distances,
        "n_increment_days": values.shape[0] - 1})
    print(f"fitted {model.m} factors, explained fraction "
          f"{model.explained_fraction():.4f} -> {out}")
    return EXIT_OK


def _state_for(config, taus, x_grid, values, day):
    if config.model_kind == "detl":
        return simulation.DetlState(tau_grid=taus, x_grid=x_grid,
                                    values=values[day].copy())
    grid = config.dtl_grid.build()
    return simulation.DtlState(grid=grid, tau_grid=taus,
                               values=values[day].copy())


def _load_factors(config):
    path = config.output_path / "dynamics" / "factors.json"
    if not path.exists():
        raise DataError(f"missing factor artifact {path}; "
                        "run `tll fit-dynamics` first")
    return dynamics.FactorModel.from_json(path.read_text())


def cmd_simulate(config, force=False):
    dates, taus, x_grid, values = _load_series(config)
    factors = _load_factors(config)
    out = config.output_path / "simulation"
    _refuse_existing(out, force)
    section = config.simulate
    day = section.day if section.day >= 0 else len(dates) + section.day
    if not 0 <= day < len(dates):
        raise ConfigError(f"simulate.day {section.day} out of range")
    state = _state_for(config, taus, x_grid, values, day)
    mats = section.output_maturities
    mats = mats[mats <= taus[-1] + 1e-12]
    if mats.size == 0:
        raise ConfigError("no output maturities inside the surface support")
    sim_config = simulation.SimConfig(horizon=section.horizon,
                                      n_paths=section.n_paths,
                                      seed=config.seed)
    paths = simulation.simulate(state, factors, sim_config,
                                output_maturities=mats,
                                output_x=section.output_x, with_vols=True,
                                threads=config.threads)
    out.mkdir(parents=True, exist_ok=True)
    # mtime=0 keeps the gzip header deterministic across runs
    with open(out / "paths.csv.gz", "wb") as raw, \
            gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as gz, \
            io.TextIOWrapper(gz, newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "day", "maturity", "x", "price", "implied_vol"])
        for pi, p in enumerate(paths):
            for d in range(p.prices.shape[0]):
                for i, tau in enumerate(mats):
                    for j, xx in enumerate(section.output_x):
                        w.writerow([pi, d, f"{tau:.8g}", f"{xx:.8g}",
                                    f"{p.prices[d, i, j]:.12g}",
                                    f"{p.implied_vols[d, i, j]:.10g}"])
    clip_count = sum(p.clip_count for p in paths)
    clip_total = sum(p.clip_total for p in paths)
    _write_json(out / "manifest.json", {
        "day": dates[day], "horizon": section.horizon,
        "n_paths": section.n_paths, "seed": config.seed,
        "model_kind": config.model_kind,
        "output_maturities": mats.tolist(),
        "output_x": section.output_x.tolist(),
        "clip_count": clip_count, "clip_total": clip_total,
        "clip_rate": clip_count / max(clip_total, 1)})
    print(f"simulated {section.n_paths} paths x {section.horizon} days "
          f"-> {out}")
    return EXIT_OK


def cmd_backtest(config, force=False):
    panels = _load_panels(config)
    dates, taus, x_grid, values = _load_series(config)
    factors = _load_factors(config)
    out = config.output_path / "backtest"
    _refuse_existing(out, force)
    section = config.backtest
    if [p.trade_date.isoformat() for p in panels] != list(dates):
        raise DataError("panel dates do not match calibration artifacts")
    market = portfolio.PanelMarket(panels)
    initial_days = range(section.train_days,
                         market.n_days - section.horizon_days)
    if len(initial_days) == 0:
        print("no testing days after the training window; nothing to do")
        return EXIT_OK
    reports = []
    for name in section.models:
        if name == "model":
            adapter = portfolio.TangentLevyAdapter(
                config.model_kind, factors,
                state_for_day=lambda d: _state_for(config, taus, x_grid,
                                                   values, d),
                threads=config.threads)
            label = config.model_kind
        else:
            beta = float(name.split("-", 1)[1])
            adapter = portfolio.SabrAdapter(beta=beta, market=market)
            label = name
        for n_strikes in section.n_strikes:
            spec = portfolio.PortfolioSpec(
                n_strikes=n_strikes, horizon_days=section.horizon_days,
                maturity_extra_days=section.maturity_extra_days)
            report = portfolio.run_backtest(
                label, adapter, market, spec, section.n_paths,
                config.seed, initial_days=initial_days)
            reports.append(report)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", [{
        "model": r.model, "n_strikes": r.n_strikes, "Q": r.Q, "P": r.P,
        "K": r.K, "coverage": r.coverage,
        "failures": r.failures} for r in reports])
    with (out / "weights.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "n_strikes", "day", "slot", "strike",
                    "weight", "realized_return"])
        for r in reports:
            for day in r.results:
                labels = [f"{k:.6g}" for k in day.strikes] + ["underlying"]
                for slot, lab in enumerate(labels):
                    w.writerow([r.model, r.n_strikes, day.day, slot, lab,
                                f"{day.weights[slot]:.12g}",
                                f"{day.realized_return:.12g}"])
    print(f"{'model':<12}{'strikes':>8}{'Q':>12}{'P':>12}{'K':>12}")
    for r in reports:
        k = f"{r.K:.6f}" if r.K is not None else "n/a"
        print(f"{r.model:<12}{r.n_strikes:>8}{r.Q:>12.6f}{r.P:>12.6f}"
              f"{k:>12}")
    return EXIT_OK


COMMANDS = {
    "calibrate": cmd_calibrate,
    "fit-dynamics": cmd_fit_dynamics,
    "simulate": cmd_simulate,
    "backtest": cmd_backtest,
    "synthesize": cmd_synthesize,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tll",
        description="Tangent Levy surface models: calibration, factor "
                    "dynamics, simulation, and the portfolio backtest.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True,
                       help="path to the JSON run configuration")
        p.add_argument("--force", action="store_true",
                       help="overwrite existing outputs")
        p.add_argument("--threads", type=int, default=None,
                       help="cap internal parallelism")
        p.add_argument("--seed", type=int, default=None,
                       help="override the configured seed")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be positive")
            config.threads = args.threads
        if args.seed is not None:
            config.seed = args.seed
        return COMMANDS[args.command](config, force=args.force)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DataError, FileNotFoundError, market_data.ParseError,
            market_data.EmptyPanelError, dynamics.IncrementError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (detl.DomainError, dtl.CalibrationError, dtl.NumericError,
            simulation.SimulationError, np.linalg.LinAlgError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
