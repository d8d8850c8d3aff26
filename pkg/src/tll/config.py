"""Run configuration: JSON schema, validation, and grid construction.

One JSON file drives every pipeline command; unknown keys are rejected
so typos fail fast.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .dtl import JumpGrid

MODEL_KINDS = ("detl", "dtl")


class ConfigError(ValueError):
    pass


def _grid_from_spec(spec, name, min_size=2):
    """A 1-D grid from either an explicit list or {start, stop, step}."""
    if isinstance(spec, (list, tuple)):
        arr = np.asarray(spec, float)
        if arr.ndim != 1 or arr.size < min_size or np.any(np.diff(arr) <= 0):
            raise ConfigError(f"{name} must be strictly increasing")
        return arr
    if isinstance(spec, dict):
        try:
            return np.arange(spec["start"], spec["stop"] + spec["step"] / 2,
                             spec["step"])
        except KeyError as exc:
            raise ConfigError(f"{name} range needs start/stop/step") from exc
    raise ConfigError(f"{name} must be a list or a start/stop/step object")


def _build(cls, data, name):
    if not isinstance(data, dict):
        raise ConfigError(f"{name} section must be an object")
    known = {f.name for f in fields(cls)}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"unknown keys in {name}: {sorted(extra)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} section: {exc}") from exc


@dataclass
class DynamicsConfig:
    n_factors: int = 3
    tau_grid: object = field(
        default_factory=lambda: {"start": 0.1, "stop": 1.0, "step": 0.05})
    x_grid: object = field(
        default_factory=lambda: {"start": -0.4, "stop": 0.3, "step": 0.02})

    def __post_init__(self):
        if not 1 <= int(self.n_factors) <= 20:
            raise ConfigError("n_factors must be in [1, 20]")
        self.n_factors = int(self.n_factors)
        self.tau_grid = _grid_from_spec(self.tau_grid, "dynamics.tau_grid")
        self.x_grid = _grid_from_spec(self.x_grid, "dynamics.x_grid")


@dataclass
class SimulateSection:
    day: int = -1              # index into the calibrated day series
    horizon: int = 5
    n_paths: int = 500
    output_maturities: object = field(
        default_factory=lambda: [1 / 12, 2 / 12, 3 / 12, 6 / 12, 9 / 12, 1.0])
    output_x: object = field(
        default_factory=lambda: {"start": -0.3, "stop": 0.1, "step": 0.02})

    def __post_init__(self):
        if self.horizon < 0 or self.n_paths < 1:
            raise ConfigError("simulate horizon/n_paths out of range")
        self.output_maturities = _grid_from_spec(
            self.output_maturities, "simulate.output_maturities", min_size=1)
        self.output_x = _grid_from_spec(self.output_x, "simulate.output_x",
                                        min_size=1)


@dataclass
class BacktestSection:
    models: tuple = ("model", "sabr-1.0", "sabr-0.7")
    n_strikes: tuple = (5,)
    horizon_days: int = 8
    maturity_extra_days: int = 30
    n_paths: int = 500
    train_days: int = 10

    def __post_init__(self):
        for m in self.models:
            if m != "model" and not m.startswith("sabr-"):
                raise ConfigError(f"unknown backtest model {m!r}")
        for n in self.n_strikes:
            if n not in (3, 4, 5):
                raise ConfigError("n_strikes entries must be 3, 4 or 5")
        if self.horizon_days < 1 or self.n_paths < 2 or self.train_days < 2:
            raise ConfigError("backtest sizing out of range")


@dataclass
class SynthesizeSection:
    days: int = 20
    spread: float = 0.2
    spot: float = 100.0
    start_date: str = "2020-01-06"
    kou: dict = field(default_factory=lambda: {
        "lam": 1.5, "lam1": 10.0, "lam2": 8.0, "p": 0.45})
    factor_scale: float = 0.1
    n_factors: int = 1
    quote_maturities: object = field(
        default_factory=lambda: [0.08, 0.15, 0.25, 0.5, 0.75, 1.0])
    quote_x: object = field(
        default_factory=lambda: {"start": -0.3, "stop": 0.1, "step": 0.02})
    state_tau_grid: object = field(
        default_factory=lambda: [0.02, 0.25, 0.5, 0.75, 1.0, 1.25])
    state_x_grid: object = field(
        default_factory=lambda: {"start": -0.75, "stop": 0.75, "step": 0.005})

    def __post_init__(self):
        if self.days < 1 or self.spread <= 0 or self.spot <= 0:
            raise ConfigError("synthesize sizing out of range")
        if self.n_factors < 1:
            raise ConfigError("n_factors must be positive")
        self.quote_maturities = _grid_from_spec(self.quote_maturities,
                                                "synthesize.quote_maturities")
        self.quote_x = _grid_from_spec(self.quote_x, "synthesize.quote_x")
        self.state_tau_grid = _grid_from_spec(self.state_tau_grid,
                                              "synthesize.state_tau_grid")
        self.state_x_grid = _grid_from_spec(self.state_x_grid,
                                            "synthesize.state_x_grid")


@dataclass
class DtlGridSection:
    kind: str = "default"
    n: int = 301
    dx: float = 0.005
    zero_beyond_offset: int = 50

    def build(self) -> JumpGrid:
        if self.kind == "default":
            return JumpGrid.default()
        if self.kind == "ungrouped":
            return JumpGrid.ungrouped(self.n, self.dx,
                                      self.zero_beyond_offset)
        raise ConfigError(f"unknown dtl grid kind {self.kind!r}")


@dataclass
class RunConfig:
    model_kind: str
    data_dir: str
    output_dir: str
    seed: int = 0
    threads: int = 1
    pricing_x_grid: object = field(
        default_factory=lambda: {"start": -0.75, "stop": 0.75, "step": 0.005})
    dtl_grid: DtlGridSection = field(default_factory=DtlGridSection)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    backtest: BacktestSection = field(default_factory=BacktestSection)
    synthesize: SynthesizeSection = field(default_factory=SynthesizeSection)

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(
                f"model_kind must be one of {MODEL_KINDS}")
        if self.threads < 1:
            raise ConfigError("threads must be positive")
        self.seed = int(self.seed)
        self.pricing_x_grid = _grid_from_spec(self.pricing_x_grid,
                                              "pricing_x_grid")
        self.data_path = Path(self.data_dir)
        self.output_path = Path(self.output_dir)


_SECTIONS = {
    "dtl_grid": DtlGridSection,
    "dynamics": DynamicsConfig,
    "simulate": SimulateSection,
    "backtest": BacktestSection,
    "synthesize": SynthesizeSection,
}


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    for key, cls in _SECTIONS.items():
        if key in data:
            data[key] = _build(cls, data[key], key)
    known = {f.name for f in fields(RunConfig)}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
    missing = {"model_kind", "data_dir", "output_dir"} - set(data)
    if missing:
        raise ConfigError(f"missing required keys: {sorted(missing)}")
    try:
        return RunConfig(**data)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
