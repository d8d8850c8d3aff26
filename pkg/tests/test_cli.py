import gzip
import json

import numpy as np
import pytest

from tll.cli import main
from tll.config import ConfigError, load_config


def write_config(tmp_path, **overrides):
    cfg = {
        "model_kind": "detl",
        "data_dir": str(tmp_path / "data"),
        "output_dir": str(tmp_path / "out"),
        "seed": 0,
        "pricing_x_grid": {"start": -0.5, "stop": 0.5, "step": 0.02},
        "synthesize": {
            "days": 14,
            "quote_maturities": [0.08, 0.15, 0.25, 0.5, 0.75, 1.0],
            "quote_x": {"start": -0.3, "stop": 0.3, "step": 0.05},
            "factor_scale": 0.05,
        },
        "dynamics": {
            "n_factors": 1,
            "tau_grid": {"start": 0.1, "stop": 1.0, "step": 0.1},
            "x_grid": {"start": -0.3, "stop": 0.3, "step": 0.05},
        },
        "simulate": {
            "horizon": 2,
            "n_paths": 3,
            "output_maturities": [0.25, 0.5],
            "output_x": [-0.1, 0.0, 0.1],
        },
        "backtest": {
            "models": ["model", "sabr-1.0"],
            "n_strikes": [3],
            "horizon_days": 2,
            "n_paths": 20,
            "train_days": 10,
        },
    }
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestConfig:
    def test_load_round_trip(self, tmp_path):
        cfg = load_config(write_config(tmp_path))
        assert cfg.model_kind == "detl"
        assert cfg.dynamics.n_factors == 1
        assert cfg.simulate.output_x.shape == (3,)
        assert cfg.dynamics.tau_grid[0] == pytest.approx(0.1)

    def test_rejects_unknown_keys(self, tmp_path):
        path = write_config(tmp_path, typo_section={"a": 1})
        with pytest.raises(ConfigError):
            load_config(path)

    def test_rejects_bad_model_kind(self, tmp_path):
        path = write_config(tmp_path, model_kind="kou")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_rejects_bad_grid(self, tmp_path):
        path = write_config(
            tmp_path, dynamics={"tau_grid": [0.5, 0.2]})
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_required(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"model_kind": "detl"}))
        with pytest.raises(ConfigError):
            load_config(path)


class TestExitCodes:
    def test_invalid_json_is_validation_error(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        assert main(["calibrate", "--config", str(path)]) == 2

    def test_missing_config_is_data_error(self, tmp_path):
        assert main(["calibrate", "--config",
                     str(tmp_path / "nope.json")]) == 3

    def test_missing_data_dir_is_data_error(self, tmp_path):
        path = write_config(tmp_path)
        assert main(["calibrate", "--config", str(path)]) == 3

    def test_negative_threads_rejected(self, tmp_path):
        path = write_config(tmp_path)
        assert main(["synthesize", "--config", str(path),
                     "--threads", "0"]) == 2


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("pipeline")
    path = write_config(tmp_path)
    for cmd in ("synthesize", "calibrate", "fit-dynamics", "simulate"):
        assert main([cmd, "--config", str(path)]) == 0, cmd
    return tmp_path, path


class TestPipeline:
    def test_artifacts_exist(self, pipeline):
        tmp_path, _ = pipeline
        out = tmp_path / "out"
        series = json.loads(
            (out / "calibration" / "kappa_series.json").read_text())
        assert len(series["dates"]) == 14
        assert np.min(series["values"]) >= 0.0
        factors = json.loads(
            (out / "dynamics" / "factors.json").read_text())
        assert np.array(factors["factors"]).shape[0] == 1
        report = json.loads(
            (out / "dynamics" / "report.json").read_text())
        assert 0.0 < report["explained_fraction"] <= 1.0
        manifest = json.loads(
            (out / "simulation" / "manifest.json").read_text())
        assert manifest["n_paths"] == 3
        assert manifest["clip_rate"] < 0.01

    def test_refuses_rerun_without_force(self, pipeline):
        _, path = pipeline
        assert main(["simulate", "--config", str(path)]) == 2

    def test_simulation_deterministic(self, pipeline):
        tmp_path, path = pipeline
        archive = tmp_path / "out" / "simulation" / "paths.csv.gz"
        first = gzip.decompress(archive.read_bytes())
        assert main(["simulate", "--config", str(path), "--force"]) == 0
        second = gzip.decompress(archive.read_bytes())
        assert first == second

    def test_paths_csv_schema(self, pipeline):
        tmp_path, _ = pipeline
        archive = tmp_path / "out" / "simulation" / "paths.csv.gz"
        lines = gzip.decompress(archive.read_bytes()).decode().splitlines()
        assert lines[0] == "path,day,maturity,x,price,implied_vol"
        # 3 paths x 3 days x 2 maturities x 3 strikes
        assert len(lines) == 1 + 3 * 3 * 2 * 3

    def test_dtl_pipeline(self, tmp_path):
        path = write_config(
            tmp_path,
            model_kind="dtl",
            dtl_grid={"kind": "ungrouped", "n": 41, "dx": 0.025,
                      "zero_beyond_offset": 8},
            synthesize={
                "days": 12,
                "quote_maturities": [0.1, 0.3, 0.6, 1.0],
                "quote_x": {"start": -0.3, "stop": 0.3, "step": 0.05},
                "factor_scale": 0.05,
            },
            dynamics={
                "n_factors": 1,
                "tau_grid": {"start": 0.1, "stop": 1.0, "step": 0.15},
            },
            simulate={"horizon": 1, "n_paths": 2,
                      "output_maturities": [0.3], "output_x": [-0.1, 0.0]},
        )
        for cmd in ("synthesize", "calibrate", "fit-dynamics", "simulate"):
            assert main([cmd, "--config", str(path)]) == 0, cmd
        series = json.loads((tmp_path / "out" / "calibration"
                             / "kappa_series.json").read_text())
        assert series["model_kind"] == "dtl"
        assert len(series["x_grid"]) == 41
        report = json.loads((tmp_path / "out" / "dynamics"
                             / "report.json").read_text())
        assert len(report["projection_distances"]) == 1

    def test_backtest_runs(self, pipeline):
        tmp_path, path = pipeline
        assert main(["backtest", "--config", str(path)]) == 0
        report = json.loads(
            (tmp_path / "out" / "backtest" / "report.json").read_text())
        models = {r["model"] for r in report}
        assert models == {"detl", "sabr-1.0"}
        for r in report:
            assert np.isfinite(r["Q"]) and np.isfinite(r["P"])
            assert r["coverage"] > 0.0
        weights = (tmp_path / "out" / "backtest" / "weights.csv").read_text()
        assert weights.splitlines()[0] == \
            "model,n_strikes,day,slot,strike,weight,realized_return"
