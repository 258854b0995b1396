# pylint: disable=missing-module-docstring
# pylint: disable=missing-function-docstring
# pylint: disable=redefined-outer-name
import json
from collections.abc import Iterator
from pathlib import Path

import pandas as pd
import pytest
from loguru import logger

from stretchcap import LOGGER_NAME
from stretchcap.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main

PIPELINE = ["plan", "mesh", "synth", "decode", "label", "train"]


@pytest.fixture(autouse=True)
def quiet_logger(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> Iterator[None]:
    monkeypatch.chdir(tmp_path)
    yield
    logger.remove()
    logger.disable(LOGGER_NAME)


@pytest.fixture
def small_config(tmp_path: Path) -> Path:
    scenario = tmp_path / "stretch.json"
    scenario.write_text(
        json.dumps({"kind": "uniaxial_stretch", "n_frames": 40, "amplitude": 1.3, "period_frames": 20.0}),
        encoding="utf-8",
    )
    config = tmp_path / "small.json"
    config.write_text(
        json.dumps(
            {
                "seed": 3,
                "layout": {"bundled": "grid_3x2"},
                "mesh": {"target_edge_length": 5.0, "marker_count": 5},
                "synth": {"scenario": str(scenario)},
                "training": {"hidden_dims": [16], "epochs": 3, "batch_size": 8, "study_bands": [[0.0, 0.0]]},
                "reconstruct": {"iterations": 2},
            }
        ),
        encoding="utf-8",
    )
    return config


def _run_pipeline(config: Path, out: Path) -> None:
    for command in PIPELINE:
        assert main(["-c", str(config), "--out", str(out), command]) == EXIT_OK, command
    assert main(["-c", str(config), "--out", str(out), "eval", "--oracle", "--angle-study"]) == EXIT_OK
    assert main(["-c", str(config), "--out", str(out), "report"]) == EXIT_OK


def test_usage_errors(capsys: pytest.CaptureFixture[str]) -> None:
    assert main([]) == EXIT_USAGE
    assert main(["bogus"]) == EXIT_USAGE
    assert main(["eval", "--split", "holdout"]) == EXIT_USAGE
    assert "stretchcap: error" in capsys.readouterr().err


def test_missing_config_file(tmp_path: Path) -> None:
    assert main(["-c", str(tmp_path / "missing.json"), "plan"]) == EXIT_USAGE


def test_invalid_config(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"mesh": {"min_angle": 90.0}}), encoding="utf-8")
    assert main(["-c", str(config), "plan"]) == EXIT_USAGE
    assert "Invalid configuration" in capsys.readouterr().err


def test_missing_artifact_names_the_stage(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["--out", str(tmp_path / "run"), "train"]) == EXIT_RUNTIME
    assert "run 'stretchcap label' first" in capsys.readouterr().err


def test_report_of_an_empty_run(tmp_path: Path) -> None:
    out = tmp_path / "run"
    assert main(["--out", str(out), "report"]) == EXIT_OK
    report = (out / "report" / "report.txt").read_text(encoding="utf-8")
    assert "(missing: run 'stretchcap eval')" in report
    assert json.loads((out / "config.json").read_text(encoding="utf-8"))["output_dir"] == str(out)


def test_small_pipeline(tmp_path: Path, small_config: Path) -> None:
    out = tmp_path / "run"
    _run_pipeline(small_config, out)
    assert (out / "plan" / "plan.json").is_file()
    assert (out / "session" / "raw_trace.csv").is_file()
    assert (out / "decoded" / "capacitance.csv").is_file()
    assert (out / "label" / "spans.txt").is_file()
    errors = pd.read_csv(out / "eval" / "errors.csv")
    assert errors["model"].tolist() == ["network", "linear", "oracle"]
    assert errors.loc[errors["model"] == "oracle", "max_mm"].iloc[0] == 0.0
    assert len(pd.read_csv(out / "eval" / "angle_study.csv")) == 1
    assert len(pd.read_csv(out / "model" / "loss.csv")) == 3
    assert "Marker errors (mm)" in (out / "report" / "report.txt").read_text(encoding="utf-8")
    assert not (out / ".stretchcap.lock").exists()

    assert main(["-c", str(small_config), "--out", str(out), "reconstruct"]) == EXIT_OK
    assert len(list((out / "reconstruct").glob("frame_*.obj"))) == 40
    assert json.loads((out / "reconstruct" / "timing.json").read_text(encoding="utf-8"))["frames"] == 40

    assert main(["-c", str(small_config), "--out", str(out), "predict"]) == EXIT_OK
    markers = pd.read_csv(out / "predict" / "markers.csv")
    assert list(markers.columns) == ["frame", "marker_index", "x", "y", "z"]
    assert len(markers) == 40 * 5


def test_layout_change_is_detected(tmp_path: Path, small_config: Path) -> None:
    out = tmp_path / "run"
    assert main(["-c", str(small_config), "--out", str(out), "plan"]) == EXIT_OK
    config = json.loads(small_config.read_text(encoding="utf-8"))
    config["layout"] = {"bundled": "prototype_92"}
    other = tmp_path / "other.json"
    other.write_text(json.dumps(config), encoding="utf-8")
    assert main(["-c", str(other), "--out", str(out), "decode", "--input", str(small_config)]) == EXIT_RUNTIME


@pytest.mark.slow
def test_report_is_reproducible(tmp_path: Path, small_config: Path) -> None:
    reports = []
    for name in ("a", "b"):
        out = tmp_path / name / "run"
        _run_pipeline(small_config, out)
        reports.append((out / "report" / "report.txt").read_bytes())
    assert reports[0] == reports[1]
