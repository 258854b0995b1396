"""Command-line pipeline: plan → mesh → synth → decode → label → train → eval → reconstruct → report.

Every stage reads the artifacts of earlier stages from the run directory and writes its own
into a subdirectory named after it. Exit codes: 0 success, 1 usage or configuration error,
2 runtime error.
"""

import json
import sys
import time
from argparse import ArgumentParser, Namespace
from collections.abc import Sequence
from dataclasses import asdict
from pathlib import Path
from typing import Any, Callable, NoReturn, Optional, TextIO

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import ValidationError

from stretchcap._private.file_operations_utils import atomic_open, atomic_write_text
from stretchcap._private.run_directory import run_directory_lock
from stretchcap.capmodel import read_capacitance_csv, write_capacitance_csv
from stretchcap.config.pipeline import PipelineConfig
from stretchcap.config.section_base import reset_sections
from stretchcap.deform import ArapSolver, PositionalConstraints, apply_transform, procrustes
from stretchcap.exceptions import LayoutMismatchError, MissingArtifactError
from stretchcap.layout import SensorCell, SensorLayout, build_cells, bundled_layout, layout_hash, load_layout
from stretchcap.meshing import SensorMesh, farthest_point_markers, load_mesh, mesh_layout, save_mesh, write_obj
from stretchcap.mocap import (
    apply_edits,
    ingest_csv,
    initialize_assignment,
    label_tracks,
    load_edits,
    load_labeled,
    render_span_table,
    save_labeled,
    session_stats,
    spans_table,
    synthesize_missing,
    write_labeled_csv,
)
from stretchcap.readout import (
    Convention,
    MeasurementPlan,
    build_plan,
    decode,
    estimate_frame_budget,
    frequency_to_capacitance,
    load_plan,
    read_frequency_csv,
    save_plan,
    singular_value_ratio,
    with_convention,
)
from stretchcap.regress import (
    OracleModel,
    build_dataset,
    create_model,
    evaluate,
    interpolation_study,
    load_model,
    save_model,
    train,
    train_linear_baseline,
    wrist_angle,
)
from stretchcap.synth import CorruptionSpec, bundled_scenario, emit_session, load_scenario, load_truth

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    """The command line could not be parsed"""


class _Parser(ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise UsageError(message)


class RunContext:
    """Paths and shared inputs of one command invocation."""

    def __init__(self, config: PipelineConfig, args: Namespace) -> None:
        self.config = config
        self.args = args
        self.run_dir = Path(config.output_dir)
        self._layout: Optional[SensorLayout] = None
        self._cells: Optional[list[SensorCell]] = None

    def path(self, *parts: str) -> Path:
        """Return a path inside the run directory"""
        return self.run_dir.joinpath(*parts)

    def require(self, path: Path, stage: str) -> Path:
        """Return path, or raise naming the stage that produces it"""
        if not path.exists():
            raise MissingArtifactError(path, stage)
        return path

    @property
    def layout(self) -> SensorLayout:
        """Return the configured layout"""
        if self._layout is None:
            section = self.config.layout
            self._layout = load_layout(section.path) if section.path else bundled_layout(section.bundled)
        return self._layout

    @property
    def layout_hash(self) -> str:
        """Return the hash of the configured layout"""
        return layout_hash(self.layout)

    @property
    def cells(self) -> list[SensorCell]:
        """Return the cells of the layout with their rest capacitances"""
        if self._cells is None:
            self._cells = build_cells(
                self.layout.strips, self.config.capacitor.params(), self.layout.measured_capacitance
            )
        return self._cells

    def rest_capacitance(self) -> Any:
        """Return C⁰ per cell in farads"""
        return np.array([c.rest_capacitance for c in self.cells])

    def plan(self) -> MeasurementPlan:
        """Return the plan of the run, checked against the layout"""
        plan = load_plan(self.require(self.path("plan", "plan.json"), "plan"))
        if plan.layout_hash != self.layout_hash:
            raise LayoutMismatchError(self.layout_hash, plan.layout_hash, "Measurement plan")
        return plan

    def rest_mesh(self) -> SensorMesh:
        """Return the rest mesh of the session, or the flat mesh if there is no session"""
        session_mesh = self.path("session", "rest_mesh.obj")
        if session_mesh.exists():
            return load_mesh(session_mesh)
        return load_mesh(self.require(self.path("mesh", "mesh.obj"), "mesh"))

    def trace_path(self) -> Path:
        """Return the capacitance trace used for training and evaluation"""
        if (given := getattr(self.args, "trace", None)) is not None:
            return self.require(Path(given), "decode")
        return self.require(self.path("session", "capacitance.csv"), "synth")


def cmd_plan(ctx: RunContext) -> None:
    """Build the measurement plan of the layout"""
    section = ctx.config.plan
    plan = build_plan(ctx.cells, ctx.layout.strips, section.mandatory, section.extra, ctx.layout_hash)
    plan = with_convention(plan, section.convention)
    save_plan(plan, ctx.path("plan", "plan.json"))
    ratio = singular_value_ratio(plan.matrix[: plan.n_mandatory])
    budget = estimate_frame_budget(plan, ctx.config.timer.config(), ctx.rest_capacitance())
    summary = {
        "cells": plan.n_cells,
        "rows": plan.n_rows,
        "mandatory_rows": plan.n_mandatory,
        "mandatory_singular_value_ratio": ratio,
        "frame_time_s": budget.frame_time,
        "frame_rate_hz": budget.frame_rate,
        "layout_hash": ctx.layout_hash,
    }
    atomic_write_text(ctx.path("plan", "summary.json"), json.dumps(summary, indent=1, sort_keys=True) + "\n")
    logger.info(
        f"Plan with {plan.n_rows} rows for {plan.n_cells} cells; "
        f"reading a frame takes {budget.frame_time * 1e3:.3g} ms"
    )


def cmd_mesh(ctx: RunContext) -> None:
    """Triangulate the layout and pick the marker vertices"""
    section = ctx.config.mesh
    mesh = mesh_layout(ctx.layout, ctx.cells, section.target_edge_length, section.min_angle)
    mesh = mesh.with_markers(farthest_point_markers(mesh, min(section.marker_count, mesh.n_cells)))
    save_mesh(mesh, ctx.path("mesh", "mesh.obj"))
    logger.info(f"Mesh with {mesh.n_vertices} vertices, {len(mesh.faces)} faces, {mesh.marker_vertices.size} markers")


def cmd_synth(ctx: RunContext) -> None:
    """Generate a synthetic session"""
    section = ctx.config.synth
    name = ctx.args.scenario or section.scenario
    scenario = load_scenario(name) if name.endswith(".json") else bundled_scenario(name)
    scenario = scenario.model_copy(update={"seed": ctx.config.seed})
    corruption = CorruptionSpec.preset(section.corruption).model_copy(update={"label_seed": ctx.config.seed})
    mesh = load_mesh(ctx.require(ctx.path("mesh", "mesh.obj"), "mesh"))
    plan = ctx.plan() if section.readout_round_trip else None
    farad = plan is not None and plan.convention == Convention.FARAD
    files = emit_session(
        ctx.path("session"),
        mesh,
        scenario,
        corruption,
        plan=plan,
        rest_capacitance=ctx.rest_capacitance() if farad else None,
        timer=ctx.config.timer.config() if plan is not None and ctx.config.timer.enabled else None,
        readout_noise=section.readout_noise,
        layout_hash=ctx.layout_hash,
    )
    logger.info(f"Session manifest {files.manifest_hash[:12]}")


def _decode_raw(ctx: RunContext, raw_path: Path) -> Any:
    plan = ctx.plan()
    _, frequencies = read_frequency_csv(raw_path)
    measured = frequency_to_capacitance(ctx.config.timer.config(), frequencies)
    cells = decode(plan, measured).cells
    if plan.convention == Convention.FARAD:
        cells = cells / ctx.rest_capacitance()
    return cells


def cmd_decode(ctx: RunContext) -> None:
    """Turn a raw frequency trace into capacitance ratios"""
    raw = Path(ctx.args.input) if ctx.args.input else ctx.path("session", "raw_trace.csv")
    ratios = _decode_raw(ctx, ctx.require(raw, "synth"))
    write_capacitance_csv(ctx.path("decoded", "capacitance.csv"), ratios)
    logger.info(f"Decoded {len(ratios)} frames")


def cmd_label(ctx: RunContext) -> None:
    """Label the raw marker tracks of the session"""
    section = ctx.config.labeling
    session = ingest_csv(
        ctx.require(ctx.path("session", "mocap.csv"), "synth"),
        ctx.require(ctx.path("session", "capacitance.csv"), "synth"),
    )
    mesh = ctx.rest_mesh()
    forced_vertices: dict[str, int] = {}
    forced_outliers: set[str] = set()
    if section.edits:
        session, forced_vertices, forced_outliers = apply_edits(session, load_edits(section.edits))
    seeds = [tuple(pair) for pair in section.seed_pairs]
    if not seeds and (truth_path := ctx.path("session", "truth.json")).exists():
        seeds = [tuple(pair) for pair in load_truth(truth_path)["seed_pairs"]]
    if len(seeds) != 3:
        raise ValueError("Labeling needs 3 seed pairs (labeling.seed_pairs in the config)")
    initial = initialize_assignment(
        session, mesh, [(str(label), int(vertex)) for label, vertex in seeds], section.ambiguity_margin
    )
    labeled = label_tracks(
        session,
        mesh,
        initial,
        section.tau,
        max_frames=section.max_frames,
        weight=ctx.config.solver.constraint_weight,
        proxy_iterations=section.proxy_iterations,
        forced_vertices=forced_vertices,
        forced_outliers=forced_outliers,
    )
    if section.synthesize_missing:
        labeled = synthesize_missing(labeled, mesh, ctx.config.solver.constraint_weight)
    save_labeled(ctx.path("label", "labeled.npz"), labeled)
    write_labeled_csv(ctx.path("label", "labeled.csv"), labeled)
    stats = session_stats(labeled)
    with atomic_open(ctx.path("label", "spans.csv"), "w") as fptr:
        spans_table(stats.track_spans).to_csv(fptr, index=False, lineterminator="\n")
    atomic_write_text(ctx.path("label", "spans.txt"), render_span_table(stats.track_spans, stats.n_frames))
    atomic_write_text(ctx.path("label", "stats.json"), json.dumps(asdict(stats), indent=1, sort_keys=True) + "\n")


def _dataset(ctx: RunContext) -> Any:
    labeled = load_labeled(ctx.require(ctx.path("label", "labeled.npz"), "label"))
    training = ctx.config.training.config(ctx.config.seed)
    return build_dataset(labeled, ctx.trace_path(), training, ctx.layout_hash), training


def cmd_train(ctx: RunContext) -> None:
    """Train the regressor on the labeled session"""
    dataset, training = _dataset(ctx)
    model = create_model(dataset, training)
    history = train(model, dataset, training)
    save_model(ctx.path("model", "model.npz"), model, training, ctx.layout_hash, dataset.marker_vertices)
    n_epochs = len(history.train_loss)
    curve = pd.DataFrame(
        {
            "epoch": np.arange(1, n_epochs + 1),
            "train_loss": history.train_loss,
            "validation_loss": list(history.validation_loss) + [np.nan] * (n_epochs - len(history.validation_loss)),
        }
    )
    with atomic_open(ctx.path("model", "loss.csv"), "w") as fptr:
        curve.to_csv(fptr, index=False, float_format="%.9g", lineterminator="\n")


def _report_row(name: str, report: Any) -> dict[str, Any]:
    return {"model": name, "mean_mm": report.mean, "std_mm": report.std, "max_mm": report.max}


def cmd_eval(ctx: RunContext) -> None:
    """Evaluate the regressor, the linear baseline and optionally the oracle on the test frames"""
    dataset, training = _dataset(ctx)
    model, _, _, _ = load_model(ctx.require(ctx.path("model", "model.npz"), "train"), ctx.layout_hash)
    split = ctx.args.split
    reports = {"network": evaluate(model, dataset, split)}
    reports["linear"] = evaluate(train_linear_baseline(dataset, training.ridge_alpha), dataset, split)
    if ctx.args.oracle:
        reports["oracle"] = evaluate(OracleModel(dataset), dataset, split)
    table = pd.DataFrame([_report_row(name, report) for name, report in reports.items()])
    with atomic_open(ctx.path("eval", "errors.csv"), "w") as fptr:
        table.to_csv(fptr, index=False, float_format="%.6f", lineterminator="\n")
    per_frame = pd.DataFrame({name: r.per_frame_max for name, r in reports.items()})
    per_frame.insert(0, "frame", dataset.frames[dataset.mask(split)])
    with atomic_open(ctx.path("eval", "per_frame_max.csv"), "w") as fptr:
        per_frame.to_csv(fptr, index=False, float_format="%.6f", lineterminator="\n")
    for name, report in reports.items():
        logger.info(f"{name}: mean {report.mean:.3f} mm, std {report.std:.3f} mm, max {report.max:.3f} mm")
    if ctx.args.angle_study:
        section = ctx.config.training
        study = interpolation_study(
            dataset,
            lambda positions: wrist_angle(positions, section.arm_pair, section.hand_pair),
            section.study_bands,
            training,
        )
        with atomic_open(ctx.path("eval", "angle_study.csv"), "w") as fptr:
            study.to_csv(fptr, index=False, float_format="%.6f", lineterminator="\n")


def _predictor(ctx: RunContext) -> Any:
    model, _, markers, _ = load_model(ctx.require(ctx.path("model", "model.npz"), "train"), ctx.layout_hash)
    return model, markers


def cmd_reconstruct(ctx: RunContext) -> None:
    """Reconstruct the surface of every frame of a trace and write one OBJ per frame"""
    if ctx.args.raw:
        ratios = _decode_raw(ctx, ctx.require(Path(ctx.args.raw), "synth"))
    else:
        source = Path(ctx.args.input) if ctx.args.input else ctx.path("session", "capacitance.csv")
        _, ratios = read_capacitance_csv(ctx.require(source, "synth"))
    model, markers = _predictor(ctx)
    mesh = ctx.rest_mesh()
    labeled_path = ctx.path("label", "labeled.npz")
    rest = load_labeled(labeled_path).aligned_rest if labeled_path.exists() else mesh.vertices
    solver = ArapSolver(rest, mesh.faces)
    section, weight = ctx.config.reconstruct, ctx.config.solver.constraint_weight
    out_dir = ctx.path("reconstruct")
    start = time.perf_counter()
    previous = None
    for frame, row in enumerate(ratios):
        targets = model.predict(row).reshape(-1, 3)
        if previous is None:
            previous = apply_transform(rest, procrustes(rest[markers], targets))
        constraints = PositionalConstraints.uniform(markers, targets, weight)
        previous = solver.solve(constraints, section.iterations, ctx.config.solver.tolerance, initial=previous).vertices
        write_obj(out_dir / f"frame_{frame:05d}.obj", previous, mesh.faces, comment=f"frame {frame}")
    elapsed = time.perf_counter() - start
    rate = len(ratios) / elapsed if elapsed > 0.0 else float("inf")
    atomic_write_text(
        out_dir / "timing.json",
        json.dumps({"frames": len(ratios), "seconds": elapsed, "frame_rate_hz": rate, "target_rate_hz": section.target_rate}, indent=1)
        + "\n",
    )
    level = "INFO" if rate >= section.target_rate else "WARNING"
    logger.log(level, f"Reconstructed {len(ratios)} frames at {rate:.2f} Hz (target {section.target_rate} Hz)")


def cmd_predict(ctx: RunContext) -> None:
    """Predict marker positions for a trace file, or for CSV rows streamed on stdin"""
    model, _ = _predictor(ctx)
    if ctx.args.stream:
        _stream_predictions(model, sys.stdin, sys.stdout)
        return
    source = Path(ctx.args.input) if ctx.args.input else ctx.path("session", "capacitance.csv")
    frames, ratios = read_capacitance_csv(ctx.require(source, "synth"))
    positions = model.predict(ratios).reshape(len(ratios), -1, 3)
    frame, marker = np.meshgrid(frames, np.arange(positions.shape[1]), indexing="ij")
    table = pd.DataFrame(
        {
            "frame": frame.ravel(),
            "marker_index": marker.ravel(),
            "x": positions[..., 0].ravel(),
            "y": positions[..., 1].ravel(),
            "z": positions[..., 2].ravel(),
        }
    )
    with atomic_open(ctx.path("predict", "markers.csv"), "w") as fptr:
        table.to_csv(fptr, index=False, float_format="%.9g", lineterminator="\n")


def _stream_predictions(model: Any, source: TextIO, sink: TextIO) -> None:
    header = source.readline()
    if not header.startswith("frame"):
        raise ValueError("The stream must start with the trace header frame,cell_0,...")
    for line in source:
        if not line.strip():
            continue
        values = np.array([float(v) for v in line.split(",")])
        positions = model.predict(values[1:])[0]
        sink.write(f"{int(values[0])}," + ",".join(f"{v:.6f}" for v in positions) + "\n")
        sink.flush()


_REPORT_SECTIONS = (
    ("Marker errors (mm)", ("eval", "errors.csv"), "eval"),
    ("Track spans", ("label", "spans.txt"), "label"),
    ("Loss curve", ("model", "loss.csv"), "train"),
    ("Interpolation study", ("eval", "angle_study.csv"), "eval --angle-study"),
)


def cmd_report(ctx: RunContext) -> None:
    """Collect the results of a run into report/report.txt"""
    lines = [f"stretchcap report for {ctx.run_dir.name}", ""]
    for title, parts, stage in _REPORT_SECTIONS:
        lines += [f"== {title} ==", ""]
        source = ctx.path(*parts)
        if not source.exists():
            lines += [f"(missing: run 'stretchcap {stage}')", ""]
            continue
        if source.suffix == ".csv":
            table = pd.read_csv(source)
            with atomic_open(ctx.path("report", source.name), "w") as fptr:
                table.to_csv(fptr, index=False, float_format="%.6f", lineterminator="\n")
            lines += [table.to_string(index=False, float_format=lambda v: f"{v:.3f}"), ""]
        else:
            lines += [source.read_text(encoding="utf-8").rstrip("\n"), ""]
    atomic_write_text(ctx.path("report", "report.txt"), "\n".join(lines))
    logger.info(f"Report written to {ctx.path('report', 'report.txt')}")


COMMANDS: dict[str, Callable[[RunContext], None]] = {
    "plan": cmd_plan,
    "mesh": cmd_mesh,
    "synth": cmd_synth,
    "decode": cmd_decode,
    "label": cmd_label,
    "train": cmd_train,
    "eval": cmd_eval,
    "reconstruct": cmd_reconstruct,
    "predict": cmd_predict,
    "report": cmd_report,
}


def build_parser() -> ArgumentParser:
    """Return the parser of the command line"""
    parser = _Parser(prog="stretchcap", description=__doc__.splitlines()[0])
    parser.add_argument("-c", "--config", type=Path, default=None, help="Configuration file (.json or .toml)")
    parser.add_argument("--seed", type=int, default=None, help="Seed; overrides the config")
    parser.add_argument("--out", type=str, default=None, help="Run directory; overrides the config")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Log debug messages")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Log warnings and errors only")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, func in COMMANDS.items():
        sub = commands.add_parser(name, help=(func.__doc__ or "").strip())
        if name == "synth":
            sub.add_argument("--scenario", default=None, help="Scenario JSON file or bundled scenario name")
        if name in ("decode", "reconstruct", "predict"):
            sub.add_argument("--input", default=None, help="Input trace")
        if name == "reconstruct":
            sub.add_argument("--raw", default=None, help="Raw frequency trace, decoded first")
        if name == "predict":
            sub.add_argument("--stream", action="store_true", help="Read trace rows from stdin")
        if name in ("train", "eval"):
            sub.add_argument("--trace", default=None, help="Capacitance trace instead of the session trace")
        if name == "eval":
            sub.add_argument("--split", default="test", choices=["train", "validation", "test"])
            sub.add_argument("--oracle", action="store_true", help="Also evaluate the ground-truth oracle")
            sub.add_argument("--angle-study", action="store_true", help="Run the interpolation study")
    return parser


def _configure_logging(args: Namespace) -> None:
    logger.remove()
    level = "DEBUG" if args.verbose else "WARNING" if args.quiet else "INFO"
    logger.add(sys.stderr, level=level, format="{time:HH:mm:ss} | {level: <7} | {message}")
    logger.enable("stretchcap")


def load_config(args: Namespace) -> PipelineConfig:
    """Load the configuration with the command-line overrides on top"""
    reset_sections()
    overrides: dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    PipelineConfig.set_filepath(args.config or "")
    return PipelineConfig.load(throw_if_file_not_found=args.config is not None, overrides=overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command; returns the exit code"""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"stretchcap: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _configure_logging(args)
    try:
        config = load_config(args)
    except (ValidationError, ValueError) as exc:
        logger.error(f"Invalid configuration: {exc}")
        return EXIT_USAGE
    except FileNotFoundError as exc:
        logger.error(str(exc))
        return EXIT_USAGE
    ctx = RunContext(config, args)
    try:
        with run_directory_lock(ctx.run_dir):
            config.save(ctx.path("config.json"))
            COMMANDS[args.command](ctx)
    except Exception as exc:  # pylint: disable=broad-exception-caught
        logger.opt(exception=exc).error(f"{args.command} failed: {exc}")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
