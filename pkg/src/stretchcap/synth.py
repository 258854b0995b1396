"""Synthetic captures with exact ground truth.

Analytic deformations of a rest mesh stand in for the physical experiments: a strip pulled
along one axis, a sleeve bent or twisted around a joint, a balloon inflated under the sensor
and a sheet poked with a finger. From the deformed frames the generator derives the marker
tracks an optical tracker would report (fragmented on request) and the capacitance trace
of the sensor.
"""

import json
import math
from collections.abc import Sequence
from dataclasses import dataclass, replace
from enum import Enum, unique
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.spatial.transform import Rotation

from stretchcap._private.file_operations_utils import (
    atomic_write_text,
    sha256_of_data,
    sha256_of_file,
)
from stretchcap.capmodel import (
    face_normals,
    flipped_faces,
    forward_capacitances,
    lognormal_noise,
    write_capacitance_csv,
)
from stretchcap.deform import RigidTransform, apply_transform
from stretchcap.meshing import SensorMesh, Surface, roll_to_cylinder, save_mesh, wrap_on_sphere
from stretchcap.mocap import CaptureSession, RawTrack, visible_spans, write_mocap_csv
from stretchcap.readout import (
    MeasurementPlan,
    TimerConfig,
    capacitance_to_frequency,
    decode,
    frequency_to_capacitance,
    simulate_measurements,
    write_frequency_csv,
)
from stretchcap.type_notation_helper import FloatArray, PathOrStr

MAX_STRETCH = 2.25
"""Stretch factor beyond which the sensor material tears"""

FRAME_RATE = 8.0


@unique
class ScenarioKind(Enum):
    """Analytic deformation families"""

    UNIAXIAL_STRETCH = "uniaxial_stretch"
    CYLINDER_BEND = "cylinder_bend"
    CYLINDER_TWIST = "cylinder_twist"
    BALLOON_INFLATE = "balloon_inflate"
    FLAT_POKE = "flat_poke"


@unique
class Profile(Enum):
    """Shape of the parameter schedule over time; every profile starts at rest"""

    RAMP = "ramp"
    SINE = "sine"
    APERIODIC = "aperiodic"


_REST_SURFACE = {
    ScenarioKind.UNIAXIAL_STRETCH: Surface.FLAT,
    ScenarioKind.CYLINDER_BEND: Surface.CYLINDER,
    ScenarioKind.CYLINDER_TWIST: Surface.CYLINDER,
    ScenarioKind.BALLOON_INFLATE: Surface.SPHERE_CAP,
    ScenarioKind.FLAT_POKE: Surface.FLAT,
}


class RigidMotion(BaseModel):
    """Smooth periodic motion of the local frame in the tracker's world frame"""

    model_config = ConfigDict(frozen=True)

    rotation_deg: float = Field(default=20.0, ge=0.0)
    translation_mm: float = Field(default=80.0, ge=0.0)
    period_frames: float = Field(default=240.0, gt=0.0)


class DeformationScenario(BaseModel):
    """A deformation family with its per-frame parameter schedule.

    The scheduled parameter is the stretch factor, the bend or twist angle in degrees, the
    balloon radius in mm or the poke depth in mm.
    """

    model_config = ConfigDict(frozen=True)

    kind: ScenarioKind
    n_frames: int = Field(default=200, ge=1)
    amplitude: float = 0.0
    """Peak value of the scheduled parameter"""
    profile: Profile = Profile.SINE
    period_frames: float = Field(default=100.0, gt=0.0)
    schedule: Optional[list[float]] = None
    """Explicit per-frame values; replaces amplitude and profile"""
    seed: int = 0
    sphere_radius: float = Field(default=45.0, gt=0.0)
    """Rest radius of the balloon a flat mesh is wrapped on"""
    poke_center: Optional[tuple[float, float]] = None
    poke_width: float = Field(default=12.0, gt=0.0)
    rigid_motion: Optional[RigidMotion] = None
    noise_sigma: float = Field(default=0.0, ge=0.0)
    """Log-normal noise of the capacitance ratios"""

    @model_validator(mode="after")
    def _check_schedule(self) -> "DeformationScenario":
        if self.schedule is not None:
            if len(self.schedule) != self.n_frames:
                raise ValueError(f"Schedule has {len(self.schedule)} values for {self.n_frames} frames")
            if not all(math.isfinite(v) for v in self.schedule):
                raise ValueError("Schedule values must be finite")
        if not math.isfinite(self.amplitude):
            raise ValueError("Amplitude must be finite")
        if self.kind == ScenarioKind.UNIAXIAL_STRETCH:
            values = self.schedule if self.schedule is not None else [1.0, self.amplitude]
            if not all(0.0 < v <= MAX_STRETCH for v in values):
                raise ValueError(f"Stretch factors must lie in (0, {MAX_STRETCH}]")
        if self.kind == ScenarioKind.BALLOON_INFLATE and self.schedule is None and not self.amplitude > 0.0:
            raise ValueError("A balloon needs a positive peak radius as amplitude")
        return self


def load_scenario(path: PathOrStr) -> DeformationScenario:
    """Read a scenario JSON file"""
    the_path = Path(path)
    if not the_path.is_file():
        raise FileNotFoundError(f"Scenario file {the_path} not found")
    return DeformationScenario.model_validate_json(the_path.read_text(encoding="utf-8"))


def bundled_scenario(name: str) -> DeformationScenario:
    """Return one of the example scenarios shipped with the package"""
    source = resources.files("stretchcap") / "data" / "scenarios" / f"{name}.json"
    return DeformationScenario.model_validate_json(source.read_text(encoding="utf-8"))


class CorruptionSpec(BaseModel):
    """How clean marker trajectories are broken up the way an optical tracker does"""

    model_config = ConfigDict(frozen=True)

    fragmentation_rate: float = Field(default=0.0, ge=0.0, le=1.0)
    """Probability per marker and frame that the marker drops out"""
    gap_length_mean: float = Field(default=3.0, ge=1.0)
    """Mean length in frames of a drop-out (geometric distribution)"""
    outlier_tracks: int = Field(default=0, ge=0)
    outlier_length: int = Field(default=20, ge=1)
    outlier_offset_mm: float = Field(default=60.0, gt=0.0)
    """Distance of a spurious reflection from the surface, along the surface normal"""
    occlusion_windows: list[tuple[int, int, int]] = Field(default_factory=list)
    """(marker index, first frame, last frame) during which a marker is hidden"""
    position_noise_mm: float = Field(default=0.0, ge=0.0)
    label_seed: int = 0
    keep_first_frame: bool = True
    """Every marker is visible in frame 0, so the initial assignment is complete"""

    @classmethod
    def preset(cls, name: str) -> "CorruptionSpec":
        """Return the 'none' or the 'wrist-like' preset"""
        if name == "none":
            return cls()
        if name == "wrist-like":
            # 12 markers over 600 frames fall apart into roughly 165 fragments
            return cls(
                fragmentation_rate=0.023,
                gap_length_mean=3.0,
                outlier_tracks=10,
                outlier_length=15,
                position_noise_mm=1.0,
            )
        raise ValueError(f"Unknown corruption preset {name!r}, expected 'none' or 'wrist-like'")


@dataclass(frozen=True)
class SessionFiles:
    """Files written for one synthetic session."""

    directory: Path
    rest_mesh: Path
    mocap: Path
    capacitance: Path
    truth: Path
    manifest: Path
    raw_trace: Optional[Path] = None
    manifest_hash: str = ""


def rest_value(scenario: DeformationScenario, mesh: SensorMesh) -> float:
    """Return the value of the scheduled parameter in the rest pose"""
    if scenario.kind == ScenarioKind.UNIAXIAL_STRETCH:
        return 1.0
    if scenario.kind == ScenarioKind.BALLOON_INFLATE:
        return mesh.surface_radius
    return 0.0


def schedule_values(scenario: DeformationScenario, rest: float) -> FloatArray:
    """Return the per-frame parameter values; frame 0 is always the rest value"""
    if scenario.schedule is not None:
        values = np.array(scenario.schedule, dtype=np.float64)
        values[0] = rest
        return values
    t = np.arange(scenario.n_frames, dtype=np.float64)
    if scenario.profile == Profile.RAMP:
        weight = t / max(scenario.n_frames - 1, 1)
    elif scenario.profile == Profile.SINE:
        weight = 0.5 * (1.0 - np.cos(2.0 * np.pi * t / scenario.period_frames))
    else:
        rng = np.random.default_rng([scenario.seed, 1])
        periods = scenario.period_frames * rng.uniform(0.5, 1.5, 3)
        amplitudes = rng.uniform(0.5, 1.0, 3)
        weight = np.sum(
            amplitudes[:, None] * (1.0 - np.cos(2.0 * np.pi * t[None, :] / periods[:, None])), axis=0
        )
        weight = weight / weight.max() if weight.max() > 0.0 else weight
    return rest + (scenario.amplitude - rest) * weight


def prepare_rest_mesh(mesh: SensorMesh, scenario: DeformationScenario) -> SensorMesh:
    """Shape a flat mesh into the rest surface the scenario needs (roll or wrap)"""
    wanted = _REST_SURFACE[scenario.kind]
    if mesh.surface == wanted:
        return mesh
    if mesh.surface != Surface.FLAT:
        raise ValueError(f"{scenario.kind.value} needs a {wanted.value} mesh, got {mesh.surface.value}")
    if wanted == Surface.CYLINDER:
        return roll_to_cylinder(mesh)
    return wrap_on_sphere(mesh, scenario.sphere_radius)


def _bend(vertices: FloatArray, angle_deg: float, y_mid: float, length: float) -> FloatArray:
    # constant curvature along y; x is the offset from the neutral fiber
    kappa = math.radians(angle_deg) / length
    u, s = vertices[:, 0], vertices[:, 1] - y_mid
    ks = kappa * s
    bent = vertices.copy()
    bent[:, 0] = 0.5 * kappa * s**2 * np.sinc(ks / (2.0 * np.pi)) ** 2 + u * np.cos(ks)
    bent[:, 1] = y_mid + s * np.sinc(ks / np.pi) - u * np.sin(ks)
    return bent


def _twist(vertices: FloatArray, angle_deg: float, y_min: float, length: float) -> FloatArray:
    alpha = np.radians(angle_deg) * (vertices[:, 1] - y_min) / length
    twisted = vertices.copy()
    twisted[:, 0] = vertices[:, 0] * np.cos(alpha) + vertices[:, 2] * np.sin(alpha)
    twisted[:, 2] = -vertices[:, 0] * np.sin(alpha) + vertices[:, 2] * np.cos(alpha)
    return twisted


def generate(mesh: SensorMesh, scenario: DeformationScenario) -> FloatArray:
    """Return the deformed vertices of every frame (frames, vertices, 3) in the local frame.

    Raises:
        ValueError: if the mesh surface does not fit the scenario, or a frame folds the
            mesh over
    """
    wanted = _REST_SURFACE[scenario.kind]
    if mesh.surface != wanted:
        raise ValueError(f"{scenario.kind.value} needs a {wanted.value} rest mesh, got {mesh.surface.value}")
    rest = mesh.vertices
    base = rest_value(scenario, mesh)
    values = schedule_values(scenario, base)
    lows, highs = rest.min(axis=0), rest.max(axis=0)
    center = 0.5 * (lows + highs)
    length = float(highs[1] - lows[1])
    frames = np.empty((len(values),) + rest.shape)
    for t, value in enumerate(values):
        if value == base:
            frames[t] = rest
        elif scenario.kind == ScenarioKind.UNIAXIAL_STRETCH:
            scale = np.array([value, 1.0 / math.sqrt(value), 1.0])
            frames[t] = center + (rest - center) * scale
        elif scenario.kind == ScenarioKind.CYLINDER_BEND:
            frames[t] = _bend(rest, value, float(center[1]), length)
        elif scenario.kind == ScenarioKind.CYLINDER_TWIST:
            frames[t] = _twist(rest, value, float(lows[1]), length)
        elif scenario.kind == ScenarioKind.BALLOON_INFLATE:
            if not value > 0.0:
                raise ValueError(f"Balloon radius must be > 0, got {value} in frame {t}")
            sphere = np.array(mesh.surface_center)
            frames[t] = sphere + (rest - sphere) * (value / base)
        else:
            poke = np.array(scenario.poke_center) if scenario.poke_center is not None else center[:2]
            dist2 = np.sum((rest[:, :2] - poke) ** 2, axis=1)
            frames[t] = rest
            frames[t][:, 2] = rest[:, 2] - value * np.exp(-0.5 * dist2 / scenario.poke_width**2)
        if (flipped := flipped_faces(rest, frames[t], mesh.faces)).size:
            raise ValueError(f"Frame {t} of {scenario.kind.value} folds {flipped.size} faces over")
    logger.debug(f"Generated {len(values)} frames of {scenario.kind.value}")
    return frames


def rigid_transforms(scenario: DeformationScenario) -> tuple[RigidTransform, ...]:
    """Return the local-to-world transform of every frame; frame 0 is the identity"""
    motion = scenario.rigid_motion
    if motion is None:
        return tuple(RigidTransform() for _ in range(scenario.n_frames))
    rng = np.random.default_rng([scenario.seed, 2])
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    phase = 2.0 * np.pi * np.arange(scenario.n_frames) / motion.period_frames
    angles = np.radians(motion.rotation_deg) * np.sin(phase)
    rotations = Rotation.from_rotvec(angles[:, None] * axis).as_matrix()
    offsets = motion.translation_mm * np.sin(phase)[:, None] * direction
    return tuple(RigidTransform(rot, off) for rot, off in zip(rotations, offsets))


def vertex_normals(vertices: FloatArray, faces: Any) -> FloatArray:
    """Return unit area-weighted vertex normals"""
    normals = np.zeros_like(vertices)
    face_n = face_normals(vertices, faces)
    for k in range(3):
        np.add.at(normals, faces[:, k], face_n)
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def corrupt_tracks(
    true_positions: FloatArray,
    corruption: CorruptionSpec,
    normals: Optional[FloatArray] = None,
) -> tuple[list[RawTrack], dict[str, int]]:
    """Break clean marker trajectories (frames, markers, 3) into anonymous tracks.

    Returns the tracks, sorted by label, and the hidden truth: the marker index of every
    track, or -1 for an injected outlier.
    """
    rng = np.random.default_rng([corruption.label_seed, 3])
    n_frames, n_markers, _ = true_positions.shape
    pieces: list[tuple[int, int, int]] = []
    first_allowed = 1 if corruption.keep_first_frame else 0
    for marker in range(n_markers):
        visible = np.ones(n_frames, dtype=bool)
        for hidden, first, last in corruption.occlusion_windows:
            if hidden == marker:
                visible[max(first, 0) : last + 1] = False
        if corruption.fragmentation_rate > 0.0:
            starts = np.flatnonzero(rng.random(n_frames) < corruption.fragmentation_rate)
            for start in starts[starts >= first_allowed]:
                visible[start : start + rng.geometric(1.0 / corruption.gap_length_mean)] = False
        if corruption.keep_first_frame:
            visible[0] = True
        pieces.extend((marker, first, last) for first, last in visible_spans(visible))

    outliers: list[tuple[int, int, int]] = []
    length = min(corruption.outlier_length, n_frames - first_allowed)
    for _ in range(corruption.outlier_tracks if length > 0 else 0):
        marker = int(rng.integers(n_markers))
        first = int(rng.integers(first_allowed, n_frames - length + 1))
        outliers.append((marker, first, first + length - 1))

    names = rng.permutation(len(pieces) + len(outliers))
    tracks, truth = [], {}
    for name, (marker, first, last) in zip(names, pieces + outliers):
        label = f"track{name:04d}"
        is_outlier = len(truth) >= len(pieces)
        positions = np.full((n_frames, 3), np.nan)
        span = slice(first, last + 1)
        positions[span] = true_positions[span, marker]
        if is_outlier:
            direction = normals[span, marker] if normals is not None else np.array([0.0, 0.0, 1.0])
            positions[span] += corruption.outlier_offset_mm * direction
        if corruption.position_noise_mm > 0.0:
            positions[span] += corruption.position_noise_mm * rng.standard_normal((last - first + 1, 3))
        visible = np.zeros(n_frames, dtype=bool)
        visible[span] = True
        tracks.append(RawTrack(label, visible, positions))
        truth[label] = -1 if is_outlier else marker
    tracks.sort(key=lambda track: track.label)
    logger.info(f"Corrupted {n_markers} markers into {len(pieces)} fragments and {len(outliers)} outliers")
    return tracks, truth


def reassemble_tracks(
    tracks: Sequence[RawTrack], truth: dict[str, int], n_markers: int
) -> FloatArray:
    """Merge tracks back into (frames, markers, 3) trajectories using the hidden truth.

    Outliers are dropped; frames without a fragment stay NaN.

    Raises:
        ValueError: if two fragments of one marker overlap in time
    """
    n_frames = len(tracks[0].visible) if tracks else 0
    merged = np.full((n_frames, n_markers, 3), np.nan)
    for track in tracks:
        marker = truth[track.label]
        if marker < 0:
            continue
        if np.any(np.isfinite(merged[track.visible, marker])):
            raise ValueError(f"Track {track.label} overlaps another fragment of marker {marker}")
        merged[track.visible, marker] = track.positions[track.visible]
    return merged


def _seed_pairs(mesh: SensorMesh, truth: dict[str, int], tracks: Sequence[RawTrack]) -> list[tuple[str, int]]:
    # three well spread markers whose fragments are visible in frame 0
    at_start = {truth[t.label]: t.label for t in tracks if t.visible[0] and truth[t.label] >= 0}
    candidates = sorted(at_start)
    if len(candidates) < 3:
        return []
    points = mesh.vertices[mesh.marker_vertices[candidates]]
    first = 0
    second = int(np.argmax(np.linalg.norm(points - points[first], axis=1)))
    area = np.linalg.norm(np.cross(points[second] - points[first], points - points[first]), axis=1)
    third = int(np.argmax(area))
    chosen = [candidates[i] for i in (first, second, third)]
    return [(at_start[m], int(mesh.marker_vertices[m])) for m in chosen]


def capacitance_trace(
    mesh: SensorMesh,
    frames: FloatArray,
    noise_sigma: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> FloatArray:
    """Return the (frames × cells) capacitance ratios of deformed frames"""
    ratios = np.stack([forward_capacitances(mesh, frame, check_flips=False) for frame in frames])
    if noise_sigma > 0.0:
        ratios = lognormal_noise(ratios, noise_sigma, rng or np.random.default_rng())
    return ratios


def readout_round_trip(
    ratios: FloatArray,
    plan: MeasurementPlan,
    rest_capacitance: FloatArray,
    timer: Optional[TimerConfig] = None,
    noise_sigma: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> tuple[FloatArray, Optional[FloatArray]]:
    """Pass ratios through the measurement plan (and the timer) and decode them again.

    Returns the decoded ratios and, with a timer, the raw frequencies of every row.
    """
    farads = ratios * rest_capacitance
    measured = simulate_measurements(plan, farads, noise_sigma, rng)
    frequencies = None
    if timer is not None:
        frequencies = capacitance_to_frequency(timer, measured)
        measured = frequency_to_capacitance(timer, frequencies)
    return decode(plan, measured).cells / rest_capacitance, frequencies


def emit_session(  # pylint: disable=too-many-arguments,too-many-locals
    out_dir: PathOrStr,
    mesh: SensorMesh,
    scenario: DeformationScenario,
    corruption: Optional[CorruptionSpec] = None,
    plan: Optional[MeasurementPlan] = None,
    rest_capacitance: Optional[FloatArray] = None,
    timer: Optional[TimerConfig] = None,
    readout_noise: float = 0.0,
    layout_hash: str = "",
) -> SessionFiles:
    """Generate a scenario and write its capture files and manifest to out_dir.

    The rest mesh is shaped for the scenario first. Output depends only on the inputs and
    the seeds they carry.
    """
    directory = Path(out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    corruption = corruption or CorruptionSpec()
    rest_mesh = prepare_rest_mesh(mesh, scenario)
    if rest_mesh.marker_vertices.size < 3:
        raise ValueError("The mesh needs at least 3 marker vertices")
    frames = generate(rest_mesh, scenario)
    transforms = rigid_transforms(scenario)
    markers = rest_mesh.marker_vertices
    world = np.stack([apply_transform(frame[markers], tf) for frame, tf in zip(frames, transforms)])
    normals = np.stack(
        [vertex_normals(frame, rest_mesh.faces)[markers] @ tf.rotation.T for frame, tf in zip(frames, transforms)]
    )
    tracks, truth = corrupt_tracks(world, corruption, normals)

    ratios = capacitance_trace(rest_mesh, frames, scenario.noise_sigma, np.random.default_rng([scenario.seed, 4]))
    raw_path = None
    if plan is not None:
        c0 = np.ones(rest_mesh.n_cells) if rest_capacitance is None else np.asarray(rest_capacitance)
        ratios, frequencies = readout_round_trip(
            ratios, plan, c0, timer, readout_noise, np.random.default_rng([scenario.seed, 5])
        )
        if frequencies is not None:
            raw_path = directory / "raw_trace.csv"
            write_frequency_csv(raw_path, frequencies)

    times = np.arange(scenario.n_frames) / FRAME_RATE
    session = CaptureSession(transforms, tuple(tracks), times)
    files = SessionFiles(
        directory=directory,
        rest_mesh=directory / "rest_mesh.obj",
        mocap=directory / "mocap.csv",
        capacitance=directory / "capacitance.csv",
        truth=directory / "truth.json",
        manifest=directory / "manifest.json",
        raw_trace=raw_path,
    )
    save_mesh(rest_mesh, files.rest_mesh)
    write_mocap_csv(files.mocap, session)
    write_capacitance_csv(files.capacitance, ratios)
    truth_record = {
        "assignment": dict(sorted(truth.items())),
        "marker_vertices": markers.tolist(),
        "seed_pairs": [list(pair) for pair in _seed_pairs(rest_mesh, truth, tracks)],
        "marker_positions_local": np.round(
            np.stack([frame[markers] for frame in frames]), 9
        ).tolist(),
    }
    atomic_write_text(files.truth, json.dumps(truth_record) + "\n")

    written = [files.rest_mesh, files.rest_mesh.with_suffix(".json"), files.mocap, files.capacitance, files.truth]
    if raw_path is not None:
        written.append(raw_path)
    manifest = {
        "scenario": scenario.model_dump(mode="json"),
        "corruption": corruption.model_dump(mode="json"),
        "layout_hash": layout_hash,
        "n_frames": scenario.n_frames,
        "n_cells": rest_mesh.n_cells,
        "n_markers": int(markers.size),
        "files": {path.name: sha256_of_file(path) for path in written},
    }
    atomic_write_text(files.manifest, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    manifest_hash = sha256_of_data(manifest)
    logger.info(f"Wrote synthetic session of {scenario.n_frames} frames to {directory}")
    return replace(files, manifest_hash=manifest_hash)


def load_truth(path: PathOrStr) -> dict[str, Any]:
    """Read the hidden truth written next to a synthetic session"""
    the_path = Path(path)
    if not the_path.is_file():
        raise FileNotFoundError(f"Truth file {the_path} not found")
    return dict(json.loads(the_path.read_text(encoding="utf-8")))
