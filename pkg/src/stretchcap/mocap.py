"""Optical marker captures: ingestion, semi-automatic labeling and cleanup.

An optical tracker loses markers whenever they are occluded and starts a new anonymous
track when it sees them again, so a capture of a dozen markers falls apart into many
fragments. The labeling pipeline assigns those fragments to the marker vertices of the
sensor mesh: it deforms the rest mesh by ARAP towards the markers labeled so far (the
proxy), and gives each unlabeled fragment to the marker vertex it stays closest to.

Mocap CSV (long form, one row per visible marker and frame; a row with an empty label
only carries the frame transform):

    frame,time_s,T00,T01,T02,T03,T10,...,T23,label,x_mm,y_mm,z_mm

T is the row-major 3×4 transform [R | t] from the local frame of the sensor to the
world frame of the tracker; marker positions are in world coordinates.
"""

import json
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum, unique
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, TypeAdapter, model_validator
from scipy.optimize import linear_sum_assignment

from stretchcap._private.file_operations_utils import atomic_open, atomic_write_text
from stretchcap.capmodel import read_capacitance_csv
from stretchcap.deform import (
    DEFAULT_CONSTRAINT_WEIGHT,
    ArapSolver,
    PositionalConstraints,
    RigidTransform,
    apply_transform,
    procrustes,
    to_local_frame,
)
from stretchcap.exceptions import MalformedCaptureError
from stretchcap.meshing import SensorMesh
from stretchcap.type_notation_helper import BoolArray, FloatArray, IntArray, PathOrStr

TRANSFORM_COLUMNS = tuple(f"T{r}{c}" for r in range(3) for c in range(4))
MOCAP_COLUMNS = ("frame", "time_s", *TRANSFORM_COLUMNS, "label", "x_mm", "y_mm", "z_mm")
DEFAULT_TAU = 25.0
"""Largest mean distance in mm between a track and its marker vertex"""


@dataclass(frozen=True, eq=False)
class RawTrack:
    """One anonymous track of the tracker; positions are NaN where it is not visible."""

    label: str
    visible: BoolArray
    positions: FloatArray

    def __post_init__(self) -> None:
        if self.positions.shape != (len(self.visible), 3):
            raise ValueError(f"Track {self.label}: positions must be (frames, 3)")
        if not np.array_equal(np.all(np.isfinite(self.positions), axis=1), self.visible):
            raise ValueError(f"Track {self.label}: positions must be finite exactly where visible")

    @property
    def first_frame(self) -> int:
        """Return the first frame the track is visible in, or the frame count if never"""
        visible = np.flatnonzero(self.visible)
        return int(visible[0]) if visible.size else len(self.visible)

    def spans(self) -> list[tuple[int, int]]:
        """Return the visible frame intervals as (first, last) pairs, inclusive"""
        return visible_spans(self.visible)


def visible_spans(mask: BoolArray) -> list[tuple[int, int]]:
    """Return the runs of True in a mask as (first, last) pairs, inclusive"""
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return [(int(a), int(b) - 1) for a, b in zip(edges[::2], edges[1::2])]


@dataclass(frozen=True, eq=False)
class CaptureSession:
    """All frames of one capture: local-frame transforms, raw tracks and capacitances."""

    transforms: tuple[RigidTransform, ...]
    tracks: tuple[RawTrack, ...]
    times: FloatArray
    capacitance: Optional[FloatArray] = None

    def __post_init__(self) -> None:
        if len(self.times) != self.n_frames:
            raise ValueError("Times and transforms must cover the same frames")
        if any(len(t.visible) != self.n_frames for t in self.tracks):
            raise ValueError("All tracks must share the frame axis of the session")
        if self.capacitance is not None and len(self.capacitance) != self.n_frames:
            raise ValueError(
                f"Capacitance trace has {len(self.capacitance)} frames, session has {self.n_frames}"
            )

    @property
    def n_frames(self) -> int:
        """Return the number of frames"""
        return len(self.transforms)

    def track(self, label: str) -> RawTrack:
        """Return the track with the given label"""
        for track in self.tracks:
            if track.label == label:
                return track
        raise KeyError(label)

    def local_positions(self, track: RawTrack) -> FloatArray:
        """Return the positions of a track in the local frame (NaN where invisible)"""
        rot = np.stack([t.rotation for t in self.transforms])
        trans = np.stack([t.translation for t in self.transforms])
        return np.einsum("tji,tj->ti", rot, track.positions - trans)

    def with_capacitance(self, ratios: FloatArray) -> "CaptureSession":
        """Return the session paired with a capacitance trace"""
        return replace(self, capacitance=np.asarray(ratios, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class InitialAssignment:
    """Marker vertices paired with tracks visible in the first frame."""

    pairs: dict[int, str]
    """Marker vertex → track label"""
    transform: RigidTransform
    """Rigid map of the rest mesh onto the first frame (local coordinates)"""
    aligned_rest: FloatArray
    ambiguous: tuple[int, ...] = ()
    """Marker vertices whose nearest and second-nearest tracks are within the margin"""


@dataclass(frozen=True, eq=False)
class LabeledSession:
    """Marker-vertex positions per frame in the local frame, and how they were obtained."""

    marker_vertices: IntArray
    marker_positions: FloatArray
    """(frames, markers, 3); NaN where a marker vertex has no position"""
    synthetic: BoolArray
    """(frames, markers); True where a position was filled in from the proxy"""
    assignment: dict[int, tuple[str, ...]]
    """Marker vertex → labels of the raw tracks merged into it"""
    outlier_tracks: tuple[str, ...]
    discarded_frames: IntArray
    aligned_rest: FloatArray
    transforms: tuple[RigidTransform, ...]
    track_spans: dict[str, list[tuple[int, int]]] = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        """Return the number of frames"""
        return int(self.marker_positions.shape[0])

    def kept_frames(self) -> IntArray:
        """Return the frames that are not discarded"""
        return np.setdiff1d(np.arange(self.n_frames), self.discarded_frames)


@unique
class EditAction(Enum):
    """Manual corrections replayed before labeling"""

    FORCE_VERTEX = "force_vertex"
    FORCE_OUTLIER = "force_outlier"
    SPLIT = "split"


class Edit(BaseModel):
    """One entry of an edits file"""

    track: str
    action: EditAction
    vertex: Optional[int] = None
    frame: Optional[int] = None

    @model_validator(mode="after")
    def _check_arguments(self) -> "Edit":
        if self.action == EditAction.FORCE_VERTEX and self.vertex is None:
            raise ValueError(f"force_vertex on {self.track} needs a vertex")
        if self.action == EditAction.SPLIT and self.frame is None:
            raise ValueError(f"split of {self.track} needs a frame")
        return self


@dataclass(frozen=True)
class SessionReport:
    """Summary of a labeled session."""

    n_frames: int
    discarded_fraction: float
    marker_visibility: dict[int, float]
    """Marker vertex → fraction of frames with a real (not synthetic) position"""
    outlier_count: int
    synthetic_count: int
    track_spans: dict[str, list[tuple[int, int]]]


def _nearest_rotation(matrix: FloatArray, line: int) -> RigidTransform:
    rot = matrix[:, :3]
    if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-6 or np.linalg.det(rot) <= 0.0:
        raise MalformedCaptureError(f"Transform on line {line} is not a rotation", (line,))
    u, _, vt = np.linalg.svd(rot)
    return RigidTransform(u @ vt, matrix[:, 3].copy())


def ingest_csv(path: PathOrStr, capacitance_path: Optional[PathOrStr] = None) -> CaptureSession:
    """Read a mocap CSV export, optionally together with its capacitance trace.

    Raises:
        FileNotFoundError: if a file is missing
        MalformedCaptureError: if the file is empty or rows do not follow the schema; the
            offending line numbers are attached
    """
    the_path = Path(path)
    if not the_path.is_file():
        raise FileNotFoundError(f"Mocap file {the_path} not found")
    try:
        table = pd.read_csv(the_path, dtype={"label": str}, keep_default_na=False, na_values=[""])
    except pd.errors.EmptyDataError as exc:
        raise MalformedCaptureError(f"{the_path} is empty") from exc
    except pd.errors.ParserError as exc:
        raise MalformedCaptureError(f"Cannot parse {the_path}: {exc}") from exc
    if tuple(table.columns) != MOCAP_COLUMNS:
        raise MalformedCaptureError(
            f"{the_path}: header must be {','.join(MOCAP_COLUMNS)}", (1,)
        )
    if table.empty:
        raise MalformedCaptureError(f"{the_path} has no frames", (1,))
    lines = np.arange(len(table)) + 2
    table["label"] = table["label"].fillna("").astype(str)
    numeric_columns = [c for c in MOCAP_COLUMNS if c != "label"]
    numeric = table[numeric_columns].apply(pd.to_numeric, errors="coerce")
    raw_missing = table[numeric_columns].isna()
    bad = (numeric.isna() & ~raw_missing).any(axis=1).to_numpy()
    bad |= numeric[["frame", "time_s", *TRANSFORM_COLUMNS]].isna().any(axis=1).to_numpy()
    frames_raw = numeric["frame"].to_numpy()
    bad |= ~np.isfinite(frames_raw) | (frames_raw < 0) | (np.round(frames_raw) != frames_raw)
    if bad.any():
        raise MalformedCaptureError(f"{the_path}: malformed rows", tuple(lines[bad].tolist()))

    frames = frames_raw.astype(np.int64)
    n_frames = int(frames.max()) + 1
    if missing := sorted(set(range(n_frames)) - set(frames.tolist())):
        raise MalformedCaptureError(f"{the_path}: frames {missing[:10]} have no rows")

    transforms: list[Optional[RigidTransform]] = [None] * n_frames
    times = np.zeros(n_frames)
    matrices = numeric[list(TRANSFORM_COLUMNS)].to_numpy(dtype=np.float64).reshape(-1, 3, 4)
    time_values = numeric["time_s"].to_numpy(dtype=np.float64)
    first_line: dict[int, int] = {}
    for row, frame in enumerate(frames):
        if (seen := first_line.get(frame)) is None:
            first_line[frame] = row
            transforms[frame] = _nearest_rotation(matrices[row], int(lines[row]))
            times[frame] = time_values[row]
        elif not np.allclose(matrices[row], matrices[seen], atol=1e-9) or time_values[row] != time_values[seen]:
            raise MalformedCaptureError(
                f"{the_path}: frame {frame} has conflicting transforms or times",
                (int(lines[seen]), int(lines[row])),
            )

    xyz = numeric[["x_mm", "y_mm", "z_mm"]].to_numpy(dtype=np.float64)
    labels = table["label"].to_numpy()
    marker_rows = labels != ""
    duplicated = table[marker_rows].duplicated(subset=["frame", "label"], keep=False).to_numpy()
    if duplicated.any():
        raise MalformedCaptureError(
            f"{the_path}: a label appears twice in one frame",
            tuple(lines[marker_rows][duplicated].tolist()),
        )
    tracks = []
    for label in sorted(set(labels[marker_rows].tolist())):
        rows = np.flatnonzero(labels == label)
        positions = np.full((n_frames, 3), np.nan)
        positions[frames[rows]] = xyz[rows]
        visible = np.all(np.isfinite(positions), axis=1)
        positions[~visible] = np.nan
        tracks.append(RawTrack(label, visible, positions))

    capacitance = None
    if capacitance_path is not None:
        _, capacitance = read_capacitance_csv(capacitance_path)
        if len(capacitance) != n_frames:
            raise MalformedCaptureError(
                f"Capacitance trace has {len(capacitance)} frames, capture has {n_frames}"
            )
    logger.info(f"Ingested {n_frames} frames with {len(tracks)} raw tracks from {the_path}")
    return CaptureSession(tuple(transforms), tuple(tracks), times, capacitance)  # type: ignore[arg-type]


def write_mocap_csv(path: Path, session: CaptureSession) -> None:
    """Write a session in the long-form mocap CSV format"""
    records: list[list[Any]] = []
    for frame, transform in enumerate(session.transforms):
        head = [frame, session.times[frame], *transform.as_matrix().ravel()]
        visible = [t for t in session.tracks if t.visible[frame]]
        if not visible:
            records.append(head + ["", np.nan, np.nan, np.nan])
        for track in visible:
            records.append(head + [track.label, *track.positions[frame]])
    table = pd.DataFrame(records, columns=list(MOCAP_COLUMNS))
    with atomic_open(path, "w") as fptr:
        table.to_csv(fptr, index=False, float_format="%.17g", lineterminator="\n")


def initialize_assignment(
    session: CaptureSession,
    mesh: SensorMesh,
    seed_pairs: Sequence[tuple[str, int]],
    ambiguity_margin: float = 2.0,
) -> InitialAssignment:
    """Pair the marker vertices with the tracks of the first frame.

    Three manually matched (track label, marker vertex) seeds align the rest mesh rigidly
    with the first frame; every other marker vertex then takes the closest remaining track.

    Raises:
        ValueError: if the seeds are not 3 distinct marker vertices with tracks visible in
            the first frame, or are collinear
    """
    if len(seed_pairs) != 3:
        raise ValueError(f"Exactly 3 seed pairs are needed, got {len(seed_pairs)}")
    markers = [int(v) for v in mesh.marker_vertices]
    labels = [label for label, _ in seed_pairs]
    vertices = [int(v) for _, v in seed_pairs]
    if len(set(labels)) != 3 or len(set(vertices)) != 3:
        raise ValueError("Seed pairs must name 3 distinct tracks and vertices")
    if not set(vertices) <= set(markers):
        raise ValueError(f"Seed vertices {vertices} must be marker vertices")
    visible = {
        t.label: session.local_positions(t)[0] for t in session.tracks if t.visible[0]
    }
    if missing := [label for label in labels if label not in visible]:
        raise ValueError(f"Seed tracks {missing} are not visible in the first frame")

    transform = procrustes(mesh.vertices[vertices], np.array([visible[label] for label in labels]))
    aligned = apply_transform(mesh.vertices, transform)
    pairs = dict(zip(vertices, labels))

    free_markers = [v for v in markers if v not in pairs]
    free_tracks = [label for label in sorted(visible) if label not in labels]
    ambiguous: list[int] = []
    if len(free_tracks) < len(free_markers):
        logger.warning(
            f"Only {len(free_tracks) + 3} tracks visible in the first frame for "
            f"{len(markers)} marker vertices; the initial assignment is partial"
        )
    if free_markers and free_tracks:
        cost = np.linalg.norm(
            aligned[free_markers][:, None, :]
            - np.array([visible[label] for label in free_tracks])[None, :, :],
            axis=2,
        )
        rows, cols = linear_sum_assignment(cost)
        for r, c in zip(rows, cols):
            pairs[free_markers[r]] = free_tracks[c]
            ordered = np.sort(cost[r])
            if len(ordered) > 1 and ordered[1] - ordered[0] < ambiguity_margin:
                ambiguous.append(free_markers[r])
    if ambiguous:
        logger.warning(f"Ambiguous initial pairing for marker vertices {ambiguous}")
    return InitialAssignment(pairs, transform, aligned, tuple(ambiguous))


def _subsample(frames: IntArray, count: int) -> IntArray:
    if len(frames) <= count:
        return frames
    return frames[np.unique(np.linspace(0, len(frames) - 1, count).round().astype(np.int64))]


class _ProxyCache:
    """ARAP proxies per frame and constraint set; a set fixes its targets within a frame."""

    def __init__(self, solver: ArapSolver, aligned_rest: FloatArray, weight: float, iterations: int) -> None:
        self.solver = solver
        self.rest = aligned_rest
        self.weight = weight
        self.iterations = iterations
        self._proxies: dict[tuple[int, bytes], FloatArray] = {}

    def proxy(self, frame: int, vertices: IntArray, targets: FloatArray) -> FloatArray:
        key = (frame, vertices.tobytes())
        if (found := self._proxies.get(key)) is not None:
            return found
        initial = self.rest
        if len(vertices) >= 3:
            try:
                initial = apply_transform(self.rest, procrustes(self.rest[vertices], targets))
            except ValueError:
                initial = self.rest
        constraints = PositionalConstraints.uniform(vertices, targets, self.weight)
        result = self.solver.solve(constraints, self.iterations, 1e-4, initial=initial)
        self._proxies[key] = result.vertices
        return result.vertices


def _frame_constraints(
    positions: Mapping[int, FloatArray], frame: int
) -> tuple[IntArray, FloatArray]:
    vertices = [v for v, p in sorted(positions.items()) if np.all(np.isfinite(p[frame]))]
    targets = np.array([positions[v][frame] for v in vertices]).reshape(-1, 3)
    return np.array(vertices, dtype=np.int64), targets


def label_tracks(  # pylint: disable=too-many-arguments,too-many-locals
    session: CaptureSession,
    mesh: SensorMesh,
    initial: InitialAssignment,
    tau: float = DEFAULT_TAU,
    *,
    max_frames: int = 30,
    weight: float = DEFAULT_CONSTRAINT_WEIGHT,
    proxy_iterations: int = 10,
    forced_vertices: Optional[Mapping[str, int]] = None,
    forced_outliers: Iterable[str] = (),
) -> LabeledSession:
    """Assign the remaining raw tracks to marker vertices, in order of first appearance.

    For every unassigned track the proxy mesh is deformed towards the markers labeled so
    far, on up to max_frames evenly spaced frames where the track is visible. The track goes
    to the marker vertex with the smallest mean distance, provided that distance is below
    tau and the vertex is not already occupied in any of the track's frames; otherwise the
    track is an outlier. Frames in which a marker vertex has no position are discarded.
    """
    markers = [int(v) for v in mesh.marker_vertices]
    marker_set = set(markers)
    local = {t.label: session.local_positions(t) for t in session.tracks}
    visible = {t.label: t.visible for t in session.tracks}
    n_frames = session.n_frames

    assignment: dict[int, list[str]] = {v: [] for v in markers}
    occupied = {v: np.zeros(n_frames, dtype=bool) for v in markers}
    positions = {v: np.full((n_frames, 3), np.nan) for v in markers}

    def accept(label: str, vertex: int) -> None:
        assignment[vertex].append(label)
        occupied[vertex] |= visible[label]
        positions[vertex][visible[label]] = local[label][visible[label]]

    for vertex, label in sorted(initial.pairs.items()):
        accept(label, vertex)
    outliers = [label for label in forced_outliers if label in local]
    done = set(initial.pairs.values()) | set(outliers)
    for label, vertex in sorted((forced_vertices or {}).items()):
        if label in done or label not in local:
            continue
        if vertex not in marker_set or np.any(occupied[vertex] & visible[label]):
            logger.warning(f"Cannot force track {label} onto marker vertex {vertex}")
            continue
        accept(label, vertex)
        done.add(label)

    solver = ArapSolver(initial.aligned_rest, mesh.faces)
    proxies = _ProxyCache(solver, initial.aligned_rest, weight, proxy_iterations)
    pending = sorted(
        (t for t in session.tracks if t.label not in done and t.visible.any()),
        key=lambda t: (t.first_frame, t.label),
    )
    marker_index = np.array(markers, dtype=np.int64)
    n_constraints = 0
    for track in pending:
        frames = _subsample(np.flatnonzero(track.visible), max_frames)
        free = np.array([not np.any(occupied[v] & track.visible) for v in markers])
        if not free.any():
            outliers.append(track.label)
            continue
        distances = []
        for frame in frames:
            vertices, targets = _frame_constraints(positions, int(frame))
            if len(vertices) == 0:
                continue
            n_constraints = max(n_constraints, len(vertices))
            proxy = proxies.proxy(int(frame), vertices, targets)
            distances.append(np.linalg.norm(proxy[marker_index] - local[track.label][frame], axis=1))
        if not distances:
            outliers.append(track.label)
            continue
        mean = np.mean(distances, axis=0)
        mean[~free] = np.inf
        best = int(np.argmin(mean))
        if mean[best] < tau:
            accept(track.label, markers[best])
        else:
            outliers.append(track.label)
            logger.debug(f"Track {track.label} is an outlier at {mean[best]:.1f} mm")

    labeled = _assemble(
        markers, positions, assignment, outliers, initial.aligned_rest, session
    )
    logger.info(
        f"Labeled {sum(len(v) for v in assignment.values())} tracks, "
        f"{len(outliers)} outliers, {len(labeled.discarded_frames)} of {n_frames} frames discarded; "
        f"proxies used up to {n_constraints} constrained markers"
    )
    return labeled


def _assemble(
    markers: Sequence[int],
    positions: Mapping[int, FloatArray],
    assignment: Mapping[int, Sequence[str]],
    outliers: Sequence[str],
    aligned_rest: FloatArray,
    session: CaptureSession,
) -> LabeledSession:
    stacked = np.stack([positions[v] for v in markers], axis=1)
    missing = ~np.all(np.isfinite(stacked), axis=2)
    return LabeledSession(
        marker_vertices=np.array(markers, dtype=np.int64),
        marker_positions=stacked,
        synthetic=np.zeros(missing.shape, dtype=bool),
        assignment={v: tuple(assignment[v]) for v in markers},
        outlier_tracks=tuple(sorted(outliers)),
        discarded_frames=np.flatnonzero(missing.any(axis=1)),
        aligned_rest=aligned_rest,
        transforms=session.transforms,
        track_spans={t.label: t.spans() for t in session.tracks},
    )


def synthesize_missing(
    labeled: LabeledSession,
    mesh: SensorMesh,
    weight: float = DEFAULT_CONSTRAINT_WEIGHT,
    iterations: int = 30,
) -> LabeledSession:
    """Fill missing marker positions of discarded frames from the proxy mesh.

    Frames with fewer than 3 real marker positions stay discarded.
    """
    solver = ArapSolver(labeled.aligned_rest, mesh.faces)
    proxies = _ProxyCache(solver, labeled.aligned_rest, weight, iterations)
    marker_positions = labeled.marker_positions.copy()
    synthetic = labeled.synthetic.copy()
    for frame in labeled.discarded_frames:
        present = np.all(np.isfinite(marker_positions[frame]), axis=1)
        if present.sum() < 3:
            continue
        vertices = labeled.marker_vertices[present]
        proxy = proxies.proxy(int(frame), vertices, marker_positions[frame][present])
        marker_positions[frame][~present] = proxy[labeled.marker_vertices[~present]]
        synthetic[frame][~present] = True
    missing = ~np.all(np.isfinite(marker_positions), axis=2)
    filled = replace(
        labeled,
        marker_positions=marker_positions,
        synthetic=synthetic,
        discarded_frames=np.flatnonzero(missing.any(axis=1)),
    )
    logger.info(
        f"Synthesized {int(synthetic.sum() - labeled.synthetic.sum())} marker positions; "
        f"{len(filled.discarded_frames)} frames remain discarded"
    )
    return filled


def session_stats(labeled: LabeledSession) -> SessionReport:
    """Return discard fraction, per-marker visibility, outliers and the track spans"""
    real = np.all(np.isfinite(labeled.marker_positions), axis=2) & ~labeled.synthetic
    return SessionReport(
        n_frames=labeled.n_frames,
        discarded_fraction=len(labeled.discarded_frames) / labeled.n_frames,
        marker_visibility={
            int(v): float(real[:, i].mean()) for i, v in enumerate(labeled.marker_vertices)
        },
        outlier_count=len(labeled.outlier_tracks),
        synthetic_count=int(labeled.synthetic.sum()),
        track_spans=labeled.track_spans,
    )


def track_spans(session: CaptureSession) -> dict[str, list[tuple[int, int]]]:
    """Return the visible frame intervals of every raw track"""
    return {t.label: t.spans() for t in session.tracks}


def render_span_table(
    spans: Mapping[str, Sequence[tuple[int, int]]], n_frames: int, width: int = 60
) -> str:
    """Render one line per track with its visible frames drawn as a bar"""
    name_width = max((len(label) for label in spans), default=5)
    scale = width / max(n_frames, 1)
    lines = [f"{'track':<{name_width}} |{'frames 0..' + str(n_frames - 1):<{width}}|"]
    for label, intervals in spans.items():
        bar = [" "] * width
        for first, last in intervals:
            for k in range(int(first * scale), min(width, int(last * scale) + 1)):
                bar[k] = "#"
        lines.append(f"{label:<{name_width}} |{''.join(bar)}|")
    return "\n".join(lines) + "\n"


def spans_table(spans: Mapping[str, Sequence[tuple[int, int]]]) -> pd.DataFrame:
    """Return the spans as a table with one row per visible interval"""
    return pd.DataFrame(
        [(label, first, last) for label, intervals in spans.items() for first, last in intervals],
        columns=["track", "first_frame", "last_frame"],
    )


def load_edits(path: PathOrStr) -> list[Edit]:
    """Read an edits file: a JSON list of {track, action, vertex?, frame?}"""
    the_path = Path(path)
    if not the_path.is_file():
        raise FileNotFoundError(f"Edits file {the_path} not found")
    return TypeAdapter(list[Edit]).validate_json(the_path.read_text(encoding="utf-8"))


def apply_edits(
    session: CaptureSession, edits: Sequence[Edit]
) -> tuple[CaptureSession, dict[str, int], set[str]]:
    """Replay edits on a session.

    Splits replace track X by 'X/0' (frames before the split) and 'X/1' (from the split on).
    Returns the edited session, the forced track → marker vertex map and the forced outliers.
    """
    tracks = {t.label: t for t in session.tracks}
    forced: dict[str, int] = {}
    outliers: set[str] = set()
    for edit in edits:
        if edit.track not in tracks:
            raise ValueError(f"Edit refers to unknown track {edit.track}")
        if edit.action == EditAction.SPLIT:
            track = tracks.pop(edit.track)
            before = np.arange(session.n_frames) < int(edit.frame)  # type: ignore[arg-type]
            for suffix, part in (("0", before), ("1", ~before)):
                positions = np.where(part[:, None], track.positions, np.nan)
                tracks[f"{edit.track}/{suffix}"] = RawTrack(
                    f"{edit.track}/{suffix}", track.visible & part, positions
                )
        elif edit.action == EditAction.FORCE_VERTEX:
            forced[edit.track] = int(edit.vertex)  # type: ignore[arg-type]
        else:
            outliers.add(edit.track)
    edited = replace(session, tracks=tuple(tracks[k] for k in sorted(tracks)))
    return edited, forced, outliers


def write_labeled_csv(path: Path, labeled: LabeledSession) -> None:
    """Write frame,marker_index,x,y,z,synthetic_flag for every known marker position"""
    frame, marker = np.nonzero(np.all(np.isfinite(labeled.marker_positions), axis=2))
    xyz = labeled.marker_positions[frame, marker]
    table = pd.DataFrame(
        {
            "frame": frame,
            "marker_index": marker,
            "x": xyz[:, 0],
            "y": xyz[:, 1],
            "z": xyz[:, 2],
            "synthetic_flag": labeled.synthetic[frame, marker].astype(np.int64),
        }
    )
    with atomic_open(path, "w") as fptr:
        table.to_csv(fptr, index=False, float_format="%.17g", lineterminator="\n")


def save_labeled(path: Path, labeled: LabeledSession) -> None:
    """Store a labeled session as .npz with a JSON record of assignment and outliers"""
    meta = {
        "assignment": {str(v): list(labels) for v, labels in labeled.assignment.items()},
        "outlier_tracks": list(labeled.outlier_tracks),
        "track_spans": {k: [list(s) for s in v] for k, v in labeled.track_spans.items()},
    }
    with atomic_open(path, "wb") as fptr:
        np.savez(
            fptr,
            marker_vertices=labeled.marker_vertices,
            marker_positions=labeled.marker_positions,
            synthetic=labeled.synthetic,
            discarded_frames=labeled.discarded_frames,
            aligned_rest=labeled.aligned_rest,
            transforms=np.stack([t.as_matrix() for t in labeled.transforms]),
            meta=np.array(json.dumps(meta)),
        )


def load_labeled(path: PathOrStr) -> LabeledSession:
    """Read a labeled session written by save_labeled"""
    the_path = Path(path)
    if not the_path.is_file():
        raise FileNotFoundError(f"Labeled session {the_path} not found")
    with np.load(the_path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        return LabeledSession(
            marker_vertices=data["marker_vertices"],
            marker_positions=data["marker_positions"],
            synthetic=data["synthetic"],
            assignment={int(v): tuple(labels) for v, labels in meta["assignment"].items()},
            outlier_tracks=tuple(meta["outlier_tracks"]),
            discarded_frames=data["discarded_frames"],
            aligned_rest=data["aligned_rest"],
            transforms=tuple(RigidTransform.from_matrix(m) for m in data["transforms"]),
            track_spans={
                k: [(int(a), int(b)) for a, b in v] for k, v in meta["track_spans"].items()
            },
        )


def write_edits(path: Path, edits: Sequence[Edit]) -> None:
    """Write an edits file"""
    atomic_write_text(
        path, json.dumps([e.model_dump(mode="json", exclude_none=True) for e in edits], indent=1) + "\n"
    )


def world_positions(labeled: LabeledSession) -> FloatArray:
    """Return the marker positions mapped back to world coordinates"""
    rot = np.stack([t.rotation for t in labeled.transforms])
    trans = np.stack([t.translation for t in labeled.transforms])
    return np.einsum("tij,tmj->tmi", rot, labeled.marker_positions) + trans[:, None, :]


def local_positions(points: FloatArray, transforms: Sequence[RigidTransform]) -> FloatArray:
    """Map per-frame world points (frames, n, 3) to the local frames"""
    return np.stack([to_local_frame(p, t) for p, t in zip(points, transforms)])
