# pylint: disable=missing-module-docstring
# pylint: disable=missing-function-docstring
# pylint: disable=redefined-outer-name
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from loguru import logger
from pydantic import ValidationError

from stretchcap import LOGGER_NAME, use_standard_logging
from stretchcap.deform import RigidTransform
from stretchcap.exceptions import MalformedCaptureError
from stretchcap.meshing import SensorMesh
from stretchcap.mocap import (
    MOCAP_COLUMNS,
    CaptureSession,
    Edit,
    EditAction,
    RawTrack,
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
    track_spans,
    visible_spans,
    world_positions,
    write_edits,
    write_labeled_csv,
    write_mocap_csv,
)
from stretchcap.synth import CorruptionSpec, DeformationScenario, RigidMotion

from .sensor_examples import grid_mesh, labeling_score, seed_pairs, synthetic_capture

STRETCH = DeformationScenario(
    kind="uniaxial_stretch", n_frames=40, amplitude=1.3, profile="sine", period_frames=40
)
MOVING = DeformationScenario(
    kind="uniaxial_stretch",
    n_frames=80,
    amplitude=1.3,
    profile="sine",
    period_frames=80,
    rigid_motion=RigidMotion(rotation_deg=20.0, translation_mm=80.0, period_frames=80.0),
)
CORNERS = (0, 2, 6)


@pytest.fixture(scope="module")
def flat_mesh() -> SensorMesh:
    return grid_mesh()


def _label(mesh, session, truth, **kwargs):
    initial = initialize_assignment(session, mesh, seed_pairs(mesh, session, truth, CORNERS))
    return label_tracks(session, mesh, initial, **kwargs)


def test_visible_spans() -> None:
    mask = np.array([True, True, False, True, False, False, True])
    assert visible_spans(mask) == [(0, 1), (3, 3), (6, 6)]
    assert not visible_spans(np.zeros(3, dtype=bool))


def test_raw_track_validation() -> None:
    positions = np.zeros((3, 3))
    with pytest.raises(ValueError, match="finite exactly where visible"):
        RawTrack("a", np.array([True, False, True]), positions)


def test_mocap_csv_round_trip(tmp_path: Path, flat_mesh) -> None:
    corruption = CorruptionSpec(fragmentation_rate=0.05, outlier_tracks=2, outlier_length=5)
    _, _, session, _ = synthetic_capture(flat_mesh, MOVING, corruption)
    path = tmp_path / "mocap.csv"
    write_mocap_csv(path, session)
    assert path.read_text().splitlines()[0] == ",".join(MOCAP_COLUMNS)
    loaded = ingest_csv(path)
    assert loaded.n_frames == session.n_frames
    assert [t.label for t in loaded.tracks] == [t.label for t in session.tracks]
    for original, track in zip(session.tracks, loaded.tracks):
        np.testing.assert_array_equal(track.visible, original.visible)
        np.testing.assert_allclose(track.positions, original.positions, atol=1e-9)
    for original, transform in zip(session.transforms, loaded.transforms):
        np.testing.assert_allclose(transform.as_matrix(), original.as_matrix(), atol=1e-12)
    assert track_spans(loaded) == track_spans(session)


def test_ingest_with_capacitance(tmp_path: Path, flat_mesh) -> None:
    _, _, session, _ = synthetic_capture(flat_mesh, STRETCH)
    write_mocap_csv(tmp_path / "mocap.csv", session)
    (tmp_path / "short.csv").write_text("frame,cell_0\n0,1.0\n")
    with pytest.raises(MalformedCaptureError, match="Capacitance trace"):
        ingest_csv(tmp_path / "mocap.csv", tmp_path / "short.csv")
    with pytest.raises(ValueError, match="Capacitance trace"):
        session.with_capacitance(np.ones((3, 9)))


def test_ingest_empty_and_missing(tmp_path: Path) -> None:
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(MalformedCaptureError, match="empty"):
        ingest_csv(tmp_path / "empty.csv")
    with pytest.raises(FileNotFoundError):
        ingest_csv(tmp_path / "none.csv")


def test_ingest_reports_line_numbers(tmp_path: Path, flat_mesh) -> None:
    _, _, session, _ = synthetic_capture(flat_mesh, STRETCH)
    path = tmp_path / "mocap.csv"
    write_mocap_csv(path, session)
    lines = path.read_text().splitlines()

    header = list(lines)
    header[0] = header[0].replace("label", "name")
    path.write_text("\n".join(header) + "\n")
    with pytest.raises(MalformedCaptureError) as excinfo:
        ingest_csv(path)
    assert excinfo.value.line_numbers == (1,)

    broken = list(lines)
    fields = broken[5].split(",")
    fields[MOCAP_COLUMNS.index("x_mm")] = "abc"
    broken[5] = ",".join(fields)
    path.write_text("\n".join(broken) + "\n")
    with pytest.raises(MalformedCaptureError) as excinfo:
        ingest_csv(path)
    assert excinfo.value.line_numbers == (6,)

    path.write_text("\n".join(lines + [lines[5]]) + "\n")
    with pytest.raises(MalformedCaptureError, match="twice") as excinfo:
        ingest_csv(path)
    assert excinfo.value.line_numbers == (6, len(lines) + 1)


def test_ingest_rejects_missing_frames(tmp_path: Path, flat_mesh) -> None:
    _, _, session, _ = synthetic_capture(flat_mesh, STRETCH)
    path = tmp_path / "mocap.csv"
    write_mocap_csv(path, session)
    lines = path.read_text().splitlines()
    kept = [line for line in lines if not line.startswith("3,")]
    path.write_text("\n".join(kept) + "\n")
    with pytest.raises(MalformedCaptureError, match=r"frames \[3\]"):
        ingest_csv(path)


def test_initial_assignment_is_identity(flat_mesh) -> None:
    corruption = CorruptionSpec(position_noise_mm=2.0, label_seed=4)
    _, _, session, truth = synthetic_capture(flat_mesh, STRETCH, corruption)
    seeds = seed_pairs(flat_mesh, session, truth, CORNERS)
    initial = initialize_assignment(session, flat_mesh, seeds)
    markers = flat_mesh.marker_vertices.tolist()
    assert len(initial.pairs) == 9
    assert all(truth[label] == markers.index(v) for v, label in initial.pairs.items())
    assert not initial.ambiguous


def test_initial_assignment_flags_ambiguity(flat_mesh) -> None:
    _, _, session, truth = synthetic_capture(flat_mesh, STRETCH)
    seeds = seed_pairs(flat_mesh, session, truth, CORNERS)
    initial = initialize_assignment(session, flat_mesh, seeds, ambiguity_margin=100.0)
    assert len(initial.ambiguous) == 6


def test_initial_assignment_needs_good_seeds(flat_mesh) -> None:
    _, _, session, truth = synthetic_capture(flat_mesh, STRETCH)
    seeds = seed_pairs(flat_mesh, session, truth, CORNERS)
    with pytest.raises(ValueError, match="Exactly 3"):
        initialize_assignment(session, flat_mesh, seeds[:2])
    with pytest.raises(ValueError, match="collinear"):
        initialize_assignment(session, flat_mesh, seed_pairs(flat_mesh, session, truth, (0, 1, 2)))
    with pytest.raises(ValueError, match="distinct"):
        initialize_assignment(session, flat_mesh, [seeds[0], seeds[0], seeds[1]])


def test_partial_first_frame_is_logged(flat_mesh, caplog: pytest.LogCaptureFixture) -> None:
    corruption = CorruptionSpec(keep_first_frame=False, occlusion_windows=[(4, 0, 5)])
    _, _, session, truth = synthetic_capture(flat_mesh, STRETCH, corruption)
    use_standard_logging(enable=True)
    labeled = _label(flat_mesh, session, truth)
    logger.disable(LOGGER_NAME)
    assert "partial" in caplog.text
    assert labeling_score(labeled, truth)[0] == 1.0
    assert session_stats(labeled).discarded_fraction == pytest.approx(6 / 40)


def test_clean_session_labels_without_outliers(flat_mesh) -> None:
    _, _, session, truth = synthetic_capture(flat_mesh, STRETCH)
    labeled = _label(flat_mesh, session, truth)
    assert not labeled.outlier_tracks
    assert labeled.discarded_frames.size == 0
    assert labeling_score(labeled, truth) == (1.0, 1.0)


def test_reappearing_marker_is_matched_against_all_others(
    flat_mesh, caplog: pytest.LogCaptureFixture
) -> None:
    corruption = CorruptionSpec(occlusion_windows=[(4, 10, 14)])
    _, _, session, truth = synthetic_capture(flat_mesh, STRETCH, corruption)
    use_standard_logging(enable=True)
    labeled = _label(flat_mesh, session, truth)
    logger.disable(LOGGER_NAME)
    assert labeling_score(labeled, truth)[0] == 1.0
    n_markers = flat_mesh.marker_vertices.size
    assert f"proxies used up to {n_markers - 1} constrained markers" in caplog.text


@pytest.mark.slow
def test_fragmented_session_with_outliers(flat_mesh) -> None:
    corruption = CorruptionSpec(
        fragmentation_rate=0.03,
        outlier_tracks=4,
        outlier_length=10,
        position_noise_mm=0.5,
        label_seed=1,
    )
    _, frames, session, truth = synthetic_capture(flat_mesh, MOVING, corruption)
    assert len(session.tracks) > 9 + 4
    labeled = _label(flat_mesh, session, truth)
    correct, flagged = labeling_score(labeled, truth)
    assert correct >= 0.95
    assert flagged >= 0.9
    kept = labeled.kept_frames()
    local = frames[:, flat_mesh.marker_vertices]
    errors = np.linalg.norm(labeled.marker_positions[kept] - local[kept], axis=2)
    assert np.median(errors) < 2.0


def test_discard_fraction_and_synthesis() -> None:
    tube = grid_mesh(4, 4)
    scenario = DeformationScenario(kind="cylinder_bend", n_frames=40, amplitude=30.0, profile="ramp")
    corruption = CorruptionSpec(occlusion_windows=[(5, 20, 39)])
    rest, frames, session, truth = synthetic_capture(tube, scenario, corruption)
    initial = initialize_assignment(session, rest, seed_pairs(rest, session, truth, (0, 3, 12)))
    labeled = label_tracks(session, rest, initial)
    report = session_stats(labeled)
    assert report.discarded_fraction == pytest.approx(0.5)
    assert report.marker_visibility[int(rest.marker_vertices[5])] == pytest.approx(0.5)

    filled = synthesize_missing(labeled, rest)
    assert filled.discarded_frames.size == 0
    assert filled.synthetic[20:, 5].all()
    assert filled.synthetic.sum() == 20
    truth_positions = frames[20:, rest.marker_vertices[5]]
    errors = np.linalg.norm(filled.marker_positions[20:, 5] - truth_positions, axis=1)
    assert errors.max() < 10.0
    assert session_stats(filled).synthetic_count == 20


def test_synthesis_needs_three_markers(flat_mesh) -> None:
    _, _, session, truth = synthetic_capture(flat_mesh, STRETCH)
    labeled = _label(flat_mesh, session, truth)
    positions = labeled.marker_positions.copy()
    positions[7, 2:] = np.nan
    positions[8, 5:] = np.nan
    holes = replace(labeled, marker_positions=positions, discarded_frames=np.array([7, 8]))
    filled = synthesize_missing(holes, flat_mesh)
    assert filled.discarded_frames.tolist() == [7]
    assert filled.synthetic[8, 5:].all()


def test_edits() -> None:
    visible = np.ones(10, dtype=bool)
    tracks = tuple(RawTrack(label, visible, np.zeros((10, 3))) for label in ("a", "b", "c"))
    session = CaptureSession(tuple(RigidTransform() for _ in range(10)), tracks, np.arange(10.0))
    edits = [
        Edit(track="a", action=EditAction.SPLIT, frame=4),
        Edit(track="b", action=EditAction.FORCE_VERTEX, vertex=7),
        Edit(track="c", action=EditAction.FORCE_OUTLIER),
    ]
    edited, forced, outliers = apply_edits(session, edits)
    assert [t.label for t in edited.tracks] == ["a/0", "a/1", "b", "c"]
    assert edited.track("a/0").visible.tolist() == [True] * 4 + [False] * 6
    assert edited.track("a/1").first_frame == 4
    assert forced == {"b": 7}
    assert outliers == {"c"}
    with pytest.raises(ValueError, match="unknown track"):
        apply_edits(session, [Edit(track="z", action=EditAction.FORCE_OUTLIER)])


def test_edit_validation_and_files(tmp_path: Path) -> None:
    with pytest.raises(ValidationError):
        Edit(track="a", action=EditAction.FORCE_VERTEX)
    with pytest.raises(ValidationError):
        Edit(track="a", action=EditAction.SPLIT)
    edits = [Edit(track="a", action=EditAction.SPLIT, frame=4), Edit(track="b", action="force_outlier")]
    write_edits(tmp_path / "edits.json", edits)
    assert load_edits(tmp_path / "edits.json") == edits


def test_forced_outlier_and_vertex(flat_mesh) -> None:
    corruption = CorruptionSpec(occlusion_windows=[(4, 10, 14)])
    _, _, session, truth = synthetic_capture(flat_mesh, STRETCH, corruption)
    late = [t.label for t in session.tracks if t.first_frame == 15]
    assert len(late) == 1
    markers = flat_mesh.marker_vertices
    as_outlier = _label(flat_mesh, session, truth, forced_outliers=[late[0]])
    assert late[0] in as_outlier.outlier_tracks
    moved = _label(flat_mesh, session, truth, forced_vertices={late[0]: int(markers[4])})
    assert late[0] in moved.assignment[int(markers[4])]


def test_span_table_and_labeled_files(tmp_path: Path, flat_mesh) -> None:
    corruption = CorruptionSpec.preset("wrist-like")
    _, _, session, truth = synthetic_capture(flat_mesh, STRETCH, corruption)
    spans = track_spans(session)
    table = render_span_table(spans, session.n_frames)
    assert len(table.splitlines()) == len(session.tracks) + 1
    assert len(spans_table(spans)) == sum(len(v) for v in spans.values())

    labeled = _label(flat_mesh, session, truth)
    save_labeled(tmp_path / "labeled.npz", labeled)
    loaded = load_labeled(tmp_path / "labeled.npz")
    np.testing.assert_array_equal(loaded.marker_positions, labeled.marker_positions)
    np.testing.assert_array_equal(loaded.discarded_frames, labeled.discarded_frames)
    assert loaded.assignment == labeled.assignment
    assert loaded.outlier_tracks == labeled.outlier_tracks
    write_labeled_csv(tmp_path / "labeled.csv", labeled)
    header = (tmp_path / "labeled.csv").read_text().splitlines()[0]
    assert header == "frame,marker_index,x,y,z,synthetic_flag"


def test_world_positions_undo_the_local_frames(flat_mesh) -> None:
    _, frames, session, truth = synthetic_capture(flat_mesh, MOVING)
    labeled = _label(flat_mesh, session, truth)
    world = world_positions(labeled)
    expected = np.stack(
        [
            frame[flat_mesh.marker_vertices] @ tf.rotation.T + tf.translation
            for frame, tf in zip(frames, session.transforms)
        ]
    )
    np.testing.assert_allclose(world, expected, atol=1e-6)
