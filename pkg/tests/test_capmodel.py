# pylint: disable=missing-module-docstring
# pylint: disable=missing-function-docstring
from pathlib import Path

import numpy as np
import pytest

from stretchcap.capmodel import (
    CapacitorParams,
    CellReading,
    area_ratio_to_cap_ratio,
    cap_ratio_to_area_ratio,
    cell_capacitance_nonuniform,
    cell_readings,
    flipped_faces,
    forward_capacitances,
    lognormal_noise,
    plate_capacitance,
    read_capacitance_csv,
    relative_error,
    triangle_areas,
    uniaxial_ratio,
    write_capacitance_csv,
)
from stretchcap.exceptions import MalformedCaptureError
from stretchcap.meshing import SensorMesh

from .sensor_examples import grid_mesh, rotation_z, two_triangle_mesh


def test_plate_capacitance() -> None:
    params = CapacitorParams(epsilon_r=1.0, epsilon_0=8.854e-15, d0=0.13)
    assert plate_capacitance(params, 100.0) == pytest.approx(6.8108e-12, rel=1e-4)


def test_plate_capacitance_needs_area() -> None:
    with pytest.raises(ValueError):
        plate_capacitance(CapacitorParams(), 0.0)


@pytest.mark.parametrize(
    "length, rest, expected", [(10.0, 10.0, 1.0), (20.0, 10.0, 2.0), (15.0, 10.0, 1.5)]
)
def test_uniaxial_ratio(length: float, rest: float, expected: float) -> None:
    assert uniaxial_ratio(length, rest) == pytest.approx(expected)


def test_area_and_capacitance_ratios() -> None:
    assert cap_ratio_to_area_ratio(4.0) == pytest.approx(2.0)
    assert area_ratio_to_cap_ratio(2.0) == pytest.approx(4.0)
    values = np.random.default_rng(3).uniform(0.25, 4.0, 1000)
    back = area_ratio_to_cap_ratio(cap_ratio_to_area_ratio(values))
    np.testing.assert_allclose(back, values, rtol=1e-12)
    with pytest.raises(ValueError):
        cap_ratio_to_area_ratio(-1.0)


def test_nonuniform_cell_capacitance() -> None:
    mesh = two_triangle_mesh()
    deformed = mesh.vertices.copy()
    deformed[3, 1] = 2.0
    assert cell_capacitance_nonuniform(mesh, deformed, 0) == pytest.approx(2.5)


def test_forward_at_rest_is_one() -> None:
    mesh = grid_mesh()
    ratios = forward_capacitances(mesh, mesh.vertices)
    np.testing.assert_allclose(ratios, 1.0, atol=1e-12)


def test_forward_isotropic_scale() -> None:
    mesh = grid_mesh()
    deformed = mesh.vertices * np.array([1.2, 1.2, 1.0])
    np.testing.assert_allclose(forward_capacitances(mesh, deformed), 1.2**4, rtol=1e-9)


def test_forward_uniaxial_stretch_squares_the_area() -> None:
    mesh = grid_mesh()
    deformed = mesh.vertices * np.array([1.5, 1.0, 1.0])
    np.testing.assert_allclose(forward_capacitances(mesh, deformed), 2.25, rtol=1e-9)


def test_forward_is_invariant_under_rigid_motion() -> None:
    mesh = grid_mesh()
    deformed = mesh.vertices @ rotation_z(37.0).T + np.array([5.0, -3.0, 11.0])
    np.testing.assert_allclose(forward_capacitances(mesh, deformed), 1.0, rtol=1e-9)


def test_forward_rejects_flipped_faces() -> None:
    mesh = two_triangle_mesh()
    folded = mesh.vertices.copy()
    folded[3] = [0.2, 0.2, 0.0]
    assert flipped_faces(mesh.vertices, folded, mesh.faces).tolist() == [0, 1]
    with pytest.raises(ValueError, match="flips"):
        forward_capacitances(mesh, folded)


def test_nonuniform_ratio_bounds_uniform() -> None:
    mesh = grid_mesh()
    rng = np.random.default_rng(5)
    deformed = mesh.vertices + rng.uniform(-1.5, 1.5, mesh.vertices.shape) * np.array([1.0, 1.0, 0.5])
    ratios = forward_capacitances(mesh, deformed, check_flips=False)
    inside = mesh.face_cell >= 0
    areas = triangle_areas(deformed, mesh.faces[inside])
    uniform = np.bincount(mesh.face_cell[inside], weights=areas, minlength=mesh.n_cells) / mesh.rest_cell_areas()
    assert np.all(ratios >= uniform**2 - 1e-12)
    assert np.any(ratios > uniform**2 + 1e-6)


def _four_split(faces: np.ndarray, n_vertices: int) -> tuple[np.ndarray, np.ndarray]:
    pairs: list[tuple[int, int]] = []
    index: dict[tuple[int, int], int] = {}

    def midpoint(i: int, j: int) -> int:
        key = (min(i, j), max(i, j))
        if key not in index:
            index[key] = n_vertices + len(pairs)
            pairs.append(key)
        return index[key]

    refined = []
    for a, b, c in faces.tolist():
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        refined += [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
    return np.array(refined, dtype=np.int64), np.array(pairs, dtype=np.int64)


def test_refinement_keeps_the_cell_ratio() -> None:
    mesh = two_triangle_mesh()
    faces, pairs = _four_split(mesh.faces, mesh.n_vertices)

    def refine(vertices: np.ndarray) -> np.ndarray:
        return np.vstack([vertices, 0.5 * (vertices[pairs[:, 0]] + vertices[pairs[:, 1]])])

    rest = refine(mesh.vertices)
    fine = SensorMesh(
        vertices=rest,
        faces=faces,
        face_cell=np.zeros(len(faces), dtype=np.int64),
        cell_center_vertices=np.array([1], dtype=np.int64),
        marker_vertices=np.zeros(0, dtype=np.int64),
        rest_face_areas=triangle_areas(rest, faces),
    )
    deformed = mesh.vertices + np.random.default_rng(9).normal(0.0, 0.3, mesh.vertices.shape)
    coarse_ratio = cell_capacitance_nonuniform(mesh, deformed, 0)
    fine_ratio = cell_capacitance_nonuniform(fine, refine(deformed), 0)
    assert len(faces) == 8
    assert abs(fine_ratio - coarse_ratio) < 1e-9


def test_flip_is_blamed_on_the_folded_face() -> None:
    rest = np.array(
        [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [1.0, 2.0, 0.0], [1.0, -1.5, 0.0], [2.5, 1.5, 0.0], [-0.5, 1.5, 0.0]]
    )
    # a center face whose three neighbors each touch only the center
    faces = np.array([[0, 1, 2], [1, 0, 3], [2, 1, 4], [0, 2, 5]], dtype=np.int64)
    folded = rest.copy()
    folded[2] = [1.0, -0.5, 0.0]
    assert flipped_faces(rest, folded, faces).tolist() == [0]
    assert flipped_faces(rest, rest, faces).size == 0


def test_forward_rejects_wrong_shape() -> None:
    mesh = two_triangle_mesh()
    with pytest.raises(ValueError, match="shape"):
        forward_capacitances(mesh, mesh.vertices[:3])


def test_noise_is_mean_one() -> None:
    noisy = lognormal_noise(np.ones(10000), 0.01, np.random.default_rng(7))
    assert abs(noisy.mean() - 1.0) < 1e-3
    assert noisy.std() == pytest.approx(0.01, rel=0.1)


def test_zero_noise_is_exact() -> None:
    values = np.array([1.0, 2.0])
    np.testing.assert_array_equal(lognormal_noise(values, 0.0, np.random.default_rng()), values)
    with pytest.raises(ValueError):
        lognormal_noise(values, -0.1, np.random.default_rng())


def test_cell_readings() -> None:
    readings = cell_readings(np.array([1.0, 2.0]), [3e-11, 4e-11])
    assert readings[1].cell == 1
    assert readings[1].capacitance == pytest.approx(8e-11)
    assert readings[1].ratio == 2.0
    with pytest.raises(ValueError, match="must be positive"):
        CellReading(0, -1e-12, 1.0)


def test_relative_error() -> None:
    assert relative_error(np.array([1.1, 0.9]), np.array([1.0, 1.0])) == pytest.approx(0.1)


def test_capacitance_csv_round_trip(tmp_path: Path) -> None:
    ratios = np.random.default_rng(1).uniform(0.5, 2.0, (5, 3))
    path = tmp_path / "cap.csv"
    write_capacitance_csv(path, ratios)
    assert path.read_text().splitlines()[0] == "frame,cell_0,cell_1,cell_2"
    frames, loaded = read_capacitance_csv(path)
    np.testing.assert_array_equal(frames, np.arange(5))
    np.testing.assert_array_equal(loaded, ratios)


def test_capacitance_csv_bad_header(tmp_path: Path) -> None:
    path = tmp_path / "cap.csv"
    path.write_text("frame,c0\n0,1.0\n")
    with pytest.raises(MalformedCaptureError) as excinfo:
        read_capacitance_csv(path)
    assert excinfo.value.line_numbers == (1,)


def test_capacitance_csv_bad_values(tmp_path: Path) -> None:
    path = tmp_path / "cap.csv"
    path.write_text("frame,cell_0\n0,1.0\n1,abc\n2,1.0\n3,-0.5\n")
    with pytest.raises(MalformedCaptureError) as excinfo:
        read_capacitance_csv(path)
    assert excinfo.value.line_numbers == (3,)
    path.write_text("frame,cell_0\n0,1.0\n1,1.0\n2,0.0\n")
    with pytest.raises(MalformedCaptureError) as excinfo:
        read_capacitance_csv(path)
    assert excinfo.value.line_numbers == (4,)


def test_capacitance_csv_missing_or_empty(tmp_path: Path) -> None:
    with pytest.raises(FileNotFoundError):
        read_capacitance_csv(tmp_path / "none.csv")
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(MalformedCaptureError):
        read_capacitance_csv(tmp_path / "empty.csv")
