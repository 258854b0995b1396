# pylint: disable=missing-module-docstring
# pylint: disable=missing-function-docstring
import numpy as np
import pytest
from loguru import logger

from stretchcap import LOGGER_NAME, use_standard_logging
from stretchcap.deform import (
    ArapSolver,
    PositionalConstraints,
    RigidTransform,
    apply_transform,
    cotangent_weights,
    elastic_deform,
    procrustes,
    to_local_frame,
)
from stretchcap.meshing import roll_to_cylinder

from .sensor_examples import grid_mesh, rotation_x, rotation_z


@pytest.fixture(scope="module")
def points() -> np.ndarray:
    return np.random.default_rng(8).uniform(-50.0, 50.0, (12, 3))


def test_rigid_transform_validation() -> None:
    with pytest.raises(ValueError, match="orthonormal"):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError, match="3x3"):
        RigidTransform(np.eye(2), np.zeros(3))


def test_rigid_transform_algebra(points) -> None:
    transform = RigidTransform(rotation_z(30.0), np.array([1.0, 2.0, 3.0]))
    world = apply_transform(points, transform)
    np.testing.assert_allclose(to_local_frame(world, transform), points, atol=1e-12)
    identity = transform @ transform.inverse()
    np.testing.assert_allclose(identity.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(identity.translation, np.zeros(3), atol=1e-12)
    again = RigidTransform.from_matrix(transform.as_matrix())
    np.testing.assert_array_equal(again.rotation, transform.rotation)


def test_procrustes_identity(points) -> None:
    result = procrustes(points, points)
    np.testing.assert_allclose(result.rotation, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(result.translation, np.zeros(3), atol=1e-9)


def test_procrustes_recovers_rotation(points) -> None:
    rotation = rotation_x(25.0) @ rotation_z(-70.0)
    target = points @ rotation.T + np.array([10.0, -4.0, 2.5])
    result = procrustes(points, target)
    np.testing.assert_allclose(result.rotation, rotation, atol=1e-9)
    np.testing.assert_allclose(apply_transform(points, result), target, atol=1e-9)


def test_procrustes_never_reflects(points) -> None:
    mirrored = points * np.array([1.0, 1.0, -1.0])
    result = procrustes(points, mirrored)
    assert np.linalg.det(result.rotation) == pytest.approx(1.0)


def test_procrustes_rejects_degenerate_input() -> None:
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(ValueError, match="collinear"):
        procrustes(line, line)
    with pytest.raises(ValueError, match="At least 3"):
        procrustes(np.eye(3)[:2], np.eye(3)[:2])


def test_constraint_validation() -> None:
    with pytest.raises(ValueError, match="only once"):
        PositionalConstraints.uniform([1, 1], np.zeros((2, 3)))
    with pytest.raises(ValueError, match="matching"):
        PositionalConstraints(np.array([0]), np.zeros((2, 3)), np.ones(1))
    with pytest.raises(ValueError, match="finite"):
        PositionalConstraints.uniform([0], np.full((1, 3), np.nan))


def test_cotangent_weights_are_symmetric() -> None:
    mesh = grid_mesh()
    weights = cotangent_weights(mesh.vertices, mesh.faces)
    assert abs(weights - weights.T).max() < 1e-12
    assert weights.data.min() >= 1e-6


def test_single_constraint_translates_the_mesh() -> None:
    mesh = grid_mesh()
    offset = np.array([1.0, 2.0, 3.0])
    constraints = PositionalConstraints.uniform([0], mesh.vertices[0] + offset)
    result = elastic_deform(mesh.vertices, mesh.faces, constraints)
    np.testing.assert_allclose(result.vertices, mesh.vertices + offset, atol=1e-6)
    assert result.converged


def test_pinned_rigid_motion_is_reproduced() -> None:
    mesh = grid_mesh()
    target = mesh.vertices @ rotation_x(40.0).T + np.array([3.0, -7.0, 12.0])
    constraints = PositionalConstraints.uniform(np.arange(mesh.n_vertices), target)
    result = ArapSolver(mesh.vertices, mesh.faces).solve(
        constraints, iterations=100, tolerance=1e-14
    )
    np.testing.assert_allclose(result.vertices, target, atol=1e-6)


def test_solve_without_weights_raises() -> None:
    mesh = grid_mesh()
    constraints = PositionalConstraints(np.array([0]), np.zeros((1, 3)), np.zeros(1))
    with pytest.raises(ValueError, match="singular"):
        ArapSolver(mesh.vertices, mesh.faces).solve(constraints)
    with pytest.raises(ValueError, match="vertex indices"):
        ArapSolver(mesh.vertices, mesh.faces).solve(
            PositionalConstraints.uniform([mesh.n_vertices], np.zeros(3))
        )


def _bend_constraints(rest: np.ndarray, angle: float) -> PositionalConstraints:
    y = rest[:, 1]
    low = np.flatnonzero(y <= y.min() + 1e-9)
    high = np.flatnonzero(y >= y.max() - 1e-9)
    pivot = np.array([0.0, y.max(), 0.0])
    bent = (rest[high] - pivot) @ rotation_x(angle).T + pivot
    return PositionalConstraints.uniform(
        np.concatenate([low, high]), np.vstack([rest[low], bent])
    )


def test_bend_energy_never_increases() -> None:
    tube = roll_to_cylinder(grid_mesh(4, 4))
    constraints = _bend_constraints(tube.vertices, 45.0)
    result = ArapSolver(tube.vertices, tube.faces).solve(constraints, iterations=50)
    trace = np.array(result.energy_trace)
    assert np.all(np.diff(trace) <= 1e-9 * trace[0])
    assert trace[-1] < trace[0]
    offsets = result.vertices[constraints.vertices] - constraints.targets
    assert np.linalg.norm(offsets, axis=1).max() < 1.0


def test_rising_energy_ends_the_solve(
    monkeypatch: pytest.MonkeyPatch, caplog: pytest.LogCaptureFixture
) -> None:
    mesh = grid_mesh()
    pinned = PositionalConstraints.uniform([0], mesh.vertices[[0]])
    monkeypatch.setattr(
        ArapSolver, "_global_step", lambda self, rotations, constraints: self.rest + 5.0
    )
    use_standard_logging(enable=True)
    result = ArapSolver(mesh.vertices, mesh.faces).solve(pinned, iterations=10)
    logger.disable(LOGGER_NAME)
    assert not result.converged
    assert len(result.energy_trace) == 1 and result.energy_trace[0] < 1e-9
    np.testing.assert_array_equal(result.vertices, mesh.vertices)
    assert "energy rose" in caplog.text


def test_solution_follows_rigid_motion_of_constraints() -> None:
    tube = roll_to_cylinder(grid_mesh(4, 4))
    constraints = _bend_constraints(tube.vertices, 30.0)
    motion = RigidTransform(rotation_z(50.0), np.array([5.0, 0.0, -9.0]))
    moved = PositionalConstraints(
        constraints.vertices, apply_transform(constraints.targets, motion), constraints.weights
    )
    solver = ArapSolver(tube.vertices, tube.faces)
    plain = solver.solve(constraints, iterations=20, tolerance=0.0)
    shifted = solver.solve(
        moved, iterations=20, tolerance=0.0, initial=apply_transform(tube.vertices, motion)
    )
    np.testing.assert_allclose(shifted.vertices, apply_transform(plain.vertices, motion), atol=1e-6)
