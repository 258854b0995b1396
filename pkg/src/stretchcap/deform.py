"""Rigid alignment and as-rigid-as-possible deformation of the sensor mesh.

The elastic proxy minimizes the ARAP surface energy

    E(P, R) = Σ_i Σ_{j∈N(i)} w_ij ‖(p_i − p_j) − R_i (p⁰_i − p⁰_j)‖²  +  Σ_c w_c ‖p_c − t_c‖²

with cotangent weights w_ij and soft positional constraints (vertex c pulled to target t_c
with weight w_c). It alternates a local step (best rotation per vertex) and a global step
(one sparse linear solve), which never increases the energy.
"""

from collections import OrderedDict
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np
from loguru import logger
from scipy import sparse
from scipy.sparse.linalg import factorized

from stretchcap.type_notation_helper import FloatArray, IntArray

DEFAULT_CONSTRAINT_WEIGHT = 1e4
COT_WEIGHT_FLOOR = 1e-6
ORTHONORMAL_TOLERANCE = 1e-10


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Maps local coordinates x to world coordinates R·x + t."""

    rotation: FloatArray = field(default_factory=lambda: np.eye(3))
    translation: FloatArray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        rot = np.asarray(self.rotation, dtype=np.float64)
        if rot.shape != (3, 3) or np.asarray(self.translation).shape != (3,):
            raise ValueError("A rigid transform needs a 3x3 rotation and a 3-vector")
        if np.abs(rot.T @ rot - np.eye(3)).max() > ORTHONORMAL_TOLERANCE or np.linalg.det(rot) <= 0.0:
            raise ValueError("Rotation must be orthonormal with determinant +1")

    @classmethod
    def from_matrix(cls, matrix: FloatArray) -> "RigidTransform":
        """Create from a 3×4 matrix [R | t]"""
        mat = np.asarray(matrix, dtype=np.float64).reshape(3, 4)
        return cls(mat[:, :3].copy(), mat[:, 3].copy())

    def as_matrix(self) -> FloatArray:
        """Return the 3×4 matrix [R | t]"""
        return np.column_stack([self.rotation, self.translation])

    def inverse(self) -> "RigidTransform":
        """Return the transform from world to local coordinates"""
        return RigidTransform(self.rotation.T.copy(), -self.rotation.T @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            self.rotation @ other.rotation, self.rotation @ other.translation + self.translation
        )


def apply_transform(points: FloatArray, transform: RigidTransform) -> FloatArray:
    """Map local points (..., 3) to world coordinates"""
    return np.asarray(points) @ transform.rotation.T + transform.translation


def to_local_frame(points: FloatArray, transform: RigidTransform) -> FloatArray:
    """Map world points (..., 3) to local coordinates"""
    return (np.asarray(points) - transform.translation) @ transform.rotation


def procrustes(source: FloatArray, target: FloatArray) -> RigidTransform:
    """Return the rotation and translation that move source closest to target (no scaling).

    Raises:
        ValueError: for fewer than 3 points, unequal counts or collinear source points
    """
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"Point sets must both be (n, 3), got {src.shape} and {dst.shape}")
    if len(src) < 3:
        raise ValueError(f"At least 3 point pairs are needed, got {len(src)}")
    src_mean, dst_mean = src.mean(axis=0), dst.mean(axis=0)
    src_c, dst_c = src - src_mean, dst - dst_mean
    spread = np.linalg.svd(src_c, compute_uv=False)
    if spread[0] == 0.0 or spread[1] <= 1e-9 * spread[0]:
        raise ValueError("Source points are collinear; the rotation is undetermined")
    u, _, vt = np.linalg.svd(src_c.T @ dst_c)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rotation = vt.T @ np.diag([1.0, 1.0, d if d != 0.0 else 1.0]) @ u.T
    return RigidTransform(rotation, dst_mean - rotation @ src_mean)


@dataclass(frozen=True, eq=False)
class PositionalConstraints:
    """Vertices pulled towards target positions with a weight each."""

    vertices: IntArray
    targets: FloatArray
    weights: FloatArray

    def __post_init__(self) -> None:
        if self.targets.shape != (len(self.vertices), 3) or self.weights.shape != (
            len(self.vertices),
        ):
            raise ValueError("Constraint vertices, targets and weights must have matching sizes")
        if len(np.unique(self.vertices)) != len(self.vertices):
            raise ValueError("A vertex may be constrained only once")
        if np.any(self.weights < 0.0) or not np.all(np.isfinite(self.targets)):
            raise ValueError("Weights must be >= 0 and targets finite")

    @classmethod
    def uniform(
        cls,
        vertices: Sequence[int],
        targets: FloatArray,
        weight: float = DEFAULT_CONSTRAINT_WEIGHT,
    ) -> "PositionalConstraints":
        """Create constraints that all share one weight"""
        verts = np.asarray(vertices, dtype=np.int64)
        return cls(
            verts,
            np.asarray(targets, dtype=np.float64).reshape(-1, 3),
            np.full(len(verts), float(weight)),
        )

    def __len__(self) -> int:
        return len(self.vertices)


@dataclass(frozen=True, eq=False)
class DeformResult:
    """Deformed vertex positions and how the solver got there."""

    vertices: FloatArray
    energy_trace: tuple[float, ...]
    iterations: int
    converged: bool

    @property
    def energy(self) -> float:
        """Return the final energy"""
        return self.energy_trace[-1]


def cotangent_weights(vertices: FloatArray, faces: IntArray) -> Any:
    """Return the symmetric sparse matrix of edge weights ½(cot α + cot β), floored at 1e-6"""
    n = len(vertices)
    rows, cols, values = [], [], []
    for k in range(3):
        a, b, c = faces[:, k], faces[:, (k + 1) % 3], faces[:, (k + 2) % 3]
        # the angle at a faces the edge (b, c)
        u, v = vertices[b] - vertices[a], vertices[c] - vertices[a]
        cross = np.linalg.norm(np.cross(u, v), axis=1)
        cot = np.einsum("ij,ij->i", u, v) / np.maximum(cross, 1e-300)
        rows += [b, c]
        cols += [c, b]
        values += [0.5 * cot, 0.5 * cot]
    weights = sparse.coo_matrix(
        (np.concatenate(values), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    weights.data = np.maximum(weights.data, COT_WEIGHT_FLOOR)
    return weights


class ArapSolver:
    """ARAP deformation of one rest mesh under varying soft positional constraints.

    The factorization of the global system depends only on which vertices are constrained
    and how strongly, so it is cached per constraint set. An instance is not meant to be
    shared between threads; use one solver per worker.
    """

    def __init__(self, rest_vertices: FloatArray, faces: IntArray, cache_size: int = 16) -> None:
        self.rest = np.asarray(rest_vertices, dtype=np.float64)
        self.faces = np.asarray(faces, dtype=np.int64)
        weights = sparse.triu(cotangent_weights(self.rest, self.faces), k=1).tocoo()
        # every undirected edge twice: (i, j) in the energy of i and (j, i) in that of j
        self._i = np.concatenate([weights.row, weights.col]).astype(np.int64)
        self._j = np.concatenate([weights.col, weights.row]).astype(np.int64)
        self._w = np.concatenate([weights.data, weights.data])
        self._rest_edges = self.rest[self._i] - self.rest[self._j]
        n = len(self.rest)
        sym = sparse.coo_matrix((weights.data, (weights.row, weights.col)), shape=(n, n))
        sym = (sym + sym.T).tocsr()
        self._laplacian = (sparse.diags(np.asarray(sym.sum(axis=1)).ravel()) - sym).tocsc()
        self._cache: "OrderedDict[bytes, Callable[[FloatArray], FloatArray]]" = OrderedDict()
        self._cache_size = cache_size

    def _solver_for(self, constraints: PositionalConstraints) -> Callable[[FloatArray], FloatArray]:
        key = constraints.vertices.tobytes() + constraints.weights.tobytes()
        if (solve := self._cache.get(key)) is not None:
            self._cache.move_to_end(key)
            return solve
        if not np.any(constraints.weights > 0.0):
            raise ValueError("The global system is singular without a positively weighted constraint")
        n = len(self.rest)
        penalty = np.zeros(n)
        penalty[constraints.vertices] = constraints.weights
        system = (2.0 * self._laplacian + sparse.diags(penalty)).tocsc()
        solve = factorized(system)
        self._cache[key] = solve
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return solve

    def rotations(self, positions: FloatArray) -> FloatArray:
        """Return the best-fitting rotation of the one-ring of every vertex (local step)"""
        edges = positions[self._i] - positions[self._j]
        cov = np.zeros((len(self.rest), 3, 3))
        np.add.at(cov, self._i, self._w[:, None, None] * np.einsum("ea,eb->eab", self._rest_edges, edges))
        u, _, vt = np.linalg.svd(cov)
        rot = np.einsum("nba,ncb->nac", vt, u)
        flip = np.linalg.det(rot) < 0.0
        if np.any(flip):
            u_fixed = u[flip].copy()
            u_fixed[:, :, 2] *= -1.0
            rot[flip] = np.einsum("nba,ncb->nac", vt[flip], u_fixed)
        return rot

    def energy(
        self, positions: FloatArray, rotations: FloatArray, constraints: PositionalConstraints
    ) -> float:
        """Return the ARAP energy plus the constraint penalty"""
        edges = positions[self._i] - positions[self._j]
        rotated = np.einsum("eab,eb->ea", rotations[self._i], self._rest_edges)
        elastic = np.sum(self._w * np.sum((edges - rotated) ** 2, axis=1))
        offsets = positions[constraints.vertices] - constraints.targets
        return float(elastic + np.sum(constraints.weights * np.sum(offsets**2, axis=1)))

    def _global_step(
        self, rotations: FloatArray, constraints: PositionalConstraints
    ) -> FloatArray:
        rhs = np.zeros((len(self.rest), 3))
        summed = rotations[self._i] + rotations[self._j]
        np.add.at(
            rhs, self._i, self._w[:, None] * np.einsum("eab,eb->ea", summed, self._rest_edges)
        )
        rhs[constraints.vertices] += constraints.weights[:, None] * constraints.targets
        solve = self._solver_for(constraints)
        return np.column_stack([solve(rhs[:, k]) for k in range(3)])

    def solve(
        self,
        constraints: PositionalConstraints,
        iterations: int = 100,
        tolerance: float = 1e-6,
        initial: Optional[FloatArray] = None,
    ) -> DeformResult:
        """Deform the rest mesh towards the constraints.

        Stops when the relative energy decrease drops below tolerance or after iterations
        steps; in the latter case the result is flagged as not converged. An iteration that
        raises the energy is discarded and also ends the solve without convergence.

        Raises:
            ValueError: for invalid constraint vertices or a singular global system
        """
        if len(constraints) and (
            constraints.vertices.min() < 0 or constraints.vertices.max() >= len(self.rest)
        ):
            raise ValueError("Constraint vertices must be vertex indices")
        positions = self.rest.copy() if initial is None else np.array(initial, dtype=np.float64)
        rotations = self.rotations(positions)
        trace = [self.energy(positions, rotations, constraints)]
        scale = float(np.sum(self._w * np.sum(self._rest_edges**2, axis=1))) or 1.0
        converged = False
        done = 0
        for done in range(1, iterations + 1):
            candidate = self._global_step(rotations, constraints)
            candidate_rotations = self.rotations(candidate)
            energy = self.energy(candidate, candidate_rotations, constraints)
            # rises below the rounding noise of the energy count as no change
            if energy > trace[-1] * (1.0 + 1e-9) + 1e-12 * scale:
                logger.warning(
                    f"ARAP energy rose from {trace[-1]:.6g} to {energy:.6g} in iteration {done}; "
                    "keeping the previous positions"
                )
                break
            positions, rotations = candidate, candidate_rotations
            trace.append(energy)
            if trace[-1] <= 1e-24 * scale or trace[-2] - trace[-1] <= tolerance * trace[-2]:
                converged = True
                break
        if not converged:
            logger.warning(
                f"ARAP solve stopped after {done} iterations at energy {trace[-1]:.6g}"
            )
        return DeformResult(positions, tuple(trace), done, converged)


def elastic_deform(
    rest_vertices: FloatArray,
    faces: IntArray,
    constraints: PositionalConstraints,
    iterations: int = 100,
    tolerance: float = 1e-6,
) -> DeformResult:
    """Deform a rest mesh by ARAP under soft positional constraints (one-off solve)"""
    return ArapSolver(rest_vertices, faces).solve(constraints, iterations, tolerance)
