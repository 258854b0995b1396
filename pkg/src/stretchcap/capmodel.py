"""Capacitance and geometry of stretchable plate capacitors.

The dielectric is treated as incompressible: when a cell is stretched its plates get
thinner by the same factor as they widen, so the capacitance ratio C/C⁰ equals the length
ratio under uniaxial stretch and the square of the area ratio in general.
"""

from collections.abc import Sequence
from dataclasses import dataclass as std_dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Union

import numpy as np
import pandas as pd
from attributes_doc import attributes_doc
from loguru import logger
from pydantic import Field
from pydantic.dataclasses import dataclass

from stretchcap._private.file_operations_utils import atomic_open
from stretchcap.exceptions import MalformedCaptureError
from stretchcap.type_notation_helper import BoolArray, FloatArray, IntArray, PathOrStr

if TYPE_CHECKING:
    from stretchcap.meshing import SensorMesh

EPSILON_0 = 8.8541878128e-15
"""Electric constant in F/mm"""

NOISE_PRESET_SIGMA = 0.077 / 2
"""A plausible relative noise level for hardware readings. Not a measured ground truth."""

ArrayOrFloat = Union[float, FloatArray]


@attributes_doc
@dataclass(frozen=True)
class CapacitorParams:
    """Material parameters of the plate capacitor formed by a sensor cell"""

    epsilon_r: float = Field(default=2.8, gt=0.0)
    """Relative permittivity of the dielectric layer"""

    epsilon_0: float = Field(default=EPSILON_0, gt=0.0)
    """Electric constant in F/mm"""

    d0: float = Field(default=0.13, gt=0.0)
    """Plate separation at rest in mm"""


@std_dataclass(frozen=True)
class CellReading:
    """Capacitance of one cell, absolute and relative to its rest value."""

    cell: int
    capacitance: float
    ratio: float

    def __post_init__(self) -> None:
        if not (self.capacitance > 0.0 and self.ratio > 0.0):
            raise ValueError(
                f"Reading of cell {self.cell} must be positive, "
                f"got C={self.capacitance}, ratio={self.ratio}"
            )


def plate_capacitance(params: CapacitorParams, area: float) -> float:
    """Return the capacitance in farads of plates with the given overlap area in mm²"""
    if not area > 0.0:
        raise ValueError(f"Plate area must be > 0, got {area}")
    return params.epsilon_r * params.epsilon_0 * area / params.d0


def uniaxial_ratio(length: float, rest_length: float) -> float:
    """Return C/C⁰ of a cell stretched along one direction from rest_length to length"""
    if not (length > 0.0 and rest_length > 0.0):
        raise ValueError(f"Lengths must be > 0, got {length} and {rest_length}")
    return length / rest_length


def _check_positive(values: ArrayOrFloat, what: str) -> FloatArray:
    array = np.asarray(values, dtype=np.float64)
    if not np.all(array > 0.0):
        raise ValueError(f"{what} must be > 0")
    return array


def area_ratio_to_cap_ratio(area_ratio: ArrayOrFloat) -> ArrayOrFloat:
    """Return C/C⁰ = (A/A⁰)²"""
    result = _check_positive(area_ratio, "Area ratio") ** 2
    return float(result) if result.ndim == 0 else result


def cap_ratio_to_area_ratio(cap_ratio: ArrayOrFloat) -> ArrayOrFloat:
    """Return A/A⁰ = √(C/C⁰)"""
    result = np.sqrt(_check_positive(cap_ratio, "Capacitance ratio"))
    return float(result) if result.ndim == 0 else result


def face_normals(vertices: FloatArray, faces: IntArray) -> FloatArray:
    """Return the (unnormalized) normals of the faces; their length is twice the area"""
    v0, v1, v2 = (vertices[faces[:, k]] for k in range(3))
    return np.cross(v1 - v0, v2 - v0)


def triangle_areas(vertices: FloatArray, faces: IntArray) -> FloatArray:
    """Return the area of each face"""
    return 0.5 * np.linalg.norm(face_normals(vertices, faces), axis=1)


def flipped_faces(
    rest_vertices: FloatArray, deformed_vertices: FloatArray, faces: IntArray
) -> IntArray:
    """Return the faces that are folded over onto their neighbors.

    A face is a candidate when, for at least half of its edge neighbors (and at least one),
    the normals agreed in orientation at rest and disagree after deformation. When two
    candidates disagree with each other, only the one with the larger share of disagreeing
    neighbors is returned (ties go to the face with more neighbors, then both are kept), so
    a boundary face is not blamed for the fold of its single neighbor. Rigid motions and
    smooth bending flip nothing; a triangle pushed through its neighbors does.
    """
    first, second = _edge_neighbors(faces)
    if first.size == 0:
        return np.zeros(0, dtype=np.int64)
    rest_n = face_normals(rest_vertices, faces)
    def_n = face_normals(deformed_vertices, faces)
    rest_dot = np.einsum("ij,ij->i", rest_n[first], rest_n[second])
    def_dot = np.einsum("ij,ij->i", def_n[first], def_n[second])
    folded = (rest_dot > 0.0) & (def_dot < 0.0)
    n_faces = len(faces)
    neighbors = np.bincount(first, minlength=n_faces) + np.bincount(second, minlength=n_faces)
    n_folded = np.bincount(first[folded], minlength=n_faces) + np.bincount(
        second[folded], minlength=n_faces
    )
    candidate = (n_folded > 0) & (2 * n_folded >= neighbors)
    a, b = first[folded], second[folded]
    both = candidate[a] & candidate[b]
    # share of folded neighbors compared by cross-multiplication
    share_a, share_b = n_folded[a] * neighbors[b], n_folded[b] * neighbors[a]
    a_wins = (share_a > share_b) | ((share_a == share_b) & (neighbors[a] > neighbors[b]))
    b_wins = (share_b > share_a) | ((share_a == share_b) & (neighbors[b] > neighbors[a]))
    explained = np.zeros(n_faces, dtype=bool)
    explained[b[both & a_wins]] = True
    explained[a[both & b_wins]] = True
    return np.flatnonzero(candidate & ~explained).astype(np.int64)


def _edge_neighbors(faces: IntArray) -> tuple[IntArray, IntArray]:
    edges = np.sort(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    owner = np.repeat(np.arange(len(faces)), 3)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    edges, owner = edges[order], owner[order]
    same = np.all(edges[1:] == edges[:-1], axis=1)
    return owner[:-1][same].astype(np.int64), owner[1:][same].astype(np.int64)


def cell_capacitance_nonuniform(
    mesh: "SensorMesh", deformed_vertices: FloatArray, cell: int
) -> float:
    """Return C_j/C⁰_j of one cell under a per-triangle (non-uniform) stretch.

    Each face of the cell is a small plate capacitor in parallel with the others, so the
    ratio is Σ (A_i² / A⁰_i) / A⁰_j over the faces of the cell.

    Raises:
        ValueError: if the cell has no faces with rest area
    """
    faces = np.flatnonzero(mesh.face_cell == cell)
    rest = mesh.rest_face_areas[faces]
    if (total := float(rest.sum())) <= 0.0:
        raise ValueError(f"Cell {cell} has zero rest area")
    areas = triangle_areas(deformed_vertices, mesh.faces[faces])
    return float(np.sum(areas**2 / rest) / total)


def forward_capacitances(
    mesh: "SensorMesh",
    deformed_vertices: FloatArray,
    noise_sigma: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    check_flips: bool = True,
) -> FloatArray:
    """Return the capacitance ratio C_j/C⁰_j of every cell of a deformed mesh.

    Raises:
        ValueError: if a face is flipped, or a cell has no rest area
    """
    if deformed_vertices.shape != mesh.vertices.shape:
        raise ValueError(
            f"Deformed vertices have shape {deformed_vertices.shape}, "
            f"mesh has {mesh.vertices.shape}"
        )
    if check_flips and (
        flipped := flipped_faces(mesh.vertices, deformed_vertices, mesh.faces)
    ).size:
        raise ValueError(f"Deformation flips {flipped.size} faces, first {flipped[:5].tolist()}")
    inside = mesh.face_cell >= 0
    owner = mesh.face_cell[inside]
    rest = mesh.rest_face_areas[inside]
    areas = triangle_areas(deformed_vertices, mesh.faces[inside])
    rest_total = np.bincount(owner, weights=rest, minlength=mesh.n_cells)
    if np.any(rest_total <= 0.0):
        raise ValueError(f"Cells {np.flatnonzero(rest_total <= 0.0).tolist()} have zero rest area")
    ratios = np.bincount(owner, weights=areas**2 / rest, minlength=mesh.n_cells) / rest_total
    if noise_sigma > 0.0:
        ratios = lognormal_noise(ratios, noise_sigma, rng or np.random.default_rng())
    return ratios


def lognormal_noise(
    ratios: FloatArray, sigma: float, rng: np.random.Generator
) -> FloatArray:
    """Multiply ratios by mean-one log-normal factors with log-standard-deviation sigma"""
    if sigma < 0.0:
        raise ValueError(f"Noise sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        return np.array(ratios, dtype=np.float64)
    factors = np.exp(sigma * rng.standard_normal(np.shape(ratios)) - 0.5 * sigma**2)
    return np.asarray(ratios, dtype=np.float64) * factors


def cell_readings(
    ratios: FloatArray, rest_capacitances: Sequence[float]
) -> list[CellReading]:
    """Pair ratios with rest capacitances into per-cell readings"""
    return [
        CellReading(j, float(r * c0), float(r))
        for j, (r, c0) in enumerate(zip(ratios, rest_capacitances))
    ]


def relative_error(measured: FloatArray, predicted: FloatArray) -> float:
    """Return the mean of |measured - predicted| / predicted"""
    predicted = np.asarray(predicted, dtype=np.float64)
    return float(np.mean(np.abs(np.asarray(measured) - predicted) / np.abs(predicted)))


def write_capacitance_csv(path: Path, ratios: FloatArray, frames: Optional[IntArray] = None) -> None:
    """Write a trace with header frame,cell_0,...,cell_{s-1}"""
    n_frames, n_cells = ratios.shape
    table = pd.DataFrame(ratios, columns=[f"cell_{j}" for j in range(n_cells)])
    table.insert(0, "frame", np.arange(n_frames) if frames is None else frames)
    with atomic_open(path, "w") as fptr:
        table.to_csv(fptr, index=False, float_format="%.17g", lineterminator="\n")


def read_capacitance_csv(path: PathOrStr) -> tuple[IntArray, FloatArray]:
    """Return frame numbers and the (frames × cells) ratios of a capacitance trace.

    Raises:
        FileNotFoundError: if the file is missing
        MalformedCaptureError: if the header or values do not follow the trace format
    """
    the_path = Path(path)
    if not the_path.is_file():
        raise FileNotFoundError(f"Capacitance trace {the_path} not found")
    try:
        table = pd.read_csv(the_path)
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as exc:
        raise MalformedCaptureError(f"Cannot parse {the_path}: {exc}") from exc
    expected = ["frame"] + [f"cell_{j}" for j in range(len(table.columns) - 1)]
    if list(table.columns) != expected:
        raise MalformedCaptureError(
            f"{the_path}: header must be frame,cell_0,...; got {','.join(map(str, table.columns))}",
            (1,),
        )
    values = table.apply(pd.to_numeric, errors="coerce")
    if bad := _bad_lines(values.isna().any(axis=1).to_numpy()):
        raise MalformedCaptureError(f"{the_path}: non-numeric values", bad)
    ratios = values.iloc[:, 1:].to_numpy(dtype=np.float64)
    if bad := _bad_lines(~np.all(ratios > 0.0, axis=1)):
        raise MalformedCaptureError(f"{the_path}: capacitance ratios must be > 0", bad)
    logger.debug(f"Read {ratios.shape[0]} frames of {ratios.shape[1]} cells from {the_path}")
    return values["frame"].to_numpy(dtype=np.int64), ratios


def _bad_lines(mask: BoolArray) -> tuple[int, ...]:
    # data rows start on line 2
    return tuple(int(i) + 2 for i in np.flatnonzero(mask))
