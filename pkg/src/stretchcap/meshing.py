"""Rest-state triangle meshes of a sensor layout and the marker vertices on them."""

import json
import math
from collections.abc import Sequence
from dataclasses import dataclass, replace
from enum import Enum, unique
from pathlib import Path
from typing import Any, Optional

import numpy as np
import shapely
import triangle
from loguru import logger
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from shapely.geometry import LinearRing, Polygon

from stretchcap._private.file_operations_utils import atomic_open
from stretchcap.capmodel import triangle_areas
from stretchcap.exceptions import DegenerateMeshError
from stretchcap.layout import SensorCell, SensorLayout
from stretchcap.type_notation_helper import FloatArray, IntArray, PathOrStr

AREA_PARTITION_TOLERANCE = 1e-6
"""Relative tolerance on Σ face areas of a cell against its polygon area"""


@unique
class Surface(Enum):
    """Shape of the rest state"""

    FLAT = "flat"
    CYLINDER = "cylinder"
    SPHERE_CAP = "sphere_cap"


@dataclass(frozen=True, eq=False)
class SensorMesh:
    """Rest-state triangle mesh of the sensor.

    face_cell holds the cell index of each face, or -1 for faces outside every cell.
    """

    vertices: FloatArray
    faces: IntArray
    face_cell: IntArray
    cell_center_vertices: IntArray
    marker_vertices: IntArray
    rest_face_areas: FloatArray
    surface: Surface = Surface.FLAT
    surface_radius: float = math.inf
    """Radius of the cylinder or sphere the sheet is wrapped on"""
    surface_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    """Center of the sphere, or a point on the axis of the cylinder"""

    @property
    def n_cells(self) -> int:
        """Return the number of sensor cells"""
        return len(self.cell_center_vertices)

    @property
    def n_vertices(self) -> int:
        """Return the number of vertices"""
        return len(self.vertices)

    def rest_cell_areas(self) -> FloatArray:
        """Return A⁰_j, the summed rest area of the faces of each cell"""
        inside = self.face_cell >= 0
        return np.bincount(
            self.face_cell[inside],
            weights=self.rest_face_areas[inside],
            minlength=self.n_cells,
        )

    def with_markers(self, marker_vertices: Sequence[int]) -> "SensorMesh":
        """Return a copy with another marker-vertex set"""
        markers = np.asarray(marker_vertices, dtype=np.int64)
        if markers.size and (markers.min() < 0 or markers.max() >= self.n_vertices):
            raise ValueError("Marker vertices must be vertex indices")
        if len(np.unique(markers)) != len(markers):
            raise ValueError("Marker vertices must be unique")
        return replace(self, marker_vertices=markers)

    def marker_cells(self) -> IntArray:
        """Return the cell whose center each marker vertex is, or -1"""
        lookup = {int(v): j for j, v in enumerate(self.cell_center_vertices)}
        return np.array([lookup.get(int(v), -1) for v in self.marker_vertices], dtype=np.int64)

    def boundary_loops(self) -> int:
        """Return the number of closed boundary loops"""
        edges = _boundary_edges(self.faces)
        if len(edges) == 0:
            return 0
        used = np.unique(edges)
        remap = np.searchsorted(used, edges)
        graph = coo_matrix(
            (np.ones(len(edges)), (remap[:, 0], remap[:, 1])), shape=(len(used), len(used))
        )
        return int(connected_components(graph, directed=False)[0])

    def validate(self, cells: Optional[Sequence[SensorCell]] = None) -> None:
        """Check the mesh invariants.

        The area partition against the cell polygons is only checked on flat meshes, since
        wrapped meshes replace the curved cells by flat chords.

        Raises:
            ValueError: if an invariant does not hold
        """
        if self.faces.min() < 0 or self.faces.max() >= self.n_vertices:
            raise ValueError("Faces reference vertices that do not exist")
        if np.any(self.rest_face_areas <= 0.0):
            raise ValueError("All rest face areas must be > 0")
        if not _is_manifold(self.faces):
            raise ValueError("Mesh is not manifold")
        graph = _face_graph(self.faces, self.n_vertices)
        if connected_components(graph, directed=False)[0] != 1:
            raise ValueError("Mesh is not connected")
        present = np.unique(self.face_cell[self.face_cell >= 0])
        if len(present) != self.n_cells:
            raise ValueError(f"{self.n_cells - len(present)} cells have no faces")
        if self.marker_vertices.size and not np.all(
            (self.marker_vertices >= 0) & (self.marker_vertices < self.n_vertices)
        ):
            raise ValueError("Marker vertices must be vertex indices")
        if cells is not None and self.surface == Surface.FLAT:
            areas = self.rest_cell_areas()
            expected = np.array([c.rest_area for c in cells])
            if np.any(np.abs(areas - expected) > AREA_PARTITION_TOLERANCE * expected):
                raise ValueError("Face areas do not partition the cell areas")


def _boundary_edges(faces: IntArray) -> IntArray:
    edges = np.sort(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    unique, counts = np.unique(edges, axis=0, return_counts=True)
    return unique[counts == 1]


def _is_manifold(faces: IntArray) -> bool:
    edges = np.sort(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool(np.all(counts <= 2))


def _face_graph(faces: IntArray, n_vertices: int) -> Any:
    rows = faces[:, [0, 1, 2]].ravel()
    cols = faces[:, [1, 2, 0]].ravel()
    return coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_vertices, n_vertices))


def mesh_layout(
    layout: SensorLayout,
    cells: Sequence[SensorCell],
    target_edge_length: float = 5.0,
    min_angle: float = 20.0,
) -> SensorMesh:
    """Triangulate the sensor outline so that the cell boundaries are mesh edges.

    The center of every cell is inserted as a vertex. For a rectangular outline the two
    vertical boundary edges get identical breakpoints, so the mesh can be rolled into a
    cylinder and its seam vertices merged.

    Raises:
        ValueError: for a non-positive target_edge_length or cells outside the outline
        DegenerateMeshError: if triangles of (near) zero area are produced
    """
    if not target_edge_length > 0.0:
        raise ValueError(f"Target edge length must be > 0, got {target_edge_length}")
    outline = layout.outline
    if not all(outline.buffer(1e-6).contains(c.polygon) for c in cells):
        raise ValueError("All cells must lie inside the outline")

    ring = _outline_ring(outline, cells, target_edge_length)
    lines: list[Any] = [LinearRing(ring)]
    for cell in cells:
        lines.append(cell.polygon.exterior)
        lines.extend(cell.polygon.interiors)
    noded = shapely.union_all(lines)
    parts = getattr(noded, "geoms", [noded])

    points: dict[tuple[float, float], int] = {}
    coords: list[tuple[float, float]] = []
    segments: list[tuple[int, int]] = []

    def index_of(x: float, y: float) -> int:
        key = (round(x, 9), round(y, 9))
        if (idx := points.get(key)) is None:
            idx = points[key] = len(coords)
            coords.append((x, y))
        return idx

    for part in parts:
        xy = np.asarray(part.coords)
        ids = [index_of(float(x), float(y)) for x, y in xy[:, :2]]
        segments.extend((a, b) for a, b in zip(ids[:-1], ids[1:]) if a != b)

    centers = np.array([_cell_center(c.polygon) for c in cells]).reshape(-1, 2)
    for x, y in centers:
        index_of(float(x), float(y))

    max_area = math.sqrt(3.0) / 4.0 * target_edge_length**2
    result = triangle.triangulate(
        {"vertices": np.array(coords), "segments": np.array(segments, dtype=np.int32)},
        f"pQYq{min_angle:.6g}a{max_area:.6g}",
    )
    vertices_2d = np.asarray(result["vertices"], dtype=np.float64)
    faces = np.asarray(result["triangles"], dtype=np.int64)
    vertices = np.column_stack([vertices_2d, np.zeros(len(vertices_2d))])

    areas = triangle_areas(vertices, faces)
    if (bad := np.flatnonzero(areas <= 1e-9 * target_edge_length**2)).size:
        raise DegenerateMeshError(
            f"Mesher produced {bad.size} degenerate triangles", bad.tolist()
        )

    distance, center_vertices = cKDTree(vertices_2d).query(centers)
    if np.any(distance > 1e-6):
        raise RuntimeError("Cell centers were lost during triangulation")

    face_cell = _assign_faces(vertices_2d, faces, cells)
    mesh = SensorMesh(
        vertices=vertices,
        faces=faces,
        face_cell=face_cell,
        cell_center_vertices=np.asarray(center_vertices, dtype=np.int64),
        marker_vertices=np.zeros(0, dtype=np.int64),
        rest_face_areas=areas,
    )
    mesh.validate(cells)
    logger.debug(
        f"Meshed {len(cells)} cells into {len(faces)} faces and {len(vertices)} vertices"
    )
    return mesh


def _cell_center(polygon: Polygon) -> tuple[float, float]:
    center = polygon.centroid
    if not polygon.contains(center):
        center = polygon.representative_point()
    return (center.x, center.y)


def _outline_ring(
    outline: Polygon, cells: Sequence[SensorCell], length: float
) -> list[tuple[float, float]]:
    """Return the densified outline, with mirrored breakpoints on the x-boundaries of a rectangle"""
    if not outline.equals(outline.envelope):
        densified = shapely.segmentize(outline, length)
        return [(x, y) for x, y in list(densified.exterior.coords)[:-1]]

    x_min, y_min, x_max, y_max = outline.bounds
    n_y = max(1, math.ceil((y_max - y_min) / length))
    n_x = max(1, math.ceil((x_max - x_min) / length))
    ys = set(np.linspace(y_min, y_max, n_y + 1).tolist())
    for cell in cells:
        for x, y in cell.polygon.exterior.coords:
            if abs(x - x_min) < 1e-9 or abs(x - x_max) < 1e-9:
                ys.add(float(y))
    y_breaks = sorted(ys)
    x_breaks = np.linspace(x_min, x_max, n_x + 1).tolist()
    # counter-clockwise: bottom, right, top, left
    ring = [(x, y_min) for x in x_breaks[:-1]]
    ring += [(x_max, y) for y in y_breaks[:-1]]
    ring += [(x, y_max) for x in reversed(x_breaks[1:])]
    ring += [(x_min, y) for y in reversed(y_breaks[1:])]
    return ring


def _assign_faces(
    vertices_2d: FloatArray, faces: IntArray, cells: Sequence[SensorCell]
) -> IntArray:
    centroids = vertices_2d[faces].mean(axis=1)
    face_cell = np.full(len(faces), -1, dtype=np.int64)
    for j, cell in enumerate(cells):
        inside = shapely.contains_xy(cell.polygon, centroids[:, 0], centroids[:, 1])
        if np.any(face_cell[inside] >= 0):
            raise ValueError(f"Cell {j} overlaps another cell")
        face_cell[inside] = j
    return face_cell


def _farthest_point_order(
    points: FloatArray, stop_distance: float = 0.0, count: Optional[int] = None
) -> list[int]:
    chosen = [0]
    distance = np.linalg.norm(points - points[0], axis=1)
    while len(chosen) < len(points):
        if count is not None and len(chosen) >= count:
            break
        candidate = int(np.argmax(distance))
        if count is None and distance[candidate] <= stop_distance:
            break
        chosen.append(candidate)
        distance = np.minimum(distance, np.linalg.norm(points - points[candidate], axis=1))
    return chosen


def select_markers(mesh: SensorMesh, max_spacing: float) -> IntArray:
    """Return cell-center vertices such that every cell center lies within max_spacing of one.

    Markers are picked greedily, farthest point first, starting at the center of cell 0.
    """
    if not max_spacing > 0.0:
        raise ValueError(f"Maximal marker spacing must be > 0, got {max_spacing}")
    centers = mesh.vertices[mesh.cell_center_vertices]
    order = _farthest_point_order(centers, stop_distance=max_spacing)
    return mesh.cell_center_vertices[order]


def farthest_point_markers(mesh: SensorMesh, count: int) -> IntArray:
    """Return exactly count cell-center vertices, spread by farthest-point sampling"""
    if not 1 <= count <= mesh.n_cells:
        raise ValueError(f"Marker count must lie in 1..{mesh.n_cells}, got {count}")
    centers = mesh.vertices[mesh.cell_center_vertices]
    return mesh.cell_center_vertices[_farthest_point_order(centers, count=count)]


def roll_to_cylinder(mesh: SensorMesh, seam_tolerance: float = 0.1) -> SensorMesh:
    """Roll a flat sheet around an axis parallel to y so that its x-extent is the circumference.

    Vertices on the two x-boundaries that lie within seam_tolerance of each other in y are
    merged. Normals of the rolled sheet point away from the axis.

    Raises:
        ValueError: if the mesh is not flat, or the two boundaries do not match up
    """
    if mesh.surface != Surface.FLAT:
        raise ValueError(f"Only flat meshes can be rolled, got {mesh.surface.value}")
    if seam_tolerance < 0.0:
        raise ValueError(f"Seam tolerance must be >= 0, got {seam_tolerance}")
    x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]
    x_min, x_max = float(x.min()), float(x.max())
    width = x_max - x_min
    eps = 1e-9 * max(width, 1.0)
    on_boundary = np.zeros(mesh.n_vertices, dtype=bool)
    on_boundary[np.unique(_boundary_edges(mesh.faces))] = True
    left = np.flatnonzero(on_boundary & (np.abs(x - x_min) <= eps))
    right = np.flatnonzero(on_boundary & (np.abs(x - x_max) <= eps))
    if len(left) < 2 or len(right) < 2:
        raise ValueError("The mesh has no straight boundary edges at its x-extremes")
    left_len = float(np.ptp(y[left]))
    right_len = float(np.ptp(y[right]))
    if abs(left_len - right_len) > seam_tolerance:
        raise ValueError(
            f"Boundary edges differ in length: {left_len:.6g} vs {right_len:.6g} mm"
        )
    distance, match = cKDTree(y[left, None]).query(y[right, None])
    if np.any(distance > seam_tolerance) or len(np.unique(match)) != len(right) or len(
        right
    ) != len(left):
        raise ValueError(
            f"Boundary vertices do not pair up within the seam tolerance of {seam_tolerance} mm"
        )

    radius = width / (2.0 * math.pi)
    theta = 2.0 * math.pi * (x - x_min) / width
    rolled = np.column_stack(
        [radius * np.cos(theta), y, -radius * np.sin(theta)]
    )

    remap = np.arange(mesh.n_vertices)
    remap[right] = left[match]
    keep = np.ones(mesh.n_vertices, dtype=bool)
    keep[right] = False
    new_index = np.cumsum(keep) - 1
    remap = new_index[remap]

    faces = remap[mesh.faces]
    vertices = rolled[keep]
    result = SensorMesh(
        vertices=vertices,
        faces=faces,
        face_cell=mesh.face_cell.copy(),
        cell_center_vertices=remap[mesh.cell_center_vertices],
        marker_vertices=remap[mesh.marker_vertices],
        rest_face_areas=triangle_areas(vertices, faces),
        surface=Surface.CYLINDER,
        surface_radius=radius,
        surface_center=(0.0, 0.0, 0.0),
    )
    result.validate()
    logger.debug(f"Rolled mesh to radius {radius:.4g} mm, merged {len(right)} seam vertices")
    return result


def wrap_on_sphere(mesh: SensorMesh, radius: float) -> SensorMesh:
    """Wrap a flat sheet on a sphere, keeping geodesic distances from its center.

    The center of the sheet's bounding box becomes the pole at z = 0 and the sphere center
    lies at depth radius below it.
    """
    if mesh.surface != Surface.FLAT:
        raise ValueError(f"Only flat meshes can be wrapped, got {mesh.surface.value}")
    lows, highs = mesh.vertices[:, :2].min(axis=0), mesh.vertices[:, :2].max(axis=0)
    center = 0.5 * (lows + highs)
    rel = mesh.vertices[:, :2] - center
    rho = np.linalg.norm(rel, axis=1)
    if not radius > 0.0 or rho.max() / radius >= math.pi:
        raise ValueError(f"A sheet of this size does not fit on a sphere of radius {radius}")
    polar = rho / radius
    azimuth = np.arctan2(rel[:, 1], rel[:, 0])
    sphere_center = (float(center[0]), float(center[1]), -radius)
    vertices = np.column_stack(
        [
            center[0] + radius * np.sin(polar) * np.cos(azimuth),
            center[1] + radius * np.sin(polar) * np.sin(azimuth),
            radius * np.cos(polar) - radius,
        ]
    )
    return replace(
        mesh,
        vertices=vertices,
        rest_face_areas=triangle_areas(vertices, mesh.faces),
        surface=Surface.SPHERE_CAP,
        surface_radius=radius,
        surface_center=sphere_center,
    )


def write_obj(
    path: Path, vertices: FloatArray, faces: IntArray, comment: str = "", digits: int = 9
) -> None:
    """Write vertices and faces as a Wavefront OBJ file (1-based indices)"""
    with atomic_open(path, "w") as fptr:
        if comment:
            fptr.write(f"# {comment}\n")
        for vx, vy, vz in vertices:
            fptr.write(f"v {vx:.{digits}g} {vy:.{digits}g} {vz:.{digits}g}\n")
        for a, b, c in faces + 1:
            fptr.write(f"f {a} {b} {c}\n")


def read_obj(path: PathOrStr) -> tuple[FloatArray, IntArray]:
    """Read vertices and triangular faces of an OBJ file"""
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    with Path(path).open("r", encoding="utf-8") as fptr:
        for line in fptr:
            tokens = line.split()
            if not tokens:
                continue
            if tokens[0] == "v":
                vertices.append([float(t) for t in tokens[1:4]])
            elif tokens[0] == "f":
                # 'f 1/1/1 2/2/2 3/3/3' style is accepted too
                faces.append([int(t.split("/")[0]) - 1 for t in tokens[1:4]])
    return np.array(vertices, dtype=np.float64), np.array(faces, dtype=np.int64).reshape(-1, 3)


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def save_mesh(mesh: SensorMesh, path: PathOrStr) -> None:
    """Write the mesh as OBJ plus a JSON sidecar with cells, markers and surface"""
    the_path = Path(path)
    write_obj(the_path, mesh.vertices, mesh.faces, comment="stretchcap rest mesh", digits=17)
    sidecar = {
        "face_cell": mesh.face_cell.tolist(),
        "cell_center_vertices": mesh.cell_center_vertices.tolist(),
        "marker_vertices": mesh.marker_vertices.tolist(),
        "surface": mesh.surface.value,
        "surface_radius": None if math.isinf(mesh.surface_radius) else mesh.surface_radius,
        "surface_center": list(mesh.surface_center),
    }
    with atomic_open(_sidecar_path(the_path), "w") as fptr:
        json.dump(sidecar, fptr)


def load_mesh(path: PathOrStr) -> SensorMesh:
    """Read a mesh written by save_mesh"""
    the_path = Path(path)
    if not the_path.is_file():
        raise FileNotFoundError(f"Mesh file {the_path} not found")
    vertices, faces = read_obj(the_path)
    sidecar = json.loads(_sidecar_path(the_path).read_text(encoding="utf-8"))
    radius = sidecar.get("surface_radius")
    return SensorMesh(
        vertices=vertices,
        faces=faces,
        face_cell=np.array(sidecar["face_cell"], dtype=np.int64),
        cell_center_vertices=np.array(sidecar["cell_center_vertices"], dtype=np.int64),
        marker_vertices=np.array(sidecar["marker_vertices"], dtype=np.int64),
        rest_face_areas=triangle_areas(vertices, faces),
        surface=Surface(sidecar.get("surface", Surface.FLAT.value)),
        surface_radius=math.inf if radius is None else float(radius),
        surface_center=tuple(sidecar.get("surface_center", (0.0, 0.0, 0.0))),  # type: ignore[arg-type]
    )
