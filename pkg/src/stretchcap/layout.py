"""Sensor-array geometry: electrode strips on two layers and the sensor cells they form.

A sensor cell is the overlap of one top-layer and one bottom-layer strip; it behaves as a
local plate capacitor. Layouts are authored as explicit strip polygons in a JSON file:

    {"strips": [{"id": "T00", "layer": "top", "polygon": [[x, y], ...]}, ...],
     "outline": [[x, y], ...], "units": "mm",
     "rest_capacitance": {"T00/B00": 1.1e-11}}

`rest_capacitance` is optional and holds measured values; cells without one get the plate
capacitor value computed from their overlap area.
"""

import json
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum, unique
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import numpy as np
import shapely
from loguru import logger
from pydantic import BaseModel, Field
from shapely.geometry import Polygon
from shapely.geometry.polygon import orient

from stretchcap._private.file_operations_utils import (
    atomic_write_text,
    sha256_of_data,
)
from stretchcap.capmodel import CapacitorParams, plate_capacitance
from stretchcap.type_notation_helper import PathOrStr

AREA_TOLERANCE = 1e-9
"""Overlaps below this area (mm²) are treated as touching, not crossing"""


@unique
class Layer(Enum):
    """The two conductive layers of the sensor"""

    TOP = "top"
    BOTTOM = "bottom"


@unique
class LeadSide(Enum):
    """Edge of the sensor where a strip is connected to the read-out circuit"""

    BOTTOM = "bottom"
    TOP = "top"
    LEFT = "left"
    RIGHT = "right"
    NONE = "none"


@unique
class CapacitanceSource(Enum):
    """Where the rest capacitance of a cell comes from"""

    MEASURED = "measured"
    COMPUTED = "computed"


@dataclass(frozen=True)
class ElectrodeStrip:
    """A conductive region on one layer, in rest (intrinsic) coordinates in mm."""

    id: str
    layer: Layer
    polygon: Polygon
    lead_side: LeadSide = LeadSide.NONE


@dataclass(frozen=True)
class SensorCell:
    """Overlap of a top and a bottom strip."""

    id: int
    top_strip: str
    bottom_strip: str
    polygon: Polygon
    rest_area: float
    rest_capacitance: float = math.nan
    capacitance_source: CapacitanceSource = CapacitanceSource.COMPUTED

    @property
    def key(self) -> str:
        """Return the '<top>/<bottom>' key used in layout files"""
        return f"{self.top_strip}/{self.bottom_strip}"


@dataclass(frozen=True)
class SensorLayout:
    """Electrode strips, the sensor outline and optional measured rest capacitances."""

    strips: tuple[ElectrodeStrip, ...]
    outline: Polygon
    units: str = "mm"
    measured_capacitance: Mapping[str, float] = field(default_factory=dict)

    def strips_on(self, layer: Layer) -> tuple[ElectrodeStrip, ...]:
        """Return the strips of one layer in file order"""
        return tuple(s for s in self.strips if s.layer == layer)

    def strip_ids(self) -> tuple[str, ...]:
        """Return all strip ids"""
        return tuple(s.id for s in self.strips)


class _StripRecord(BaseModel):
    id: str
    layer: Layer
    polygon: list[tuple[float, float]] = Field(min_length=3)
    lead_side: LeadSide = LeadSide.NONE


class _LayoutRecord(BaseModel):
    strips: list[_StripRecord]
    outline: Optional[list[tuple[float, float]]] = None
    units: str = "mm"
    rest_capacitance: dict[str, float] = Field(default_factory=dict)


def _as_polygon(points: Sequence[Sequence[float]]) -> Polygon:
    return orient(Polygon([(float(x), float(y)) for x, y in points]))


def _ring(polygon: Polygon) -> list[list[float]]:
    return [[x, y] for x, y in list(polygon.exterior.coords)[:-1]]


def validate_strips(strips: Sequence[ElectrodeStrip]) -> None:
    """Check the strip invariants.

    Raises:
        ValueError: for a non-simple polygon, duplicate ids or overlapping strips on one layer
    """
    seen: set[str] = set()
    for strip in strips:
        if strip.id in seen:
            raise ValueError(f"Duplicate strip id '{strip.id}'")
        seen.add(strip.id)
        if len(strip.polygon.exterior.coords) < 4:
            raise ValueError(f"Strip '{strip.id}' needs at least 3 points")
        if not strip.polygon.is_valid or not strip.polygon.exterior.is_simple:
            raise ValueError(f"Strip '{strip.id}' is not a simple polygon")
    for layer in Layer:
        on_layer = [s for s in strips if s.layer == layer]
        for i, first in enumerate(on_layer):
            for second in on_layer[i + 1 :]:
                if first.polygon.intersection(second.polygon).area > AREA_TOLERANCE:
                    raise ValueError(
                        f"Strips '{first.id}' and '{second.id}' overlap on the {layer.value} layer"
                    )


def build_cells(
    strips: Sequence[ElectrodeStrip],
    params: Optional[CapacitorParams] = None,
    measured: Optional[Mapping[str, float]] = None,
) -> list[SensorCell]:
    """Return one cell per top/bottom strip pair that overlaps with positive area.

    Cells are indexed in order of (top id, bottom id). Rest capacitances are taken from
    measured where present and computed from the overlap area otherwise.

    Raises:
        ValueError: if a strip pair overlaps in more than one connected region
    """
    validate_strips(strips)
    tops = sorted((s for s in strips if s.layer == Layer.TOP), key=lambda s: s.id)
    bottoms = sorted((s for s in strips if s.layer == Layer.BOTTOM), key=lambda s: s.id)
    cells: list[SensorCell] = []
    for top in tops:
        for bottom in bottoms:
            if not top.polygon.intersects(bottom.polygon):
                continue
            pieces = [
                p
                for p in _polygon_parts(top.polygon.intersection(bottom.polygon))
                if p.area > AREA_TOLERANCE
            ]
            if not pieces:
                continue
            if len(pieces) > 1:
                raise ValueError(
                    f"Strips '{top.id}' and '{bottom.id}' cross {len(pieces)} times; "
                    "each pair of strips may cross at most once"
                )
            overlap = orient(pieces[0])
            cells.append(
                SensorCell(
                    id=len(cells),
                    top_strip=top.id,
                    bottom_strip=bottom.id,
                    polygon=overlap,
                    rest_area=float(overlap.area),
                )
            )
    logger.debug(f"{len(cells)} sensor cells from {len(tops)}x{len(bottoms)} strips")
    return cell_rest_capacitance(cells, params or CapacitorParams(), measured or {})


def _polygon_parts(geometry: Any) -> list[Polygon]:
    if isinstance(geometry, Polygon):
        return [geometry]
    return [g for g in getattr(geometry, "geoms", []) if isinstance(g, Polygon)]


def cell_rest_capacitance(
    cells: Iterable[SensorCell],
    params: CapacitorParams,
    measured: Mapping[str, float],
) -> list[SensorCell]:
    """Fill the rest capacitance of each cell and record where it came from."""
    result = []
    for cell in cells:
        if (value := measured.get(cell.key)) is not None:
            if value <= 0.0:
                raise ValueError(f"Measured rest capacitance of {cell.key} must be > 0")
            result.append(
                replace(
                    cell,
                    rest_capacitance=float(value),
                    capacitance_source=CapacitanceSource.MEASURED,
                )
            )
        else:
            result.append(
                replace(
                    cell,
                    rest_capacitance=plate_capacitance(params, cell.rest_area),
                    capacitance_source=CapacitanceSource.COMPUTED,
                )
            )
    if unknown := set(measured) - {c.key for c in result}:
        logger.warning(f"Measured capacitances for unknown cells ignored: {sorted(unknown)}")
    return result


def load_layout(path: PathOrStr) -> SensorLayout:
    """Load a layout JSON file.

    Raises:
        FileNotFoundError: if the file does not exist
        ValidationError: if the file does not follow the layout schema
    """
    the_path = Path(path)
    if not the_path.is_file():
        raise FileNotFoundError(f"Layout file {the_path} not found")
    record = _LayoutRecord.model_validate_json(the_path.read_text(encoding="utf-8"))
    return _layout_from_record(record)


def bundled_layout(name: str) -> SensorLayout:
    """Load one of the layouts shipped with the package, e.g. 'prototype_92' or 'grid_3x2'."""
    ref = resources.files("stretchcap") / "data" / f"{name}.json"
    record = _LayoutRecord.model_validate_json(ref.read_text(encoding="utf-8"))
    return _layout_from_record(record)


def _layout_from_record(record: _LayoutRecord) -> SensorLayout:
    strips = tuple(
        ElectrodeStrip(s.id, s.layer, _as_polygon(s.polygon), s.lead_side)
        for s in record.strips
    )
    if record.outline is not None:
        outline = _as_polygon(record.outline)
    else:
        outline = orient(shapely.union_all([s.polygon for s in strips]).envelope)
    if record.units != "mm":
        raise ValueError(f"Only layouts in mm are supported, got '{record.units}'")
    validate_strips(strips)
    return SensorLayout(strips, outline, record.units, dict(record.rest_capacitance))


def layout_to_dict(layout: SensorLayout) -> dict[str, Any]:
    """Return the JSON-ready form of a layout"""
    data: dict[str, Any] = {
        "strips": [
            {
                "id": s.id,
                "layer": s.layer.value,
                "polygon": _ring(s.polygon),
                "lead_side": s.lead_side.value,
            }
            for s in layout.strips
        ],
        "outline": _ring(layout.outline),
        "units": layout.units,
    }
    if layout.measured_capacitance:
        data["rest_capacitance"] = dict(layout.measured_capacitance)
    return data


def save_layout(layout: SensorLayout, path: PathOrStr) -> None:
    """Write a layout JSON file"""
    atomic_write_text(Path(path), json.dumps(layout_to_dict(layout), indent=1) + "\n")


def layout_hash(layout: SensorLayout) -> str:
    """Return a content hash that identifies the geometry of a layout"""
    data = layout_to_dict(layout)
    data["strips"] = sorted(data["strips"], key=lambda s: s["id"])
    return sha256_of_data(data)


def grid_layout(
    n_top: int, n_bottom: int, pitch: float = 20.0, width: float = 16.0
) -> SensorLayout:
    """Return a full grid: n_top horizontal strips crossing n_bottom vertical strips.

    Strip ids are zero padded ('T00', 'B00', ...) so that id order is row/column order.
    """
    spans = [(0, n_bottom - 1)] * n_top
    return masked_grid_layout(spans, n_bottom, pitch=pitch, width=width)


def masked_grid_layout(
    row_spans: Sequence[tuple[int, int]],
    n_columns: int,
    pitch: float = 16.0,
    width: float = 12.0,
    warp: tuple[float, float] = (0.0, 0.0),
    segment_length: float = 4.0,
) -> SensorLayout:
    """Return a non-uniform grid where top strip i only spans columns row_spans[i].

    A nonzero warp (amplitudes in mm along x and y) bends the strips smoothly while keeping
    the rectangular outline fixed, which gives the curved look of a hand-drawn layout.
    """
    if not 0.0 < width < pitch:
        raise ValueError(f"Strip width must lie in (0, pitch), got {width}")
    n_rows = len(row_spans)
    size_x, size_y = n_columns * pitch, n_rows * pitch
    margin = 0.5 * (pitch - width)
    digits = max(2, len(str(max(n_rows, n_columns) - 1)))
    strips: list[ElectrodeStrip] = []
    for i, (first, last) in enumerate(row_spans):
        if not 0 <= first <= last < n_columns:
            raise ValueError(f"Row span {first}..{last} outside 0..{n_columns - 1}")
        box = shapely.box(first * pitch, i * pitch + margin, (last + 1) * pitch, i * pitch + margin + width)
        strips.append(ElectrodeStrip(f"T{i:0{digits}d}", Layer.TOP, box, LeadSide.LEFT))
    for j in range(n_columns):
        box = shapely.box(j * pitch + margin, 0.0, j * pitch + margin + width, size_y)
        strips.append(ElectrodeStrip(f"B{j:0{digits}d}", Layer.BOTTOM, box, LeadSide.BOTTOM))
    outline = shapely.box(0.0, 0.0, size_x, size_y)
    if warp != (0.0, 0.0):
        strips = [
            replace(s, polygon=_warp(s.polygon, warp, size_x, size_y, segment_length))
            for s in strips
        ]
    return SensorLayout(tuple(strips), orient(outline))


def _warp(
    polygon: Polygon, amplitude: tuple[float, float], size_x: float, size_y: float, seg: float
) -> Polygon:
    amp_x, amp_y = amplitude

    def bend(coords: Any) -> Any:
        x, y = coords[:, 0].copy(), coords[:, 1].copy()
        coords[:, 0] = x + amp_x * np.sin(math.pi * x / size_x) * np.sin(2 * math.pi * y / size_y)
        coords[:, 1] = y + amp_y * np.sin(2 * math.pi * x / size_x) * np.sin(math.pi * y / size_y)
        return coords

    return orient(shapely.transform(shapely.segmentize(polygon, seg), bend))
