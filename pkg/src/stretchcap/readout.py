"""Time-multiplexed read-out of a sensor array as a linear system.

In one measurement a set of source strips is driven and all other strips are grounded.
Every cell whose plates sit on different sides of that partition contributes its
capacitance, so a measurement is the sum of a subset of the cell capacitances and a whole
plan is a binary matrix M with C_m = M · C_c. Decoding is a least-squares solve through
the pseudoinverse of M.
"""

import json
import math
from collections.abc import Collection, Iterable, Sequence
from dataclasses import dataclass as std_dataclass
from dataclasses import replace
from enum import Enum, unique
from itertools import combinations
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd
from attributes_doc import attributes_doc
from loguru import logger
from pydantic import Field
from pydantic.dataclasses import dataclass

from stretchcap._private.file_operations_utils import atomic_open, atomic_write_text
from stretchcap.exceptions import MalformedCaptureError, RankDeficiencyError
from stretchcap.layout import ElectrodeStrip, Layer, SensorCell
from stretchcap.type_notation_helper import FloatArray, IntArray, PathOrStr

PINV_CUTOFF = 1e-10
"""Singular values below PINV_CUTOFF · σ_max are dropped from the pseudoinverse"""

RANK_TOLERANCE = 1e-8
"""A row is independent when its component outside the span of the others exceeds this fraction"""


@unique
class RowKind(Enum):
    """Role of a row in the measurement plan"""

    MANDATORY = "mandatory"
    EXTRA = "extra"


@unique
class MandatoryPolicy(Enum):
    """How the s mandatory rows are chosen"""

    PAIRS = "pairs"
    """One row per cell, driving its top and bottom strip; fails if these are dependent"""
    PAIRS_AND_SINGLES = "pairs+singles"
    """Independent pair rows, completed to full rank with single-strip rows"""


@unique
class ExtraPolicy(Enum):
    """Which redundant rows are appended for robustness"""

    NONE = "none"
    SINGLE_STRIP = "single"
    PAIRS_SAME_LAYER = "pairs"
    SINGLE_AND_PAIRS = "single+pairs"


@unique
class Convention(Enum):
    """Unit of the cell values a plan decodes"""

    RATIO = "ratio"
    FARAD = "farad"


@attributes_doc
@dataclass(frozen=True)
class TimerConfig:
    """Resistors of the astable 555-timer circuit and the parasitic capacitance of the board"""

    r1: float = Field(default=470e3, gt=0.0)
    """R1 in ohm"""

    r2: float = Field(default=47e3, gt=0.0)
    """R2 in ohm"""

    parasitic: float = Field(default=0.0, ge=0.0)
    """Capacitance in farads that the circuit adds to every reading"""

    cycles: int = Field(default=8, ge=1)
    """Oscillation periods counted per measurement row"""


@std_dataclass(frozen=True, eq=False)
class MeasurementPlan:
    """Measurement matrix, the source strips of every row and the precomputed pseudoinverse."""

    matrix: FloatArray
    row_kind: tuple[RowKind, ...]
    source_sets: tuple[frozenset[str], ...]
    pseudoinverse: FloatArray
    cell_keys: tuple[str, ...]
    layout_hash: str = ""
    convention: Convention = Convention.RATIO

    @property
    def n_rows(self) -> int:
        """Return the number of measurements per frame"""
        return int(self.matrix.shape[0])

    @property
    def n_cells(self) -> int:
        """Return the number of cells s"""
        return int(self.matrix.shape[1])

    @property
    def n_mandatory(self) -> int:
        """Return the number of mandatory rows"""
        return sum(k == RowKind.MANDATORY for k in self.row_kind)

    def mandatory_only(self) -> "MeasurementPlan":
        """Return the plan without its extra rows"""
        keep = [i for i, k in enumerate(self.row_kind) if k == RowKind.MANDATORY]
        return _make_plan(
            self.matrix[keep],
            tuple(self.row_kind[i] for i in keep),
            tuple(self.source_sets[i] for i in keep),
            self.cell_keys,
            self.layout_hash,
            self.convention,
        )


@std_dataclass(frozen=True)
class DecodeResult:
    """Decoded cell values and the least-squares residual norm (per frame for batches)."""

    cells: FloatArray
    residual: Any


@std_dataclass(frozen=True)
class FrameBudget:
    """Time needed to read all rows of a plan once."""

    row_times: FloatArray
    frame_time: float

    @property
    def frame_rate(self) -> float:
        """Return frames per second"""
        return 1.0 / self.frame_time

    def meets(self, target_rate: float) -> bool:
        """Return whether the plan can be read at target_rate frames per second"""
        return self.frame_rate >= target_rate


def _strip_ids(cells: Sequence[SensorCell]) -> set[str]:
    return {c.top_strip for c in cells} | {c.bottom_strip for c in cells}


def cells_for_combination(
    cells: Sequence[SensorCell],
    source_strips: Collection[str],
    strips: Optional[Sequence[ElectrodeStrip]] = None,
) -> frozenset[int]:
    """Return the cells with exactly one plate among the source strips.

    Raises:
        ValueError: if source_strips is empty or names an unknown strip
    """
    if not source_strips:
        raise ValueError("At least one source strip is needed")
    known = {s.id for s in strips} if strips is not None else _strip_ids(cells)
    if unknown := set(source_strips) - known:
        raise ValueError(f"Unknown strip ids {sorted(unknown)}")
    return frozenset(
        c.id for c in cells if (c.top_strip in source_strips) != (c.bottom_strip in source_strips)
    )


def _row(
    cells: Sequence[SensorCell],
    source: Collection[str],
    n_cells: int,
    strips: Optional[Sequence[ElectrodeStrip]] = None,
) -> FloatArray:
    row = np.zeros(n_cells)
    for j in cells_for_combination(cells, source, strips):
        row[j] = 1.0
    return row


class _Basis:
    """Orthonormal basis of the rows accepted so far."""

    def __init__(self, size: int) -> None:
        self.vectors = np.zeros((0, size))

    def residual(self, row: FloatArray) -> FloatArray:
        return row - self.vectors.T @ (self.vectors @ row)

    def try_add(self, row: FloatArray) -> bool:
        norm = float(np.linalg.norm(row))
        if norm == 0.0:
            return False
        rest = self.residual(row)
        # second pass keeps the basis orthogonal to machine precision
        rest = self.residual(rest)
        if np.linalg.norm(rest) <= RANK_TOLERANCE * norm:
            return False
        self.vectors = np.vstack([self.vectors, rest / np.linalg.norm(rest)])
        return True


def _dependent_subset(accepted: FloatArray, row: FloatArray) -> list[int]:
    """Return the accepted rows that combine into row, which must be in their span"""
    if accepted.size == 0:
        return []
    coefficients, *_ = np.linalg.lstsq(accepted.T, row, rcond=None)
    scale = max(1.0, float(np.abs(coefficients).max()))
    return np.flatnonzero(np.abs(coefficients) > 1e-9 * scale).tolist()


def build_mandatory(
    cells: Sequence[SensorCell],
    strips: Sequence[ElectrodeStrip],
    policy: MandatoryPolicy = MandatoryPolicy.PAIRS_AND_SINGLES,
    layout_hash: str = "",
) -> MeasurementPlan:
    """Return a plan of s linearly independent rows, one for every cell.

    Rows are first taken from the top/bottom strip pairs that form the cells, in cell order.
    On some layouts (e.g. when a layer has only one or two strips) these pairs are linearly
    dependent; the default policy then completes the block with single-strip rows.

    Raises:
        ValueError: if there are no cells
        RankDeficiencyError: with policy PAIRS, if the pair rows do not have rank s
    """
    n_cells = len(cells)
    if n_cells == 0:
        raise ValueError("A measurement plan needs at least one cell")
    basis = _Basis(n_cells)
    rows: list[FloatArray] = []
    sources: list[frozenset[str]] = []
    for cell in cells:
        source = frozenset({cell.top_strip, cell.bottom_strip})
        row = _row(cells, source, n_cells, strips)
        if basis.try_add(row):
            rows.append(row)
            sources.append(source)
        elif policy == MandatoryPolicy.PAIRS:
            subset = _dependent_subset(np.array(rows).reshape(-1, n_cells), row)
            raise RankDeficiencyError(
                f"Row of cell {cell.key} depends on rows {subset}; "
                f"the pair rows do not determine all {n_cells} cells",
                subset + [cell.id],
            )
    if len(rows) < n_cells:
        for strip in _sorted_strips(strips):
            if len(rows) == n_cells:
                break
            source = frozenset({strip.id})
            row = _row(cells, source, n_cells, strips)
            if basis.try_add(row):
                rows.append(row)
                sources.append(source)
        logger.debug(f"Completed {n_cells} mandatory rows with single-strip rows")
    if len(rows) < n_cells:
        raise RankDeficiencyError(
            f"Only {len(rows)} independent rows for {n_cells} cells", list(range(len(rows)))
        )
    return _make_plan(
        np.array(rows),
        (RowKind.MANDATORY,) * n_cells,
        tuple(sources),
        tuple(c.key for c in cells),
        layout_hash,
        Convention.RATIO,
    )


def _sorted_strips(strips: Iterable[ElectrodeStrip]) -> list[ElectrodeStrip]:
    return sorted(strips, key=lambda s: (s.layer != Layer.TOP, s.id))


def build_extra(
    plan: MeasurementPlan,
    cells: Sequence[SensorCell],
    strips: Sequence[ElectrodeStrip],
    policy: ExtraPolicy = ExtraPolicy.SINGLE_AND_PAIRS,
) -> MeasurementPlan:
    """Return plan with redundant rows appended, skipping rows it already has."""
    candidates: list[frozenset[str]] = []
    ordered = _sorted_strips(strips)
    if policy in (ExtraPolicy.SINGLE_STRIP, ExtraPolicy.SINGLE_AND_PAIRS):
        candidates.extend(frozenset({s.id}) for s in ordered)
    if policy in (ExtraPolicy.PAIRS_SAME_LAYER, ExtraPolicy.SINGLE_AND_PAIRS):
        for layer in Layer:
            on_layer = [s for s in ordered if s.layer == layer]
            candidates.extend(frozenset({a.id, b.id}) for a, b in combinations(on_layer, 2))

    seen = {r.tobytes() for r in plan.matrix}
    rows = [plan.matrix]
    sources = list(plan.source_sets)
    for source in candidates:
        row = _row(cells, source, plan.n_cells, strips)
        if not row.any() or (key := row.tobytes()) in seen:
            continue
        seen.add(key)
        rows.append(row[None, :])
        sources.append(source)
    n_extra = len(sources) - plan.n_rows
    logger.debug(f"Added {n_extra} extra rows with policy {policy.value}")
    return _make_plan(
        np.vstack(rows),
        plan.row_kind + (RowKind.EXTRA,) * n_extra,
        tuple(sources),
        plan.cell_keys,
        plan.layout_hash,
        plan.convention,
    )


def build_plan(
    cells: Sequence[SensorCell],
    strips: Sequence[ElectrodeStrip],
    mandatory: MandatoryPolicy = MandatoryPolicy.PAIRS_AND_SINGLES,
    extra: ExtraPolicy = ExtraPolicy.SINGLE_AND_PAIRS,
    layout_hash: str = "",
) -> MeasurementPlan:
    """Return the mandatory block of a layout followed by its extra rows"""
    plan = build_mandatory(cells, strips, mandatory, layout_hash)
    return build_extra(plan, cells, strips, extra)


def pseudoinverse(matrix: FloatArray, cutoff: float = PINV_CUTOFF) -> FloatArray:
    """Return the Moore-Penrose pseudoinverse from a truncated SVD"""
    u, sigma, vt = np.linalg.svd(matrix, full_matrices=False)
    keep = sigma > cutoff * sigma[0]
    return (vt[keep].T / sigma[keep]) @ u[:, keep].T


def singular_value_ratio(matrix: FloatArray) -> float:
    """Return σ_min / σ_max, the numerical rank test used for the mandatory block"""
    sigma = np.linalg.svd(matrix, compute_uv=False)
    return float(sigma[-1] / sigma[0]) if sigma[0] > 0.0 else 0.0


def _make_plan(
    matrix: FloatArray,
    row_kind: tuple[RowKind, ...],
    source_sets: tuple[frozenset[str], ...],
    cell_keys: tuple[str, ...],
    layout_hash: str,
    convention: Convention,
) -> MeasurementPlan:
    return MeasurementPlan(
        matrix=matrix,
        row_kind=row_kind,
        source_sets=source_sets,
        pseudoinverse=pseudoinverse(matrix),
        cell_keys=cell_keys,
        layout_hash=layout_hash,
        convention=convention,
    )


def simulate_measurements(
    plan: MeasurementPlan,
    cell_values: FloatArray,
    noise_sigma: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> FloatArray:
    """Return C_m = M · C_c (for one frame, or for each row of a frames × s array).

    Raises:
        ValueError: if the cell count does not match the plan
    """
    values = np.asarray(cell_values, dtype=np.float64)
    if values.shape[-1] != plan.n_cells:
        raise ValueError(f"Expected {plan.n_cells} cell values, got {values.shape[-1]}")
    measurements = values @ plan.matrix.T
    if noise_sigma > 0.0:
        measurements = measurements + noise_sigma * (
            rng or np.random.default_rng()
        ).standard_normal(measurements.shape)
    return measurements


def decode(plan: MeasurementPlan, measurements: FloatArray) -> DecodeResult:
    """Return the least-squares cell values C_c = M⁺ C_m and the residual ‖M Ĉ_c − C_m‖.

    Raises:
        ValueError: for non-finite measurements or a row count that does not match the plan
    """
    values = np.asarray(measurements, dtype=np.float64)
    if values.shape[-1] != plan.n_rows:
        raise ValueError(f"Expected {plan.n_rows} measurements, got {values.shape[-1]}")
    if not np.all(np.isfinite(values)):
        raise ValueError("Measurements must be finite")
    cells = values @ plan.pseudoinverse.T
    residual = np.linalg.norm(cells @ plan.matrix.T - values, axis=-1)
    return DecodeResult(cells, float(residual) if residual.ndim == 0 else residual)


def frequency_to_capacitance(timer: TimerConfig, frequency: Any) -> Any:
    """Return the capacitance in farads behind a timer frequency in Hz.

    An open channel (frequency of the parasitic capacitance alone) reads exactly zero.

    Raises:
        ValueError: for non-positive frequencies, or a negative net capacitance
    """
    freq = np.asarray(frequency, dtype=np.float64)
    if not np.all(freq > 0.0):
        raise ValueError("Frequencies must be > 0")
    gross = 1.0 / (freq * (timer.r1 + 2.0 * timer.r2) * math.log(2.0))
    net = gross - timer.parasitic
    # rounding may leave a tiny negative value for an open channel
    net = np.where(np.abs(net) <= 1e-12 * gross, 0.0, net)
    if np.any(net < 0.0):
        raise ValueError(
            "Capacitance below the parasitic capacitance; the timer is not calibrated"
        )
    return float(net) if net.ndim == 0 else net


def capacitance_to_frequency(timer: TimerConfig, capacitance: Any) -> Any:
    """Return the timer frequency in Hz for a net capacitance in farads"""
    cap = np.asarray(capacitance, dtype=np.float64) + timer.parasitic
    if not np.all(cap > 0.0):
        raise ValueError("Capacitance including parasitic must be > 0")
    freq = 1.0 / (cap * (timer.r1 + 2.0 * timer.r2) * math.log(2.0))
    return float(freq) if freq.ndim == 0 else freq


def estimate_frame_budget(
    plan: MeasurementPlan, timer: TimerConfig, cell_capacitance: Sequence[float]
) -> FrameBudget:
    """Return the time to read one frame, counting timer.cycles periods per row"""
    row_capacitance = plan.matrix @ np.asarray(cell_capacitance, dtype=np.float64)
    row_times = timer.cycles / capacitance_to_frequency(timer, np.maximum(row_capacitance, 0.0))
    return FrameBudget(np.atleast_1d(row_times), float(np.sum(row_times)))


def plan_to_dict(plan: MeasurementPlan) -> dict[str, Any]:
    """Return the JSON-ready form of a plan; rows are listed as cell indices"""
    return {
        "cells": list(plan.cell_keys),
        "layout_hash": plan.layout_hash,
        "convention": plan.convention.value,
        "rows": [
            {
                "kind": kind.value,
                "sources": sorted(source),
                "cells": np.flatnonzero(row).tolist(),
            }
            for kind, source, row in zip(plan.row_kind, plan.source_sets, plan.matrix)
        ],
    }


def plan_from_dict(data: dict[str, Any]) -> MeasurementPlan:
    """Rebuild a plan from plan_to_dict output"""
    keys = tuple(data["cells"])
    matrix = np.zeros((len(data["rows"]), len(keys)))
    for i, row in enumerate(data["rows"]):
        matrix[i, row["cells"]] = 1.0
    return _make_plan(
        matrix,
        tuple(RowKind(r["kind"]) for r in data["rows"]),
        tuple(frozenset(r["sources"]) for r in data["rows"]),
        keys,
        data.get("layout_hash", ""),
        Convention(data.get("convention", Convention.RATIO.value)),
    )


def save_plan(plan: MeasurementPlan, path: PathOrStr) -> None:
    """Write a plan JSON file"""
    atomic_write_text(Path(path), json.dumps(plan_to_dict(plan), indent=1) + "\n")


def load_plan(path: PathOrStr) -> MeasurementPlan:
    """Read a plan JSON file"""
    the_path = Path(path)
    if not the_path.is_file():
        raise FileNotFoundError(f"Plan file {the_path} not found")
    return plan_from_dict(json.loads(the_path.read_text(encoding="utf-8")))


def with_convention(plan: MeasurementPlan, convention: Convention) -> MeasurementPlan:
    """Return the plan marked to decode values in another unit"""
    return replace(plan, convention=convention)


def write_frequency_csv(path: Path, frequencies: FloatArray) -> None:
    """Write a raw timer trace with header frame,row_0_freq_hz,..."""
    n_frames, n_rows = frequencies.shape
    table = pd.DataFrame(frequencies, columns=[f"row_{i}_freq_hz" for i in range(n_rows)])
    table.insert(0, "frame", np.arange(n_frames))
    with atomic_open(path, "w") as fptr:
        table.to_csv(fptr, index=False, float_format="%.17g", lineterminator="\n")


def read_frequency_csv(path: PathOrStr) -> tuple[IntArray, FloatArray]:
    """Return frame numbers and the (frames × rows) frequencies of a raw timer trace.

    Raises:
        MalformedCaptureError: if header or values do not follow the raw trace format
    """
    the_path = Path(path)
    if not the_path.is_file():
        raise FileNotFoundError(f"Raw trace {the_path} not found")
    try:
        table = pd.read_csv(the_path)
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as exc:
        raise MalformedCaptureError(f"Cannot parse {the_path}: {exc}") from exc
    expected = ["frame"] + [f"row_{i}_freq_hz" for i in range(len(table.columns) - 1)]
    if list(table.columns) != expected:
        raise MalformedCaptureError(f"{the_path}: header must be frame,row_0_freq_hz,...", (1,))
    values = table.apply(pd.to_numeric, errors="coerce")
    if (bad := np.flatnonzero(values.isna().any(axis=1).to_numpy())).size:
        raise MalformedCaptureError(
            f"{the_path}: non-numeric values", tuple(int(i) + 2 for i in bad)
        )
    return (
        values["frame"].to_numpy(dtype=np.int64),
        values.iloc[:, 1:].to_numpy(dtype=np.float64),
    )
