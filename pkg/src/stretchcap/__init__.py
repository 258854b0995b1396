"""Simulation and reconstruction for capacitive stretch-sensor arrays."""

from importlib.metadata import version

from loguru import logger
from pydantic import ValidationError

from stretchcap.capmodel import CapacitorParams, forward_capacitances
from stretchcap.config import PipelineConfig, reset_sections
from stretchcap.convenience import config_filepath_from_cli, use_standard_logging
from stretchcap.deform import ArapSolver, PositionalConstraints, RigidTransform, procrustes
from stretchcap.exceptions import (
    DegenerateMeshError,
    LayoutMismatchError,
    MalformedCaptureError,
    MissingArtifactError,
    RankDeficiencyError,
)
from stretchcap.layout import SensorLayout, build_cells, bundled_layout, load_layout
from stretchcap.meshing import SensorMesh, mesh_layout
from stretchcap.readout import MeasurementPlan, build_plan, decode
from stretchcap.type_notation_helper import PathOrStr

LOGGER_NAME = "stretchcap"
logger.disable(LOGGER_NAME)

__version__ = version("stretchcap")


__all__ = [
    "ArapSolver",
    "CapacitorParams",
    "DegenerateMeshError",
    "LayoutMismatchError",
    "LOGGER_NAME",
    "MalformedCaptureError",
    "MeasurementPlan",
    "MissingArtifactError",
    "PathOrStr",
    "PipelineConfig",
    "PositionalConstraints",
    "RankDeficiencyError",
    "RigidTransform",
    "SensorLayout",
    "SensorMesh",
    "ValidationError",
    "build_cells",
    "build_plan",
    "bundled_layout",
    "config_filepath_from_cli",
    "decode",
    "forward_capacitances",
    "load_layout",
    "mesh_layout",
    "procrustes",
    "reset_sections",
    "use_standard_logging",
]
