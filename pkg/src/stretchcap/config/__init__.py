"""Pipeline configuration: frozen sections, loaded from JSON or TOML with includes."""

from stretchcap.config.container_base import ConfigContainerBase
from stretchcap.config.pipeline import (
    CapacitorSection,
    LabelingSection,
    LayoutSection,
    MeshSection,
    PipelineConfig,
    PlanSection,
    ReconstructSection,
    SolverSection,
    SynthSection,
    TimerSection,
    TrainingSection,
)
from stretchcap.config.section_base import ConfigSectionBase, reset_sections

__all__ = [
    "CapacitorSection",
    "ConfigContainerBase",
    "ConfigSectionBase",
    "LabelingSection",
    "LayoutSection",
    "MeshSection",
    "PipelineConfig",
    "PlanSection",
    "ReconstructSection",
    "SolverSection",
    "SynthSection",
    "TimerSection",
    "TrainingSection",
    "reset_sections",
]
