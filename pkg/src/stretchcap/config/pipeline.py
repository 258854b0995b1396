"""The configuration of a pipeline run: one frozen section per stage."""

from typing import Optional

from attributes_doc import attributes_doc
from pydantic import Field
from pydantic.dataclasses import dataclass

from stretchcap.capmodel import EPSILON_0, CapacitorParams
from stretchcap.config.container_base import ConfigContainerBase
from stretchcap.config.section_base import ConfigSectionBase
from stretchcap.deform import DEFAULT_CONSTRAINT_WEIGHT
from stretchcap.mocap import DEFAULT_TAU
from stretchcap.network import PROTOTYPE_HIDDEN_DIMS, TrainingConfig
from stretchcap.readout import Convention, ExtraPolicy, MandatoryPolicy, TimerConfig


@attributes_doc
@dataclass(frozen=True)
class LayoutSection(ConfigSectionBase):
    """Which sensor layout the run uses"""

    path: Optional[str] = None
    """Layout JSON file; relative paths are taken from the working directory"""

    bundled: str = "prototype_92"
    """Layout shipped with the package, used when path is not set"""


@attributes_doc
@dataclass(frozen=True)
class CapacitorSection(ConfigSectionBase):
    """Material of the plate capacitors"""

    epsilon_r: float = Field(default=2.8, gt=0.0)
    """Relative permittivity of the dielectric"""

    d0: float = Field(default=0.13, gt=0.0)
    """Plate separation at rest in mm"""

    def params(self) -> CapacitorParams:
        """Return the parameters of the capacitance model"""
        return CapacitorParams(epsilon_r=self.epsilon_r, epsilon_0=EPSILON_0, d0=self.d0)


@attributes_doc
@dataclass(frozen=True)
class MeshSection(ConfigSectionBase):
    """Triangulation of the layout and marker placement"""

    target_edge_length: float = Field(default=5.0, gt=0.0)
    """Target edge length in mm"""

    min_angle: float = Field(default=20.0, gt=0.0, le=34.0)
    """Smallest triangle angle in degrees"""

    marker_count: int = Field(default=21, ge=3)
    """Number of marker vertices, picked by farthest-point sampling of cell centers"""


@attributes_doc
@dataclass(frozen=True)
class PlanSection(ConfigSectionBase):
    """Measurement plan of the read-out"""

    mandatory: MandatoryPolicy = MandatoryPolicy.PAIRS_AND_SINGLES
    """How the full-rank block is built"""

    extra: ExtraPolicy = ExtraPolicy.SINGLE_AND_PAIRS
    """Which redundant rows are added"""

    convention: Convention = Convention.FARAD
    """Unit of the decoded cell values"""


@attributes_doc
@dataclass(frozen=True)
class TimerSection(ConfigSectionBase):
    """Timer circuit that turns capacitances into frequencies"""

    enabled: bool = True
    """Write and read raw frequency traces"""

    r1: float = Field(default=470e3, gt=0.0)
    """R1 in ohm"""

    r2: float = Field(default=47e3, gt=0.0)
    """R2 in ohm"""

    parasitic: float = Field(default=0.0, ge=0.0)
    """Parasitic capacitance in farads"""

    cycles: int = Field(default=8, ge=1)
    """Periods counted per row"""

    def config(self) -> TimerConfig:
        """Return the timer parameters"""
        return TimerConfig(r1=self.r1, r2=self.r2, parasitic=self.parasitic, cycles=self.cycles)


@attributes_doc
@dataclass(frozen=True)
class SolverSection(ConfigSectionBase):
    """ARAP solver"""

    constraint_weight: float = Field(default=DEFAULT_CONSTRAINT_WEIGHT, gt=0.0)
    """Weight of the positional constraints"""

    iterations: int = Field(default=100, ge=1)
    """Maximal local/global iterations"""

    tolerance: float = Field(default=1e-6, gt=0.0)
    """Relative energy decrease at which the solver stops"""


@attributes_doc
@dataclass(frozen=True)
class LabelingSection(ConfigSectionBase):
    """Labeling of raw marker tracks"""

    tau: float = Field(default=DEFAULT_TAU, gt=0.0)
    """Acceptance threshold in mm on the mean track-to-vertex distance"""

    max_frames: int = Field(default=30, ge=1)
    """Frames of a track that are compared with the proxy"""

    proxy_iterations: int = Field(default=10, ge=1)
    """ARAP iterations per proxy"""

    ambiguity_margin: float = Field(default=2.0, ge=0.0)
    """Initial pairings closer than this to the runner-up are reported"""

    seed_pairs: tuple[tuple[str, int], ...] = ()
    """Three (track label, marker vertex) pairs; taken from truth.json of synthetic runs if empty"""

    edits: Optional[str] = None
    """Edits file replayed before labeling"""

    synthesize_missing: bool = True
    """Fill gaps of discarded frames from the proxy mesh"""


@attributes_doc
@dataclass(frozen=True)
class TrainingSection(ConfigSectionBase):
    """Regressor and its training"""

    hidden_dims: tuple[int, ...] = PROTOTYPE_HIDDEN_DIMS
    """Widths of the hidden blocks"""

    learning_rate: float = Field(default=1e-4, gt=0.0)
    """Adam step size"""

    batch_size: int = Field(default=256, ge=2)
    """Mini-batch size"""

    weight_decay: float = Field(default=1e-5, ge=0.0)
    """λ of the weight penalty"""

    epochs: int = Field(default=200, ge=1)
    """Training epochs"""

    validation_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)
    """Chronologically last part of the training frames used for model selection"""

    test_fraction: float = Field(default=0.2, ge=0.0, lt=1.0)
    """Chronologically last part of the frames held out for evaluation"""

    ridge_alpha: float = Field(default=1e-3, ge=0.0)
    """Regularization of the linear baseline"""

    arm_pair: tuple[int, int] = (0, 1)
    """Marker indices of the line on the arm, for the angle study"""

    hand_pair: tuple[int, int] = (2, 3)
    """Marker indices of the line on the hand, for the angle study"""

    study_bands: tuple[tuple[float, float], ...] = ((0.0, 0.0), (30.0, 50.0), (70.0, 180.0))
    """Angle bands (gamma, beta) in degrees removed from training in the angle study"""

    def config(self, seed: int) -> TrainingConfig:
        """Return the training parameters"""
        return TrainingConfig(
            hidden_dims=self.hidden_dims,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            validation_fraction=self.validation_fraction,
            test_fraction=self.test_fraction,
            ridge_alpha=self.ridge_alpha,
            seed=seed,
        )


@attributes_doc
@dataclass(frozen=True)
class SynthSection(ConfigSectionBase):
    """Synthetic sessions"""

    scenario: str = "wrist"
    """Scenario JSON file, or the name of a bundled scenario"""

    corruption: str = "none"
    """Corruption preset of the marker tracks: 'none' or 'wrist-like'"""

    readout_round_trip: bool = True
    """Pass the trace through the measurement plan and the timer"""

    readout_noise: float = Field(default=0.0, ge=0.0)
    """Noise in farads on every measured row"""


@attributes_doc
@dataclass(frozen=True)
class ReconstructSection(ConfigSectionBase):
    """Frame-by-frame surface reconstruction"""

    iterations: int = Field(default=20, ge=1)
    """ARAP iterations per frame, warm-started from the previous frame"""

    target_rate: float = Field(default=8.0, gt=0.0)
    """Frame rate in Hz the reconstruction is compared against"""


@attributes_doc
@dataclass(frozen=True)
class PipelineConfig(ConfigContainerBase):
    """All parameters of a pipeline run"""

    seed: int = 0
    """Seed of every random choice in the run"""

    output_dir: str = "run"
    """Run directory"""

    layout: LayoutSection = LayoutSection()
    capacitor: CapacitorSection = CapacitorSection()
    mesh: MeshSection = MeshSection()
    plan: PlanSection = PlanSection()
    timer: TimerSection = TimerSection()
    solver: SolverSection = SolverSection()
    labeling: LabelingSection = LabelingSection()
    training: TrainingSection = TrainingSection()
    synth: SynthSection = SynthSection()
    reconstruct: ReconstructSection = ReconstructSection()
