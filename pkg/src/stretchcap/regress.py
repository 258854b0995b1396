"""Regression from cell capacitances to marker positions: datasets, training and evaluation."""

import json
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Protocol, Union

import numpy as np
import pandas as pd
from loguru import logger

from stretchcap._private.file_operations_utils import atomic_open
from stretchcap.capmodel import read_capacitance_csv
from stretchcap.exceptions import LayoutMismatchError
from stretchcap.mocap import LabeledSession
from stretchcap.network import Adam, RegressorModel, TrainingConfig
from stretchcap.type_notation_helper import BoolArray, FloatArray, IntArray, PathOrStr, StrArray

MODEL_FORMAT_VERSION = 1
VARIANCE_FLOOR = 1e-12
SPLITS = ("train", "validation", "test")


class MarkerPredictor(Protocol):  # pylint: disable=too-few-public-methods
    """Anything that maps capacitance vectors to flattened marker positions"""

    def predict(self, inputs: FloatArray) -> FloatArray:
        """Return (K × 3·markers) positions in mm for (K × s) inputs"""


@dataclass(frozen=True, eq=False)
class TrainingSet:
    """Frame-aligned capacitance inputs and local-frame marker targets with split tags."""

    inputs: FloatArray
    targets: FloatArray
    frames: IntArray
    split: StrArray
    """Per row one of 'train', 'validation' or 'test'"""
    marker_vertices: IntArray
    input_mean: FloatArray
    input_std: FloatArray
    """Statistics of the training split; dead channels have the floored std"""
    dead_channels: IntArray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    layout_hash: str = ""

    def __post_init__(self) -> None:
        if len(self.inputs) != len(self.targets) or len(self.inputs) != len(self.split):
            raise ValueError("Inputs, targets and split tags must have the same row count")

    @property
    def n_cells(self) -> int:
        """Return the input dimension s"""
        return int(self.inputs.shape[1])

    @property
    def n_outputs(self) -> int:
        """Return the output dimension 3·markers"""
        return int(self.targets.shape[1])

    def mask(self, split: str) -> BoolArray:
        """Return the rows of a split"""
        if split not in SPLITS:
            raise ValueError(f"Unknown split {split!r}, expected one of {SPLITS}")
        return np.asarray(self.split == split)

    def part(self, split: str) -> tuple[FloatArray, FloatArray]:
        """Return inputs and targets of a split"""
        rows = self.mask(split)
        return self.inputs[rows], self.targets[rows]

    def subset(self, rows: BoolArray) -> "TrainingSet":
        """Return the rows selected by a mask, keeping the normalization statistics"""
        return replace(
            self,
            inputs=self.inputs[rows],
            targets=self.targets[rows],
            frames=self.frames[rows],
            split=self.split[rows],
        )


@dataclass(frozen=True)
class TrainingHistory:
    """Loss curves of one training run."""

    train_loss: tuple[float, ...]
    """Mean batch loss per epoch"""
    validation_loss: tuple[float, ...]
    iteration_loss: tuple[float, ...]
    best_epoch: int
    diverged: bool = False


@dataclass(frozen=True, eq=False)
class ErrorReport:
    """Euclidean marker errors in mm over frames and markers."""

    errors: FloatArray
    """(frames, markers)"""
    mean: float
    std: float
    max: float
    per_frame_max: FloatArray

    @property
    def worst_frame(self) -> int:
        """Return the row with the largest marker error"""
        return int(np.argmax(self.per_frame_max))


@dataclass(frozen=True, eq=False)
class AngleFilterResult:
    """A dataset with the training frames of one angle band removed."""

    dataset: TrainingSet
    retained: int
    angles: FloatArray


def split_tags(n_frames: int, validation_fraction: float, test_fraction: float) -> StrArray:
    """Tag frames chronologically: train, then validation, then test at the end"""
    n_test = int(round(n_frames * test_fraction))
    n_fit = n_frames - n_test
    n_validation = int(round(n_fit * validation_fraction))
    return np.array(["train"] * (n_fit - n_validation) + ["validation"] * n_validation + ["test"] * n_test)


def build_dataset(
    labeled: LabeledSession,
    capacitance: Union[FloatArray, PathOrStr],
    config: Optional[TrainingConfig] = None,
    layout_hash: str = "",
) -> TrainingSet:
    """Pair the non-discarded frames of a labeled session with their capacitance vectors.

    Raises:
        ValueError: if the trace and the session cover different frame counts, or no frame
            remains
    """
    config = config or TrainingConfig()
    if isinstance(capacitance, (str, Path)):
        _, ratios = read_capacitance_csv(capacitance)
    else:
        ratios = np.asarray(capacitance, dtype=np.float64)
    if len(ratios) != labeled.n_frames:
        raise ValueError(
            f"Capacitance trace has {len(ratios)} frames, labeled session has {labeled.n_frames}"
        )
    frames = labeled.kept_frames()
    if frames.size == 0:
        raise ValueError("Every frame of the session is discarded")
    inputs = ratios[frames]
    targets = labeled.marker_positions[frames].reshape(len(frames), -1)
    split = split_tags(len(frames), config.validation_fraction, config.test_fraction)
    train = inputs[split == "train"]
    if len(train) < 2:
        raise ValueError(f"Only {len(train)} training frames; at least 2 are needed")
    mean, var = train.mean(axis=0), train.var(axis=0)
    dead = np.flatnonzero(var < VARIANCE_FLOOR)
    if dead.size:
        logger.warning(f"Input channels {dead.tolist()} are constant over the training frames (dead cells)")
    std = np.sqrt(np.maximum(var, VARIANCE_FLOOR))
    logger.info(
        f"Dataset of {len(frames)} frames: "
        + ", ".join(f"{int(np.sum(split == s))} {s}" for s in SPLITS)
    )
    return TrainingSet(
        inputs, targets, frames, split, labeled.marker_vertices, mean, std, dead.astype(np.int64), layout_hash
    )


def create_model(dataset: TrainingSet, config: Optional[TrainingConfig] = None) -> RegressorModel:
    """Create an untrained regressor sized and normalized for a dataset"""
    config = config or TrainingConfig()
    train_targets = dataset.part("train")[1]
    scale = float(np.std(train_targets - train_targets.mean(axis=0)))
    return RegressorModel(
        [dataset.n_cells, *config.hidden_dims, dataset.n_outputs],
        rng=np.random.default_rng(config.seed),
        input_mean=dataset.input_mean,
        input_std=dataset.input_std,
        target_mean=train_targets.mean(axis=0),
        target_scale=scale if scale > 0.0 else 1.0,
        bn_momentum=config.bn_momentum,
    )


def _batches(n_rows: int, batch_size: int, rng: np.random.Generator) -> list[IntArray]:
    order = rng.permutation(n_rows)
    return np.array_split(order, max(1, n_rows // batch_size))


def train(
    model: RegressorModel, dataset: TrainingSet, config: Optional[TrainingConfig] = None
) -> TrainingHistory:
    """Train the model by Adam and keep the state with the lowest validation loss.

    Without validation frames the state of the last epoch is kept. If the loss becomes
    non-finite, training stops and the state at the start of that epoch is restored.
    """
    config = config or TrainingConfig()
    rng = np.random.default_rng(config.seed + 1)
    x_train, y_train = dataset.part("train")
    if len(x_train) < 2:
        raise ValueError("Training needs at least 2 training frames")
    x = model.normalize_inputs(x_train)
    y = model.normalize_targets(y_train)
    x_val, y_val = dataset.part("validation")
    optimizer = Adam(lr=config.learning_rate)
    train_curve: list[float] = []
    val_curve: list[float] = []
    iteration_curve: list[float] = []
    best_state, best_loss, best_epoch = model.state(), np.inf, 0
    diverged = False
    for epoch in range(1, config.epochs + 1):
        losses = []
        epoch_start = model.state()
        for batch in _batches(len(x), config.batch_size, rng):
            loss, grads, stats = model.loss_and_grads(x[batch], y[batch], config.weight_decay)
            if not np.isfinite(loss):
                diverged = True
                break
            losses.append(loss)
            iteration_curve.append(loss)
            model.update_running_stats(stats)
            optimizer.step(model.params, grads)
            if not all(np.isfinite(p).all() for p in model.params.values()):
                diverged = True
                break
        if diverged:
            logger.error(f"Training diverged in epoch {epoch}; restoring the state at its start")
            model.load_state(epoch_start)
            break
        train_curve.append(float(np.mean(losses)))
        if len(x_val):
            val_loss = mean_squared_error(model, x_val, y_val)
            val_curve.append(val_loss)
            if val_loss < best_loss:
                best_state, best_loss, best_epoch = model.state(), val_loss, epoch
        else:
            best_state, best_epoch = model.state(), epoch
        logger.debug(
            f"Epoch {epoch}: train {train_curve[-1]:.6g}"
            + (f", validation {val_curve[-1]:.6g}" if val_curve else "")
        )
    if not diverged:
        model.load_state(best_state)
    logger.info(f"Trained {len(train_curve)} epochs, best epoch {best_epoch}")
    return TrainingHistory(tuple(train_curve), tuple(val_curve), tuple(iteration_curve), best_epoch, diverged)


def mean_squared_error(model: RegressorModel, inputs: FloatArray, targets: FloatArray) -> float:
    """Return the mean over rows of the summed squared error in the training scale"""
    out = model.forward_normalized(model.normalize_inputs(inputs), train=False)
    return float(np.sum((out - model.normalize_targets(targets)) ** 2) / len(inputs))


class LinearModel:
    """Ridge regression from normalized inputs to targets, solved in closed form."""

    def __init__(self, input_mean: FloatArray, input_std: FloatArray, weights: FloatArray, intercept: FloatArray) -> None:
        self.input_mean = input_mean
        self.input_std = input_std
        self.weights = weights
        self.intercept = intercept

    @classmethod
    def fit(cls, dataset: TrainingSet, alpha: float = 1e-3) -> "LinearModel":
        """Fit on the training and validation frames; the intercept is not regularized"""
        if alpha < 0.0:
            raise ValueError(f"Ridge alpha must be >= 0, got {alpha}")
        rows = ~dataset.mask("test")
        if not rows.any():
            raise ValueError("The dataset has no frames to fit")
        x = (dataset.inputs[rows] - dataset.input_mean) / dataset.input_std
        y = dataset.targets[rows]
        n_rows, n_cols = x.shape
        design = np.vstack(
            [
                np.hstack([x, np.ones((n_rows, 1))]),
                np.hstack([np.sqrt(alpha) * np.eye(n_cols), np.zeros((n_cols, 1))]),
            ]
        )
        rhs = np.vstack([y, np.zeros((n_cols, y.shape[1]))])
        solution = np.linalg.lstsq(design, rhs, rcond=None)[0]
        return cls(dataset.input_mean, dataset.input_std, solution[:-1], solution[-1])

    def predict(self, inputs: FloatArray) -> FloatArray:
        """Return predicted positions (K × 3·markers)"""
        x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        if not np.all(np.isfinite(x)):
            raise ValueError("Inputs must be finite")
        return ((x - self.input_mean) / self.input_std) @ self.weights + self.intercept


def train_linear_baseline(dataset: TrainingSet, alpha: float = 1e-3) -> LinearModel:
    """Return the ridge-regression baseline fitted on a dataset"""
    return LinearModel.fit(dataset, alpha)


class OracleModel:
    """Returns the ground truth of every input row it was built from."""

    def __init__(self, dataset: TrainingSet) -> None:
        self._truth = {
            np.ascontiguousarray(row).tobytes(): target
            for row, target in zip(dataset.inputs, dataset.targets)
        }

    def predict(self, inputs: FloatArray) -> FloatArray:
        """Return the known targets of the inputs"""
        x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        try:
            return np.stack([self._truth[np.ascontiguousarray(row).tobytes()] for row in x])
        except KeyError as exc:
            raise KeyError("The oracle only knows the inputs of its dataset") from exc


def marker_errors(predicted: FloatArray, targets: FloatArray) -> ErrorReport:
    """Aggregate Euclidean marker errors of flattened (K × 3·markers) positions"""
    diff = (np.asarray(predicted) - np.asarray(targets)).reshape(len(targets), -1, 3)
    errors = np.linalg.norm(diff, axis=2)
    if errors.size == 0:
        raise ValueError("No frames to evaluate")
    return ErrorReport(
        errors, float(errors.mean()), float(errors.std()), float(errors.max()), errors.max(axis=1)
    )


def evaluate(model: MarkerPredictor, dataset: TrainingSet, split: str = "test") -> ErrorReport:
    """Return the marker errors of a model on one split"""
    inputs, targets = dataset.part(split)
    return marker_errors(model.predict(inputs), targets)


def wrist_angle(
    positions: FloatArray, arm_pair: tuple[int, int], hand_pair: tuple[int, int]
) -> FloatArray:
    """Return per frame the angle in degrees between the arm and the hand marker lines.

    positions has shape (frames, markers, 3) or is flattened to (frames, 3·markers).
    """
    points = np.asarray(positions).reshape(len(positions), -1, 3)
    arm = points[:, arm_pair[1]] - points[:, arm_pair[0]]
    hand = points[:, hand_pair[1]] - points[:, hand_pair[0]]
    cosine = np.einsum("ij,ij->i", arm, hand) / (
        np.linalg.norm(arm, axis=1) * np.linalg.norm(hand, axis=1)
    )
    return np.degrees(np.arccos(np.clip(cosine, -1.0, 1.0)))


def angle_filter_harness(
    dataset: TrainingSet,
    angle_fn: Callable[[FloatArray], FloatArray],
    gamma: float,
    beta: float,
    min_frames: int = 10,
) -> AngleFilterResult:
    """Remove training and validation frames with an angle strictly between gamma and beta.

    Test frames are kept. A band with gamma >= beta removes nothing.
    """
    angles = angle_fn(dataset.targets)
    fitting = ~dataset.mask("test")
    removed = fitting & (angles > gamma) & (angles < beta)
    filtered = dataset.subset(~removed)
    retained = int(np.sum(fitting & ~removed))
    if retained < min_frames:
        logger.warning(f"Angle band ({gamma}, {beta}) leaves only {retained} training frames")
    logger.info(f"Angle band ({gamma}, {beta}) keeps {retained} of {int(fitting.sum())} training frames")
    return AngleFilterResult(filtered, retained, angles)


def _fit_network(dataset: TrainingSet, config: TrainingConfig) -> MarkerPredictor:
    model = create_model(dataset, config)
    train(model, dataset, config)
    return model


def interpolation_study(
    dataset: TrainingSet,
    angle_fn: Callable[[FloatArray], FloatArray],
    bands: Sequence[tuple[float, float]],
    config: Optional[TrainingConfig] = None,
    fit: Optional[Callable[[TrainingSet, TrainingConfig], MarkerPredictor]] = None,
) -> pd.DataFrame:
    """Train one model per removed angle band and report its test errors.

    Returns one row per band with the band limits, the retained training frames and the
    mean, std and max marker error on the test frames.
    """
    config = config or TrainingConfig()
    fit = fit or _fit_network
    rows = []
    for gamma, beta in bands:
        filtered = angle_filter_harness(dataset, angle_fn, gamma, beta)
        report = evaluate(fit(filtered.dataset, config), filtered.dataset, "test")
        rows.append((gamma, beta, filtered.retained, report.mean, report.std, report.max))
    return pd.DataFrame(rows, columns=["gamma_deg", "beta_deg", "retained", "mean_mm", "std_mm", "max_mm"])


def save_model(
    path: Path, model: RegressorModel, config: TrainingConfig, layout_hash: str, marker_vertices: IntArray
) -> None:
    """Store a regressor as .npz with its metadata"""
    meta = {
        "format_version": MODEL_FORMAT_VERSION,
        "layout_hash": layout_hash,
        "layer_dims": list(model.layer_dims),
        "target_scale": model.target_scale,
        "config": asdict(config),
    }
    with atomic_open(path, "wb") as fptr:
        np.savez(
            fptr,
            meta=np.array(json.dumps(meta, sort_keys=True)),
            input_mean=model.input_mean,
            input_std=model.input_std,
            target_mean=model.target_mean,
            marker_vertices=np.asarray(marker_vertices, dtype=np.int64),
            **model.state(),
        )


def load_model(
    path: PathOrStr, expected_layout_hash: Optional[str] = None
) -> tuple[RegressorModel, TrainingConfig, IntArray, str]:
    """Read a regressor; returns the model, its config, marker vertices and layout hash.

    Raises:
        FileNotFoundError: if the file is missing
        LayoutMismatchError: if the model was trained for another layout
        ValueError: for an unknown format version
    """
    the_path = Path(path)
    if not the_path.is_file():
        raise FileNotFoundError(f"Model file {the_path} not found")
    with np.load(the_path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"Unsupported model format version {meta.get('format_version')}")
        if expected_layout_hash is not None and meta["layout_hash"] != expected_layout_hash:
            raise LayoutMismatchError(expected_layout_hash, meta["layout_hash"], "Model")
        config = TrainingConfig(**{**meta["config"], "hidden_dims": tuple(meta["config"]["hidden_dims"])})
        model = RegressorModel(
            meta["layer_dims"],
            input_mean=data["input_mean"],
            input_std=data["input_std"],
            target_mean=data["target_mean"],
            target_scale=meta["target_scale"],
            bn_momentum=config.bn_momentum,
        )
        model.load_state({key: data[key] for key in data.files})
        return model, config, data["marker_vertices"], meta["layout_hash"]
