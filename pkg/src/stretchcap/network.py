"""A fully connected regressor with batch normalization, trained by Adam, in plain numpy.

Every hidden block is Linear → ReLU → BatchNorm; the last layer is linear. Inputs are
normalized per channel and targets by one shared offset and scale before they enter the
network, and predictions are mapped back to millimeters.
"""

import copy
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
from attributes_doc import attributes_doc
from pydantic import Field
from pydantic.dataclasses import dataclass as pydantic_dataclass

from stretchcap.type_notation_helper import FloatArray

BN_EPSILON = 1e-5
PROTOTYPE_HIDDEN_DIMS = (2048, 2048, 2048, 1024)


@attributes_doc
@pydantic_dataclass(frozen=True)
class TrainingConfig:
    """Hyper-parameters of the regressor and its training"""

    hidden_dims: tuple[int, ...] = PROTOTYPE_HIDDEN_DIMS
    """Widths of the hidden blocks"""

    learning_rate: float = Field(default=1e-4, gt=0.0)
    """Adam step size"""

    batch_size: int = Field(default=256, ge=2)
    """Mini-batch size; batch normalization needs at least 2 samples"""

    weight_decay: float = Field(default=1e-5, ge=0.0)
    """λ of the weight penalty λ‖W‖²"""

    epochs: int = Field(default=200, ge=1)
    """Passes over the training split"""

    bn_momentum: float = Field(default=0.1, gt=0.0, le=1.0)
    """Weight of the newest batch in the running batch-norm statistics"""

    validation_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)
    """Chronologically last part of the training frames used for model selection"""

    test_fraction: float = Field(default=0.2, ge=0.0, lt=1.0)
    """Chronologically last part of all frames held out for evaluation"""

    ridge_alpha: float = Field(default=1e-3, ge=0.0)
    """Regularization of the linear baseline"""

    seed: int = 0
    """Seed of initialization and batch shuffling"""


@dataclass
class Adam:
    """Adam with bias-corrected moment estimates, updating parameter arrays in place."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, FloatArray] = field(default_factory=dict)
    v: dict[str, FloatArray] = field(default_factory=dict)

    def step(self, params: dict[str, FloatArray], grads: dict[str, FloatArray]) -> None:
        """Apply one update"""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for key, grad in grads.items():
            if key not in self.m:
                self.m[key] = np.zeros_like(grad)
                self.v[key] = np.zeros_like(grad)
            self.m[key] *= self.beta1
            self.m[key] += (1.0 - self.beta1) * grad
            self.v[key] *= self.beta2
            self.v[key] += (1.0 - self.beta2) * (grad * grad)
            params[key] -= (self.lr / bc1) * self.m[key] / (np.sqrt(self.v[key] / bc2) + self.epsilon)


class RegressorModel:
    """Maps capacitance vectors (K × s) to flattened marker positions (K × 3·markers)."""

    def __init__(  # pylint: disable=too-many-arguments
        self,
        layer_dims: Sequence[int],
        rng: Optional[np.random.Generator] = None,
        input_mean: Optional[FloatArray] = None,
        input_std: Optional[FloatArray] = None,
        target_mean: Optional[FloatArray] = None,
        target_scale: float = 1.0,
        bn_momentum: float = 0.1,
    ) -> None:
        if len(layer_dims) < 2 or min(layer_dims) < 1:
            raise ValueError(f"Layer dimensions must be >= 2 positive sizes, got {list(layer_dims)}")
        self.layer_dims = tuple(int(d) for d in layer_dims)
        n_in, n_out = self.layer_dims[0], self.layer_dims[-1]
        self.input_mean = np.zeros(n_in) if input_mean is None else np.asarray(input_mean, dtype=np.float64)
        self.input_std = np.ones(n_in) if input_std is None else np.asarray(input_std, dtype=np.float64)
        if self.input_mean.shape != (n_in,) or self.input_std.shape != (n_in,) or np.any(self.input_std <= 0.0):
            raise ValueError("Input normalization needs a mean and a positive std per channel")
        self.target_mean = np.zeros(n_out) if target_mean is None else np.asarray(target_mean, dtype=np.float64)
        if not target_scale > 0.0:
            raise ValueError(f"Target scale must be > 0, got {target_scale}")
        self.target_scale = float(target_scale)
        self.bn_momentum = bn_momentum
        self.params: dict[str, FloatArray] = {}
        self.running: dict[str, FloatArray] = {}
        rng = rng or np.random.default_rng(0)
        last = len(self.layer_dims) - 2
        for k, (fan_in, fan_out) in enumerate(zip(self.layer_dims[:-1], self.layer_dims[1:])):
            # He-uniform for ReLU blocks, plain fan-in scaling for the output layer
            bound = np.sqrt(6.0 / fan_in) if k < last else 1.0 / np.sqrt(fan_in)
            self.params[f"W{k}"] = rng.uniform(-bound, bound, (fan_in, fan_out))
            self.params[f"b{k}"] = np.zeros(fan_out)
            if k < last:
                self.params[f"gamma{k}"] = np.ones(fan_out)
                self.params[f"beta{k}"] = np.zeros(fan_out)
                self.running[f"mean{k}"] = np.zeros(fan_out)
                self.running[f"var{k}"] = np.ones(fan_out)

    @property
    def n_blocks(self) -> int:
        """Return the number of Linear → ReLU → BatchNorm blocks"""
        return len(self.layer_dims) - 2

    @property
    def n_inputs(self) -> int:
        """Return the input dimension s"""
        return self.layer_dims[0]

    @property
    def n_outputs(self) -> int:
        """Return the output dimension"""
        return self.layer_dims[-1]

    def normalize_inputs(self, inputs: FloatArray) -> FloatArray:
        """Return inputs as zero-mean unit-variance channels"""
        return (inputs - self.input_mean) / self.input_std

    def normalize_targets(self, targets: FloatArray) -> FloatArray:
        """Return targets in the scale the network is trained in"""
        return (targets - self.target_mean) / self.target_scale

    def forward_normalized(
        self, x: FloatArray, train: bool = False, cache: Optional[list[Any]] = None
    ) -> FloatArray:
        """Run the network on normalized inputs; in train mode batch statistics are used"""
        h = x
        for k in range(self.n_blocks):
            z = h @ self.params[f"W{k}"] + self.params[f"b{k}"]
            a = np.maximum(z, 0.0)
            if train:
                mean, var = a.mean(axis=0), a.var(axis=0)
            else:
                mean, var = self.running[f"mean{k}"], self.running[f"var{k}"]
            inv_std = 1.0 / np.sqrt(var + BN_EPSILON)
            xhat = (a - mean) * inv_std
            if cache is not None:
                cache.append((h, z, xhat, inv_std, mean, var))
            h = self.params[f"gamma{k}"] * xhat + self.params[f"beta{k}"]
        if cache is not None:
            cache.append(h)
        k = self.n_blocks
        return h @ self.params[f"W{k}"] + self.params[f"b{k}"]

    def predict(self, inputs: FloatArray) -> FloatArray:
        """Return predicted marker positions (K × 3·markers) in mm, in inference mode.

        Raises:
            ValueError: for non-finite inputs or the wrong input dimension
        """
        x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        if x.shape[1] != self.n_inputs:
            raise ValueError(f"Expected {self.n_inputs} input channels, got {x.shape[1]}")
        if not np.all(np.isfinite(x)):
            raise ValueError("Inputs must be finite")
        out = self.forward_normalized(self.normalize_inputs(x), train=False)
        return out * self.target_scale + self.target_mean

    def loss_and_grads(
        self, x: FloatArray, y: FloatArray, weight_decay: float
    ) -> tuple[float, dict[str, FloatArray], list[Any]]:
        """Return the batch loss, its gradients and the block statistics (train mode).

        The loss is the batch mean of the squared error summed over outputs, plus
        weight_decay times the squared norm of the weight matrices.
        """
        cache: list[Any] = []
        out = self.forward_normalized(x, train=True, cache=cache)
        batch = len(x)
        diff = out - y
        weights = [self.params[f"W{k}"] for k in range(self.n_blocks + 1)]
        loss = float(np.sum(diff**2) / batch + weight_decay * sum(np.sum(w**2) for w in weights))

        grads: dict[str, FloatArray] = {}
        dout = 2.0 * diff / batch
        k = self.n_blocks
        h = cache[-1]
        grads[f"W{k}"] = h.T @ dout + 2.0 * weight_decay * self.params[f"W{k}"]
        grads[f"b{k}"] = dout.sum(axis=0)
        dh = dout @ self.params[f"W{k}"].T
        for k in reversed(range(self.n_blocks)):
            h_prev, z, xhat, inv_std, _, _ = cache[k]
            grads[f"gamma{k}"] = np.sum(dh * xhat, axis=0)
            grads[f"beta{k}"] = dh.sum(axis=0)
            dxhat = dh * self.params[f"gamma{k}"]
            da = (inv_std / batch) * (
                batch * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0)
            )
            dz = da * (z > 0.0)
            grads[f"W{k}"] = h_prev.T @ dz + 2.0 * weight_decay * self.params[f"W{k}"]
            grads[f"b{k}"] = dz.sum(axis=0)
            dh = dz @ self.params[f"W{k}"].T
        return loss, grads, cache[:-1]

    def update_running_stats(self, block_stats: list[Any]) -> None:
        """Blend the batch statistics of one training step into the running statistics"""
        momentum = self.bn_momentum
        for k, (_, _, _, _, mean, var) in enumerate(block_stats):
            self.running[f"mean{k}"] = (1.0 - momentum) * self.running[f"mean{k}"] + momentum * mean
            self.running[f"var{k}"] = (1.0 - momentum) * self.running[f"var{k}"] + momentum * var

    def state(self) -> dict[str, FloatArray]:
        """Return a copy of all parameters and running statistics"""
        return {**copy.deepcopy(self.params), **{f"running_{k}": v.copy() for k, v in self.running.items()}}

    def load_state(self, state: dict[str, FloatArray]) -> None:
        """Restore parameters and running statistics from state()"""
        for key in self.params:
            self.params[key] = np.array(state[key], dtype=np.float64)
        for key in self.running:
            self.running[key] = np.array(state[f"running_{key}"], dtype=np.float64)

    def weight_norm(self) -> float:
        """Return the squared norm of all weight matrices"""
        return float(sum(np.sum(self.params[f"W{k}"] ** 2) for k in range(self.n_blocks + 1)))


def gradient_check(
    model: RegressorModel,
    inputs: FloatArray,
    targets: FloatArray,
    weight_decay: float = 0.0,
    step: float = 1e-6,
) -> float:
    """Return the relative difference of analytic and central finite-difference gradients.

    Inputs and targets are taken as already normalized; batch normalization runs in train
    mode. The difference is measured over all parameters at once.
    """
    _, analytic, _ = model.loss_and_grads(inputs, targets, weight_decay)
    numeric_parts, analytic_parts = [], []
    for key, param in model.params.items():
        numeric = np.zeros_like(param)
        flat = param.reshape(-1)
        for index in range(flat.size):
            saved = flat[index]
            flat[index] = saved + step
            plus, _, _ = model.loss_and_grads(inputs, targets, weight_decay)
            flat[index] = saved - step
            minus, _, _ = model.loss_and_grads(inputs, targets, weight_decay)
            flat[index] = saved
            numeric.reshape(-1)[index] = (plus - minus) / (2.0 * step)
        numeric_parts.append(numeric.ravel())
        analytic_parts.append(analytic[key].ravel())
    a, n = np.concatenate(analytic_parts), np.concatenate(numeric_parts)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-300))
