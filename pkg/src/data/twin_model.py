"""Twin model: parameter vector, regression predictor, loss and SGD step.

Two architectures are supported. ``linear`` is an affine map of the lag
window (optionally bias-free) and ``mlp`` is a single hidden tanh layer
followed by a linear read-out. All functions here are pure: they never mutate
their inputs and return new objects.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..core.errors import InvalidInput


class ModelArch(Enum):
    """Supported twin model families."""
    LINEAR = "linear"
    MLP = "mlp"


def parameter_count(arch: ModelArch, input_dim: int, hidden: int = 0, bias: bool = True) -> int:
    """Number of parameters implied by an architecture.

    Args:
        arch: Model family
        input_dim: Length of the feature window
        hidden: Hidden width (mlp only)
        bias: Whether the linear model carries an intercept

    Returns:
        Parameter vector length d
    """
    arch = ModelArch(arch)
    if input_dim <= 0:
        raise InvalidInput(f"input_dim must be positive, got: {input_dim}")
    if arch is ModelArch.LINEAR:
        return input_dim + (1 if bias else 0)
    if hidden <= 0:
        raise InvalidInput(f"mlp hidden width must be positive, got: {hidden}")
    return hidden * input_dim + hidden + hidden + 1


@dataclass
class TwinModel:
    """Flat parameter vector of a small regression model."""
    params: np.ndarray
    arch: ModelArch = ModelArch.LINEAR
    input_dim: int = 1
    hidden: int = 0
    bias: bool = True
    version: int = 0

    def __post_init__(self):
        self.arch = ModelArch(self.arch)
        self.params = np.array(self.params, dtype=np.float64).reshape(-1)
        expected = parameter_count(self.arch, self.input_dim, self.hidden, self.bias)
        if self.params.shape[0] != expected:
            raise InvalidInput(
                f"{self.arch.value} model with input_dim={self.input_dim} needs "
                f"{expected} parameters, got: {self.params.shape[0]}"
            )
        if not np.all(np.isfinite(self.params)):
            raise InvalidInput("Model parameters must be finite")

    @property
    def dimension(self) -> int:
        return int(self.params.shape[0])

    def with_params(self, params: np.ndarray) -> 'TwinModel':
        """Return a copy carrying new parameters and a bumped version."""
        return TwinModel(
            params=params,
            arch=self.arch,
            input_dim=self.input_dim,
            hidden=self.hidden,
            bias=self.bias,
            version=self.version + 1,
        )

    def copy(self) -> 'TwinModel':
        return TwinModel(self.params.copy(), self.arch, self.input_dim, self.hidden, self.bias, self.version)

    def same_shape(self, other: 'TwinModel') -> bool:
        return (
            self.arch is other.arch
            and self.input_dim == other.input_dim
            and self.hidden == other.hidden
            and self.bias == other.bias
        )

    def spec(self) -> dict:
        """Architecture description used by on-disk formats."""
        return {
            'arch': self.arch.value,
            'input_dim': self.input_dim,
            'hidden': self.hidden,
            'bias': self.bias,
            'd': self.dimension,
        }


@dataclass
class TrafficSample:
    """One lag window and the reading that follows it."""
    features: np.ndarray
    label: float
    sensor_id: int = 0
    time_index: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64).reshape(-1)
        self.label = float(self.label)
        if not np.isfinite(self.label):
            raise InvalidInput("Sample label must be finite")
        if self.time_index < 0:
            raise InvalidInput(f"time_index cannot be negative, got: {self.time_index}")


@dataclass
class SampleBatch:
    """Column-stacked samples; the form the numerical kernels work on."""
    features: np.ndarray
    labels: np.ndarray
    sensor_id: int = 0
    time_indices: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features.reshape(-1, 1)
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if self.features.shape[0] != self.labels.shape[0]:
            raise InvalidInput(
                f"Feature rows ({self.features.shape[0]}) and labels ({self.labels.shape[0]}) differ"
            )
        if self.time_indices is None:
            self.time_indices = np.arange(self.labels.shape[0])

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices: np.ndarray) -> 'SampleBatch':
        return SampleBatch(self.features[indices], self.labels[indices], self.sensor_id, self.time_indices[indices])

    def samples(self) -> List[TrafficSample]:
        return [
            TrafficSample(self.features[i], self.labels[i], self.sensor_id, int(self.time_indices[i]))
            for i in range(len(self))
        ]

    @classmethod
    def from_samples(cls, samples: Sequence[TrafficSample]) -> 'SampleBatch':
        if not samples:
            raise InvalidInput("Batch cannot be empty")
        features = np.vstack([s.features for s in samples])
        labels = np.array([s.label for s in samples])
        times = np.array([s.time_index for s in samples])
        return cls(features, labels, samples[0].sensor_id, times)

    @classmethod
    def concat(cls, batches: Iterable['SampleBatch']) -> 'SampleBatch':
        batches = list(batches)
        if not batches:
            raise InvalidInput("Nothing to concatenate")
        return cls(
            np.vstack([b.features for b in batches]),
            np.concatenate([b.labels for b in batches]),
            batches[0].sensor_id,
            np.concatenate([b.time_indices for b in batches]),
        )


@dataclass
class Gradient:
    """Gradient of the loss with respect to the parameter vector."""
    values: np.ndarray
    clip_threshold_applied: Optional[float] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


BatchLike = Union[SampleBatch, Sequence[TrafficSample]]


def init_model(
    arch: ModelArch,
    input_dim: int,
    rng: np.random.Generator,
    hidden: int = 0,
    bias: bool = True,
    scale: float = 0.1,
) -> TwinModel:
    """Draw an initial model from a seeded generator.

    Linear models start at zero; MLP weights are scaled normal draws so that
    hidden units are not symmetric.
    """
    arch = ModelArch(arch)
    d = parameter_count(arch, input_dim, hidden, bias)
    if arch is ModelArch.LINEAR:
        params = np.zeros(d)
    else:
        params = np.zeros(d)
        n_w1 = hidden * input_dim
        params[:n_w1] = rng.normal(0.0, 1.0 / np.sqrt(input_dim), size=n_w1)
        params[n_w1 + hidden:n_w1 + 2 * hidden] = rng.normal(0.0, scale, size=hidden)
    return TwinModel(params, arch, input_dim, hidden if arch is ModelArch.MLP else 0, bias)


def _as_batch(batch: BatchLike) -> SampleBatch:
    if isinstance(batch, SampleBatch):
        if len(batch) == 0:
            raise InvalidInput("Batch cannot be empty")
        return batch
    return SampleBatch.from_samples(list(batch))


def _unpack_mlp(model: TwinModel) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    h, n = model.hidden, model.input_dim
    p = model.params
    w1 = p[:h * n].reshape(h, n)
    b1 = p[h * n:h * n + h]
    w2 = p[h * n + h:h * n + 2 * h]
    b2 = p[-1]
    return w1, b1, w2, b2


def predict_batch(model: TwinModel, features: np.ndarray) -> np.ndarray:
    """Vectorised predictions for a feature matrix (rows are windows)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[1] != model.input_dim:
        raise InvalidInput(f"Expected {model.input_dim} features, got: {x.shape[1]}")
    if model.arch is ModelArch.LINEAR:
        weights = model.params[:model.input_dim]
        out = x @ weights
        if model.bias:
            out = out + model.params[-1]
        return out
    w1, b1, w2, b2 = _unpack_mlp(model)
    return np.tanh(x @ w1.T + b1) @ w2 + b2


def predict(model: TwinModel, features: np.ndarray) -> float:
    """Prediction g(a, w) for a single lag window.

    Raises:
        InvalidInput: If the window length differs from the model input
    """
    x = np.asarray(features, dtype=np.float64).reshape(-1)
    if x.shape[0] != model.input_dim:
        raise InvalidInput(f"Expected {model.input_dim} features, got: {x.shape[0]}")
    return float(predict_batch(model, x.reshape(1, -1))[0])


def loss(model: TwinModel, batch: BatchLike) -> float:
    """Mean squared prediction error over a non-empty batch."""
    data = _as_batch(batch)
    residual = predict_batch(model, data.features) - data.labels
    return float(np.mean(residual * residual))


def gradient(model: TwinModel, batch: BatchLike) -> Gradient:
    """Analytic gradient of the mean squared error."""
    data = _as_batch(batch)
    x, y = data.features, data.labels
    if x.shape[1] != model.input_dim:
        raise InvalidInput(f"Expected {model.input_dim} features, got: {x.shape[1]}")
    m = x.shape[0]

    if model.arch is ModelArch.LINEAR:
        residual = predict_batch(model, x) - y
        scaled = (2.0 / m) * residual
        grad_w = x.T @ scaled
        if model.bias:
            return Gradient(np.concatenate([grad_w, [scaled.sum()]]))
        return Gradient(grad_w)

    w1, b1, w2, b2 = _unpack_mlp(model)
    hidden = np.tanh(x @ w1.T + b1)
    residual = hidden @ w2 + b2 - y
    scaled = (2.0 / m) * residual
    grad_w2 = hidden.T @ scaled
    grad_b2 = scaled.sum()
    d_hidden = np.outer(scaled, w2) * (1.0 - hidden * hidden)
    grad_w1 = d_hidden.T @ x
    grad_b1 = d_hidden.sum(axis=0)
    return Gradient(np.concatenate([grad_w1.reshape(-1), grad_b1, grad_w2, [grad_b2]]))


def clip(g: Gradient, threshold: float) -> Gradient:
    """Rescale a gradient so its L2 norm does not exceed ``threshold``."""
    if threshold <= 0:
        raise InvalidInput(f"Clip threshold must be positive, got: {threshold}")
    norm = g.norm
    if norm <= threshold:
        return Gradient(g.values.copy(), threshold)
    return Gradient(g.values * (threshold / norm), threshold)


def sgd_step(model: TwinModel, g: Gradient, eta: float) -> TwinModel:
    """One plain gradient step ``w - eta * g``."""
    if g.values.shape[0] != model.dimension:
        raise InvalidInput(f"Gradient length {g.values.shape[0]} does not match model dimension {model.dimension}")
    if eta < 0:
        raise InvalidInput(f"Learning rate cannot be negative, got: {eta}")
    updated = model.params - eta * g.values
    if not np.all(np.isfinite(updated)):
        raise InvalidInput("SGD step produced non-finite parameters; lower the learning rate")
    return model.with_params(updated)
