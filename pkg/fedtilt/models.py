from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum

import numpy as np
import numpy.typing as npt
from scipy.special import logsumexp, softmax

from fedtilt.tilt_core import LossSample, ParamVector


class ModelKind(Enum):
    LOGISTIC_BINARY = "logistic"
    SOFTMAX_LINEAR = "softmax"
    MLP = "mlp"


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a predictive model whose parameters live in one flat vector.

    Args:
        kind: Model family.
        input_dim: Number of input features.
        num_classes: Number of classes. Must be 2 for binary logistic regression.
        hidden_dims: Widths of the hidden ReLU layers, MLP only.
        l2: Weight of an optional (l2/2) * ||params||^2 term added to every per-example loss.
    """

    kind: ModelKind
    input_dim: int
    num_classes: int = 2
    hidden_dims: tuple[int, ...] = ()
    l2: float = 0.0

    def __post_init__(self) -> None:
        if self.input_dim <= 0:
            raise ValueError(f"input_dim must be positive, got {self.input_dim}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.kind is ModelKind.LOGISTIC_BINARY and self.num_classes != 2:
            raise ValueError(f"Binary logistic regression has 2 classes, got {self.num_classes}")
        if self.kind is ModelKind.MLP and not self.hidden_dims:
            raise ValueError("An MLP needs at least one hidden layer")
        if self.kind is not ModelKind.MLP and self.hidden_dims:
            raise ValueError(f"hidden_dims only apply to MLPs, got {self.hidden_dims} for {self.kind.value}")
        if any(width <= 0 for width in self.hidden_dims):
            raise ValueError(f"Hidden layer widths must be positive, got {self.hidden_dims}")
        if self.l2 < 0:
            raise ValueError(f"l2 must be non-negative, got {self.l2}")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) of every linear layer, in parameter order."""
        if self.kind is ModelKind.LOGISTIC_BINARY:
            return [(self.input_dim, 1)]
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def num_params(self) -> int:
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_shapes)


@dataclass(frozen=True)
class Example:
    features: npt.NDArray[np.float64]
    label: int


def _check_params(spec: ModelSpec, params: ParamVector) -> None:
    if np.shape(params) != (spec.num_params,):
        raise ValueError(f"Expected {spec.num_params} parameters for {spec.kind.value}, got shape {np.shape(params)}")


def _check_features(spec: ModelSpec, features: np.ndarray) -> None:
    if features.ndim != 2 or features.shape[1] != spec.input_dim:
        raise ValueError(f"Expected features with {spec.input_dim} columns, got shape {features.shape}")


def _layers(spec: ModelSpec, params: ParamVector) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views (weight, bias) into params; weights are stored row-major as (fan_in, fan_out)."""
    layers = []
    offset = 0
    for fan_in, fan_out in spec.layer_shapes:
        weight = params[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        layers.append((weight, params[offset : offset + fan_out]))
        offset += fan_out
    return layers


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Zeros for linear models; for MLPs, weights uniform in +-1/sqrt(fan_in) and zero biases."""
    params = np.zeros(spec.num_params)
    if spec.kind is not ModelKind.MLP:
        return params

    rng = np.random.default_rng(seed)
    for weight, _ in _layers(spec, params):
        bound = 1.0 / np.sqrt(weight.shape[0])
        weight[...] = rng.uniform(-bound, bound, size=weight.shape)
    return params


def _forward(spec: ModelSpec, params: ParamVector, features: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Class scores of shape (n, num_classes) and the input of every layer."""
    layers = _layers(spec, params)
    activations = [features]
    hidden = features
    for weight, bias in layers[:-1]:
        hidden = np.maximum(hidden @ weight + bias, 0.0)
        activations.append(hidden)
    weight, bias = layers[-1]
    logits = hidden @ weight + bias
    if spec.kind is ModelKind.LOGISTIC_BINARY:
        # class 0 keeps a fixed score of zero, so softmax over [0, z] is the sigmoid of z
        logits = np.column_stack([np.zeros(len(logits)), logits[:, 0]])
    return logits, activations


def class_scores(spec: ModelSpec, params: ParamVector, features: npt.ArrayLike) -> npt.NDArray[np.float64]:
    _check_params(spec, params)
    feature_array = np.atleast_2d(np.asarray(features, dtype=np.float64))
    _check_features(spec, feature_array)
    return _forward(spec, params, feature_array)[0]


def example_losses(
    spec: ModelSpec, params: ParamVector, features: npt.ArrayLike, labels: npt.ArrayLike
) -> npt.NDArray[np.float64]:
    """Cross-entropy of every example (plus the optional l2 term)."""
    logits = class_scores(spec, params, features)
    label_array = np.asarray(labels, dtype=np.int64).ravel()
    if label_array.size != len(logits):
        raise ValueError(f"Got {len(logits)} examples but {label_array.size} labels")
    losses = logsumexp(logits, axis=1) - logits[np.arange(len(logits)), label_array]
    losses = np.maximum(losses, 0.0)
    if spec.l2 > 0:
        losses = losses + 0.5 * spec.l2 * float(params @ params)
    return losses


def weighted_loss_grad(
    spec: ModelSpec,
    params: ParamVector,
    features: npt.ArrayLike,
    labels: npt.ArrayLike,
    coefficients: npt.ArrayLike,
) -> ParamVector:
    """sum_i coefficients[i] * grad l_i(params), computed with a single backward pass."""
    _check_params(spec, params)
    feature_array = np.atleast_2d(np.asarray(features, dtype=np.float64))
    _check_features(spec, feature_array)
    label_array = np.asarray(labels, dtype=np.int64).ravel()
    weights = np.asarray(coefficients, dtype=np.float64).ravel()
    if not label_array.size == weights.size == len(feature_array):
        raise ValueError(
            f"Got {len(feature_array)} examples, {label_array.size} labels and {weights.size} coefficients"
        )

    logits, activations = _forward(spec, params, feature_array)
    delta = softmax(logits, axis=1)
    delta[np.arange(len(delta)), label_array] -= 1.0
    delta *= weights[:, None]
    if spec.kind is ModelKind.LOGISTIC_BINARY:
        delta = delta[:, 1:]

    gradient = np.zeros_like(params)
    grad_layers = _layers(spec, gradient)
    param_layers = _layers(spec, params)
    for index in reversed(range(len(param_layers))):
        grad_weight, grad_bias = grad_layers[index]
        grad_weight[...] = activations[index].T @ delta
        grad_bias[...] = delta.sum(axis=0)
        if index > 0:
            delta = (delta @ param_layers[index][0].T) * (activations[index] > 0)

    if spec.l2 > 0:
        gradient += spec.l2 * weights.sum() * params
    return gradient


def loss_and_grad(spec: ModelSpec, params: ParamVector, example: Example) -> LossSample:
    features = np.asarray(example.features, dtype=np.float64).reshape(1, -1)
    labels = np.array([example.label])
    if not 0 <= example.label < spec.num_classes:
        raise ValueError(f"Label {example.label} is outside [0, {spec.num_classes})")
    value = float(example_losses(spec, params, features, labels)[0])
    return LossSample(value, weighted_loss_grad(spec, params, features, labels, [1.0]))


def loss_samples(spec: ModelSpec, params: ParamVector, examples: Sequence[Example]) -> list[LossSample]:
    return [loss_and_grad(spec, params, example) for example in examples]


def predict_batch(spec: ModelSpec, params: ParamVector, features: npt.ArrayLike) -> npt.NDArray[np.int64]:
    # argmax returns the first maximum, which breaks ties toward the smallest class index
    return np.argmax(class_scores(spec, params, features), axis=1)


def predict(spec: ModelSpec, params: ParamVector, features: npt.ArrayLike) -> int:
    feature_array = np.asarray(features, dtype=np.float64)
    if feature_array.ndim != 1:
        raise ValueError(f"predict takes a single feature vector, got shape {feature_array.shape}")
    return int(predict_batch(spec, params, feature_array.reshape(1, -1))[0])
