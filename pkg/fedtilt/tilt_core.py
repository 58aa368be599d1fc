from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum
from typing import Final, NamedTuple

import numpy as np
import numpy.typing as npt
from loguru import logger
from scipy.special import logsumexp

ParamVector = npt.NDArray[np.float64]

# Tilts smaller than this in magnitude use the t -> 0 limit formulas.
ZERO_TILT_EPS: Final = 1e-9


class Distance(Enum):
    SQUARED_EUCLIDEAN = "squared_euclidean"


@dataclass(frozen=True)
class TiltConfig:
    """The tilt hyperparameters that select FedTilt or one of its special cases.

    Args:
        q: Global tilt applied over client-model distances.
        tau: Client-level tilt applied over class losses.
        lam: Class-level tilt applied over per-example losses.
        mu: Weight of the proximal term tying personalized models to the global model.
        dist: Distance between a client model and the global model.
    """

    q: float = 0.0
    tau: float = 0.0
    lam: float = 0.0
    mu: float = 0.01
    dist: Distance = Distance.SQUARED_EUCLIDEAN

    def __post_init__(self) -> None:
        for name in ("q", "tau", "lam", "mu"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"Tilt parameter {name} must be finite, got {getattr(self, name)!r}")
        if self.mu < 0:
            raise ValueError(f"Proximal weight mu must be non-negative, got {self.mu}")


class LossSample(NamedTuple):
    value: float
    gradient: ParamVector


class TiltedLoss(NamedTuple):
    value: float
    gradient: ParamVector


class ClassTilt(NamedTuple):
    """Tilted loss of one class, as consumed by the client-level tilt."""

    size: int
    value: float
    gradient: ParamVector


def is_zero_tilt(t: float) -> bool:
    return abs(t) < ZERO_TILT_EPS


def _normalized_weights(losses: npt.ArrayLike, weights: npt.ArrayLike | None) -> tuple[np.ndarray, np.ndarray]:
    loss_array = np.asarray(losses, dtype=np.float64).ravel()
    if loss_array.size == 0:
        raise ValueError("empty loss set")
    if weights is None:
        return loss_array, np.full(loss_array.size, 1.0 / loss_array.size)

    weight_array = np.asarray(weights, dtype=np.float64).ravel()
    if weight_array.size != loss_array.size:
        raise ValueError(f"invalid weight: expected {loss_array.size} weights, got {weight_array.size}")
    if not np.all(np.isfinite(weight_array)) or np.any(weight_array <= 0):
        raise ValueError("invalid weight")
    return loss_array, weight_array / weight_array.sum()


def tilted_aggregate(losses: npt.ArrayLike, weights: npt.ArrayLike | None = None, t: float = 0.0) -> float:
    """Weighted t-tilted mean of losses: (1/t) log(sum_i w_i exp(t * l_i)) with normalized weights.

    Args:
        losses: Loss values to aggregate.
        weights: Positive weights, uniform when omitted. They are normalized to sum to one.
        t: Tilt. Positive values approach the max loss, negative values the min loss, zero the weighted mean.

    Returns:
        The tilted loss, always within [min(losses), max(losses)].
    """
    loss_array, weight_array = _normalized_weights(losses, weights)
    if is_zero_tilt(t):
        value = float(weight_array @ loss_array)
    else:
        value = float(logsumexp(t * loss_array, b=weight_array) / t)
    return float(np.clip(value, loss_array.min(), loss_array.max()))


def tilted_gradient_weights(
    losses: npt.ArrayLike, weights: npt.ArrayLike | None = None, t: float = 0.0
) -> npt.NDArray[np.float64]:
    """Coefficients c_i with d(tilted_aggregate)/d(l_i) = c_i; they are non-negative and sum to one."""
    loss_array, weight_array = _normalized_weights(losses, weights)
    if is_zero_tilt(t):
        return weight_array

    exponents = t * loss_array + np.log(weight_array)
    coefficients = np.exp(exponents - logsumexp(exponents))
    return coefficients / coefficients.sum()


def class_tilted_loss(class_losses: Sequence[LossSample], lam: float) -> TiltedLoss:
    """Tilted loss of the examples of one class, uniform weights, tilt lam."""
    if len(class_losses) == 0:
        raise ValueError("empty class shard")
    values = np.array([sample.value for sample in class_losses], dtype=np.float64)
    gradients = np.stack([np.asarray(sample.gradient, dtype=np.float64) for sample in class_losses])
    coefficients = tilted_gradient_weights(values, None, lam)
    return TiltedLoss(tilted_aggregate(values, None, lam), coefficients @ gradients)


def client_tilted_loss(per_class: Sequence[ClassTilt], tau: float) -> TiltedLoss:
    """Two-level tilted loss of a client: tilt tau over class losses weighted by class sizes."""
    if len(per_class) == 0:
        raise ValueError("empty loss set: a client needs at least one class")
    sizes = np.array([entry.size for entry in per_class], dtype=np.float64)
    values = np.array([entry.value for entry in per_class], dtype=np.float64)
    gradients = np.stack([np.asarray(entry.gradient, dtype=np.float64) for entry in per_class])
    coefficients = tilted_gradient_weights(values, sizes, tau)
    return TiltedLoss(tilted_aggregate(values, sizes, tau), coefficients @ gradients)


def two_level_tilt(
    losses: npt.ArrayLike, labels: npt.ArrayLike, tau: float, lam: float
) -> tuple[float, npt.NDArray[np.float64]]:
    """Two-level tilted loss over the classes present in labels, plus per-example gradient coefficients.

    The gradient of the returned value with respect to the model is sum_i coefficients[i] * grad l_i,
    which lets callers run a single weighted backward pass instead of materializing per-example gradients.
    """
    loss_array = np.asarray(losses, dtype=np.float64).ravel()
    label_array = np.asarray(labels).ravel()
    if loss_array.size == 0:
        raise ValueError("empty loss set")
    if label_array.size != loss_array.size:
        raise ValueError(f"Got {loss_array.size} losses but {label_array.size} labels")

    classes = np.unique(label_array)
    class_values = np.empty(classes.size)
    class_sizes = np.empty(classes.size)
    inner = np.empty(loss_array.size)
    for k, label in enumerate(classes):
        members = label_array == label
        class_values[k] = tilted_aggregate(loss_array[members], None, lam)
        class_sizes[k] = members.sum()
        inner[members] = tilted_gradient_weights(loss_array[members], None, lam)

    outer = tilted_gradient_weights(class_values, class_sizes, tau)
    coefficients = inner * outer[np.searchsorted(classes, label_array)]
    return tilted_aggregate(class_values, class_sizes, tau), coefficients


def squared_distance(a: ParamVector, b: ParamVector) -> float:
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(diff @ diff)


def local_objective(v: ParamVector, w: ParamVector, client_tilt: TiltedLoss, mu: float) -> TiltedLoss:
    """Client tilted loss plus the proximal term (mu/2) * ||v - w||^2."""
    v = np.asarray(v, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if v.shape != w.shape:
        raise ValueError(f"Personalized model has {v.size} parameters but the global model has {w.size}")
    if np.shape(client_tilt.gradient) != v.shape:
        raise ValueError(f"Tilted loss gradient has {np.size(client_tilt.gradient)} entries, expected {v.size}")
    diff = v - w
    return TiltedLoss(client_tilt.value + 0.5 * mu * float(diff @ diff), client_tilt.gradient + mu * diff)


def global_tilted_loss(
    client_models: Sequence[ParamVector],
    w: ParamVector,
    q: float,
    dist: Distance = Distance.SQUARED_EUCLIDEAN,
) -> TiltedLoss:
    """q-tilted mean of the distances between client models and w, with its gradient in w."""
    if len(client_models) == 0:
        raise ValueError("empty loss set: no client models to aggregate")
    if dist is not Distance.SQUARED_EUCLIDEAN:
        raise ValueError(f"Unsupported distance {dist!r}")
    w = np.asarray(w, dtype=np.float64)
    models = np.stack([np.asarray(model, dtype=np.float64) for model in client_models])
    if models.shape[1:] != w.shape:
        raise ValueError(f"Client models have shape {models.shape[1:]}, the global model {w.shape}")

    diffs = w - models
    distances = np.einsum("ij,ij->i", diffs, diffs)
    coefficients = tilted_gradient_weights(distances, None, q)
    return TiltedLoss(tilted_aggregate(distances, None, q), 2.0 * (coefficients @ diffs))


class DivergenceError(ArithmeticError):
    """A model vector stopped being finite."""


def ensure_finite(vector: ParamVector, what: str) -> ParamVector:
    if not np.all(np.isfinite(vector)):
        logger.warning(f"Diverged: {what} has {int(np.count_nonzero(~np.isfinite(vector)))} non-finite entries")
        raise DivergenceError(f"{what} contains non-finite entries")
    return vector
