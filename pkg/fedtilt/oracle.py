from collections.abc import Callable, Sequence
from typing import Final, NamedTuple

import numpy as np
import numpy.typing as npt

from fedtilt.tilt_core import ParamVector

PL_SLACK: Final = 1e-9
MIN_RATE_POINTS: Final = 10


class LinearRateFit(NamedTuple):
    rate: float
    r_squared: float


def finite_diff_grad(f: Callable[[ParamVector], float], x: npt.ArrayLike, step: float = 1e-6) -> ParamVector:
    """Central-difference gradient (f(x + h e_i) - f(x - h e_i)) / 2h, one coordinate at a time."""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    point = np.array(x, dtype=np.float64, copy=True)
    gradient = np.empty_like(point)
    for i in range(point.size):
        original = point[i]
        point[i] = original + step
        forward = float(f(point))
        point[i] = original - step
        backward = float(f(point))
        point[i] = original
        if not (np.isfinite(forward) and np.isfinite(backward)):
            raise ValueError(f"f is not finite around coordinate {i}")
        gradient[i] = (forward - backward) / (2.0 * step)
    return gradient


def relative_error(analytic: npt.ArrayLike, numeric: npt.ArrayLike) -> float:
    """||analytic - numeric|| / max(||analytic||, ||numeric||, 1)."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1.0))


def fit_linear_rate(gaps: Sequence[float]) -> LinearRateFit:
    """Least-squares fit of log(gap_t) against t; the rate is exp(slope)."""
    gap_array = np.asarray(gaps, dtype=np.float64)
    if gap_array.size < MIN_RATE_POINTS:
        raise ValueError(f"Need at least {MIN_RATE_POINTS} gaps, got {gap_array.size}")
    if np.any(gap_array <= 0) or not np.all(np.isfinite(gap_array)):
        raise ValueError("Gaps must be positive and finite")

    steps = np.arange(gap_array.size, dtype=np.float64)
    log_gaps = np.log(gap_array)
    slope, intercept = np.polyfit(steps, log_gaps, 1)
    residual = float(np.sum((log_gaps - (slope * steps + intercept)) ** 2))
    total = float(np.sum((log_gaps - log_gaps.mean()) ** 2))
    # a constant sequence is fitted exactly by a zero slope
    r_squared = 1.0 - residual / total if total > 0 else 1.0
    return LinearRateFit(rate=float(np.exp(slope)), r_squared=r_squared)


def pl_gap_check(
    f: Callable[[ParamVector], float],
    grad_f: Callable[[ParamVector], ParamVector],
    minimum_value: float,
    points: Sequence[ParamVector],
    mu: float,
) -> bool:
    """Whether 0.5 * ||grad f(x)||^2 >= mu * (f(x) - f*) holds at every point."""
    if mu <= 0:
        raise ValueError(f"mu must be positive, got {mu}")
    for point in points:
        gradient = np.asarray(grad_f(point), dtype=np.float64)
        if 0.5 * float(gradient @ gradient) + PL_SLACK < mu * (f(point) - minimum_value):
            return False
    return True


def gradient_descent_gaps(
    f: Callable[[ParamVector], float],
    grad_f: Callable[[ParamVector], ParamVector],
    x0: npt.ArrayLike,
    step: float,
    iterations: int,
    minimum_value: float,
) -> list[float]:
    """f(x_t) - f* along plain gradient descent, for t = 0, ..., iterations - 1."""
    x = np.array(x0, dtype=np.float64, copy=True)
    gaps = []
    for _ in range(iterations):
        gaps.append(float(f(x)) - minimum_value)
        x = x - step * np.asarray(grad_f(x), dtype=np.float64)
    return gaps
