import numpy as np
import pytest

from fedtilt.data import gen_toy
from fedtilt.fed_protocol import full_local_objective
from fedtilt.models import ModelKind, ModelSpec
from fedtilt.oracle import (
    finite_diff_grad,
    fit_linear_rate,
    gradient_descent_gaps,
    pl_gap_check,
    relative_error,
)
from fedtilt.tilt_core import TiltConfig


def test_quadratic_gradient():
    x = np.array([0.5, -1.0, 2.0])
    np.testing.assert_allclose(finite_diff_grad(lambda p: 0.5 * float(p @ p), x), x, atol=1e-8)


def test_constant_function_has_zero_gradient():
    np.testing.assert_array_equal(finite_diff_grad(lambda _: 3.0, np.ones(4)), np.zeros(4))


def test_finite_difference_error_is_quadratic_in_the_step():
    x = np.random.default_rng(0).normal(size=5)

    def error(step):
        return float(np.max(np.abs(finite_diff_grad(lambda p: float(np.sum(np.sin(p))), x, step) - np.cos(x))))

    assert 3.5 <= error(1e-2) / error(5e-3) <= 4.5


def test_finite_difference_rejects_bad_input():
    with pytest.raises(ValueError, match="step"):
        finite_diff_grad(lambda p: float(p @ p), np.ones(2), step=0.0)
    with pytest.raises(ValueError, match="not finite"):
        finite_diff_grad(lambda _: np.inf, np.ones(2))


def test_relative_error():
    assert relative_error([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert relative_error([10.0, 0.0], [11.0, 0.0]) == pytest.approx(1 / 11)
    assert relative_error([1e-9], [0.0]) == pytest.approx(1e-9)


def test_geometric_rate():
    fit = fit_linear_rate([0.5**t for t in range(20)])
    assert fit.rate == pytest.approx(0.5, abs=1e-6)
    assert fit.r_squared == pytest.approx(1.0)


def test_constant_rate():
    fit = fit_linear_rate([2.0] * 15)
    assert fit.rate == pytest.approx(1.0)
    assert fit.r_squared == 1.0


@pytest.mark.parametrize("gaps", [[1.0] * 5, [1.0] * 9 + [0.0], [1.0] * 9 + [-1.0]])
def test_invalid_gaps(gaps):
    with pytest.raises(ValueError, match="gaps|Gaps"):
        fit_linear_rate(gaps)


def test_gradient_descent_on_a_quadratic_meets_the_rate_bound():
    strong_convexity, smoothness = 0.5, 5.0
    eigenvalues = np.linspace(strong_convexity, smoothness, 6)
    gaps = gradient_descent_gaps(
        lambda x: 0.5 * float(eigenvalues @ x**2),
        lambda x: eigenvalues * x,
        np.ones(6),
        step=1.0 / smoothness,
        iterations=60,
        minimum_value=0.0,
    )
    assert gaps[0] == pytest.approx(0.5 * eigenvalues.sum())
    assert fit_linear_rate(gaps).rate <= 1.0 - strong_convexity / smoothness + 0.02


def test_pl_holds_with_equality_for_a_scaled_norm():
    mu = 0.3
    points = list(np.random.default_rng(1).normal(size=(50, 4)))
    assert pl_gap_check(lambda x: 0.5 * mu * float(x @ x), lambda x: mu * x, 0.0, points, mu)


def test_pl_fails_on_a_plateau():
    def f(x):
        return float(min(x @ x, 1.0))

    def grad_f(x):
        return 2 * x if x @ x < 1.0 else np.zeros_like(x)

    assert not pl_gap_check(f, grad_f, 0.0, [np.array([3.0, 0.0])], mu=0.5)


def test_pl_needs_a_positive_constant():
    with pytest.raises(ValueError, match="mu"):
        pl_gap_check(lambda x: 0.0, lambda x: x, 0.0, [], mu=0.0)


def test_regularized_local_objective_satisfies_pl():
    dataset = gen_toy(1, seed=0)
    spec = ModelSpec(kind=ModelKind.LOGISTIC_BINARY, input_dim=2, l2=1.0)
    shard = dataset.clients[0].train
    w = np.zeros(3)
    tilt = TiltConfig(tau=1.0, lam=1.0, mu=0.01)

    def f(v):
        return full_local_objective(spec, v, w, shard, tilt).value

    def grad_f(v):
        return full_local_objective(spec, v, w, shard, tilt).gradient

    v = np.zeros(3)
    for _ in range(3000):
        v = v - 0.2 * grad_f(v)
    points = list(np.random.default_rng(2).normal(scale=2.0, size=(100, 3)))
    assert pl_gap_check(f, grad_f, f(v), points, mu=spec.l2 + tilt.mu)
