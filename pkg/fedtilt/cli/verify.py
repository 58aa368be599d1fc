from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path
from typing import Final, NamedTuple

import numpy as np
from jinja2 import Environment, FileSystemLoader
from loguru import logger
from scipy.optimize import minimize

from fedtilt import baselines, fed_protocol, models, oracle, tilt_core
from fedtilt.data import Shard, gen_toy
from fedtilt.models import Example, ModelKind, ModelSpec
from fedtilt.tilt_core import ClassTilt, ParamVector, TiltConfig

# This template renders a plain text report rather than HTML.
env = Environment(loader=FileSystemLoader(Path(__file__).parent), autoescape=False)  # noqa: S701
template = env.get_template("verify-report.txt")

GRADIENT_TOLERANCE: Final = 1e-5
RELU_GRADIENT_TOLERANCE: Final = 1e-4
REDUCTION_TOLERANCE: Final = 1e-10
GRADIENT_INSTANCES: Final = 100
TILT_INSTANCES: Final = 1000


class Outcome(NamedTuple):
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class Check:
    category: str
    name: str
    run: Callable[[], Outcome]


@dataclass(frozen=True)
class CheckResult:
    category: str
    name: str
    passed: bool
    detail: str


def _worst_gradient_error(
    make_instance: Callable[[np.random.Generator], tuple[Callable[[ParamVector], float], ParamVector, ParamVector]],
    seed: int,
) -> float:
    """Largest relative error between analytic and central-difference gradients over random instances."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(GRADIENT_INSTANCES):
        f, x, analytic = make_instance(rng)
        worst = max(worst, oracle.relative_error(analytic, oracle.finite_diff_grad(f, x)))
    return worst


def _gradient_outcome(error: float, tolerance: float) -> Outcome:
    return Outcome(error < tolerance, f"max relative error {error:.2e}, tolerance {tolerance:.0e}")


def _random_examples(rng: np.random.Generator, spec: ModelSpec, count: int) -> list[Example]:
    return [
        Example(features=rng.normal(size=spec.input_dim), label=int(rng.integers(spec.num_classes)))
        for _ in range(count)
    ]


_LOGISTIC = ModelSpec(kind=ModelKind.LOGISTIC_BINARY, input_dim=2)
_SOFTMAX = ModelSpec(kind=ModelKind.SOFTMAX_LINEAR, input_dim=4, num_classes=3)
_MLP = ModelSpec(kind=ModelKind.MLP, input_dim=4, num_classes=3, hidden_dims=(5, 3))


def _check_class_tilt() -> Outcome:
    def instance(rng: np.random.Generator) -> tuple[Callable[[ParamVector], float], ParamVector, ParamVector]:
        examples = _random_examples(rng, _LOGISTIC, 5)
        lam = float(rng.uniform(-5.0, 5.0))

        def f(params: ParamVector) -> float:
            return tilt_core.class_tilted_loss(models.loss_samples(_LOGISTIC, params, examples), lam).value

        params = rng.normal(size=_LOGISTIC.num_params)
        return f, params, tilt_core.class_tilted_loss(models.loss_samples(_LOGISTIC, params, examples), lam).gradient

    return _gradient_outcome(_worst_gradient_error(instance, seed=1), GRADIENT_TOLERANCE)


def _client_tilt(params: ParamVector, classes: list[list[Example]], tau: float, lam: float) -> tilt_core.TiltedLoss:
    per_class = []
    for examples in classes:
        class_tilt = tilt_core.class_tilted_loss(models.loss_samples(_SOFTMAX, params, examples), lam)
        per_class.append(ClassTilt(len(examples), class_tilt.value, class_tilt.gradient))
    return tilt_core.client_tilted_loss(per_class, tau)


def _check_client_tilt() -> Outcome:
    def instance(rng: np.random.Generator) -> tuple[Callable[[ParamVector], float], ParamVector, ParamVector]:
        classes = [
            [Example(rng.normal(size=_SOFTMAX.input_dim), label) for _ in range(int(rng.integers(1, 5)))]
            for label in range(_SOFTMAX.num_classes)
        ]
        tau, lam = (float(value) for value in rng.uniform(-5.0, 5.0, size=2))
        params = rng.normal(size=_SOFTMAX.num_params)
        return (
            lambda p: _client_tilt(p, classes, tau, lam).value,
            params,
            _client_tilt(params, classes, tau, lam).gradient,
        )

    return _gradient_outcome(_worst_gradient_error(instance, seed=2), GRADIENT_TOLERANCE)


def _check_two_level_tilt() -> Outcome:
    def instance(rng: np.random.Generator) -> tuple[Callable[[ParamVector], float], ParamVector, ParamVector]:
        features = rng.normal(size=(8, _SOFTMAX.input_dim))
        labels = rng.integers(_SOFTMAX.num_classes, size=8)
        tau, lam = (float(value) for value in rng.uniform(-5.0, 5.0, size=2))

        def f(params: ParamVector) -> float:
            losses = models.example_losses(_SOFTMAX, params, features, labels)
            return tilt_core.two_level_tilt(losses, labels, tau, lam)[0]

        params = rng.normal(size=_SOFTMAX.num_params)
        losses = models.example_losses(_SOFTMAX, params, features, labels)
        _, coefficients = tilt_core.two_level_tilt(losses, labels, tau, lam)
        return f, params, models.weighted_loss_grad(_SOFTMAX, params, features, labels, coefficients)

    return _gradient_outcome(_worst_gradient_error(instance, seed=3), GRADIENT_TOLERANCE)


def _check_local_objective() -> Outcome:
    tilt_spec = ModelSpec(kind=ModelKind.LOGISTIC_BINARY, input_dim=2, l2=0.1)

    def instance(rng: np.random.Generator) -> tuple[Callable[[ParamVector], float], ParamVector, ParamVector]:
        shard = Shard(rng.normal(size=(10, 2)), rng.integers(2, size=10))
        tilt = TiltConfig(tau=float(rng.uniform(-3.0, 3.0)), lam=float(rng.uniform(-3.0, 3.0)), mu=0.01)
        w = rng.normal(size=tilt_spec.num_params)
        v = rng.normal(size=tilt_spec.num_params)
        return (
            lambda p: fed_protocol.full_local_objective(tilt_spec, p, w, shard, tilt).value,
            v,
            fed_protocol.full_local_objective(tilt_spec, v, w, shard, tilt).gradient,
        )

    return _gradient_outcome(_worst_gradient_error(instance, seed=4), GRADIENT_TOLERANCE)


def _check_global_tilted_loss() -> Outcome:
    def instance(rng: np.random.Generator) -> tuple[Callable[[ParamVector], float], ParamVector, ParamVector]:
        client_models = list(rng.normal(size=(int(rng.integers(1, 6)), 4)))
        q = float(rng.uniform(-2.0, 2.0))
        w = rng.normal(size=4)
        return (
            lambda x: tilt_core.global_tilted_loss(client_models, x, q).value,
            w,
            tilt_core.global_tilted_loss(client_models, w, q).gradient,
        )

    return _gradient_outcome(_worst_gradient_error(instance, seed=5), GRADIENT_TOLERANCE)


def _model_loss_check(spec: ModelSpec, seed: int, tolerance: float) -> Callable[[], Outcome]:
    def check() -> Outcome:
        def instance(rng: np.random.Generator) -> tuple[Callable[[ParamVector], float], ParamVector, ParamVector]:
            (example,) = _random_examples(rng, spec, 1)
            params = rng.normal(size=spec.num_params)
            return (
                lambda p: models.loss_and_grad(spec, p, example).value,
                params,
                models.loss_and_grad(spec, params, example).gradient,
            )

        return _gradient_outcome(_worst_gradient_error(instance, seed), tolerance)

    return check


def _random_losses(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    size = int(rng.integers(1, 20))
    return rng.uniform(0.0, 10.0, size=size), rng.uniform(0.1, 1.0, size=size)


def _check_tilt_bounds() -> Outcome:
    rng = np.random.default_rng(10)
    for _ in range(TILT_INSTANCES):
        losses, weights = _random_losses(rng)
        for t in (-100.0, -1.0, 0.0, 1.0, 100.0):
            value = tilt_core.tilted_aggregate(losses, weights, t)
            if not losses.min() <= value <= losses.max():
                return Outcome(passed=False, detail=f"t={t}: {value} outside [{losses.min()}, {losses.max()}]")
    return Outcome(passed=True, detail=f"{TILT_INSTANCES} instances, |t| up to 100")


def _check_zero_tilt_continuity() -> Outcome:
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(TILT_INSTANCES):
        losses, weights = _random_losses(rng)
        mean = float(np.average(losses, weights=weights))
        for t in (-1e-8, 1e-8):
            worst = max(worst, abs(tilt_core.tilted_aggregate(losses, weights, t) - mean))
    return Outcome(worst < 1e-6, f"max deviation from the weighted mean {worst:.2e}")


def _check_extreme_tilts() -> Outcome:
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(TILT_INSTANCES):
        losses, weights = _random_losses(rng)
        worst = max(
            worst,
            abs(tilt_core.tilted_aggregate(losses, weights, 1e4) - losses.max()),
            abs(tilt_core.tilted_aggregate(losses, weights, -1e4) - losses.min()),
        )
    return Outcome(worst < 1e-2, f"max distance to min/max {worst:.2e}")


def _check_coefficients() -> Outcome:
    rng = np.random.default_rng(13)
    for _ in range(TILT_INSTANCES):
        losses, weights = _random_losses(rng)
        t = float(rng.uniform(-100.0, 100.0))
        coefficients = tilt_core.tilted_gradient_weights(losses, weights, t)
        if np.any(coefficients < 0) or abs(coefficients.sum() - 1.0) > 1e-12:
            return Outcome(passed=False, detail=f"t={t}: coefficients sum to {coefficients.sum()}")
    stress = tilt_core.tilted_aggregate([0.0, 100.0], None, 100.0)
    if not np.isfinite(stress):
        return Outcome(passed=False, detail="t * max|loss| = 1e4 overflowed")
    return Outcome(passed=True, detail="non-negative, sum to one, no overflow at t * max|loss| = 1e4")


def _reduction_check(prop: int) -> Callable[[], Outcome]:
    def check() -> Outcome:
        dataset = gen_toy(1, seed=0)
        spec = ModelSpec(kind=ModelKind.LOGISTIC_BINARY, input_dim=dataset.input_dim)
        cfg = fed_protocol.RunConfig(
            num_clients=dataset.num_clients,
            participation_fraction=1.0,
            batch_size=max(len(client.train) for client in dataset.clients),
            global_rounds=5,
            client_epochs=2,
            lr_intermediate=0.1,
            lr_personal=0.1,
            tilt=TiltConfig(mu=0.5),
        )
        deviation = baselines.check_reduction(prop, dataset, spec, cfg)
        return Outcome(deviation < REDUCTION_TOLERANCE, f"max deviation {deviation:.2e} over 5 rounds")

    return check


def _check_quadratic_rate() -> Outcome:
    strong_convexity, smoothness = 0.5, 5.0
    eigenvalues = np.linspace(strong_convexity, smoothness, 6)
    x0 = np.random.default_rng(20).normal(size=eigenvalues.size)
    gaps = oracle.gradient_descent_gaps(
        lambda x: 0.5 * float(eigenvalues @ x**2),
        lambda x: eigenvalues * x,
        x0,
        step=1.0 / smoothness,
        iterations=60,
        minimum_value=0.0,
    )
    fit = oracle.fit_linear_rate(gaps)
    bound = 1.0 - strong_convexity / smoothness + 0.02
    return Outcome(fit.rate <= bound, f"rate {fit.rate:.4f}, bound {bound:.4f}")


@dataclass(frozen=True)
class _ConvexInstance:
    """Full-batch local objective of a toy client with an l2-regularized logistic model."""

    spec: ModelSpec
    shard: Shard
    w: ParamVector
    tilt: TiltConfig
    minimum: float

    def value(self, v: ParamVector) -> float:
        return fed_protocol.full_local_objective(self.spec, v, self.w, self.shard, self.tilt).value

    def gradient(self, v: ParamVector) -> ParamVector:
        return fed_protocol.full_local_objective(self.spec, v, self.w, self.shard, self.tilt).gradient

    @property
    def strong_convexity(self) -> float:
        return self.spec.l2 + self.tilt.mu


def _convex_instance() -> _ConvexInstance:
    dataset = gen_toy(1, seed=0)
    spec = ModelSpec(kind=ModelKind.LOGISTIC_BINARY, input_dim=dataset.input_dim, l2=1.0)
    shard = dataset.clients[0].train
    w = np.zeros(spec.num_params)
    tilt = TiltConfig(tau=1.0, lam=1.0, mu=0.01)

    def objective(v: ParamVector) -> tuple[float, ParamVector]:
        loss = fed_protocol.full_local_objective(spec, v, w, shard, tilt)
        return loss.value, loss.gradient

    result = minimize(objective, np.zeros(spec.num_params), jac=True, method="BFGS", options={"gtol": 1e-11})
    return _ConvexInstance(spec=spec, shard=shard, w=w, tilt=tilt, minimum=float(result.fun))


def _check_local_objective_rate() -> Outcome:
    instance = _convex_instance()
    x0 = np.random.default_rng(21).normal(size=instance.spec.num_params)
    gaps = oracle.gradient_descent_gaps(
        instance.value, instance.gradient, x0, step=0.02, iterations=200, minimum_value=instance.minimum
    )
    if any(later > earlier for earlier, later in zip(gaps, gaps[1:])):
        return Outcome(passed=False, detail="local objective increased along gradient descent")
    fit = oracle.fit_linear_rate(gaps)
    return Outcome(fit.rate < 1.0 and fit.r_squared > 0.95, f"rate {fit.rate:.4f}, R^2 {fit.r_squared:.4f}")


def _check_pl_quadratic() -> Outcome:
    mu = 0.3
    points = list(np.random.default_rng(30).normal(size=(100, 5)))
    holds = oracle.pl_gap_check(lambda x: 0.5 * mu * float(x @ x), lambda x: mu * x, 0.0, points, mu)
    return Outcome(holds, "equality case (mu/2)||x||^2")


def _check_pl_local_objective() -> Outcome:
    instance = _convex_instance()
    points = list(np.random.default_rng(31).normal(scale=2.0, size=(100, instance.spec.num_params)))
    holds = oracle.pl_gap_check(
        instance.value, instance.gradient, instance.minimum, points, instance.strong_convexity
    )
    return Outcome(holds, f"100 random points, constant {instance.strong_convexity}")


def _check_step_halving() -> Outcome:
    x = np.random.default_rng(40).normal(size=5)

    def error(step: float) -> float:
        numeric = oracle.finite_diff_grad(lambda p: float(np.sum(np.sin(p))), x, step=step)
        return float(np.max(np.abs(numeric - np.cos(x))))

    ratio = error(1e-2) / error(5e-3)
    return Outcome(3.5 <= ratio <= 4.5, f"error ratio {ratio:.3f} when halving the step")


def _check_planted_rate() -> Outcome:
    fit = oracle.fit_linear_rate([0.7**t for t in range(30)])
    return Outcome(abs(fit.rate - 0.7) < 1e-6 and fit.r_squared > 1 - 1e-9, f"rate {fit.rate:.8f}")


def _check_repeated_run() -> Outcome:
    dataset = gen_toy(1, seed=3)
    spec = ModelSpec(kind=ModelKind.LOGISTIC_BINARY, input_dim=dataset.input_dim)
    cfg = fed_protocol.RunConfig(
        num_clients=2,
        participation_fraction=1.0,
        global_rounds=3,
        client_epochs=1,
        lr_intermediate=0.1,
        lr_personal=0.1,
        tilt=TiltConfig(tau=1.0, lam=1.0),
        seed=3,
    )
    first = fed_protocol.run(dataset, spec, cfg)
    second = fed_protocol.run(dataset, spec, cfg)
    identical = [a.as_row() for a in first.records] == [b.as_row() for b in second.records] and np.array_equal(
        first.w, second.w
    )
    return Outcome(identical, "two runs with seed 3")


CHECKS: Final[tuple[Check, ...]] = (
    Check("gradient", "class tilted loss", _check_class_tilt),
    Check("gradient", "client tilted loss", _check_client_tilt),
    Check("gradient", "two-level batch tilt", _check_two_level_tilt),
    Check("gradient", "local objective", _check_local_objective),
    Check("gradient", "global tilted loss", _check_global_tilted_loss),
    Check("gradient", "logistic loss", _model_loss_check(_LOGISTIC, 6, GRADIENT_TOLERANCE)),
    Check("gradient", "softmax loss", _model_loss_check(_SOFTMAX, 7, GRADIENT_TOLERANCE)),
    Check("gradient", "mlp loss", _model_loss_check(_MLP, 8, RELU_GRADIENT_TOLERANCE)),
    Check("tilt_limits", "min <= tilted <= max", _check_tilt_bounds),
    Check("tilt_limits", "continuity at zero tilt", _check_zero_tilt_continuity),
    Check("tilt_limits", "limits at extreme tilts", _check_extreme_tilts),
    Check("tilt_limits", "gradient coefficients", _check_coefficients),
    Check("reductions", "personalized tied to global equals FedAvg", _reduction_check(1)),
    Check("reductions", "personalized tied to intermediate equals FedProx", _reduction_check(2)),
    Check("reductions", "zero tilts equal Ditto", _reduction_check(3)),
    Check("convergence", "quadratic rate bound", _check_quadratic_rate),
    Check("convergence", "local objective linear rate", _check_local_objective_rate),
    Check("pl_inequality", "quadratic", _check_pl_quadratic),
    Check("pl_inequality", "regularized local objective", _check_pl_local_objective),
    Check("finite_difference", "step halving", _check_step_halving),
    Check("finite_difference", "planted geometric rate", _check_planted_rate),
    Check("determinism", "repeated run", _check_repeated_run),
)


def run_checks(checks: tuple[Check, ...] = CHECKS) -> list[CheckResult]:
    results = []
    for check in checks:
        try:
            outcome = check.run()
        except Exception as error:  # noqa: BLE001
            outcome = Outcome(passed=False, detail=f"{type(error).__name__}: {error}")
        level = "DEBUG" if outcome.passed else "WARNING"
        logger.log(level, f"{check.category}/{check.name}: {'pass' if outcome.passed else 'FAIL'} {outcome.detail}")
        results.append(CheckResult(check.category, check.name, outcome.passed, outcome.detail))
    return results


def render_report(results: list[CheckResult]) -> str:
    categories = list(dict.fromkeys(result.category for result in results))
    failed = [f"{result.category}/{result.name}" for result in results if not result.passed]
    return template.render(
        results=results,
        passed=sum(result.passed for result in results),
        categories=categories,
        failed=failed,
    )
