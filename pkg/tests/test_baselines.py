from dataclasses import replace

import numpy as np
import pytest

from fedtilt.baselines import (
    Ditto,
    FedAvg,
    FedProx,
    ReductionConfigError,
    check_reduction,
    iterate_baseline_rounds,
    run_baseline,
)
from fedtilt.data import GaussianNoise, OutlierSpec, gen_toy
from fedtilt.fed_protocol import RunConfig
from fedtilt.models import ModelKind, ModelSpec
from fedtilt.tilt_core import TiltConfig

TOY_SPEC = ModelSpec(kind=ModelKind.LOGISTIC_BINARY, input_dim=2)


def _config(**overrides):
    settings = {
        "num_clients": 2,
        "participation_fraction": 1.0,
        "batch_size": 10,
        "global_rounds": 5,
        "client_epochs": 2,
        "lr_intermediate": 0.1,
        "lr_personal": 0.1,
    }
    return RunConfig(**{**settings, **overrides})


def _reduction_config(**overrides):
    return _config(batch_size=200, tilt=TiltConfig(mu=0.5), **overrides)


def test_fedprox_without_proximal_term_is_fedavg():
    dataset = gen_toy(1, seed=0)
    for fedavg, fedprox in zip(
        iterate_baseline_rounds(FedAvg(), dataset, TOY_SPEC, _config()),
        iterate_baseline_rounds(FedProx(0.0), dataset, TOY_SPEC, _config()),
    ):
        np.testing.assert_array_equal(fedavg.w, fedprox.w)


def test_fedavg_personalized_models_are_the_global_model():
    dataset = gen_toy(1, seed=0)
    result = run_baseline(FedAvg(), dataset, TOY_SPEC, _config())
    for v in result.personalized:
        np.testing.assert_array_equal(v, result.w)


def test_ditto_personalized_models_approach_the_global_model_as_mu_grows():
    dataset = gen_toy(2, seed=0)
    distances = []
    for mu in (0.01, 1.0, 100.0):
        # a step size of 0.005 keeps the mu = 100 proximal step stable
        result = run_baseline(Ditto(mu), dataset, TOY_SPEC, _config(lr_personal=0.005))
        distances.append(max(float(np.linalg.norm(v - result.w)) for v in result.personalized))
    assert distances[0] > distances[1] > distances[2]


def test_fedavg_learns_toy_experiment_one():
    dataset = gen_toy(1, seed=0)
    result = run_baseline(FedAvg(), dataset, TOY_SPEC, _config(global_rounds=20, client_epochs=5))
    assert min(result.records[-1].report.per_client_acc) >= 90.0


def test_baselines_accept_outliers():
    dataset = gen_toy(3, seed=0)
    outliers = OutlierSpec(GaussianNoise(sample_fraction=0.1, target_class=0))
    clean = run_baseline(Ditto(0.01), dataset, TOY_SPEC, _config())
    noisy = run_baseline(Ditto(0.01), dataset, TOY_SPEC, _config(), outliers)
    assert not np.array_equal(clean.w, noisy.w)


def test_baseline_runs_are_deterministic():
    dataset = gen_toy(1, seed=2)
    first = run_baseline(FedProx(0.1), dataset, TOY_SPEC, _config(seed=2))
    second = run_baseline(FedProx(0.1), dataset, TOY_SPEC, _config(seed=2))
    assert [record.as_row() for record in first.records] == [record.as_row() for record in second.records]


def test_negative_mu_is_rejected():
    with pytest.raises(ValueError, match="mu"):
        FedProx(-0.1)
    with pytest.raises(ValueError, match="mu"):
        Ditto(-1.0)


@pytest.mark.parametrize("prop", [1, 2, 3])
def test_reductions_match_the_reference_methods(prop):
    dataset = gen_toy(1, seed=0)
    assert check_reduction(prop, dataset, TOY_SPEC, _reduction_config()) < 1e-10


def test_reductions_with_four_clients():
    toy = gen_toy(2, seed=1)
    dataset = replace(toy, clients=toy.clients * 2)
    cfg = _reduction_config(num_clients=4)
    for prop in (1, 2, 3):
        assert check_reduction(prop, dataset, TOY_SPEC, cfg) < 1e-10


def test_reduction_rejects_incomparable_settings():
    dataset = gen_toy(1, seed=0)
    with pytest.raises(ReductionConfigError, match="batch_size") as error:
        check_reduction(1, dataset, TOY_SPEC, _config(participation_fraction=0.5))
    assert any("participation_fraction" in setting for setting in error.value.settings)
    with pytest.raises(ReductionConfigError, match="lr_intermediate"):
        check_reduction(2, dataset, TOY_SPEC, _reduction_config(lr_personal=0.05))


def test_unknown_reduction():
    with pytest.raises(ValueError, match="Unknown reduction"):
        check_reduction(4, gen_toy(1, seed=0), TOY_SPEC, _reduction_config())
