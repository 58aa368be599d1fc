import pytest

from fedtilt.baselines import Ditto, FedAvg, FedProx
from fedtilt.config import (
    TOY_PRESETS,
    ConfigError,
    ExperimentConfig,
    load_config,
    parse_override,
    validate_config_key,
)
from fedtilt.data import GaussianNoise, PixelCorruption
from fedtilt.models import ModelKind


@pytest.mark.parametrize(
    ("override", "expected"),
    [
        ("seed=3", ("seed", 3)),
        ("lambda=-100", ("lambda", -100)),
        ("tau = 0.5", ("tau", 0.5)),
        ("method=fedavg", ("method", "fedavg")),
        ('dataset="toy"', ("dataset", "toy")),
        ("hidden_dims=[32, 16]", ("hidden_dims", [32, 16])),
        ("outlier_persistent=false", ("outlier_persistent", False)),
    ],
)
def test_parse_override(override, expected):
    assert parse_override(override) == expected


@pytest.mark.parametrize("override", ["seed", "Seed=1", "unknown_key=1", "=3"])
def test_invalid_overrides(override):
    with pytest.raises(ConfigError):
        parse_override(override)


def test_validate_config_key():
    validate_config_key("lr_server")
    with pytest.raises(ConfigError, match="Invalid config key"):
        validate_config_key("lr-server")
    with pytest.raises(ConfigError, match="Unknown config key"):
        validate_config_key("learning_rate")


def test_load_config_merges_in_order(tmp_path):
    path = tmp_path / "experiment.toml"
    path.write_text('dataset = "toy"\nseed = 4\nglobal_rounds = 7\n')
    values = load_config(path, ["seed=9"], base={"seed": 1, "tau": 2.0})
    assert values == {"dataset": "toy", "seed": 9, "global_rounds": 7, "tau": 2.0}


def test_missing_config_file_names_the_path(tmp_path):
    path = tmp_path / "missing.toml"
    with pytest.raises(ConfigError, match="missing.toml"):
        load_config(path)


def test_unparsable_config_file(tmp_path):
    path = tmp_path / "broken.toml"
    path.write_text("seed = = 1\n")
    with pytest.raises(ConfigError, match="Cannot parse"):
        load_config(path)


def test_dataset_defaults():
    toy = ExperimentConfig.from_config({"dataset": "toy"})
    assert toy["model"] == "logistic"
    assert toy["num_clients"] == 2
    synthetic = ExperimentConfig.from_config({})
    assert synthetic["dataset"] == "synthetic"
    assert synthetic["num_clients"] == 20
    assert synthetic["batch_size"] == 10
    assert synthetic["mu"] == 0.01


def test_values_are_type_checked():
    assert ExperimentConfig.from_config({"tau": 2})["tau"] == 2.0
    with pytest.raises(ConfigError, match="expects int"):
        ExperimentConfig.from_config({"seed": "three"})
    with pytest.raises(ConfigError, match="expects int"):
        ExperimentConfig.from_config({"seed": True})
    with pytest.raises(ConfigError, match="list of integers"):
        ExperimentConfig.from_config({"hidden_dims": [1.5]})


@pytest.mark.parametrize(
    ("values", "message"),
    [
        ({"dataset": "cifar"}, "Unknown dataset"),
        ({"method": "scaffold"}, "method"),
        ({"dataset": "idx"}, "train_images"),
        ({"participation_fraction": 0.0}, "participation_fraction"),
        ({"mu": -1.0}, "mu"),
        ({"outlier": "gaussian", "outlier_std": 0.0}, "std"),
        ({"unknown": 1}, "Unknown config key"),
    ],
)
def test_invalid_configs(values, message):
    with pytest.raises(ConfigError, match=message):
        ExperimentConfig.from_config(values)


def test_config_hash():
    first = ExperimentConfig.from_config({"dataset": "toy", "seed": 1})
    assert first.config_hash == ExperimentConfig.from_config({"seed": 1, "dataset": "toy"}).config_hash
    assert first.config_hash != ExperimentConfig.from_config({"dataset": "toy", "seed": 2}).config_hash
    assert len(first.config_hash) == 64


def test_run_config():
    experiment = ExperimentConfig.from_config({"dataset": "toy", "lambda": -3.0, "q": 1.0, "global_rounds": 4})
    cfg = experiment.run_config(workers=3)
    assert cfg.global_rounds == 4
    assert cfg.workers == 3
    assert cfg.tilt.lam == -3.0
    assert cfg.tilt.q == 1.0


def test_outlier_specs():
    assert ExperimentConfig.from_config({}).outlier_spec() is None
    gaussian = ExperimentConfig.from_config({"outlier": "gaussian", "outlier_target_class": 0}).outlier_spec()
    assert gaussian.kind == GaussianNoise(mean=0.0, std=0.15, sample_fraction=0.3, target_class=0)
    pixel = ExperimentConfig.from_config({"outlier": "pixel", "outlier_persistent": False}).outlier_spec()
    assert pixel.kind == PixelCorruption(pixel_fraction=0.3, sample_fraction=0.3)
    assert not pixel.persistent


def test_baselines():
    assert ExperimentConfig.from_config({}).baseline() is None
    assert ExperimentConfig.from_config({"method": "fedavg"}).baseline() == FedAvg()
    assert ExperimentConfig.from_config({"method": "fedprox", "mu": 0.5}).baseline() == FedProx(0.5)
    assert ExperimentConfig.from_config({"method": "ditto"}).baseline() == Ditto(0.01)


def test_toy_presets():
    assert TOY_PRESETS[1] == {"tau": 1.0, "lambda": 1.0}
    experiment = ExperimentConfig.from_config({"dataset": "toy", "toy_experiment": 3, **TOY_PRESETS[3]})
    assert experiment["lambda"] == -100.0
    assert experiment.outlier_spec().kind.target_class == 0


def test_build_synthetic_dataset_and_model():
    experiment = ExperimentConfig.from_config(
        {"num_examples": 400, "num_clients": 10, "input_dim": 16, "hidden_dims": [8]}
    )
    dataset = experiment.build_dataset()
    assert dataset.num_clients == 10
    assert dataset.num_classes == 10
    spec = experiment.model_spec(dataset)
    assert spec.kind is ModelKind.MLP
    assert spec.hidden_dims == (8,)
    assert spec.input_dim == 16


def test_linear_models_ignore_hidden_dims():
    experiment = ExperimentConfig.from_config({"dataset": "toy"})
    spec = experiment.model_spec(experiment.build_dataset())
    assert spec.kind is ModelKind.LOGISTIC_BINARY
    assert spec.hidden_dims == ()
