import hashlib
import json
import re
import sys
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Final, Literal, TypedDict, get_args, get_origin

from fedtilt.baselines import BaselineKind, Ditto, FedAvg, FedProx
from fedtilt.data import (
    FederatedDataset,
    GaussianNoise,
    OutlierSpec,
    PixelCorruption,
    gen_synthetic_images,
    gen_toy,
    load_idx,
    partition_noniid,
)
from fedtilt.fed_protocol import RunConfig
from fedtilt.models import ModelKind, ModelSpec
from fedtilt.tilt_core import TiltConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

_CONFIG_KEY = re.compile(r"[a-z_][a-z0-9_]*")

# Same keys as ExperimentConfig, but as a typed dictionary. "lambda" is a keyword, hence the functional form.
ExperimentConfigDict = TypedDict(
    "ExperimentConfigDict",
    {
        "dataset": Literal["toy", "synthetic", "idx"],
        "toy_experiment": int,
        "num_examples": int,
        "num_classes": int,
        "input_dim": int,
        "image_noise": float,
        "classes_per_client": int,
        "train_images": str,
        "train_labels": str,
        "model": Literal["logistic", "softmax", "mlp"],
        "hidden_dims": list[int],
        "l2": float,
        "method": Literal["fedtilt", "fedavg", "fedprox", "ditto"],
        "num_clients": int,
        "participation_fraction": float,
        "batch_size": int,
        "global_rounds": int,
        "client_epochs": int,
        "server_epochs": int,
        "lr_intermediate": float,
        "lr_personal": float,
        "lr_server": float,
        "q": float,
        "tau": float,
        "lambda": float,
        "mu": float,
        "seed": int,
        "outlier": Literal["none", "gaussian", "pixel"],
        "outlier_mean": float,
        "outlier_std": float,
        "outlier_sample_fraction": float,
        "outlier_pixel_fraction": float,
        "outlier_target_class": int,
        "outlier_persistent": bool,
    },
    total=False,
)


def _runtime_type(annotation: Any) -> type:
    origin = get_origin(annotation)
    if origin is Literal:
        return type(get_args(annotation)[0])
    return origin or annotation


_KEY_TYPES: Final = {key: _runtime_type(value) for key, value in ExperimentConfigDict.__annotations__.items()}

_COMMON_DEFAULTS: Final[dict[str, Any]] = {
    "toy_experiment": 1,
    "num_examples": 2000,
    "num_classes": 10,
    "input_dim": 64,
    "image_noise": 0.25,
    "classes_per_client": 2,
    "hidden_dims": [128, 64],
    "l2": 0.0,
    "method": "fedtilt",
    "batch_size": 10,
    "server_epochs": 50,
    "lr_server": 0.1,
    "q": 0.0,
    "tau": 0.0,
    "lambda": 0.0,
    "mu": 0.01,
    "seed": 0,
    "outlier": "none",
    "outlier_mean": 0.0,
    "outlier_std": 0.15,
    "outlier_sample_fraction": 0.3,
    "outlier_pixel_fraction": 0.3,
    "outlier_persistent": True,
}

# The image path is scaled down from 100 clients to 20 clients, 2,000 examples and 20 rounds.
_DATASET_DEFAULTS: Final[dict[str, dict[str, Any]]] = {
    "toy": {
        "model": "logistic",
        "num_clients": 2,
        "participation_fraction": 1.0,
        "global_rounds": 20,
        "client_epochs": 5,
        "lr_intermediate": 0.1,
        "lr_personal": 0.1,
    },
    "synthetic": {
        "model": "mlp",
        "num_clients": 20,
        "participation_fraction": 0.1,
        "global_rounds": 20,
        "client_epochs": 10,
        "lr_intermediate": 0.01,
        "lr_personal": 0.01,
    },
}
_DATASET_DEFAULTS["idx"] = _DATASET_DEFAULTS["synthetic"]

# Tilts of the three toy experiments; the third also injects class-1 outliers every round.
TOY_PRESETS: Final[dict[int, dict[str, Any]]] = {
    1: {"tau": 1.0, "lambda": 1.0},
    2: {"tau": 100.0, "lambda": 10.0},
    3: {
        "tau": 10.0,
        "lambda": -100.0,
        "outlier": "gaussian",
        "outlier_mean": 0.0,
        "outlier_std": 0.15,
        "outlier_sample_fraction": 0.1,
        "outlier_target_class": 0,
        "outlier_persistent": True,
    },
}


class ConfigError(ValueError):
    """A configuration file or override could not be parsed or validated."""


def validate_config_key(key: str) -> None:
    if _CONFIG_KEY.fullmatch(key) is None:
        raise ConfigError(f"Invalid config key: {key!r}")
    if key not in _KEY_TYPES:
        raise ConfigError(f"Unknown config key: {key!r}")


def _coerce(key: str, value: Any) -> Any:
    expected = _KEY_TYPES[key]
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is list:
        integers = isinstance(value, list) and all(type(item) is int for item in value)
        if not integers:
            raise ConfigError(f"Config key {key!r} expects a list of integers, got {value!r}")
        return value
    if not isinstance(value, expected) or (expected is int and isinstance(value, bool)):
        raise ConfigError(f"Config key {key!r} expects {expected.__name__}, got {value!r}")
    return value


def parse_override(override: str) -> tuple[str, Any]:
    """Parse KEY=VALUE where VALUE is a TOML value; anything that is not valid TOML is taken as a string."""
    key, separator, raw = override.partition("=")
    key = key.strip()
    if not separator:
        raise ConfigError(f"Override {override!r} is not of the form KEY=VALUE")
    validate_config_key(key)
    try:
        value = tomllib.loads(f"value = {raw.strip()}")["value"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key, value


def load_config(path: str | Path | None, overrides: Sequence[str] = (), base: Mapping[str, Any] | None = None) -> dict:
    """Merge base values, a flat TOML file and KEY=VALUE overrides, in that order."""
    values: dict[str, Any] = dict(base or {})
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as error:
            raise ConfigError(f"Cannot read config file {path}: {error.strerror}") from error
        try:
            values.update(tomllib.loads(text))
        except tomllib.TOMLDecodeError as error:
            raise ConfigError(f"Cannot parse config file {path}: {error}") from error
    for override in overrides:
        key, value = parse_override(override)
        values[key] = value
    return values


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully resolved experiment: dataset, model, method, run settings and outliers."""

    values: dict[str, Any]

    @classmethod
    def from_config(cls, config: Mapping[str, Any]) -> "ExperimentConfig":
        """Validate a flat mapping and fill in the defaults of its dataset."""
        for key in config:
            validate_config_key(key)
        dataset = config.get("dataset", "synthetic")
        if dataset not in _DATASET_DEFAULTS:
            raise ConfigError(f"Unknown dataset {dataset!r}, expected one of {sorted(_DATASET_DEFAULTS)}")
        values = {**_COMMON_DEFAULTS, **_DATASET_DEFAULTS[dataset], "dataset": dataset}
        values.update({key: _coerce(key, value) for key, value in config.items()})

        if dataset == "idx" and not ("train_images" in values and "train_labels" in values):
            raise ConfigError("The idx dataset needs train_images and train_labels")
        for key, allowed in (
            ("model", ("logistic", "softmax", "mlp")),
            ("method", ("fedtilt", "fedavg", "fedprox", "ditto")),
            ("outlier", ("none", "gaussian", "pixel")),
        ):
            if values[key] not in allowed:
                raise ConfigError(f"Config key {key!r} must be one of {allowed}, got {values[key]!r}")

        experiment = cls(values)
        try:
            experiment.run_config()
            experiment.outlier_spec()
            TiltConfig(q=values["q"], tau=values["tau"], lam=values["lambda"], mu=values["mu"])
        except ValueError as error:
            raise ConfigError(str(error)) from error
        return experiment

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.values, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def tilt(self) -> TiltConfig:
        return TiltConfig(q=self["q"], tau=self["tau"], lam=self["lambda"], mu=self["mu"])

    def run_config(self, workers: int = 1) -> RunConfig:
        return RunConfig(
            num_clients=self["num_clients"],
            participation_fraction=self["participation_fraction"],
            batch_size=self["batch_size"],
            global_rounds=self["global_rounds"],
            client_epochs=self["client_epochs"],
            server_epochs=self["server_epochs"],
            lr_intermediate=self["lr_intermediate"],
            lr_personal=self["lr_personal"],
            lr_server=self["lr_server"],
            tilt=self.tilt(),
            seed=self["seed"],
            workers=workers,
        )

    def outlier_spec(self) -> OutlierSpec | None:
        if self["outlier"] == "none":
            return None
        if self["outlier"] == "gaussian":
            kind: GaussianNoise | PixelCorruption = GaussianNoise(
                mean=self["outlier_mean"],
                std=self["outlier_std"],
                sample_fraction=self["outlier_sample_fraction"],
                target_class=self.values.get("outlier_target_class"),
            )
        else:
            kind = PixelCorruption(
                pixel_fraction=self["outlier_pixel_fraction"], sample_fraction=self["outlier_sample_fraction"]
            )
        return OutlierSpec(kind=kind, persistent=self["outlier_persistent"])

    def baseline(self) -> BaselineKind | None:
        return {
            "fedtilt": None,
            "fedavg": FedAvg(),
            "fedprox": FedProx(self["mu"]),
            "ditto": Ditto(self["mu"]),
        }[self["method"]]

    def build_dataset(self) -> FederatedDataset:
        if self["dataset"] == "toy":
            return gen_toy(self["toy_experiment"], self["seed"])
        if self["dataset"] == "idx":
            pool = load_idx(self["train_images"], self["train_labels"])
            if len(pool) > self["num_examples"]:
                pool = pool.subset(range(self["num_examples"]))
        else:
            pool = gen_synthetic_images(
                self["num_examples"],
                num_classes=self["num_classes"],
                input_dim=self["input_dim"],
                noise=self["image_noise"],
                seed=self["seed"],
            )
        return partition_noniid(
            pool, self["num_clients"], self["classes_per_client"], self["seed"], num_classes=self["num_classes"]
        )

    def model_spec(self, dataset: FederatedDataset) -> ModelSpec:
        kind = ModelKind(self["model"])
        return ModelSpec(
            kind=kind,
            input_dim=dataset.input_dim,
            num_classes=dataset.num_classes,
            hidden_dims=tuple(self["hidden_dims"]) if kind is ModelKind.MLP else (),
            l2=self["l2"],
        )
