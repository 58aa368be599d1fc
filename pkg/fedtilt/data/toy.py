from dataclasses import dataclass
from typing import Final

import numpy as np

from fedtilt.data.dataset import ClientData, FederatedDataset, Shard


@dataclass(frozen=True)
class GaussianGroupSpec:
    """An isotropic 2-d Gaussian blob of one class.

    Args:
        center: Mean of the blob.
        std_dev: Standard deviation along both axes.
        label: Class index of every point in the blob.
        count_train: Number of training points to sample.
        count_test: Number of test points to sample.
    """

    center: tuple[float, float]
    std_dev: float
    label: int
    count_train: int
    count_test: int

    def __post_init__(self) -> None:
        if self.std_dev <= 0:
            raise ValueError(f"std_dev must be positive, got {self.std_dev}")
        if self.count_train < 0 or self.count_test < 0:
            raise ValueError(f"Counts must be non-negative, got {self.count_train}/{self.count_test}")


def _groups(
    first: tuple[tuple[float, float], float], second: tuple[tuple[float, float], float], balanced: bool
) -> tuple[GaussianGroupSpec, GaussianGroupSpec]:
    # groups 1 and 2 of the setup table are classes 0 and 1
    train, test = ((100, 100), (20, 20)) if balanced else ((150, 50), (30, 10))
    return (
        GaussianGroupSpec(first[0], first[1], 0, train[0], test[0]),
        GaussianGroupSpec(second[0], second[1], 1, train[1], test[1]),
    )


# experiment -> clients -> groups
TOY_SETUP: Final[dict[int, tuple[tuple[GaussianGroupSpec, ...], ...]]] = {
    1: (
        _groups(((0.5, 2.0), 0.5), ((2.5, 1.0), 0.5), balanced=True),
        _groups(((1.0, 2.2), 0.5), ((2.2, 0.8), 0.5), balanced=True),
    ),
    2: (
        _groups(((0.5, 2.0), 0.35), ((2.0, 1.0), 0.25), balanced=False),
        _groups(((0.5, 2.0), 0.35), ((2.5, 1.8), 0.25), balanced=False),
    ),
    3: (
        _groups(((1.0, 2.0), 1.0), ((2.5, 1.0), 0.3), balanced=False),
        _groups(((1.0, 2.0), 1.0), ((2.5, 1.0), 0.3), balanced=False),
    ),
}


def _sample(rng: np.random.Generator, groups: tuple[GaussianGroupSpec, ...], split: str) -> Shard:
    features = []
    labels = []
    for group in groups:
        count = group.count_train if split == "train" else group.count_test
        features.append(rng.normal(loc=group.center, scale=group.std_dev, size=(count, 2)))
        labels.append(np.full(count, group.label))
    return Shard(np.concatenate(features), np.concatenate(labels))


def gen_toy(experiment: int, seed: int) -> FederatedDataset:
    """Two-client binary Gaussian toy data for experiments 1, 2 or 3 of the toy setup table."""
    if experiment not in TOY_SETUP:
        raise ValueError(f"Invalid toy experiment {experiment!r}, expected one of {sorted(TOY_SETUP)}")

    rng = np.random.default_rng([seed, experiment])
    clients = []
    for groups in TOY_SETUP[experiment]:
        train = _sample(rng, groups, "train")
        clients.append(ClientData(train=train, test=_sample(rng, groups, "test")))
    return FederatedDataset(tuple(clients), num_classes=2, input_dim=2)
