from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import numpy.typing as npt

from fedtilt.models import Example


@dataclass(frozen=True, eq=False)
class Shard:
    """An immutable set of labelled examples stored as a feature matrix and a label vector."""

    features: npt.NDArray[np.float64]
    labels: npt.NDArray[np.int64]

    def __post_init__(self) -> None:
        features = np.array(self.features, dtype=np.float64, copy=True)
        labels = np.array(self.labels, dtype=np.int64, copy=True).ravel()
        if features.ndim == 1 and features.size == 0:
            features = features.reshape(0, 0)
        if features.ndim != 2:
            raise ValueError(f"Features must be a 2-d matrix, got shape {features.shape}")
        if len(features) != len(labels):
            raise ValueError(f"Got {len(features)} feature rows but {len(labels)} labels")
        if not np.all(np.isfinite(features)):
            raise ValueError("Features must be finite")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_examples(cls, examples: Iterable[Example], input_dim: int) -> "Shard":
        examples = list(examples)
        if not examples:
            return cls(np.empty((0, input_dim)), np.empty(0, dtype=np.int64))
        return cls(
            np.stack([np.asarray(example.features, dtype=np.float64) for example in examples]),
            np.array([example.label for example in examples], dtype=np.int64),
        )

    @classmethod
    def concat(cls, shards: Sequence["Shard"]) -> "Shard":
        if not shards:
            raise ValueError("Cannot concatenate an empty list of shards")
        return cls(
            np.concatenate([shard.features for shard in shards]), np.concatenate([shard.labels for shard in shards])
        )

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[Example]:
        for features, label in zip(self.features, self.labels):
            yield Example(features, int(label))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Shard):
            return NotImplemented
        return np.array_equal(self.features, other.features) and np.array_equal(self.labels, other.labels)

    __hash__ = None  # type: ignore[assignment]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: npt.ArrayLike) -> "Shard":
        index_array = np.asarray(indices, dtype=np.int64)
        return Shard(self.features[index_array], self.labels[index_array])

    def classes(self) -> npt.NDArray[np.int64]:
        return np.unique(self.labels)


@dataclass(frozen=True)
class ClientData:
    train: Shard
    test: Shard


@dataclass(frozen=True)
class FederatedDataset:
    """Per-client train and test shards.

    Args:
        clients: One entry per client, indexed by client id.
        num_classes: Number of classes shared by every client.
        input_dim: Number of features per example.
    """

    clients: tuple[ClientData, ...]
    num_classes: int
    input_dim: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "clients", tuple(self.clients))
        if not self.clients:
            raise ValueError("A federated dataset needs at least one client")
        for client_id, client in enumerate(self.clients):
            for split, shard in (("train", client.train), ("test", client.test)):
                if len(shard) == 0:
                    raise ValueError(f"Client {client_id} has an empty {split} shard")
                if shard.input_dim != self.input_dim:
                    raise ValueError(
                        f"Client {client_id} {split} shard has {shard.input_dim} features, expected {self.input_dim}"
                    )
                if shard.labels.min() < 0 or shard.labels.max() >= self.num_classes:
                    raise ValueError(f"Client {client_id} {split} shard has labels outside [0, {self.num_classes})")

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    @cached_property
    def pooled_test(self) -> Shard:
        return Shard.concat([client.test for client in self.clients])
