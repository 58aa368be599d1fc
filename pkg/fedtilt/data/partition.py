import numpy as np
from loguru import logger

from fedtilt.data.dataset import ClientData, FederatedDataset, Shard


class InsufficientClassDataError(ValueError):
    def __init__(self, label: int, needed: int, available: int) -> None:
        super().__init__(f"Class {label} is starved: its clients need at least {needed} examples, got {available}")
        self.label = label


def assign_classes(num_classes: int, num_clients: int, classes_per_client: int, seed: int) -> list[list[int]]:
    """Round-robin class assignment over a seeded shuffle of the class order.

    Client c holds the classes at positions c * classes_per_client, ..., (c + 1) * classes_per_client - 1
    (mod num_classes) of the shuffled order, so every class is held by the same number of clients whenever
    num_clients * classes_per_client is a multiple of num_classes.
    """
    if not 0 < classes_per_client <= num_classes:
        raise ValueError(f"classes_per_client must be in [1, {num_classes}], got {classes_per_client}")
    if num_clients * classes_per_client < num_classes:
        raise ValueError(
            f"{num_clients} clients with {classes_per_client} classes each cannot cover all {num_classes} classes"
        )
    order = np.random.default_rng([seed, 0]).permutation(num_classes)
    return [
        sorted(int(order[(client * classes_per_client + j) % num_classes]) for j in range(classes_per_client))
        for client in range(num_clients)
    ]


def partition_noniid(
    pool: Shard,
    num_clients: int,
    classes_per_client: int,
    seed: int,
    test_fraction: float = 0.2,
    num_classes: int | None = None,
) -> FederatedDataset:
    """Split a pool into clients that each hold exactly classes_per_client classes.

    Every pooled example ends up in exactly one client shard. A class's examples are shuffled and dealt
    evenly to the clients holding it; each client then sends floor(test_fraction * n) (at least one) of
    its examples of every class to its test shard.

    Args:
        pool: All available examples.
        num_clients: Number of clients to create.
        classes_per_client: Number of distinct classes per client.
        seed: Seed of the class assignment and of the shuffles.
        test_fraction: Share of each client's per-class examples held out for testing.
        num_classes: Number of classes. Defaults to max label + 1.
    """
    if num_clients <= 0:
        raise ValueError(f"num_clients must be positive, got {num_clients}")
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if len(pool) == 0:
        raise ValueError("Cannot partition an empty pool")
    if num_classes is None:
        num_classes = int(pool.labels.max()) + 1

    assignment = assign_classes(num_classes, num_clients, classes_per_client, seed)
    holders: dict[int, list[int]] = {label: [] for label in range(num_classes)}
    for client, labels in enumerate(assignment):
        for label in labels:
            holders[label].append(client)

    rng = np.random.default_rng([seed, 1])
    train_indices: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    test_indices: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for label in range(num_classes):
        members = np.flatnonzero(pool.labels == label)
        # every holder needs one train and one test example of the class
        if len(members) < 2 * len(holders[label]):
            raise InsufficientClassDataError(label, 2 * len(holders[label]), len(members))
        for client, chunk in zip(holders[label], np.array_split(rng.permutation(members), len(holders[label]))):
            num_test = max(1, int(np.floor(test_fraction * len(chunk))))
            test_indices[client].append(chunk[:num_test])
            train_indices[client].append(chunk[num_test:])

    clients = tuple(
        ClientData(
            train=pool.subset(np.sort(np.concatenate(train_indices[client]))),
            test=pool.subset(np.sort(np.concatenate(test_indices[client]))),
        )
        for client in range(num_clients)
    )
    logger.debug(f"Partitioned {len(pool)} examples into {num_clients} clients, {classes_per_client} classes each")
    return FederatedDataset(clients, num_classes=num_classes, input_dim=pool.input_dim)


def gen_synthetic_images(
    num_examples: int, num_classes: int = 10, input_dim: int = 64, noise: float = 0.25, seed: int = 0
) -> Shard:
    """A pool of synthetic "images": per-class prototypes in [0, 1]^d plus clipped Gaussian pixel noise.

    Labels are balanced (num_examples // num_classes per class, remainder to the lowest classes).
    """
    if num_examples < num_classes:
        raise ValueError(f"Need at least one example per class, got {num_examples} for {num_classes} classes")
    rng = np.random.default_rng([seed, num_classes, input_dim])
    prototypes = rng.uniform(0.0, 1.0, size=(num_classes, input_dim))
    labels = np.arange(num_examples) % num_classes
    labels = rng.permutation(labels)
    features = np.clip(prototypes[labels] + rng.normal(0.0, noise, size=(num_examples, input_dim)), 0.0, 1.0)
    return Shard(features, labels)
