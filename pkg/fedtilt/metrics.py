from collections.abc import Sequence
from dataclasses import asdict, dataclass
from typing import Final

import numpy as np
from loguru import logger

from fedtilt.data import FederatedDataset, Shard
from fedtilt.models import ModelSpec, predict_batch
from fedtilt.tilt_core import ParamVector

ROUND_COLUMNS: Final = (
    "round",
    "mean_acc_personalized",
    "mean_acc_global",
    "client_sigma",
    "mu_sigma",
    "sigma_sigma",
    "global_loss",
    "mean_local_loss",
)


@dataclass(frozen=True)
class FairnessReport:
    """Accuracy and fairness of one round, all in percent or percentage points.

    Args:
        round: Global round the report belongs to.
        mean_test_acc_personalized: Mean over clients of the personalized model's local test accuracy.
        mean_test_acc_global: Accuracy of the global model on the union of all test shards.
        client_fairness_sigma: Population std of the per-client accuracies.
        data_fairness_mu_sigma: Mean over clients of the std of their per-class accuracies.
        data_fairness_sigma_sigma: Population std over clients of the same per-class stds.
        per_client_acc: Personalized-model accuracy of every client.
    """

    round: int
    mean_test_acc_personalized: float
    mean_test_acc_global: float
    client_fairness_sigma: float
    data_fairness_mu_sigma: float
    data_fairness_sigma_sigma: float
    per_client_acc: tuple[float, ...]


@dataclass(frozen=True)
class RoundRecord:
    report: FairnessReport
    global_loss: float
    mean_local_loss: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.global_loss) and np.isfinite(self.mean_local_loss)):
            raise ValueError(f"Round {self.report.round} has non-finite objective values")

    def as_row(self) -> dict[str, float | int]:
        return {
            "round": self.report.round,
            "mean_acc_personalized": self.report.mean_test_acc_personalized,
            "mean_acc_global": self.report.mean_test_acc_global,
            "client_sigma": self.report.client_fairness_sigma,
            "mu_sigma": self.report.data_fairness_mu_sigma,
            "sigma_sigma": self.report.data_fairness_sigma_sigma,
            "global_loss": self.global_loss,
            "mean_local_loss": self.mean_local_loss,
        }

    def as_dict(self) -> dict:
        return {**asdict(self.report), "global_loss": self.global_loss, "mean_local_loss": self.mean_local_loss}


def client_accuracy(params: ParamVector, spec: ModelSpec, shard: Shard) -> float:
    if len(shard) == 0:
        raise ValueError("Cannot compute the accuracy on an empty shard")
    return 100.0 * float(np.mean(predict_batch(spec, params, shard.features) == shard.labels))


def per_class_accuracy(params: ParamVector, spec: ModelSpec, shard: Shard) -> dict[int, float]:
    """Recall of every class present in the shard, in percent."""
    if len(shard) == 0:
        raise ValueError("Cannot compute the accuracy on an empty shard")
    correct = predict_batch(spec, params, shard.features) == shard.labels
    return {int(label): 100.0 * float(np.mean(correct[shard.labels == label])) for label in shard.classes()}


def fairness_report(
    personalized: Sequence[ParamVector],
    spec: ModelSpec,
    dataset: FederatedDataset,
    global_model: ParamVector,
    round_index: int,
) -> FairnessReport:
    if len(personalized) != dataset.num_clients:
        raise ValueError(f"Got {len(personalized)} personalized models for {dataset.num_clients} clients")

    accuracies = []
    class_sigmas = []
    for client_id, (params, client) in enumerate(zip(personalized, dataset.clients)):
        accuracies.append(client_accuracy(params, spec, client.test))
        by_class = per_class_accuracy(params, spec, client.test)
        if len(by_class) == 1:
            logger.warning(f"Client {client_id} has a single class in its test shard, its class accuracy std is 0")
        class_sigmas.append(float(np.std(list(by_class.values()))))

    return FairnessReport(
        round=round_index,
        mean_test_acc_personalized=float(np.mean(accuracies)),
        mean_test_acc_global=client_accuracy(global_model, spec, dataset.pooled_test),
        client_fairness_sigma=float(np.std(accuracies)),
        data_fairness_mu_sigma=float(np.mean(class_sigmas)),
        data_fairness_sigma_sigma=float(np.std(class_sigmas)),
        per_client_acc=tuple(accuracies),
    )
