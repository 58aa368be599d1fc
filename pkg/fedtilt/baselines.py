from collections.abc import Iterator
from dataclasses import dataclass, replace

import numpy as np
import numpy.typing as npt
from loguru import logger

from fedtilt.data import FederatedDataset, OutlierSpec, Shard
from fedtilt.fed_protocol import (
    ClientState,
    Personalization,
    RoundState,
    RunConfig,
    RunResult,
    client_rng,
    initial_clients,
    iterate_rounds,
    minibatches,
    sample_clients,
    training_shard,
)
from fedtilt.metrics import RoundRecord, fairness_report
from fedtilt.models import ModelSpec, example_losses, init_params, weighted_loss_grad
from fedtilt.tilt_core import TiltConfig

Params = npt.NDArray[np.float64]


@dataclass(frozen=True)
class FedAvg:
    pass


@dataclass(frozen=True)
class FedProx:
    mu: float

    def __post_init__(self) -> None:
        if self.mu < 0:
            raise ValueError(f"mu must be non-negative, got {self.mu}")


@dataclass(frozen=True)
class Ditto:
    mu: float

    def __post_init__(self) -> None:
        if self.mu < 0:
            raise ValueError(f"mu must be non-negative, got {self.mu}")


BaselineKind = FedAvg | FedProx | Ditto


class ReductionConfigError(ValueError):
    def __init__(self, settings: list[str]) -> None:
        super().__init__(f"Instance is not exactly comparable: {'; '.join(settings)}")
        self.settings = settings


def _mean_loss_grad(spec: ModelSpec, params: Params, shard: Shard, indices: np.ndarray) -> Params:
    return weighted_loss_grad(
        spec, params, shard.features[indices], shard.labels[indices], np.full(len(indices), 1.0 / len(indices))
    )


def _baseline_client_update(  # noqa: PLR0913
    kind: BaselineKind,
    client: ClientState,
    w_prev: Params,
    spec: ModelSpec,
    cfg: RunConfig,
    outliers: OutlierSpec | None,
    round_index: int,
) -> tuple[Params, Params]:
    """Returns the model sent to the server and the client's personalized model."""
    shard = training_shard(client, outliers, round_index, cfg.seed)
    rng = client_rng(cfg.seed, round_index, client.id)
    local = w_prev.copy()
    personalized = client.v.copy()

    for _ in range(cfg.client_epochs):
        for indices in minibatches(rng, len(shard), cfg.batch_size):
            if isinstance(kind, FedProx):
                step = _mean_loss_grad(spec, local, shard, indices) + kind.mu * (local - w_prev)
                local = local - cfg.lr_intermediate * step
                continue
            local = local - cfg.lr_intermediate * _mean_loss_grad(spec, local, shard, indices)
            if isinstance(kind, Ditto):
                step = _mean_loss_grad(spec, personalized, shard, indices) + kind.mu * (personalized - w_prev)
                personalized = personalized - cfg.lr_personal * step

    return local, personalized


def iterate_baseline_rounds(
    kind: BaselineKind,
    dataset: FederatedDataset,
    spec: ModelSpec,
    cfg: RunConfig,
    outliers: OutlierSpec | None = None,
) -> Iterator[RoundState]:
    """FedAvg, FedProx or Ditto with the same client sampling and batching streams as FedTilt.

    FedAvg and FedProx have no personalized models; every client reports the global model instead.
    """
    if dataset.num_clients != cfg.num_clients:
        raise ValueError(f"Config expects {cfg.num_clients} clients, the dataset has {dataset.num_clients}")

    w = init_params(spec, cfg.seed)
    clients = initial_clients(dataset, w)
    for round_index in range(1, cfg.global_rounds + 1):
        selected = sample_clients(cfg.seed, round_index, cfg.num_clients, cfg.clients_per_round)
        updates = [
            _baseline_client_update(kind, clients[client_id], w, spec, cfg, outliers, round_index)
            for client_id in selected
        ]
        w = np.mean(np.stack([local for local, _ in updates]), axis=0)

        if isinstance(kind, Ditto):
            for client_id, (_, personalized) in zip(selected, updates):
                clients[client_id].v = personalized
                clients[client_id].last_selected_round = round_index
            personalized_models = tuple(client.v for client in clients)
        else:
            personalized_models = tuple(w for _ in clients)

        yield RoundState(
            round=round_index,
            w=w,
            personalized=personalized_models,
            selected=selected,
            intermediate=tuple(local for local, _ in updates),
        )


def _evaluate_baseline_round(
    kind: BaselineKind, dataset: FederatedDataset, spec: ModelSpec, state: RoundState
) -> RoundRecord:
    report = fairness_report(state.personalized, spec, dataset, state.w, state.round)
    global_loss = float(np.mean([np.sum((model - state.w) ** 2) for model in state.intermediate]))
    mu = 0.0 if isinstance(kind, FedAvg) else kind.mu
    local_losses = [
        float(np.mean(example_losses(spec, v, client.train.features, client.train.labels)))
        + 0.5 * mu * float(np.sum((v - state.w) ** 2))
        for v, client in zip(state.personalized, dataset.clients)
    ]
    logger.info(
        f"{type(kind).__name__} round {state.round}: personalized acc {report.mean_test_acc_personalized:.2f}%, "
        f"global acc {report.mean_test_acc_global:.2f}%, client sigma {report.client_fairness_sigma:.2f}"
    )
    return RoundRecord(report=report, global_loss=global_loss, mean_local_loss=float(np.mean(local_losses)))


def run_baseline(
    kind: BaselineKind,
    dataset: FederatedDataset,
    spec: ModelSpec,
    cfg: RunConfig,
    outliers: OutlierSpec | None = None,
) -> RunResult:
    records = []
    w = init_params(spec, cfg.seed)
    personalized = tuple(w.copy() for _ in dataset.clients)
    for state in iterate_baseline_rounds(kind, dataset, spec, cfg, outliers):
        records.append(_evaluate_baseline_round(kind, dataset, spec, state))
        w, personalized = state.w, state.personalized
    return RunResult(records=tuple(records), w=w, personalized=personalized)


_MAX_REDUCTION_CLIENTS = 4


def _reduction_setup(prop: int, cfg: RunConfig) -> tuple[BaselineKind, RunConfig]:
    personalization = {
        1: Personalization.TIED_TO_GLOBAL,
        2: Personalization.TIED_TO_INTERMEDIATE,
        3: Personalization.SEPARATE,
    }[prop]
    baseline: BaselineKind = {1: FedAvg(), 2: FedProx(cfg.tilt.mu), 3: Ditto(cfg.tilt.mu)}[prop]
    fedtilt_cfg = replace(
        cfg,
        tilt=TiltConfig(q=0.0, tau=0.0, lam=0.0, mu=cfg.tilt.mu, dist=cfg.tilt.dist),
        personalization=personalization,
        analytic_aggregation=True,
    )
    return baseline, fedtilt_cfg


def check_reduction(prop: int, dataset: FederatedDataset, spec: ModelSpec, cfg: RunConfig) -> float:
    """Max per-round parameter deviation between FedTilt in a special-case setting and the reference method.

    Case 1 compares with FedAvg (personalized models tied to the global model), case 2 with
    FedProx (personalized models are the intermediate models) and case 3 with Ditto. FedTilt runs
    with q = tau = lam = 0 and analytic mean aggregation. The deviation covers the global model, the
    models sent to the server and the personalized models.
    """
    if prop not in (1, 2, 3):
        raise ValueError(f"Unknown reduction {prop!r}, expected 1, 2 or 3")

    offending = []
    if cfg.num_clients > _MAX_REDUCTION_CLIENTS:
        offending.append(f"num_clients={cfg.num_clients} (at most {_MAX_REDUCTION_CLIENTS})")
    if cfg.clients_per_round != cfg.num_clients:
        offending.append(f"participation_fraction={cfg.participation_fraction} (full participation required)")
    largest_shard = max(len(client.train) for client in dataset.clients)
    if cfg.batch_size < largest_shard:
        offending.append(f"batch_size={cfg.batch_size} (full batch needs at least {largest_shard})")
    if prop == 2 and cfg.lr_intermediate != cfg.lr_personal:
        offending.append(
            f"lr_intermediate={cfg.lr_intermediate} != lr_personal={cfg.lr_personal} (FedProx has one step size)"
        )
    if offending:
        raise ReductionConfigError(offending)

    baseline, fedtilt_cfg = _reduction_setup(prop, cfg)
    deviation = 0.0
    rounds = 0
    for ours, reference in zip(
        iterate_rounds(dataset, spec, fedtilt_cfg), iterate_baseline_rounds(baseline, dataset, spec, cfg)
    ):
        pairs = [(ours.w, reference.w), *zip(ours.intermediate, reference.intermediate)]
        if prop != 2:
            pairs.extend(zip(ours.personalized, reference.personalized))
        deviation = max(deviation, *(float(np.max(np.abs(a - b))) for a, b in pairs))
        rounds += 1

    logger.info(f"Reduction {prop}: max deviation {deviation:.3e} from {type(baseline).__name__} over {rounds} rounds")
    return deviation
