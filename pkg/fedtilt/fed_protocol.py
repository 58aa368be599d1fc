from collections.abc import Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import partial
from typing import NamedTuple

import numpy as np
from loguru import logger

from fedtilt.data import FederatedDataset, OutlierSpec, Shard, inject_outliers
from fedtilt.metrics import RoundRecord, fairness_report
from fedtilt.models import ModelSpec, example_losses, init_params, weighted_loss_grad
from fedtilt.tilt_core import (
    ParamVector,
    TiltConfig,
    TiltedLoss,
    ensure_finite,
    global_tilted_loss,
    is_zero_tilt,
    local_objective,
    two_level_tilt,
)


class Personalization(Enum):
    """How personalized models relate to the other models of a round."""

    SEPARATE = "separate"
    TIED_TO_GLOBAL = "tied_to_global"
    TIED_TO_INTERMEDIATE = "tied_to_intermediate"


@dataclass(frozen=True)
class RunConfig:
    """Everything that drives a federated run. The defaults are the 100-client image setting.

    Args:
        num_clients: Total number of clients N.
        participation_fraction: Share rho of clients sampled per round; at least one client participates.
        batch_size: Mini-batch size B. A batch size of at least the shard size means full-batch training.
        global_rounds: Number of global rounds T.
        client_epochs: Local epochs E of the intermediate and personalized updates.
        server_epochs: Gradient steps E2 on the global tilted objective per round.
        lr_intermediate: Step size eta1 of the intermediate client model.
        lr_personal: Step size eta2 of the personalized client model.
        lr_server: Step size eta3 of the global model update.
        tilt: Tilt hyperparameters.
        seed: Seed of initialization, client sampling, batching and outlier injection.
        personalization: Relation between personalized and other models, see Personalization.
        analytic_aggregation: With q = 0, set the global model to the client-model mean instead of running
            the E2 gradient steps.
        workers: Threads used for the client updates of a round. Results do not depend on it.
    """

    num_clients: int = 100
    participation_fraction: float = 0.1
    batch_size: int = 10
    global_rounds: int = 50
    client_epochs: int = 10
    server_epochs: int = 50
    lr_intermediate: float = 0.01
    lr_personal: float = 0.01
    lr_server: float = 0.1
    tilt: TiltConfig = field(default_factory=TiltConfig)
    seed: int = 0
    personalization: Personalization = Personalization.SEPARATE
    analytic_aggregation: bool = False
    workers: int = 1

    def __post_init__(self) -> None:
        for name in ("num_clients", "batch_size", "client_epochs", "server_epochs", "workers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.global_rounds < 0:
            raise ValueError(f"global_rounds must be non-negative, got {self.global_rounds}")
        if not 0 < self.participation_fraction <= 1:
            raise ValueError(f"participation_fraction must be in (0, 1], got {self.participation_fraction}")
        for name in ("lr_intermediate", "lr_personal", "lr_server"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        if self.analytic_aggregation and not is_zero_tilt(self.tilt.q):
            raise ValueError(f"analytic_aggregation requires q = 0, got q = {self.tilt.q}")

    @property
    def clients_per_round(self) -> int:
        return max(int(np.floor(self.participation_fraction * self.num_clients)), 1)


@dataclass
class ClientState:
    """A client's clean data and its personalized model v_n."""

    id: int
    clean_train: Shard
    test: Shard
    v: ParamVector
    last_selected_round: int | None = None


@dataclass(frozen=True)
class GlobalState:
    w: ParamVector
    round: int


class ClientUpdate(NamedTuple):
    intermediate: ParamVector
    personalized: ParamVector


class RoundState(NamedTuple):
    """Models after a round: the global model, every personalized model and the sampled clients' updates."""

    round: int
    w: ParamVector
    personalized: tuple[ParamVector, ...]
    selected: tuple[int, ...]
    intermediate: tuple[ParamVector, ...]


@dataclass(frozen=True)
class RunResult:
    records: tuple[RoundRecord, ...]
    w: ParamVector
    personalized: tuple[ParamVector, ...]


def sample_clients(seed: int, round_index: int, num_clients: int, num_selected: int) -> tuple[int, ...]:
    """Uniform sample without replacement, in increasing client order."""
    rng = np.random.default_rng([seed, round_index])
    return tuple(int(client) for client in np.sort(rng.choice(num_clients, size=num_selected, replace=False)))


def client_seed(seed: int, client_id: int) -> int:
    """A per-client seed derived from the run seed, used for outlier injection."""
    return int(np.random.SeedSequence([seed, client_id]).generate_state(1)[0])


def client_rng(seed: int, round_index: int, client_id: int) -> np.random.Generator:
    """Randomness of one client in one round, independent of thread scheduling."""
    return np.random.default_rng([seed, round_index, client_id, 1])


def minibatches(rng: np.random.Generator, num_examples: int, batch_size: int) -> list[np.ndarray]:
    """Index batches of one epoch. A batch size covering the shard yields the identity order."""
    if num_examples == 0:
        raise ValueError("empty training shard")
    if batch_size >= num_examples:
        return [np.arange(num_examples)]
    order = rng.permutation(num_examples)
    return [order[start : start + batch_size] for start in range(0, num_examples, batch_size)]


def training_shard(
    client: ClientState, outliers: OutlierSpec | None, round_index: int, seed: int
) -> Shard:
    if outliers is None:
        return client.clean_train
    return inject_outliers(client.clean_train, outliers, round_index, seed=client_seed(seed, client.id))


def client_tilted_gradient(
    spec: ModelSpec, params: ParamVector, shard: Shard, indices: np.ndarray, tilt: TiltConfig
) -> TiltedLoss:
    """Two-level tilted loss of a batch, over the classes present in it, with its gradient."""
    features = shard.features[indices]
    labels = shard.labels[indices]
    losses = example_losses(spec, params, features, labels)
    value, coefficients = two_level_tilt(losses, labels, tilt.tau, tilt.lam)
    return TiltedLoss(value, weighted_loss_grad(spec, params, features, labels, coefficients))


def client_update(  # noqa: PLR0913
    client: ClientState,
    w_prev: ParamVector,
    spec: ModelSpec,
    cfg: RunConfig,
    outliers: OutlierSpec | None = None,
    round_index: int = 1,
) -> ClientUpdate:
    """Local training of one client for one round.

    The intermediate model starts from w_prev and follows the batch two-level tilted gradient; the
    personalized model follows the gradient of the local objective with its proximal anchor frozen at
    w_prev. Both take their step on the same batch. The client itself is not modified.
    """
    if np.shape(w_prev) != np.shape(client.v):
        raise ValueError(f"Global model has shape {np.shape(w_prev)}, personalized model {np.shape(client.v)}")
    shard = training_shard(client, outliers, round_index, cfg.seed)
    rng = client_rng(cfg.seed, round_index, client.id)
    tilt = cfg.tilt

    intermediate = np.array(w_prev, dtype=np.float64, copy=True)
    if cfg.personalization is Personalization.TIED_TO_INTERMEDIATE:
        personalized = intermediate
    else:
        personalized = np.array(client.v, dtype=np.float64, copy=True)

    for _ in range(cfg.client_epochs):
        for indices in minibatches(rng, len(shard), cfg.batch_size):
            if cfg.personalization is not Personalization.TIED_TO_INTERMEDIATE:
                step = client_tilted_gradient(spec, intermediate, shard, indices, tilt).gradient
                intermediate = intermediate - cfg.lr_intermediate * step
            if cfg.personalization is not Personalization.TIED_TO_GLOBAL:
                client_tilt = client_tilted_gradient(spec, personalized, shard, indices, tilt)
                step = local_objective(personalized, w_prev, client_tilt, tilt.mu).gradient
                personalized = personalized - cfg.lr_personal * step

    if cfg.personalization is Personalization.TIED_TO_INTERMEDIATE:
        intermediate = personalized
    logger.debug(f"Client {client.id} finished round {round_index} on {len(shard)} examples")
    return ClientUpdate(
        ensure_finite(intermediate, f"intermediate model of client {client.id}"),
        ensure_finite(personalized, f"personalized model of client {client.id}"),
    )


def server_update(w_prev: ParamVector, client_models: Sequence[ParamVector], cfg: RunConfig) -> ParamVector:
    """Gradient descent on the q-tilted global objective, E2 steps starting from w_prev."""
    if len(client_models) == 0:
        raise ValueError("empty loss set: no client models to aggregate")
    if cfg.analytic_aggregation:
        logger.debug(f"Server averaged {len(client_models)} client models")
        return np.mean(np.stack(client_models), axis=0)

    w = np.array(w_prev, dtype=np.float64, copy=True)
    for _ in range(cfg.server_epochs):
        w = w - cfg.lr_server * global_tilted_loss(client_models, w, cfg.tilt.q, cfg.tilt.dist).gradient
    logger.debug(
        f"Server ran {cfg.server_epochs} epochs over {len(client_models)} client models, "
        f"tilted distance {global_tilted_loss(client_models, w, cfg.tilt.q, cfg.tilt.dist).value:.6g}"
    )
    return ensure_finite(w, "global model")


def initial_clients(dataset: FederatedDataset, w0: ParamVector) -> list[ClientState]:
    return [
        ClientState(id=client_id, clean_train=client.train, test=client.test, v=w0.copy())
        for client_id, client in enumerate(dataset.clients)
    ]


def iterate_rounds(
    dataset: FederatedDataset, spec: ModelSpec, cfg: RunConfig, outliers: OutlierSpec | None = None
) -> Iterator[RoundState]:
    """Run FedTilt lazily, yielding the models after every global round."""
    if dataset.num_clients != cfg.num_clients:
        raise ValueError(f"Config expects {cfg.num_clients} clients, the dataset has {dataset.num_clients}")

    w0 = init_params(spec, cfg.seed)
    w0.setflags(write=False)
    state = GlobalState(w=w0, round=0)
    clients = initial_clients(dataset, state.w)
    with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
        for round_index in range(1, cfg.global_rounds + 1):
            selected = sample_clients(cfg.seed, round_index, cfg.num_clients, cfg.clients_per_round)
            w_prev = state.w
            local_update = partial(
                client_update, w_prev=w_prev, spec=spec, cfg=cfg, outliers=outliers, round_index=round_index
            )
            updates = list(executor.map(local_update, [clients[client_id] for client_id in selected]))
            w = server_update(w_prev, [update.intermediate for update in updates], cfg)
            w.setflags(write=False)
            state = GlobalState(w=w, round=round_index)

            for client_id, update in zip(selected, updates):
                clients[client_id].v = update.personalized
                clients[client_id].last_selected_round = round_index
            if cfg.personalization is Personalization.TIED_TO_GLOBAL:
                for client in clients:
                    client.v = w

            yield RoundState(
                round=round_index,
                w=w,
                personalized=tuple(client.v for client in clients),
                selected=selected,
                intermediate=tuple(update.intermediate for update in updates),
            )


def local_objective_value(spec: ModelSpec, v: ParamVector, w: ParamVector, shard: Shard, tilt: TiltConfig) -> float:
    """L_n(v, w) on a whole shard."""
    losses = example_losses(spec, v, shard.features, shard.labels)
    value, _ = two_level_tilt(losses, shard.labels, tilt.tau, tilt.lam)
    diff = v - w
    return value + 0.5 * tilt.mu * float(diff @ diff)


def full_local_objective(spec: ModelSpec, v: ParamVector, w: ParamVector, shard: Shard, tilt: TiltConfig) -> TiltedLoss:
    """L_n(v, w) on a whole shard, with its gradient in v."""
    client_tilt = client_tilted_gradient(spec, v, shard, np.arange(len(shard)), tilt)
    return local_objective(v, w, client_tilt, tilt.mu)


def evaluate_round(
    dataset: FederatedDataset, spec: ModelSpec, cfg: RunConfig, state: RoundState
) -> RoundRecord:
    report = fairness_report(state.personalized, spec, dataset, state.w, state.round)
    global_loss = global_tilted_loss(state.intermediate, state.w, cfg.tilt.q, cfg.tilt.dist).value
    mean_local_loss = float(
        np.mean(
            [
                local_objective_value(spec, v, state.w, client.train, cfg.tilt)
                for v, client in zip(state.personalized, dataset.clients)
            ]
        )
    )
    logger.info(
        f"Round {state.round}: personalized acc {report.mean_test_acc_personalized:.2f}%, "
        f"global acc {report.mean_test_acc_global:.2f}%, client sigma {report.client_fairness_sigma:.2f}"
    )
    return RoundRecord(report=report, global_loss=global_loss, mean_local_loss=mean_local_loss)


def run(
    dataset: FederatedDataset, spec: ModelSpec, cfg: RunConfig, outliers: OutlierSpec | None = None
) -> RunResult:
    records = []
    w = init_params(spec, cfg.seed)
    w.setflags(write=False)
    personalized = tuple(w.copy() for _ in dataset.clients)
    for state in iterate_rounds(dataset, spec, cfg, outliers):
        records.append(evaluate_round(dataset, spec, cfg, state))
        w, personalized = state.w, state.personalized
    return RunResult(records=tuple(records), w=w, personalized=personalized)
