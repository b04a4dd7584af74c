"""Transport-agnostic FedAvg: partitioning, selection, local training,
weighted aggregation, the round state machine and central evaluation.

All randomness derives from (config.seed, purpose tag, ...) so any run is
reproducible bit-for-bit. Clients re-download the global model each round;
optimizer state does not persist across rounds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .datagen import Sample, augment_with_rng
from .errors import AggregationError, ConfigError, TransportError
from .losses import accuracy, bce_dice_loss, cross_entropy_loss, jaccard_index
from .models import ModelWeights, build_network, extract_weights, load_weights
from .optim import OptimizerSpec, make_optimizer
from .seeding import derive_rng

METRIC_JACCARD = "jaccard"
METRIC_ACCURACY = "accuracy"


@dataclass
class FLConfig:
    architecture: str
    num_clients: int
    selected_per_round: int
    local_epochs: int
    rounds: int
    batch_size: int
    optimizer: OptimizerSpec
    seed: int
    eval_metric: str  # "jaccard" | "accuracy"
    augment: bool = True
    round_timeout: float | None = None  # seconds; None = wait forever

    def validate(self):
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if not 1 <= self.selected_per_round <= self.num_clients:
            raise ConfigError(
                f"selected_per_round must be in [1, {self.num_clients}], "
                f"got {self.selected_per_round}"
            )
        for name in ("local_epochs", "rounds", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.eval_metric not in (METRIC_JACCARD, METRIC_ACCURACY):
            raise ConfigError(f"unknown eval_metric {self.eval_metric!r}")
        self.optimizer.validate()


@dataclass
class ClientUpdate:
    client_id: int
    round_index: int
    weights: ModelWeights
    num_samples: int
    train_loss: float


@dataclass
class RoundRecord:
    round_index: int
    selected: list[int]
    metric: float | None
    loss: float | None
    duration_ms: float
    error: str | None = None


@dataclass
class FederationResult:
    records: list[RoundRecord] = field(default_factory=list)
    metric_history: list[float] = field(default_factory=list)
    final_weights: ModelWeights | None = None
    best_weights: ModelWeights | None = None
    best_metric: float = -np.inf
    best_round: int = 0


def partition_iid(dataset_size: int, num_clients: int, seed: int) -> list[list[int]]:
    """Seeded uniform shuffle cut into near-equal contiguous runs.

    Sizes differ by at most 1, larger shares going to lower client ids.
    """
    if dataset_size < num_clients:
        raise ConfigError(
            f"dataset of {dataset_size} cannot be split among {num_clients} clients"
        )
    order = derive_rng(seed, "partition").permutation(dataset_size)
    base, extra = divmod(dataset_size, num_clients)
    parts = []
    pos = 0
    for cid in range(num_clients):
        size = base + (1 if cid < extra else 0)
        parts.append([int(i) for i in order[pos : pos + size]])
        pos += size
    return parts


def select_clients(num_clients: int, sc: int, round_index: int, seed: int) -> list[int]:
    """Uniform sample without replacement, reseeded per round, returned sorted."""
    if not 1 <= sc <= num_clients:
        raise ConfigError(f"sc must be in [1, {num_clients}], got {sc}")
    rng = derive_rng(seed, "select", round_index)
    return sorted(int(c) for c in rng.choice(num_clients, size=sc, replace=False))


def _batch_loss(net, batch: list[Sample], metric_kind: str):
    x = np.stack([s.image for s in batch])
    out = net.forward(x)
    if metric_kind == METRIC_JACCARD:
        target = np.stack([s.lung_mask for s in batch])
        return bce_dice_loss(out, target)
    labels = np.array([s.label for s in batch], dtype=np.int64)
    return cross_entropy_loss(out, labels)


def local_train(
    weights: ModelWeights,
    samples: list[Sample],
    config: FLConfig,
    client_id: int,
    round_index: int,
) -> ClientUpdate:
    """Fine-tune the global weights on one client's shard for `local_epochs`.

    Mini-batch order is reshuffled each epoch; the last short batch is kept.
    Returns the updated weights and the mean training loss of the final epoch.
    """
    if not samples:
        raise ConfigError(f"client {client_id}: empty partition")
    net, _ = build_network(weights.architecture_id, seed=0)
    load_weights(net, weights)
    opt = make_optimizer(net.parameters(), config.optimizer)

    n = len(samples)
    last_epoch_loss = 0.0
    for epoch in range(config.local_epochs):
        rng = derive_rng(config.seed, "local", client_id, round_index, epoch)
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = [samples[int(i)] for i in idx]
            if config.augment:
                batch = [augment_with_rng(s, rng) for s in batch]
            net.zero_grad()
            loss, out_grad = _batch_loss(net, batch, config.eval_metric)
            net.backward(out_grad)
            opt.step()
            loss_sum += loss * len(batch)
        last_epoch_loss = loss_sum / n
    return ClientUpdate(
        client_id=client_id,
        round_index=round_index,
        weights=extract_weights(net),
        num_samples=n,
        train_loss=last_epoch_loss,
    )


def fedavg_aggregate(updates: list[ClientUpdate]) -> ModelWeights:
    """Sample-count-weighted mean of client weights.

    Accumulates in double precision in ascending client-id order (so the
    result is independent of arrival order) and stores single precision.
    """
    if not updates:
        raise AggregationError("no updates to aggregate")
    updates = sorted(updates, key=lambda u: u.client_id)
    arch = updates[0].weights.architecture_id
    rnd = updates[0].round_index
    names = updates[0].weights.names()
    for u in updates[1:]:
        if u.weights.architecture_id != arch:
            raise AggregationError(
                f"mixed architectures: {arch!r} vs {u.weights.architecture_id!r}"
            )
        if u.round_index != rnd:
            raise AggregationError(f"mixed rounds: {rnd} vs {u.round_index}")
        if u.weights.names() != names:
            raise AggregationError("parameter name lists differ between updates")
    total = float(sum(u.num_samples for u in updates))
    acc = [np.zeros(t.shape, dtype=np.float64) for _, t in updates[0].weights.params]
    for u in updates:
        w = u.num_samples / total
        for a, (_, t) in zip(acc, u.weights.params):
            a += w * t.astype(np.float64)
    return ModelWeights(arch, [(name, a.astype(np.float32)) for (name, _), a in zip(updates[0].weights.params, acc)])


def evaluate_global(
    weights: ModelWeights,
    test_samples: list[Sample],
    metric_kind: str,
    batch_size: int = 32,
):
    """Metric and loss averaged over the test set in fixed order, no augmentation."""
    if not test_samples:
        raise ConfigError("empty test set")
    net, _ = build_network(weights.architecture_id, seed=0)
    load_weights(net, weights)
    n = len(test_samples)
    loss_sum = 0.0
    metric_sum = 0.0
    for start in range(0, n, batch_size):
        batch = test_samples[start : start + batch_size]
        x = np.stack([s.image for s in batch])
        out = net.forward(x)
        if metric_kind == METRIC_JACCARD:
            target = np.stack([s.lung_mask for s in batch])
            loss, _ = bce_dice_loss(out, target)
            metric = jaccard_index(out, target)
        else:
            labels = np.array([s.label for s in batch], dtype=np.int64)
            loss, _ = cross_entropy_loss(out, labels)
            metric = accuracy(out, labels)
        loss_sum += loss * len(batch)
        metric_sum += metric * len(batch)
    return metric_sum / n, loss_sum / n


def run_round(
    global_weights: ModelWeights,
    config: FLConfig,
    round_index: int,
    dispatch,
    test_samples: list[Sample],
):
    """One protocol round: select, dispatch local training, aggregate, evaluate.

    `dispatch(config, global_weights, round_index, selected)` returns one
    ClientUpdate per selected client or raises TransportError. On failure the
    global model is left unchanged and the record carries the error.
    """
    t0 = time.perf_counter()
    selected = select_clients(
        config.num_clients, config.selected_per_round, round_index, config.seed
    )
    try:
        updates = dispatch(config, global_weights, round_index, selected)
        if len(updates) < len(selected):
            raise TransportError(
                f"round {round_index}: got {len(updates)} of {len(selected)} updates"
            )
        new_weights = fedavg_aggregate(updates)
    except (TransportError, AggregationError) as exc:
        dur = (time.perf_counter() - t0) * 1000.0
        return global_weights, RoundRecord(
            round_index, selected, None, None, dur, error=str(exc)
        )
    metric, loss = evaluate_global(new_weights, test_samples, config.eval_metric)
    dur = (time.perf_counter() - t0) * 1000.0
    return new_weights, RoundRecord(round_index, selected, metric, loss, dur)


def run_federation(
    config: FLConfig,
    dispatch,
    test_samples: list[Sample],
    initial_weights: ModelWeights | None = None,
    stop_threshold: float | None = None,
    progress=None,
) -> FederationResult:
    """Run the configured number of rounds, tracking the best global model.

    If stop_threshold is given, training stops early once the test metric
    reaches it (used by the parameter sweep).
    """
    config.validate()
    if initial_weights is None:
        _, initial_weights = build_network(config.architecture, config.seed)
    result = FederationResult()
    weights = initial_weights
    for r in range(1, config.rounds + 1):
        weights, record = run_round(weights, config, r, dispatch, test_samples)
        result.records.append(record)
        if record.error is None:
            result.metric_history.append(record.metric)
            if record.metric > result.best_metric:
                result.best_metric = record.metric
                result.best_weights = weights
                result.best_round = r
        if progress is not None:
            progress(record)
        if (
            stop_threshold is not None
            and record.error is None
            and record.metric >= stop_threshold
        ):
            break
    result.final_weights = weights
    return result


def rounds_to_threshold(metric_history: list[float], threshold: float) -> int | None:
    """1-based index of the first round whose metric >= threshold, else None."""
    if not metric_history:
        raise ConfigError("empty metric history")
    for i, m in enumerate(metric_history, start=1):
        if m >= threshold:
            return i
    return None
