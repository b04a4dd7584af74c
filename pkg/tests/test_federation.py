import numpy as np
import pytest

from conftest import assert_weights_equal, make_samples, max_weight_diff
from fedkit.errors import AggregationError, ConfigError, TransportError
from fedkit.federation import (
    FLConfig,
    ClientUpdate,
    evaluate_global,
    fedavg_aggregate,
    local_train,
    partition_iid,
    rounds_to_threshold,
    run_federation,
    run_round,
    select_clients,
)
from fedkit.models import CLS_CNN_PLAIN, SEG_UNET_MINI, ModelWeights, build_network
from fedkit.optim import OptimizerSpec


def _cfg(**over):
    base = dict(
        architecture=CLS_CNN_PLAIN,
        num_clients=2,
        selected_per_round=2,
        local_epochs=1,
        rounds=2,
        batch_size=4,
        optimizer=OptimizerSpec("sgd", 1e-2),
        seed=0,
        eval_metric="accuracy",
        augment=False,
    )
    base.update(over)
    return FLConfig(**base)


# ---------------------------------------------------------------- partition


def test_partition_sizes_10_into_3():
    parts = partition_iid(10, 3, seed=0)
    assert [len(p) for p in parts] == [4, 3, 3]
    assert sorted(i for p in parts for i in p) == list(range(10))


def test_partition_single_client_is_full_shuffle():
    parts = partition_iid(10, 1, seed=0)
    assert len(parts) == 1 and sorted(parts[0]) == list(range(10))


def test_partition_deterministic_and_seed_sensitive():
    assert partition_iid(20, 3, seed=5) == partition_iid(20, 3, seed=5)
    assert partition_iid(20, 3, seed=5) != partition_iid(20, 3, seed=6)


def test_partition_rejects_too_small_dataset():
    with pytest.raises(ConfigError):
        partition_iid(2, 3, seed=0)


# ---------------------------------------------------------------- selection


def test_select_all_and_single():
    assert select_clients(3, 3, round_index=1, seed=0) == [0, 1, 2]
    assert select_clients(1, 1, round_index=1, seed=0) == [0]


def test_select_deterministic():
    assert select_clients(5, 2, 4, seed=9) == select_clients(5, 2, 4, seed=9)


def test_select_invalid_sc():
    with pytest.raises(ConfigError):
        select_clients(3, 4, 1, seed=0)


# --------------------------------------------------------------- local_train


def test_local_train_lr_zero_is_identity(tiny_dataset):
    train, _ = tiny_dataset
    cfg = _cfg(optimizer=OptimizerSpec("sgd", 0.0))
    _, w0 = build_network(CLS_CNN_PLAIN, seed=0)
    upd = local_train(w0, train[:8], cfg, client_id=0, round_index=1)
    assert_weights_equal(upd.weights, w0)
    assert upd.num_samples == 8


def test_local_train_deterministic(tiny_dataset):
    train, _ = tiny_dataset
    cfg = _cfg(augment=True)
    _, w0 = build_network(CLS_CNN_PLAIN, seed=0)
    a = local_train(w0, train[:8], cfg, 0, 1)
    b = local_train(w0, train[:8], cfg, 0, 1)
    assert a.train_loss == b.train_loss
    assert_weights_equal(a.weights, b.weights)


def test_local_train_learns(tiny_dataset):
    train, _ = tiny_dataset
    _, w0 = build_network(CLS_CNN_PLAIN, seed=0)
    one = local_train(w0, train, _cfg(local_epochs=1, optimizer=OptimizerSpec("adam", 1e-3)), 0, 1)
    five = local_train(w0, train, _cfg(local_epochs=5, optimizer=OptimizerSpec("adam", 1e-3)), 0, 1)
    assert five.train_loss <= one.train_loss


def test_local_train_empty_shard():
    cfg = _cfg()
    _, w0 = build_network(CLS_CNN_PLAIN, seed=0)
    with pytest.raises(ConfigError):
        local_train(w0, [], cfg, 0, 1)


# ------------------------------------------------------------------- fedavg


def _scalar_update(cid, value, n):
    w = ModelWeights("toy", [("w", np.array([value], np.float32))])
    return ClientUpdate(cid, 1, w, n, 0.0)


def test_fedavg_single_update_identity():
    _, w = build_network(CLS_CNN_PLAIN, seed=1)
    out = fedavg_aggregate([ClientUpdate(0, 1, w, 10, 0.0)])
    assert_weights_equal(out, w)


def test_fedavg_two_equal_updates():
    _, w = build_network(CLS_CNN_PLAIN, seed=1)
    out = fedavg_aggregate([ClientUpdate(0, 1, w, 5, 0.0), ClientUpdate(1, 1, w, 5, 0.0)])
    assert_weights_equal(out, w)


def test_fedavg_scalar_oracle():
    out = fedavg_aggregate([_scalar_update(0, 2.0, 1), _scalar_update(1, 4.0, 3)])
    assert out.params[0][1][0] == np.float32(3.5)


def test_fedavg_order_independent():
    ups = [_scalar_update(0, 2.0, 1), _scalar_update(1, 4.0, 3), _scalar_update(2, -1.0, 2)]
    a = fedavg_aggregate(ups)
    b = fedavg_aggregate(list(reversed(ups)))
    assert_weights_equal(a, b)


def test_fedavg_random_instances_within_one_ulp():
    rng = np.random.default_rng(42)
    for _ in range(10):
        k = int(rng.integers(3, 6))
        counts = [int(rng.integers(1, 50)) for _ in range(k)]
        tensors = [rng.normal(size=(4, 3)).astype(np.float32) for _ in range(k)]
        ups = [
            ClientUpdate(i, 1, ModelWeights("toy", [("w", t)]), n, 0.0)
            for i, (t, n) in enumerate(zip(tensors, counts))
        ]
        got = fedavg_aggregate(ups).params[0][1]
        total = float(sum(counts))
        oracle = np.zeros((4, 3), np.float64)
        for r in range(4):
            for c in range(3):
                acc = 0.0
                for t, n in zip(tensors, counts):
                    acc += (n / total) * float(t[r, c])
                oracle[r, c] = acc
        ulp = np.spacing(np.abs(oracle.astype(np.float32)))
        assert np.all(np.abs(got.astype(np.float64) - oracle) <= ulp)


def test_fedavg_error_cases():
    with pytest.raises(AggregationError):
        fedavg_aggregate([])
    a = _scalar_update(0, 1.0, 1)
    b = ClientUpdate(1, 1, ModelWeights("other", [("w", np.zeros(1, np.float32))]), 1, 0.0)
    with pytest.raises(AggregationError):
        fedavg_aggregate([a, b])
    c = _scalar_update(1, 1.0, 1)
    c.round_index = 2
    with pytest.raises(AggregationError):
        fedavg_aggregate([a, c])


# ----------------------------------------------------------------- rounds


def test_run_round_failure_leaves_weights_unchanged(tiny_dataset):
    _, test = tiny_dataset
    cfg = _cfg()
    _, w0 = build_network(CLS_CNN_PLAIN, seed=0)

    def failing_dispatch(config, weights, round_index, selected):
        raise TransportError("injected client failure")

    w1, record = run_round(w0, cfg, 1, failing_dispatch, test)
    assert record.error is not None and "injected" in record.error
    assert record.metric is None
    assert_weights_equal(w1, w0)


def test_run_federation_flat_history_with_lr_zero(tiny_dataset):
    train, test = tiny_dataset
    cfg = _cfg(optimizer=OptimizerSpec("sgd", 0.0), rounds=3)
    from fedkit.transport import run_simulation

    res = run_simulation(cfg, train, test)
    assert len(res.metric_history) == 3
    assert len(set(res.metric_history)) == 1  # flat: nothing learned
    assert res.best_round == 1


def test_evaluate_global_uniform_logits(tiny_dataset):
    _, test = tiny_dataset
    net, w = build_network(CLS_CNN_PLAIN, seed=0)
    zero = ModelWeights(w.architecture_id, [(n, np.zeros_like(t)) for n, t in w.params])
    metric, loss = evaluate_global(zero, test, "accuracy")
    assert metric == pytest.approx(1.0 / 3.0, abs=1e-9)  # argmax ties -> class 0
    assert loss == pytest.approx(np.log(3.0), rel=1e-6)


def test_evaluate_global_repeatable(tiny_dataset):
    _, test = tiny_dataset
    _, w = build_network(CLS_CNN_PLAIN, seed=0)
    assert evaluate_global(w, test, "accuracy") == evaluate_global(w, test, "accuracy")


def test_rounds_to_threshold():
    assert rounds_to_threshold([0.5, 0.93, 0.95], 0.92) == 2
    assert rounds_to_threshold([0.1, 0.2], 0.92) is None
    with pytest.raises(ConfigError):
        rounds_to_threshold([], 0.5)


def test_config_validation():
    with pytest.raises(ConfigError):
        _cfg(num_clients=0).validate()
    with pytest.raises(ConfigError):
        _cfg(selected_per_round=3).validate()  # > num_clients
    with pytest.raises(ConfigError):
        _cfg(eval_metric="f1").validate()


def test_single_client_round_equals_centralized_epoch(tiny_dataset):
    # sc=1 of 1 client: one round of le epochs == plain centralized training
    train, test = tiny_dataset
    cfg = _cfg(num_clients=1, selected_per_round=1, local_epochs=2, rounds=1)
    from fedkit.transport import run_simulation

    res = run_simulation(cfg, train, test)
    shard = [train[i] for i in partition_iid(len(train), 1, cfg.seed)[0]]
    _, w0 = build_network(cfg.architecture, cfg.seed)
    central = local_train(w0, shard, cfg, client_id=0, round_index=1)
    assert max_weight_diff(res.final_weights, central.weights) <= 1e-6
