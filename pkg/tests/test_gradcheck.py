import numpy as np
import pytest

from conftest import randomize
from fedkit.errors import PrecisionError
from fedkit.gradcheck import gradient_check
from fedkit.layers import (
    ConcatChannels,
    Conv2D,
    Dense,
    Flatten,
    GlobalAvgPool,
    MaxPool2D,
    Network,
    NearestUpsample2D,
    ReLU,
    Sigmoid,
)
from fedkit.seeding import derive_rng


def _linear_net(seed):
    net = Network(
        "lin",
        [(Flatten("f"), None), (Dense("d", 16, 3, dtype=np.float64), None)],
        (1, 4, 4),
        dtype=np.float64,
    )
    return randomize(net, seed)


def _mini_seg_net(seed):
    """Same layer vocabulary as the real seg net, shrunk to 8x8 input."""
    layers = [
        (Conv2D("e.conv", 1, 3, 3, pad=1, dtype=np.float64), None),
        (ReLU("e.relu"), None),
        (MaxPool2D("e.pool"), None),
        (Conv2D("m.conv", 3, 4, 3, pad=1, dtype=np.float64), None),
        (ReLU("m.relu"), None),
        (NearestUpsample2D("d.up"), None),
        (ConcatChannels("d.cat"), 1),  # skip from e.relu (3ch @ 8x8)
        (Conv2D("d.conv", 7, 1, 3, pad=1, dtype=np.float64), None),
        (Sigmoid("d.sig"), None),
    ]
    return randomize(Network("mini-seg", layers, (1, 8, 8), dtype=np.float64), seed)


def _mini_cls_net(seed):
    layers = [
        (Conv2D("c1", 1, 3, 3, pad=1, dtype=np.float64), None),
        (ReLU("r1"), None),
        (MaxPool2D("p1"), None),
        (GlobalAvgPool("gap"), None),
        (Dense("fc", 3, 3, dtype=np.float64), None),
    ]
    return randomize(Network("mini-cls", layers, (1, 8, 8), dtype=np.float64), seed)


def test_linear_dense_ce_under_1e6():
    for seed in range(3):
        net = _linear_net(seed)
        rng = derive_rng(seed, "gc-lin")
        x = rng.uniform(-1, 1, size=(2, 1, 4, 4))
        labels = rng.integers(0, 3, size=2)
        assert gradient_check(net, x, labels, "ce") < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_mini_seg_bce_dice_under_1e5(seed):
    net = _mini_seg_net(seed)
    rng = derive_rng(seed, "gc-seg")
    x = rng.uniform(0, 1, size=(1, 1, 8, 8))
    mask = (rng.uniform(size=(1, 1, 8, 8)) > 0.5).astype(np.float64)
    assert gradient_check(net, x, mask, "bce_dice", seed=seed) < 1e-5


@pytest.mark.parametrize("seed", range(10))
def test_mini_cls_ce_under_1e5(seed):
    net = _mini_cls_net(seed)
    rng = derive_rng(seed, "gc-cls")
    x = rng.uniform(0, 1, size=(2, 1, 8, 8))
    labels = rng.integers(0, 3, size=2)
    assert gradient_check(net, x, labels, "ce", seed=seed) < 1e-5


def test_degenerate_zero_net_is_finite():
    net = _linear_net(0)
    for p in net.parameters():
        p.value[...] = 0.0
    err = gradient_check(net, np.zeros((1, 1, 4, 4)), np.array([0]), "ce")
    assert np.isfinite(err)


def test_single_precision_rejected():
    net = Network(
        "lin32",
        [(Flatten("f"), None), (Dense("d", 16, 3), None)],
        (1, 4, 4),
        dtype=np.float32,
    )
    with pytest.raises(PrecisionError):
        gradient_check(net, np.zeros((1, 1, 4, 4), np.float32), np.array([0]), "ce")


def test_detects_deliberately_scaled_gradient():
    # a 1% multiplicative gradient bug must not be absorbed by the
    # noise-floor subtraction or the step-size refinement
    net = _linear_net(0)
    orig_backward = net.backward

    def buggy_backward(out_grad):
        orig_backward(out_grad)
        for p in net.parameters():
            p.grad *= 1.01

    net.backward = buggy_backward
    rng = derive_rng(0, "gc-bug")
    x = rng.uniform(0, 1, size=(2, 1, 4, 4))
    labels = rng.integers(0, 3, size=2)
    err = gradient_check(net, x, labels, "ce")
    assert err > 1e-3  # ~0.01 / 2.01
