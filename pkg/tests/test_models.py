import numpy as np
import pytest

from conftest import assert_weights_equal
from fedkit.errors import ConfigError, IncompatibleWeightsError
from fedkit.models import (
    ARCHITECTURES,
    CLS_CNN_PLAIN,
    CLS_CNN_SKIP,
    SEG_UNET_MINI,
    ModelWeights,
    build_network,
    extract_weights,
    load_weights,
    parameter_count,
)


def test_parameter_counts_frozen():
    # oracle: hand-summed conv/dense tensor sizes for each fixed architecture
    assert parameter_count(SEG_UNET_MINI) == 5377
    assert parameter_count(CLS_CNN_PLAIN) == 5987
    assert parameter_count(CLS_CNN_SKIP) == 8307


def test_init_deterministic_and_seed_sensitive():
    _, w1 = build_network(SEG_UNET_MINI, seed=3)
    _, w2 = build_network(SEG_UNET_MINI, seed=3)
    assert_weights_equal(w1, w2)
    _, w3 = build_network(SEG_UNET_MINI, seed=4)
    assert any(
        not np.array_equal(a, b) for (_, a), (_, b) in zip(w1.params, w3.params)
    )


def test_seg_output_shape_and_range():
    net, _ = build_network(SEG_UNET_MINI, seed=0)
    x = np.random.default_rng(0).normal(size=(1, 1, 64, 64)).astype(np.float32)
    out = net.forward(x)
    assert out.shape == (1, 1, 64, 64)
    assert np.all(out > 0.0) and np.all(out < 1.0)


@pytest.mark.parametrize("arch", [CLS_CNN_PLAIN, CLS_CNN_SKIP])
def test_cls_output_shape(arch):
    net, _ = build_network(arch, seed=0)
    x = np.random.default_rng(1).normal(size=(3, 1, 64, 64)).astype(np.float32)
    assert net.forward(x).shape == (3, 3)


def test_weights_round_trip_bit_exact():
    for arch in ARCHITECTURES:
        net, w = build_network(arch, seed=7)
        load_weights(net, w)
        assert_weights_equal(extract_weights(net), w)


def test_load_rejects_wrong_architecture():
    net, _ = build_network(CLS_CNN_PLAIN, seed=0)
    _, w = build_network(SEG_UNET_MINI, seed=0)
    with pytest.raises(IncompatibleWeightsError):
        load_weights(net, w)


def test_load_rejects_altered_shape_naming_parameter():
    net, w = build_network(CLS_CNN_PLAIN, seed=0)
    bad = ModelWeights(
        w.architecture_id,
        [
            (name, np.zeros((1, 1), np.float32) if name == "stage2.conv.bias" else t)
            for name, t in w.params
        ],
    )
    with pytest.raises(IncompatibleWeightsError, match="stage2.conv.bias"):
        load_weights(net, bad)


def test_unknown_architecture():
    with pytest.raises(ConfigError):
        build_network("resnet50", seed=0)


def test_biases_start_at_zero():
    _, w = build_network(SEG_UNET_MINI, seed=0)
    for name, t in w.params:
        if name.endswith(".bias"):
            assert np.all(t == 0.0), name
