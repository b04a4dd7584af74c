"""Shared fixtures and helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from fedkit.datagen import Sample, _sample_seed, generate_sample
from fedkit.seeding import derive_rng


def randomize(net, seed: int, scale: float = 0.5):
    """Fill every parameter of a hand-built network with seeded uniforms."""
    for p in net.parameters():
        rng = derive_rng(seed, "test-init", p.name)
        p.value[...] = rng.uniform(-scale, scale, p.value.shape).astype(p.value.dtype)
    return net


def make_samples(per_class: int, seed: int) -> list[Sample]:
    """Balanced in-memory synthetic samples, deterministic in (seed, index)."""
    return [
        generate_sample(_sample_seed(seed, label, i), label)
        for label in (0, 1, 2)
        for i in range(per_class)
    ]


def assert_weights_equal(a, b, atol: float = 0.0):
    """Compare two ModelWeights (dataclass __eq__ is unusable with arrays)."""
    assert a.architecture_id == b.architecture_id
    assert a.names() == b.names()
    for (name, ta), (_, tb) in zip(a.params, b.params):
        assert ta.shape == tb.shape, name
        if atol == 0.0:
            assert np.array_equal(ta, tb), f"{name} differs"
        else:
            np.testing.assert_allclose(ta, tb, atol=atol, rtol=0, err_msg=name)


def max_weight_diff(a, b) -> float:
    assert a.names() == b.names()
    return max(
        float(np.max(np.abs(ta.astype(np.float64) - tb.astype(np.float64))))
        for (_, ta), (_, tb) in zip(a.params, b.params)
    )


@pytest.fixture(scope="session")
def tiny_dataset():
    """8 train + 4 test samples per class, shared across tests."""
    return make_samples(8, seed=100), make_samples(4, seed=200)
