"""Toy-scale architectures and the weight collection exchanged in federation.

Three fixed architectures on 64x64 grayscale input:

- seg-unet-mini: encoder-decoder with one concat skip, sigmoid mask output
- cls-cnn-plain: three conv-relu-pool stages, global average pool, 3-way head
- cls-cnn-skip:  same plus a residual 16->16 conv block in the middle
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, IncompatibleWeightsError
from .layers import (
    AddSkip,
    ConcatChannels,
    Conv2D,
    Dense,
    GlobalAvgPool,
    MaxPool2D,
    NearestUpsample2D,
    Network,
    ReLU,
    Sigmoid,
)
from .seeding import derive_rng

SEG_UNET_MINI = "seg-unet-mini"
CLS_CNN_PLAIN = "cls-cnn-plain"
CLS_CNN_SKIP = "cls-cnn-skip"
ARCHITECTURES = (SEG_UNET_MINI, CLS_CNN_PLAIN, CLS_CNN_SKIP)

INPUT_SIZE = 64
NUM_CLASSES = 3


@dataclass
class ModelWeights:
    """Ordered, named parameter tensors; the unit the server and clients exchange."""

    architecture_id: str
    params: list[tuple[str, np.ndarray]] = field(default_factory=list)

    def names(self) -> list[str]:
        return [name for name, _ in self.params]


def _seg_layers(dtype):
    return [
        (Conv2D("enc1.conv", 1, 8, 3, pad=1, dtype=dtype), None),
        (ReLU("enc1.relu"), None),
        (MaxPool2D("enc1.pool"), None),  # 8ch @ 32, skip source
        (Conv2D("enc2.conv", 8, 16, 3, pad=1, dtype=dtype), None),
        (ReLU("enc2.relu"), None),
        (MaxPool2D("enc2.pool"), None),  # 16ch @ 16
        (Conv2D("mid.conv", 16, 16, 3, pad=1, dtype=dtype), None),
        (ReLU("mid.relu"), None),
        (NearestUpsample2D("dec1.up"), None),  # 16ch @ 32
        (ConcatChannels("dec1.cat"), 2),  # + 8ch from enc1.pool -> 24ch
        (Conv2D("dec1.conv", 24, 8, 3, pad=1, dtype=dtype), None),
        (ReLU("dec1.relu"), None),
        (NearestUpsample2D("dec2.up"), None),  # 8ch @ 64
        (Conv2D("head.conv", 8, 1, 3, pad=1, dtype=dtype), None),
        (Sigmoid("head.sigmoid"), None),
    ]


def _cls_layers(dtype, with_skip):
    layers = [
        (Conv2D("stage1.conv", 1, 8, 3, pad=1, dtype=dtype), None),
        (ReLU("stage1.relu"), None),
        (MaxPool2D("stage1.pool"), None),  # 8ch @ 32
        (Conv2D("stage2.conv", 8, 16, 3, pad=1, dtype=dtype), None),
        (ReLU("stage2.relu"), None),
        (MaxPool2D("stage2.pool"), None),  # 16ch @ 16, index 5
    ]
    if with_skip:
        layers += [
            (Conv2D("res.conv", 16, 16, 3, pad=1, dtype=dtype), None),
            (ReLU("res.relu"), None),
            (AddSkip("res.add"), 5),
        ]
    layers += [
        (Conv2D("stage3.conv", 16, 32, 3, pad=1, dtype=dtype), None),
        (ReLU("stage3.relu"), None),
        (MaxPool2D("stage3.pool"), None),  # 32ch @ 8
        (GlobalAvgPool("gap"), None),
        (Dense("head.fc", 32, NUM_CLASSES, dtype=dtype), None),
    ]
    return layers


def _he_uniform_init(net: Network, seed: int):
    """He-uniform weights (+-sqrt(6/fan_in)), zero biases, seeded per parameter name."""
    for layer, _ in net.layers:
        for p in layer.params:
            if not p.name.endswith(".weight"):
                continue
            if p.value.ndim == 4:
                fan_in = p.value.shape[1] * p.value.shape[2] * p.value.shape[3]
            else:
                fan_in = p.value.shape[1]
            bound = np.sqrt(6.0 / fan_in)
            rng = derive_rng(seed, p.name)
            p.value[...] = rng.uniform(-bound, bound, p.value.shape).astype(p.value.dtype)


def build_network(arch: str, seed: int, dtype=np.float32):
    """Construct and initialize a network. Returns (network, initial weights)."""
    if arch == SEG_UNET_MINI:
        layers = _seg_layers(dtype)
    elif arch == CLS_CNN_PLAIN:
        layers = _cls_layers(dtype, with_skip=False)
    elif arch == CLS_CNN_SKIP:
        layers = _cls_layers(dtype, with_skip=True)
    else:
        raise ConfigError(f"unknown architecture {arch!r}")
    net = Network(arch, layers, (1, INPUT_SIZE, INPUT_SIZE), dtype=dtype)
    _he_uniform_init(net, seed)
    return net, extract_weights(net)


def extract_weights(net: Network) -> ModelWeights:
    """Copy the network's parameters into a single-precision ModelWeights."""
    return ModelWeights(
        net.arch_id,
        [(p.name, p.value.astype(np.float32, copy=True)) for p in net.parameters()],
    )


def load_weights(net: Network, weights: ModelWeights):
    """Load weights in place; extract_weights(load(w)) == w bit-exactly."""
    if weights.architecture_id != net.arch_id:
        raise IncompatibleWeightsError(
            f"weights for {weights.architecture_id!r} cannot load into {net.arch_id!r}"
        )
    params = net.parameters()
    if len(params) != len(weights.params):
        raise IncompatibleWeightsError(
            f"parameter count mismatch: {len(weights.params)} vs {len(params)}"
        )
    for p, (name, tensor) in zip(params, weights.params):
        if p.name != name:
            raise IncompatibleWeightsError(f"parameter name mismatch at {name!r} (expected {p.name!r})")
        if p.value.shape != tensor.shape:
            raise IncompatibleWeightsError(
                f"shape mismatch for {name!r}: {tensor.shape} vs {p.value.shape}"
            )
        p.value[...] = tensor.astype(p.value.dtype, copy=False)


def parameter_count(arch: str) -> int:
    _, w = build_network(arch, seed=0)
    return sum(t.size for _, t in w.params)
