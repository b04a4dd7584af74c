"""SGD, Adagrad and Adam with coupled-L2 weight decay.

Weight decay is folded into the gradient (g <- g + wd*w) before any
accumulator update, matching the usual framework default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .layers import Parameter

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
ADAGRAD_EPS = 1e-10


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str  # "sgd" | "adagrad" | "adam"
    lr: float
    weight_decay: float = 0.0

    def validate(self):
        if self.kind not in ("sgd", "adagrad", "adam"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be non-negative, got {self.weight_decay}")


class Optimizer:
    def __init__(self, params: list[Parameter], spec: OptimizerSpec):
        spec.validate()
        self.params = list(params)
        self.lr = spec.lr
        self.weight_decay = spec.weight_decay

    def _decayed_grad(self, p: Parameter) -> np.ndarray:
        if self.weight_decay:
            return p.grad + self.weight_decay * p.value
        return p.grad

    def step(self):
        raise NotImplementedError


class SGD(Optimizer):
    def step(self):
        for p in self.params:
            p.value -= (self.lr * self._decayed_grad(p)).astype(p.value.dtype, copy=False)


class Adagrad(Optimizer):
    def __init__(self, params, spec):
        super().__init__(params, spec)
        self.accum = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        for p, g2 in zip(self.params, self.accum):
            g = self._decayed_grad(p)
            g2 += g * g
            p.value -= (self.lr * g / (np.sqrt(g2) + ADAGRAD_EPS)).astype(
                p.value.dtype, copy=False
            )


class Adam(Optimizer):
    def __init__(self, params, spec):
        super().__init__(params, spec)
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1**self.t
        bc2 = 1.0 - ADAM_BETA2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = self._decayed_grad(p)
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p.value -= (self.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(
                p.value.dtype, copy=False
            )


_KINDS = {"sgd": SGD, "adagrad": Adagrad, "adam": Adam}


def make_optimizer(params: list[Parameter], spec: OptimizerSpec) -> Optimizer:
    spec.validate()
    return _KINDS[spec.kind](params, spec)
