"""Central-difference gradient verification for double-precision networks."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, PrecisionError
from .layers import Network
from .losses import bce_dice_loss, cross_entropy_loss
from .seeding import derive_rng


def _loss_and_grad(net: Network, x, target, loss_kind):
    out = net.forward(x)
    if loss_kind == "ce":
        return cross_entropy_loss(out, target)
    if loss_kind == "bce_dice":
        return bce_dice_loss(out, target)
    raise ConfigError(f"unknown loss kind {loss_kind!r}")


_EPS = float(np.finfo(np.float64).eps)


def gradient_check(
    net: Network,
    x: np.ndarray,
    target: np.ndarray,
    loss_kind: str,
    h: float = 1e-5,
    max_per_param: int = 100,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples up to `max_per_param` elements per parameter tensor (all if the
    tensor is smaller). Relative error per element is
    |a - n| / max(1e-12, |a| + |n|), after subtracting the rounding-noise
    floor of the two loss evaluations (eps * |loss| / h), which otherwise
    dominates on elements whose true derivative is near zero.

    Elements that still disagree are re-measured at smaller and larger step
    sizes and the best agreement is kept: a step crossing a ReLU/max-pool
    kink mismeasures the slope at one h but not at a finer one, while a
    genuinely wrong analytic gradient disagrees at every step size.
    """
    if net.dtype != np.float64:
        raise PrecisionError("gradient_check requires a double-precision network")
    net.zero_grad()
    _, out_grad = _loss_and_grad(net, x, target, loss_kind)
    net.backward(out_grad)
    analytic = {p.name: p.grad.copy() for p in net.parameters()}

    def elem_err(flat, i, a, step):
        orig = flat[i]
        flat[i] = orig + step
        lp, _ = _loss_and_grad(net, x, target, loss_kind)
        flat[i] = orig - step
        lm, _ = _loss_and_grad(net, x, target, loss_kind)
        flat[i] = orig
        numeric = (lp - lm) / (2.0 * step)
        noise = _EPS * max(abs(lp), abs(lm), 1.0) / step
        diff = max(0.0, abs(a - numeric) - noise)
        return diff / max(1e-12, abs(a) + abs(numeric))

    worst = 0.0
    for p in net.parameters():
        flat = p.value.reshape(-1)
        n = flat.size
        if n <= max_per_param:
            idxs = np.arange(n)
        else:
            idxs = derive_rng(seed, "gradcheck", p.name).choice(n, max_per_param, replace=False)
        a_flat = analytic[p.name].reshape(-1)
        for i in idxs:
            a = a_flat[i]
            err = elem_err(flat, i, a, h)
            if err > 1e-7:
                for step in (h / 16.0, h / 256.0, h * 16.0):
                    err = min(err, elem_err(flat, i, a, step))
                    if err <= 1e-7:
                        break
            if err > worst:
                worst = err
    if not np.isfinite(worst):
        raise FloatingPointError("non-finite relative error in gradient check")
    return worst
