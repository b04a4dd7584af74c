"""Losses and evaluation metrics, each returning (value, gradient) where trained."""

from __future__ import annotations

import numpy as np

from .errors import InputError, ShapeError

PROB_CLAMP = 1e-7
DICE_SMOOTH = 1.0
JACCARD_SMOOTH = 1e-6


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-softmax of the true class. Returns (loss, dLogits)."""
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ShapeError(f"logits must be [N,K], got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise InputError(f"label out of range [0,{k})")
    p = softmax(logits.astype(np.float64))
    rows = np.arange(n)
    loss = float(-np.log(p[rows, labels]).mean())
    grad = p
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype)


def bce_dice_loss(probs: np.ndarray, mask: np.ndarray):
    """BCE plus one-minus-soft-Dice, both averaged over the batch.

    `probs` is clamped into [PROB_CLAMP, 1-PROB_CLAMP]; the gradient is zero
    where the clamp binds. Returns (loss, dProbs).
    """
    if probs.shape != mask.shape:
        raise ShapeError(f"probs shape {probs.shape} != mask shape {mask.shape}")
    if probs.ndim != 4:
        raise ShapeError(f"expected [N,1,H,W], got {probs.shape}")
    n = probs.shape[0]
    p64 = probs.astype(np.float64)
    m = mask.astype(np.float64)
    inside = (p64 > PROB_CLAMP) & (p64 < 1.0 - PROB_CLAMP)
    p = np.clip(p64, PROB_CLAMP, 1.0 - PROB_CLAMP)

    per_pixel = p64.size
    bce = float((-m * np.log(p) - (1.0 - m) * np.log(1.0 - p)).mean())
    dbce = (-m / p + (1.0 - m) / (1.0 - p)) / per_pixel

    axes = (1, 2, 3)
    inter = (p * m).sum(axis=axes)
    sums = p.sum(axis=axes) + m.sum(axis=axes)
    dice = (2.0 * inter + DICE_SMOOTH) / (sums + DICE_SMOOTH)
    dice_loss = float((1.0 - dice).mean())
    # d(1-dice_i)/dp = -(2m(sums+eps) - (2*inter+eps)) / (sums+eps)^2, averaged over batch
    denom = (sums + DICE_SMOOTH)[:, None, None, None]
    ddice = -(2.0 * m * denom - (2.0 * inter + DICE_SMOOTH)[:, None, None, None]) / denom**2
    ddice /= n

    grad = (dbce + ddice) * inside
    return bce + dice_loss, grad.astype(probs.dtype)


def jaccard_index(probs: np.ndarray, mask: np.ndarray, threshold: float = 0.5) -> float:
    """Batch-mean smoothed intersection-over-union of the thresholded prediction."""
    if probs.shape != mask.shape:
        raise ShapeError(f"probs shape {probs.shape} != mask shape {mask.shape}")
    pred = probs >= threshold
    m = mask >= threshold
    axes = tuple(range(1, probs.ndim))
    inter = (pred & m).sum(axis=axes)
    union = (pred | m).sum(axis=axes)
    return float(((inter + JACCARD_SMOOTH) / (union + JACCARD_SMOOTH)).mean())


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax (ties to lowest index) equals the label."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [N,K], got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels must have shape ({logits.shape[0]},)")
    return float((logits.argmax(axis=1) == labels).mean())
