"""Grad-CAM heatmaps for the classifiers plus a quantitative lung-focus score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import Conv2D, Network


@dataclass
class Heatmap:
    values: np.ndarray  # [H,W] in [0,1]
    target_class: int
    tap_layer: str


def _default_tap(net: Network) -> int:
    last = None
    for i, (layer, _) in enumerate(net.layers):
        if isinstance(layer, Conv2D):
            last = i
    if last is None:
        raise ConfigError("network has no conv layer to tap")
    return last


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear upsampling with corner-aligned sampling."""
    h, w = arr.shape
    if (h, w) == (out_h, out_w):
        return arr.copy()
    ys = np.linspace(0.0, h - 1.0, out_h)
    xs = np.linspace(0.0, w - 1.0, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = arr[np.ix_(y0, x0)]
    b = arr[np.ix_(y0, x1)]
    c = arr[np.ix_(y1, x0)]
    d = arr[np.ix_(y1, x1)]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def grad_cam(
    net: Network, image: np.ndarray, target_class: int, tap_layer: str | None = None
) -> Heatmap:
    """ReLU-rectified, gradient-weighted activation map for one input image.

    The target score is the pre-softmax logit. Channel weights are the
    spatial means of the logit's gradient at the tap layer; the raw map is
    bilinearly upsampled to the input size and normalized by its max (all
    zeros if no activation survives the ReLU).
    """
    if tap_layer is None:
        tap_idx = _default_tap(net)
    else:
        tap_idx = net.layer_index(tap_layer)
    layer = net.layers[tap_idx][0]
    if not isinstance(layer, Conv2D):
        raise ConfigError(f"tap layer {layer.name!r} is not a conv activation")

    x = image[None] if image.ndim == 3 else image
    logits = net.forward(x)
    if logits.ndim != 2 or not 0 <= target_class < logits.shape[1]:
        raise ConfigError(f"target class {target_class} invalid for output {logits.shape}")
    out_grad = np.zeros_like(logits)
    out_grad[0, target_class] = 1.0
    net.backward(out_grad)

    acts = net.activation(tap_idx)[0]  # [K,h,w]
    grads = net.activation_grad(tap_idx)[0]
    alpha = grads.mean(axis=(1, 2))
    raw = np.maximum((alpha[:, None, None] * acts).sum(axis=0), 0.0)
    up = bilinear_resize(raw.astype(np.float64), x.shape[2], x.shape[3])
    up = np.maximum(up, 0.0)
    peak = up.max()
    if peak > 0:
        up /= peak
    return Heatmap(values=up, target_class=target_class, tap_layer=layer.name)


def lung_focus_score(heatmap: np.ndarray, lung_mask: np.ndarray) -> float:
    """Fraction of heatmap mass inside the lung mask; 0 for an all-zero map."""
    hm = np.asarray(heatmap)
    mask = np.asarray(lung_mask)
    if mask.ndim == 3:
        mask = mask[0]
    if hm.shape != mask.shape:
        raise ShapeError(f"heatmap shape {hm.shape} != mask shape {mask.shape}")
    total = hm.sum()
    if total <= 0:
        return 0.0
    return float((hm * mask).sum() / total)


def save_overlay(image: np.ndarray, heatmap: np.ndarray, path):
    """Write a PPM (P6): red channel = heatmap, green/blue = grayscale image."""
    img = image[0] if image.ndim == 3 else image
    if img.shape != heatmap.shape:
        raise ShapeError(f"image shape {img.shape} != heatmap shape {heatmap.shape}")
    to8 = lambda a: np.floor(np.clip(a, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = img.shape
    rgb = np.stack([to8(heatmap), to8(img), to8(img)], axis=-1)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM (P6) into [H,W,3] float32 in [0,1] (for tests/tools)."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P6"):
        raise ShapeError(f"{path}: not a binary PPM (P6) file")
    tokens = []
    i = 2
    while len(tokens) < 3:
        while raw[i : i + 1].isspace():
            i += 1
        start = i
        while not raw[i : i + 1].isspace():
            i += 1
        tokens.append(raw[start:i])
    i += 1
    w, h, _ = (int(t) for t in tokens)
    body = raw[i : i + 3 * w * h]
    return (np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3) / 255.0).astype(np.float32)
