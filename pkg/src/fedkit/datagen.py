"""Synthetic lung-like images: generation, augmentation, masking, disk I/O.

Each sample is a 64x64 grayscale image with two elliptical "lungs", a binary
lung mask, and a 3-way label:

- 0: lungs only
- 1: a bright artifact outside the lungs, or a rib-like stripe pattern
- 2: a bright blob inside a lung

Images and masks are stored as binary PGM (P5); the dataset manifest is JSON.
Generation is a pure function of (seed, label), so datasets rebuild
byte-identically.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import InputError, ShapeError
from .seeding import derive_rng

IMG_SIZE = 64
LABEL_NORMAL = 0
LABEL_NOT_NORMAL = 1
LABEL_OPACITY = 2

_BACKGROUND = 0.05
_LUNG_LEVEL = 0.50
_NOISE_AMPLITUDE = 0.1
_BLOB_BOOST = 0.5
_ARTIFACT_LEVEL = 1.0
MANIFEST_NAME = "manifest.json"


@dataclass
class Sample:
    image: np.ndarray  # [1,H,W] float32 in [0,1]
    lung_mask: np.ndarray  # [1,H,W] float32 in {0,1}
    label: int
    sample_id: str = ""


def _grid():
    yy, xx = np.mgrid[0:IMG_SIZE, 0:IMG_SIZE].astype(np.float64)
    return yy, xx


def _ellipse(yy, xx, cx, cy, ax, ay):
    return ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0


def generate_sample(seed: int, label: int) -> Sample:
    if label not in (LABEL_NORMAL, LABEL_NOT_NORMAL, LABEL_OPACITY):
        raise InputError(f"invalid label {label}")
    rng = derive_rng(seed, label, "sample")
    yy, xx = _grid()

    lungs = []
    for x_lo, x_hi in ((16.0, 21.0), (43.0, 48.0)):
        cx = rng.uniform(x_lo, x_hi)
        cy = rng.uniform(29.0, 35.0)
        ax = rng.uniform(8.0, 11.0)
        ay = rng.uniform(11.0, 14.0)
        lungs.append((cx, cy, ax, ay))
    mask = np.zeros((IMG_SIZE, IMG_SIZE), dtype=bool)
    for cx, cy, ax, ay in lungs:
        mask |= _ellipse(yy, xx, cx, cy, ax, ay)

    img = np.where(mask, _LUNG_LEVEL, _BACKGROUND)
    img = img + rng.uniform(0.0, _NOISE_AMPLITUDE, img.shape)

    if label == LABEL_OPACITY:
        cx, cy, ax, ay = lungs[int(rng.integers(2))]
        r = rng.uniform(5.0, 6.0)
        # blob fully inside the ellipse: center within the margin-shrunk ellipse
        t = rng.uniform(0.0, 2.0 * math.pi)
        u = math.sqrt(rng.uniform())
        bx = cx + u * max(ax - r - 1.0, 0.0) * math.cos(t)
        by = cy + u * max(ay - r - 1.0, 0.0) * math.sin(t)
        blob = (xx - bx) ** 2 + (yy - by) ** 2 <= r * r
        img = img + _BLOB_BOOST * blob
    elif label == LABEL_NOT_NORMAL:
        if rng.integers(2) == 0:
            # saturated-bright artifact in the strip above the lungs
            bx = rng.uniform(10.0, 54.0)
            by = rng.uniform(4.0, 9.0)
            r = rng.uniform(3.0, 5.0)
            blob = (xx - bx) ** 2 + (yy - by) ** 2 <= r * r
            img = np.where(blob & ~mask, _ARTIFACT_LEVEL, img)
        else:
            phase = rng.uniform(0.0, 2.0 * math.pi)
            stripes = 0.25 * (0.5 + 0.5 * np.sin(2.0 * math.pi * yy / 8.0 + phase))
            img = img + stripes * ~mask

    img = np.clip(img, 0.0, 1.0)
    frac = mask.mean()
    if not 0.10 <= frac <= 0.50:
        raise AssertionError(f"mask area fraction {frac:.3f} outside [0.10, 0.50]")
    return Sample(
        image=img[None].astype(np.float32),
        lung_mask=mask[None].astype(np.float32),
        label=label,
    )


# ---------------------------------------------------------------- augmentation


def hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[..., ::-1])


def affine_transform(
    image2d: np.ndarray, angle_deg: float, tx: float, ty: float, mode: str = "bilinear"
) -> np.ndarray:
    """Rotate by angle_deg about the image centre, then translate by (tx, ty) pixels.

    Rotation convention: a point p maps to R(theta) @ (p - c) + c + t with
    R = [[cos, -sin], [sin, cos]] acting on (x, y). Implemented by inverse
    mapping; out-of-frame pixels are filled with 0.
    """
    h, w = image2d.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = math.radians(angle_deg)
    cos, sin = math.cos(th), math.sin(th)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    x0 = xx - cx - tx
    y0 = yy - cy - ty
    sx = cos * x0 + sin * y0 + cx
    sy = -sin * x0 + cos * y0 + cy

    if mode == "nearest":
        ix = np.rint(sx).astype(np.int64)
        iy = np.rint(sy).astype(np.int64)
        valid = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        out = np.zeros_like(image2d, dtype=np.float64)
        out[valid] = image2d[iy[valid], ix[valid]]
        return out.astype(image2d.dtype)
    if mode != "bilinear":
        raise InputError(f"unknown resampling mode {mode!r}")

    x0f = np.floor(sx).astype(np.int64)
    y0f = np.floor(sy).astype(np.int64)
    fx = sx - x0f
    fy = sy - y0f
    out = np.zeros((h, w), dtype=np.float64)
    for dy, dx, wgt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        ix = x0f + dx
        iy = y0f + dy
        valid = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        vals = np.zeros((h, w), dtype=np.float64)
        vals[valid] = image2d[iy[valid], ix[valid]]
        out += wgt * vals
    return out.astype(image2d.dtype)


def augment_with_rng(sample: Sample, rng: np.random.Generator) -> Sample:
    """Random horizontal flip (p=0.5) plus random affine (+-10 deg, +-5% shift).

    Image and mask are transformed jointly: bilinear for the image,
    nearest-neighbour for the mask.
    """
    img = sample.image[0]
    msk = sample.lung_mask[0]
    if rng.uniform() < 0.5:
        img = hflip(img)
        msk = hflip(msk)
    angle = rng.uniform(-10.0, 10.0)
    tx = rng.uniform(-0.05, 0.05) * img.shape[1]
    ty = rng.uniform(-0.05, 0.05) * img.shape[0]
    img = affine_transform(img, angle, tx, ty, mode="bilinear")
    msk = affine_transform(msk, angle, tx, ty, mode="nearest")
    return Sample(
        image=img[None].astype(np.float32),
        lung_mask=msk[None].astype(np.float32),
        label=sample.label,
        sample_id=sample.sample_id,
    )


def augment(sample: Sample, seed: int) -> Sample:
    return augment_with_rng(sample, derive_rng(seed, "augment"))


def apply_lung_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero the background, keep the lung region, preserve alignment."""
    if image.shape != mask.shape:
        raise ShapeError(f"image shape {image.shape} != mask shape {mask.shape}")
    return (image * mask).astype(image.dtype)


# ------------------------------------------------------------------- PGM I/O


def write_pgm(path, image2d: np.ndarray):
    """Write a [0,1] grayscale array as binary PGM (P5), round-half-up to 8 bit."""
    data = np.floor(np.clip(image2d, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5) with maxval 255 into a [0,1] float32 array."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P5"):
        raise InputError(f"{path}: not a binary PGM (P5) file")
    # header = 4 whitespace-separated tokens, '#' comments allowed
    tokens = []
    i = 2
    while len(tokens) < 3 and i < len(raw):
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < len(raw) and not raw[i : i + 1].isspace():
            i += 1
        tokens.append(raw[start:i])
    i += 1  # single whitespace byte after maxval
    if len(tokens) < 3:
        raise InputError(f"{path}: malformed PGM header")
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise InputError(f"{path}: unsupported maxval {maxval}")
    body = raw[i : i + w * h]
    if len(body) != w * h:
        raise InputError(f"{path}: truncated pixel data")
    return (np.frombuffer(body, dtype=np.uint8).reshape(h, w) / 255.0).astype(np.float32)


# ------------------------------------------------------------------ datasets


def _sample_seed(seed: int, label: int, index: int) -> int:
    return int(np.random.SeedSequence([seed & (2**64 - 1), label, index]).generate_state(1)[0])


def _write_split(root, samples: list[Sample]):
    for s in samples:
        split = s.sample_id.split("_", 1)[0]
        d = os.path.join(root, split)
        os.makedirs(d, exist_ok=True)
        write_pgm(os.path.join(d, f"{s.sample_id}_img.pgm"), s.image[0])
        write_pgm(os.path.join(d, f"{s.sample_id}_mask.pgm"), s.lung_mask[0])


def _manifest_entry(s: Sample):
    split = s.sample_id.split("_", 1)[0]
    return {
        "id": s.sample_id,
        "split": split,
        "label": s.label,
        "image": f"{split}/{s.sample_id}_img.pgm",
        "mask": f"{split}/{s.sample_id}_mask.pgm",
    }


def build_dataset(out_dir, per_class: int, seed: int, split_ratio: float = 0.9):
    """Generate a balanced 3-class dataset and write it under out_dir.

    Per class the split is train:test = ratio:(1-ratio), test count rounded
    down but at least 1. Returns (train samples, test samples, manifest dict).
    """
    if per_class < 10:
        raise InputError(f"need at least 10 samples per class, got {per_class}")
    if not 0.5 <= split_ratio < 1.0:
        raise InputError(f"split ratio must be in [0.5, 1), got {split_ratio}")
    test_count = max(1, int(per_class * (1.0 - split_ratio)))
    train_count = per_class - test_count

    train, test = [], []
    for label in (LABEL_NORMAL, LABEL_NOT_NORMAL, LABEL_OPACITY):
        for i in range(per_class):
            s = generate_sample(_sample_seed(seed, label, i), label)
            if i < train_count:
                s.sample_id = f"train_{label}_{i:04d}"
                train.append(s)
            else:
                s.sample_id = f"test_{label}_{i:04d}"
                test.append(s)

    os.makedirs(out_dir, exist_ok=True)
    _write_split(out_dir, train)
    _write_split(out_dir, test)
    manifest = {
        "version": 1,
        "kind": "full",
        "seed": seed,
        "split_ratio": split_ratio,
        "counts": {
            "train": {str(lbl): train_count for lbl in (0, 1, 2)},
            "test": {str(lbl): test_count for lbl in (0, 1, 2)},
        },
        "samples": [_manifest_entry(s) for s in train + test],
    }
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return train, test, manifest


def load_dataset(root):
    """Load a dataset tree written by build_dataset or segment_dataset."""
    with open(os.path.join(root, MANIFEST_NAME)) as f:
        manifest = json.load(f)
    train, test = [], []
    for entry in manifest["samples"]:
        s = Sample(
            image=read_pgm(os.path.join(root, entry["image"]))[None],
            lung_mask=read_pgm(os.path.join(root, entry["mask"]))[None],
            label=int(entry["label"]),
            sample_id=entry["id"],
        )
        (train if entry["split"] == "train" else test).append(s)
    return train, test, manifest


def segment_dataset(seg_weights, in_root, out_root, batch_size: int = 16, threshold: float = 0.5):
    """Mask every image with the segmentation model's thresholded prediction.

    Writes a parallel tree under out_root with manifest kind "segmented".
    Mask files carry the ground-truth lung masks unchanged (needed for
    downstream explanation scoring).
    """
    from .errors import IncompatibleWeightsError
    from .models import SEG_UNET_MINI, build_network, load_weights

    if seg_weights.architecture_id != SEG_UNET_MINI:
        raise IncompatibleWeightsError(
            f"segment_dataset requires seg-unet-mini weights, got {seg_weights.architecture_id!r}"
        )
    net, _ = build_network(SEG_UNET_MINI, seed=0)
    load_weights(net, seg_weights)

    train, test, manifest = load_dataset(in_root)
    masked = []
    for samples in (train, test):
        for i in range(0, len(samples), batch_size):
            batch = samples[i : i + batch_size]
            x = np.stack([s.image for s in batch])
            probs = net.forward(x)
            pred = (probs >= threshold).astype(np.float32)
            for s, pm in zip(batch, pred):
                masked.append(
                    Sample(
                        image=apply_lung_mask(s.image, pm),
                        lung_mask=s.lung_mask,
                        label=s.label,
                        sample_id=s.sample_id,
                    )
                )

    os.makedirs(out_root, exist_ok=True)
    _write_split(out_root, masked)
    out_manifest = dict(manifest)
    out_manifest["kind"] = "segmented"
    out_manifest["samples"] = [_manifest_entry(s) for s in masked]
    with open(os.path.join(out_root, MANIFEST_NAME), "w") as f:
        json.dump(out_manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    n_train = sum(1 for s in masked if s.sample_id.startswith("train"))
    return masked[:n_train], masked[n_train:], out_manifest
