"""Synthetic segmentation data: shape images, splits, weak/strong augmentation.

Images are H x W x 3 floats in [0, 1]; masks are H x W uint8 class indices
with IGNORE_LABEL marking pixels excluded from supervision. All generation
and augmentation is deterministic given the seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .errors import InvalidParameterError, ParseError
from .interp import bilinear_resize, nearest_resize
from .losses import IGNORE_LABEL

DATASET_MAGIC = "SEGDATA 1"


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    mask: np.ndarray   # (H, W) uint8


@dataclass
class GeometryRecord:
    flip: bool
    top: int
    left: int
    crop_h: int
    crop_w: int


@dataclass
class AugmentedPair:
    weak: np.ndarray
    strong: np.ndarray
    mask: np.ndarray          # post-geometry mask, shared by both views
    geometry: GeometryRecord
    cutout_mask: np.ndarray   # (H, W) bool, True where the strong view is erased


def class_palette(classes):
    """Fixed base color per class: dark gray background, spaced hues for shapes."""
    colors = np.zeros((classes, 3))
    colors[0] = 0.25
    for k in range(1, classes):
        hue = (k - 1) / max(classes - 1, 1)
        colors[k] = hsv_to_rgb([hue, 0.6, 0.8])
    return colors


def _shape_region(rng, kind, height, width):
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cy = rng.uniform(0.2, 0.8) * height
    cx = rng.uniform(0.2, 0.8) * width
    a = rng.uniform(0.12, 0.3) * width
    b = rng.uniform(0.12, 0.3) * height
    if kind == 0:  # rectangle
        return (np.abs(yy - cy) <= b) & (np.abs(xx - cx) <= a)
    if kind == 1:  # ellipse
        return ((yy - cy) / b) ** 2 + ((xx - cx) / a) ** 2 <= 1.0
    # upward triangle
    h2 = 2.0 * b
    rel = (yy - (cy - b)) / h2
    return (rel >= 0) & (rel <= 1) & (np.abs(xx - cx) <= rel * a)


def generate_sample(seed, height=32, width=32, classes=5, shapes_per_image=3,
                    noise=0.1, lighting=True, class_decay=0.55,
                    tint_jitter=0.2, color_corr=1.0, hue_spread=0.0,
                    lighting_strength=1.4):
    """One random image of colored shapes over background class 0, plus exact mask.

    Each image also gets a global "lighting" perturbation (brightness, contrast
    and a hue rotation) so that absolute pixel color alone does not identify
    the class; set lighting=False for flat, jitter-free images.
    """
    if classes < 2:
        raise InvalidParameterError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    palette = class_palette(classes)
    if hue_spread > 0:
        # per-image hue offset rotates background and class hues together, so
        # part of the class cue is the hue relative to the background
        delta = rng.uniform(0.0, hue_spread)
        background = hsv_to_rgb([delta, 0.35, 0.5])
    else:
        delta = 0.0
        background = palette[0]
    image = np.broadcast_to(background, (height, width, 3)).copy()
    mask = np.zeros((height, width), dtype=np.uint8)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    count = 0 if shapes_per_image == 0 else int(rng.integers(1, shapes_per_image + 1))
    # long-tailed class frequencies: class k is class_decay times as common
    # as class k-1, so high classes are rare
    class_p = class_decay ** np.arange(classes - 1, dtype=np.float64)
    class_p /= class_p.sum()
    for _ in range(count):
        kind = int(rng.integers(0, 3))
        cls = 1 + int(rng.choice(classes - 1, p=class_p))
        region = _shape_region(rng, kind, height, width)
        # base color is class-correlated; color_corr < 1 mixes in a fully
        # random hue, weakening the cue
        if hue_spread > 0:
            hue = (delta + (cls - 0.5) / (classes - 1)
                   + rng.uniform(-0.02, 0.02)) % 1.0
            class_color = hsv_to_rgb([hue, 0.6, 0.8])
        else:
            class_color = palette[cls]
        random_color = hsv_to_rgb([rng.uniform(0.0, 1.0), 0.6, 0.8])
        base = color_corr * class_color + (1.0 - color_corr) * random_color
        tint = base * rng.uniform(1.0 - tint_jitter, 1.0 + tint_jitter, size=3)
        # striped nuisance texture inside the shape
        angle = rng.uniform(0.0, np.pi)
        freq = rng.uniform(0.3, 0.9)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.05, 0.3)
        stripe = 1.0 + amp * np.sin(freq * (np.cos(angle) * xx
                                            + np.sin(angle) * yy) + phase)
        image[region] = np.clip(tint[None, :] * stripe[region, None], 0.0, 1.0)
        mask[region] = cls
    if lighting:
        s = lighting_strength
        gx, gy = rng.uniform(-0.3 * s, 0.3 * s, size=2)  # uneven illumination
        illum = 1.0 + gx * (xx / width - 0.5) + gy * (yy / height - 0.5)
        image = image * illum[..., None]
        image = image * rng.uniform(max(0.05, 1.0 - 0.55 * s), 1.0 + 0.55 * s)
        mean = image.mean()
        contrast = rng.uniform(max(0.05, 1.0 - 0.45 * s), 1.0 + 0.45 * s)
        image = (image - mean) * contrast + mean
        hsv = rgb_to_hsv(np.clip(image, 0.0, 1.0))
        # hue stays narrow regardless of strength: it is the class cue
        hsv[..., 0] = (hsv[..., 0] + rng.uniform(-0.04, 0.04)) % 1.0
        image = hsv_to_rgb(hsv)
    image += rng.normal(0.0, noise, size=image.shape)
    return Sample(image=np.clip(image, 0.0, 1.0), mask=mask)


def generate_dataset(count, seed, **kwargs):
    """Deterministic list of samples; each sample gets an independent child seed."""
    child = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint64)
    return [generate_sample(int(s), **kwargs) for s in child]


def split(dataset, labeled_fraction, seed):
    """Labeled subset by random indices; the unlabeled set is the full dataset."""
    if not 0 < labeled_fraction <= 1:
        raise InvalidParameterError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    n = len(dataset)
    k = int(round(n * labeled_fraction))
    if k == 0:
        raise InvalidParameterError("labeled set would be empty")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=k, replace=False))
    return [dataset[i] for i in idx], list(dataset)


def _apply_geometry(image, mask, geo, height, width):
    img = image[:, ::-1] if geo.flip else image
    msk = mask[:, ::-1] if geo.flip else mask
    img = img[geo.top:geo.top + geo.crop_h, geo.left:geo.left + geo.crop_w]
    msk = msk[geo.top:geo.top + geo.crop_h, geo.left:geo.left + geo.crop_w]
    img = bilinear_resize(img, height, width)
    msk = nearest_resize(msk, height, width)
    return np.clip(img, 0.0, 1.0), msk


def augment_pair(sample, seed, flip_prob=0.5, crop_min_area=0.5, color_jitter=True,
                 cutout=True, fill_color=None):
    """Weak/strong augmented views sharing one geometry.

    The weak view gets flip + random crop-and-resize only. The strong view
    additionally gets brightness/contrast scaling, a hue rotation, and 1-2
    cutout rectangles filled with the mean color (each at most 12.5% area).
    Pixel correspondence between the views is the identity.
    """
    rng = np.random.default_rng(seed)
    h, w = sample.mask.shape
    flip = bool(rng.random() < flip_prob)
    scale = float(np.sqrt(rng.uniform(crop_min_area, 1.0)))
    ch = max(1, int(round(h * scale)))
    cw = max(1, int(round(w * scale)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    geo = GeometryRecord(flip=flip, top=top, left=left, crop_h=ch, crop_w=cw)
    weak, mask = _apply_geometry(sample.image, sample.mask, geo, h, w)

    strong = weak.copy()
    if color_jitter:
        brightness = rng.uniform(0.6, 1.4)
        contrast = rng.uniform(0.6, 1.4)
        hue_shift = rng.uniform(-0.1, 0.1)
        strong = strong * brightness
        mean = strong.mean()
        strong = (strong - mean) * contrast + mean
        hsv = rgb_to_hsv(np.clip(strong, 0.0, 1.0))
        hsv[..., 0] = (hsv[..., 0] + hue_shift) % 1.0
        strong = hsv_to_rgb(hsv)

    cut = np.zeros((h, w), dtype=bool)
    if cutout:
        fill = np.asarray(fill_color) if fill_color is not None else weak.mean(axis=(0, 1))
        for _ in range(int(rng.integers(1, 3))):
            fh = max(1, int(round(h * rng.uniform(0.2, 0.35))))
            fw = max(1, int(round(w * rng.uniform(0.2, 0.35))))
            t = int(rng.integers(0, h - fh + 1))
            l = int(rng.integers(0, w - fw + 1))
            cut[t:t + fh, l:l + fw] = True
        strong[cut] = fill
    strong = np.clip(strong, 0.0, 1.0)
    return AugmentedPair(weak=weak, strong=strong, mask=mask, geometry=geo,
                         cutout_mask=cut)


def correspondence(pair, strong_pixel):
    """Map a strong-view pixel to its weak-view counterpart (identity geometry)."""
    r, c = strong_pixel
    h, w = pair.mask.shape
    if not (0 <= r < h and 0 <= c < w):
        raise InvalidParameterError(f"pixel {strong_pixel} out of bounds for {h}x{w}")
    return (r, c)


def save_dataset(path, samples, classes):
    """Text header (magic, count, H, W, C) + float32 image / uint8 mask payloads."""
    if not samples:
        raise InvalidParameterError("refusing to write an empty dataset")
    h, w = samples[0].mask.shape
    with open(path, "wb") as f:
        f.write(f"{DATASET_MAGIC}\n{len(samples)} {h} {w} {classes}\n".encode("ascii"))
        for s in samples:
            f.write(s.image.astype("<f4").tobytes())
            f.write(s.mask.astype(np.uint8).tobytes())


def load_dataset(path):
    """Inverse of save_dataset; returns (samples, classes)."""
    with open(path, "rb") as f:
        magic = f.readline().decode("ascii").strip()
        if magic != DATASET_MAGIC:
            raise ParseError(f"bad dataset magic {magic!r} in {path}", line=1)
        fields = f.readline().split()
        if len(fields) != 4:
            raise ParseError(f"bad dataset header in {path}", line=2)
        count, h, w, classes = (int(x) for x in fields)
        samples = []
        img_bytes = h * w * 3 * 4
        for _ in range(count):
            image = np.frombuffer(f.read(img_bytes), dtype="<f4").reshape(h, w, 3)
            mask = np.frombuffer(f.read(h * w), dtype=np.uint8).reshape(h, w)
            samples.append(Sample(image=image.astype(np.float64), mask=mask.copy()))
    return samples, classes
