"""Procedural CT-like slices with blob infections, for desk-scale runs and tests."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .data import BinaryMask, CTSlice, normalize_intensity, save_mask_png
from .multiclass import save_palette_png

GGO, CONSOLIDATION = 1, 2


def _ellipse(h, w, cy, cx, ry, rx, angle=0.0):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def synthetic_slice(rng: np.random.Generator, size: int = 64, max_blobs: int = 3):
    """Return ``(pixels in [0,1], multi-class labels)`` for one slice.

    Two dark lung fields sit inside a brighter body; infections are blobs inside
    the lungs, hazy for GGO and dense for consolidation.
    """
    h = w = size
    body = _ellipse(h, w, h / 2, w / 2, 0.46 * h, 0.48 * w)
    lungs = np.zeros((h, w), dtype=bool)
    for side in (-1, 1):
        lungs |= _ellipse(h, w, h * rng.uniform(0.45, 0.55), w / 2 + side * w * 0.2,
                          h * rng.uniform(0.28, 0.34), w * rng.uniform(0.13, 0.17))
    img = np.where(body, 0.6, 0.05)
    img = np.where(lungs, 0.15, img)
    labels = np.zeros((h, w), dtype=np.uint8)
    ys, xs = np.nonzero(lungs)
    for _ in range(int(rng.integers(1, max_blobs + 1))):
        k = int(rng.integers(len(ys)))
        blob = _ellipse(h, w, ys[k], xs[k], size * rng.uniform(0.05, 0.13), size * rng.uniform(0.05, 0.13),
                        rng.uniform(0, np.pi)) & lungs
        cls = GGO if rng.random() < 0.6 else CONSOLIDATION
        labels[blob] = cls
    img = np.where(labels == GGO, 0.38, img)
    img = np.where(labels == CONSOLIDATION, 0.55, img)
    texture = ndimage.gaussian_filter(rng.normal(0, 1, (h, w)), 1.5)
    img = img + 0.06 * texture / (texture.std() + 1e-12) + rng.normal(0, 0.03, (h, w))
    return normalize_intensity(img), labels


def synthetic_pairs(n: int, size: int = 64, seed: int = 0, prefix: str = "syn"):
    """``n`` labeled (CTSlice, BinaryMask) pairs plus their multi-class label maps."""
    rng = np.random.default_rng(seed)
    pairs, labels = [], []
    for k in range(n):
        pixels, lab = synthetic_slice(rng, size)
        sid = f"{prefix}{k:04d}"
        pairs.append((CTSlice(pixels, sid), BinaryMask((lab > 0).astype(np.uint8), sid)))
        labels.append(lab)
    return pairs, labels


def synthetic_unlabeled(n: int, size: int = 64, seed: int = 1, prefix: str = "unl"):
    rng = np.random.default_rng(seed)
    return [CTSlice(synthetic_slice(rng, size)[0], f"{prefix}{k:04d}", "unlabeled") for k in range(n)]


def write_synthetic_dataset(root, n_labeled: int = 20, n_unlabeled: int = 10, size: int = 64, seed: int = 0) -> Path:
    """Materialize the on-disk dataset layout expected by ``load_dataset``."""
    root = Path(root)
    for sub in ("images", "masks", "unlabeled", "multiclass_masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    pairs, labels = synthetic_pairs(n_labeled, size, seed)
    for (s, m), lab in zip(pairs, labels):
        Image.fromarray(np.round(s.pixels * 255).astype(np.uint8), mode="L").save(root / "images" / f"{s.id}.png")
        save_mask_png(m.values, root / "masks" / f"{s.id}.png")
        save_palette_png(lab, root / "multiclass_masks" / f"{s.id}.png")
    for s in synthetic_unlabeled(n_unlabeled, size, seed + 1):
        Image.fromarray(np.round(s.pixels * 255).astype(np.uint8), mode="L").save(root / "unlabeled" / f"{s.id}.png")
    return root
