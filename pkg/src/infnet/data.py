"""CT slice / mask ingestion, edge ground truth, resizing and multi-scale batching.

Dataset layout on disk::

    root/
      images/<id>.png|jpg           labeled grayscale slices
      masks/<id>.png                binary masks stored as 0/255
      unlabeled/<id>.png|jpg        slices without annotation (optional)
      multiclass_masks/<id>.png     palette masks over {0,1,2} (optional)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .errors import ContractError, LoadError, ValidationError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MIN_SIDE = 64
DEFAULT_SCALES = (0.75, 1.0, 1.25)
STRIDE_MULTIPLE = 32


def normalize_intensity(raw: np.ndarray) -> np.ndarray:
    """Map the image's min/max onto [0, 1]. Constant images become all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo <= 0:
        return np.zeros(raw.shape, dtype=np.float32)
    return ((raw - lo) / (hi - lo)).astype(np.float32)


def standardize(pixels: np.ndarray, mean: float, std: float) -> np.ndarray:
    """Optional mean/std normalization for encoders trained on standardized input."""
    return ((pixels - mean) / std).astype(np.float32)


@dataclass
class CTSlice:
    pixels: np.ndarray
    id: str
    source: str = "labeled"

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise ValidationError(f"slice {self.id!r}: expected 2D pixels, got shape {self.pixels.shape}")
        h, w = self.pixels.shape
        if h < MIN_SIDE or w < MIN_SIDE:
            raise ValidationError(f"slice {self.id!r}: {h}x{w} is smaller than {MIN_SIDE}x{MIN_SIDE}")
        if not np.isfinite(self.pixels).all():
            raise ValidationError(f"slice {self.id!r}: non-finite pixel values")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ValidationError(f"slice {self.id!r}: pixels must lie in [0, 1]")
        if self.source not in ("labeled", "unlabeled"):
            raise ValidationError(f"slice {self.id!r}: unknown source {self.source!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass
class BinaryMask:
    values: np.ndarray
    id: str

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValidationError(f"mask {self.id!r}: expected 2D values, got shape {values.shape}")
        if not np.isin(values, (0, 1)).all():
            raise ValidationError(f"mask {self.id!r}: values must be strictly binary")
        self.values = values.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class MultiClassMask:
    values: np.ndarray
    id: str = ""

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValidationError(f"multi-class mask {self.id!r}: expected 2D values")
        if not np.isin(values, (0, 1, 2)).all():
            raise ValidationError(f"multi-class mask {self.id!r}: labels must be in {{0, 1, 2}}")
        self.values = values.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


Pair = tuple[CTSlice, BinaryMask]


@dataclass
class SplitSpec:
    n_train: int = 45
    n_val: int = 5
    n_test: int | None = 50
    seed: int = 0


@dataclass
class DatasetSplit:
    train_labeled: list[Pair] = field(default_factory=list)
    val: list[Pair] = field(default_factory=list)
    test: list[Pair] = field(default_factory=list)
    unlabeled: list[CTSlice] = field(default_factory=list)
    multiclass: dict[str, MultiClassMask] = field(default_factory=dict)

    def __post_init__(self):
        self.check_disjoint()

    def partitions(self) -> dict[str, list[str]]:
        return {
            "train": [s.id for s, _ in self.train_labeled],
            "val": [s.id for s, _ in self.val],
            "test": [s.id for s, _ in self.test],
            "unlabeled": [s.id for s in self.unlabeled],
        }

    def check_disjoint(self):
        seen: dict[str, str] = {}
        for name, ids in self.partitions().items():
            for i in ids:
                if i in seen:
                    raise ValidationError(f"id {i!r} appears in both {seen[i]} and {name}")
                seen[i] = name

    def finetune_pairs(self, finetune_set: str = "train") -> list[Pair]:
        """Labeled pairs used for supervised fine-tuning ("train" or "train+val")."""
        if finetune_set == "train":
            return list(self.train_labeled)
        if finetune_set == "train+val":
            return list(self.train_labeled) + list(self.val)
        raise ValidationError(f"finetune_set must be 'train' or 'train+val', got {finetune_set!r}")


# ---------------------------------------------------------------- file i/o

def read_gray(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode == "P":
                return np.asarray(im)
            return np.asarray(im.convert("L"))
    except OSError as exc:
        raise LoadError(f"cannot read image {path}: {exc}") from exc


def load_slice(path: Path, source: str = "labeled") -> CTSlice:
    return CTSlice(normalize_intensity(read_gray(path)), Path(path).stem, source)


def load_mask(path: Path) -> BinaryMask:
    raw = read_gray(path)
    bad = ~np.isin(raw, (0, 255))
    if bad.any():
        vals = np.unique(raw[bad])[:5].tolist()
        raise ValidationError(f"mask {Path(path).stem!r} has non-binary values {vals} (expected 0/255)")
    return BinaryMask((raw == 255).astype(np.uint8), Path(path).stem)


def load_multiclass_mask(path: Path) -> MultiClassMask:
    return MultiClassMask(read_gray(path), Path(path).stem)


def save_mask_png(values: np.ndarray, path: Path):
    Image.fromarray((np.asarray(values) > 0).astype(np.uint8) * 255, mode="L").save(path)


def save_probability_png(prob: np.ndarray, path: Path):
    Image.fromarray(np.round(np.clip(prob, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def _list_images(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        return {}
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    out: dict[str, Path] = {}
    for p in files:
        if p.stem in out:
            raise ValidationError(f"duplicate id {p.stem!r} in {directory}")
        out[p.stem] = p
    return out


def load_dataset(root, split_spec: SplitSpec | None = None) -> DatasetSplit:
    """Load labeled/unlabeled slices under ``root`` and split them with a seeded permutation.

    ``split_spec.n_test=None`` assigns every remaining labeled image to test.
    """
    spec = split_spec or SplitSpec()
    root = Path(root)
    images = _list_images(root / "images")
    if not (root / "images").is_dir():
        raise LoadError(f"{root} has no images/ directory")
    if not (root / "masks").is_dir():
        raise LoadError(f"{root} has no masks/ directory")
    masks = _list_images(root / "masks")
    missing = [i for i in images if i not in masks]
    if missing:
        raise LoadError(f"missing mask for labeled image(s): {', '.join(missing)}")

    ids = sorted(images)
    n_test = len(ids) - spec.n_train - spec.n_val if spec.n_test is None else spec.n_test
    if min(spec.n_train, spec.n_val, n_test) < 0 or spec.n_train + spec.n_val + n_test > len(ids):
        raise ValidationError(
            f"split ({spec.n_train}, {spec.n_val}, {n_test}) needs more than the {len(ids)} labeled images"
        )
    order = np.random.default_rng(spec.seed).permutation(len(ids))
    shuffled = [ids[k] for k in order]
    train_ids = shuffled[: spec.n_train]
    val_ids = shuffled[spec.n_train : spec.n_train + spec.n_val]
    test_ids = shuffled[spec.n_train + spec.n_val : spec.n_train + spec.n_val + n_test]
    dropped = len(ids) - len(train_ids) - len(val_ids) - len(test_ids)
    if dropped:
        log.warning("%d labeled images not assigned to any partition", dropped)

    def pairs(selected: Sequence[str]) -> list[Pair]:
        out = []
        for i in selected:
            s = load_slice(images[i])
            m = load_mask(masks[i])
            if m.shape != s.shape:
                raise ValidationError(f"mask {i!r} is {m.shape}, slice is {s.shape}")
            out.append((s, m))
        return out

    unlabeled = [load_slice(p, "unlabeled") for _, p in sorted(_list_images(root / "unlabeled").items())]
    multiclass = {i: load_multiclass_mask(p) for i, p in _list_images(root / "multiclass_masks").items()}
    return DatasetSplit(pairs(train_ids), pairs(val_ids), pairs(test_ids), unlabeled, multiclass)


def write_manifest(split: DatasetSplit, path) -> Path:
    """Write ``id<TAB>partition`` lines, grouped by partition in a fixed order."""
    path = Path(path)
    lines = [f"{i}\t{name}" for name, ids in split.partitions().items() for i in ids]
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return path


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            i, part = line.split("\t")
            out[i] = part
    return out


# ---------------------------------------------------------------- edges and resizing

_BOX3 = np.ones((3, 3), dtype=bool)


def derive_edge_map(mask: BinaryMask) -> BinaryMask:
    """Edge ground truth as the 3x3 morphological gradient of the mask.

    Pixels outside the image count as background, so an all-ones mask yields
    a one-pixel band along the image border.
    """
    m = mask.values.astype(bool)
    dil = ndimage.binary_dilation(m, structure=_BOX3, border_value=0)
    ero = ndimage.binary_erosion(m, structure=_BOX3, border_value=0)
    return BinaryMask((dil & ~ero).astype(np.uint8), mask.id)


def _check_size(size) -> tuple[int, int]:
    h, w = (size, size) if isinstance(size, int) else tuple(size)
    if int(h) <= 0 or int(w) <= 0:
        raise ContractError(f"resize target must be positive, got {size!r}")
    return int(h), int(w)


def resize_image(pixels: np.ndarray, size) -> np.ndarray:
    h, w = _check_size(size)
    if pixels.shape == (h, w):
        return np.asarray(pixels, dtype=np.float32).copy()
    t = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32))[None, None]
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return out[0, 0].clamp_(0, 1).numpy()


def resize_labels(values: np.ndarray, size) -> np.ndarray:
    """Nearest-neighbour resampling for label maps (binary or multi-class)."""
    h, w = _check_size(size)
    t = torch.from_numpy(np.ascontiguousarray(values, dtype=np.float32))[None, None]
    out = F.interpolate(t, size=(h, w), mode="nearest-exact")
    return out[0, 0].round().numpy().astype(np.uint8)


def resize_pair(slice_: CTSlice, mask: BinaryMask, size) -> tuple[CTSlice, BinaryMask]:
    if slice_.shape != mask.shape:
        raise ContractError(f"slice {slice_.shape} and mask {mask.shape} differ in size")
    img = resize_image(slice_.pixels, size)
    lab = resize_labels(mask.values, size)
    return CTSlice(img, slice_.id, slice_.source), BinaryMask((lab > 0).astype(np.uint8), mask.id)


def round_to_multiple(x: float, multiple: int = STRIDE_MULTIPLE) -> int:
    return max(multiple, int(math.floor(x / multiple + 0.5)) * multiple)


def scaled_size(base: tuple[int, int], ratio: float) -> tuple[int, int]:
    if ratio <= 0:
        raise ContractError(f"scale ratio must be positive, got {ratio}")
    return round_to_multiple(base[0] * ratio), round_to_multiple(base[1] * ratio)


@dataclass
class Batch:
    images: torch.Tensor  # B x 1 x H x W
    masks: torch.Tensor
    edges: torch.Tensor
    ids: list[str]
    ratio: float


def _stack(arrays: Iterable[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(list(arrays)).astype(np.float32))[:, None]


def multiscale_batches(
    pairs: Sequence[Pair],
    ratios: Iterable[float] = DEFAULT_SCALES,
    batch_size: int = 16,
    base_size=(352, 352),
    rng: np.random.Generator | None = None,
    shuffle: bool = True,
) -> Iterator[Batch]:
    """One epoch of batches; each batch is resampled at one ratio drawn uniformly from ``ratios``.

    Output sides are rounded to the nearest multiple of 32.
    """
    ratios = sorted(set(float(r) for r in ratios))
    if not ratios:
        raise ContractError("at least one scale ratio is required")
    for r in ratios:
        if r <= 0:
            raise ContractError(f"scale ratio must be positive, got {r}")
    if batch_size <= 0:
        raise ContractError("batch_size must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    base = _check_size(base_size)
    order = rng.permutation(len(pairs)) if shuffle else np.arange(len(pairs))
    for start in range(0, len(order), batch_size):
        chunk = [pairs[k] for k in order[start : start + batch_size]]
        ratio = ratios[int(rng.integers(len(ratios)))] if len(ratios) > 1 else ratios[0]
        size = scaled_size(base, ratio)
        imgs, masks, edges = [], [], []
        for s, m in chunk:
            img = resize_image(s.pixels, size)
            lab = (resize_labels(m.values, size) > 0).astype(np.uint8)
            imgs.append(img)
            masks.append(lab)
            edges.append(derive_edge_map(BinaryMask(lab, m.id)).values)
        yield Batch(_stack(imgs), _stack(masks), _stack(edges), [s.id for s, _ in chunk], ratio)
