"""Segmentation metrics: Dice, Sen, Spec, Prec, S-measure, mean E-measure and MAE.

Predictions are probability maps in [0, 1]; ground truths are binary maps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ValidationError

METRIC_KEYS = ("dice", "sen", "spec", "prec", "s_alpha", "e_phi_mean", "mae")
CSV_HEADER = ("id",) + METRIC_KEYS


def _as_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    if pred.ndim != 2:
        raise ContractError("metrics expect 2D maps")
    return pred, gt.astype(bool)


def _check_unit_range(pred: np.ndarray):
    if pred.size and (pred.min() < 0 or pred.max() > 1 or not np.isfinite(pred).all()):
        raise ContractError("prediction values must lie in [0, 1]")


def _ratio(num: int, den: int, both_empty: bool) -> float:
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def confusion_metrics(pred, gt, threshold: float = 0.5) -> dict[str, float]:
    """Binarize at ``pred >= threshold`` and compute Dice/Sen/Spec/Prec.

    A zero denominator gives 1 when both sets involved are empty, else 0.
    """
    if not 0 < threshold < 1:
        raise ContractError("threshold must lie in (0, 1)")
    pred, gt = _as_pair(pred, gt)
    p = pred >= threshold
    tp = int(np.count_nonzero(p & gt))
    fp = int(np.count_nonzero(p & ~gt))
    fn = int(np.count_nonzero(~p & gt))
    tn = int(np.count_nonzero(~p & ~gt))
    return {
        "dice": _ratio(2 * tp, 2 * tp + fp + fn, tp + fp + fn == 0),
        "sen": _ratio(tp, tp + fn, tp + fp == 0),
        "spec": _ratio(tn, tn + fp, tn + fn == 0),
        "prec": _ratio(tp, tp + fp, tp + fn == 0),
    }


def _object_score(x: np.ndarray) -> float:
    mean = x.mean()
    std = x.std(ddof=1) if x.size > 1 else 0.0
    return 2 * mean / (mean * mean + 1 + std)


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    x, y = pred.mean(), gt.mean()
    den = n - 1 if n > 1 else 1
    var_x = ((pred - x) ** 2).sum() / den
    var_y = ((gt - y) ** 2).sum() / den
    cov = ((pred - x) * (gt - y)).sum() / den
    a = 4 * x * y * cov
    b = (x * x + y * y) * (var_x + var_y)
    if a != 0:
        return a / b
    return 1.0 if b == 0 else 0.0


def _s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    u = gt.mean()
    return u * _object_score(pred[gt]) + (1 - u) * _object_score(1 - pred[~gt])


def _s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    rows, cols = np.nonzero(gt)
    # 1-based centroid rounded half up; top/left blocks include the centroid row/column
    cy = int(np.floor(rows.mean() + 1.5))
    cx = int(np.floor(cols.mean() + 1.5))
    g = gt.astype(np.float64)
    score = 0.0
    for ys, xs in ((slice(0, cy), slice(0, cx)), (slice(0, cy), slice(cx, w)),
                   (slice(cy, h), slice(0, cx)), (slice(cy, h), slice(cx, w))):
        block = pred[ys, xs]
        if block.size == 0:
            continue
        score += block.size / (h * w) * _ssim(block, g[ys, xs])
    return score


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    """Structure measure (1 - alpha) * S_object + alpha * S_region, clipped at 0."""
    if not 0 <= alpha <= 1:
        raise ContractError("alpha must lie in [0, 1]")
    pred, gt = _as_pair(pred, gt)
    _check_unit_range(pred)
    y = gt.mean()
    if y == 0:
        return float(1 - pred.mean())
    if y == 1:
        return float(pred.mean())
    return float(max(0.0, (1 - alpha) * _s_object(pred, gt) + alpha * _s_region(pred, gt)))


def e_measure_curve(pred, gt) -> np.ndarray:
    """Enhanced-alignment score for each threshold t/255, t = 0..255 (``pred >= t/255``)."""
    pred, gt = _as_pair(pred, gt)
    _check_unit_range(pred)
    n = gt.size
    n_fg = int(gt.sum())
    thresholds = np.arange(256) / 255.0
    # pixel counts per threshold through sorted predictions
    fg_sorted = np.sort(pred[gt])
    bg_sorted = np.sort(pred[~gt])
    tp = fg_sorted.size - np.searchsorted(fg_sorted, thresholds, side="left")
    fp = bg_sorted.size - np.searchsorted(bg_sorted, thresholds, side="left")
    pos = tp + fp
    if n_fg == 0:
        return (n - pos) / n
    if n_fg == n:
        return pos / n
    fn = n_fg - tp
    tn = n - n_fg - fp
    mu_p = pos / n
    mu_g = n_fg / n
    total = np.zeros(256)
    for count, p_val, g_val in ((tp, 1.0, 1.0), (fp, 1.0, 0.0), (fn, 0.0, 1.0), (tn, 0.0, 0.0)):
        dp = p_val - mu_p
        dg = g_val - mu_g
        align = 2 * dp * dg / (dp * dp + dg * dg)
        total += count * (align + 1) ** 2 / 4
    return total / n


def e_measure_mean(pred, gt) -> float:
    return float(e_measure_curve(pred, gt).mean())


def mae(pred, gt) -> float:
    pred, gt = _as_pair(pred, gt)
    return float(np.abs(pred - gt).mean())


def evaluate_pair(pred, gt, threshold: float = 0.5, alpha: float = 0.5) -> dict[str, float]:
    out = confusion_metrics(pred, gt, threshold)
    out["s_alpha"] = s_measure(pred, gt, alpha)
    out["e_phi_mean"] = e_measure_mean(pred, gt)
    out["mae"] = mae(pred, gt)
    return {k: out[k] for k in METRIC_KEYS}


@dataclass
class MetricsReport:
    per_image: dict[str, dict[str, float]] = field(default_factory=dict)
    binarize_threshold: float = 0.5

    @property
    def aggregate(self) -> dict[str, float]:
        if not self.per_image:
            return {k: float("nan") for k in METRIC_KEYS}
        return {k: float(np.mean([row[k] for row in self.per_image.values()])) for k in METRIC_KEYS}

    def rows(self):
        for i in sorted(self.per_image):
            yield i, self.per_image[i]
        yield "MEAN", self.aggregate

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for i, row in self.rows():
                writer.writerow([i] + [f"{row[k]:.6f}" for k in METRIC_KEYS])
        return path


def read_metrics_csv(path) -> dict[str, dict[str, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValidationError(f"{path}: unexpected header {reader.fieldnames}")
        return {r["id"]: {k: float(r[k]) for k in METRIC_KEYS} for r in reader}


def evaluate_dir(pred_dir, gt_dir, threshold: float = 0.5, alpha: float = 0.5) -> MetricsReport:
    """Score every ``pred_dir/<id>.png`` against ``gt_dir/<id>.png``.

    Predictions are read as gray levels / 255; ground truths are binarized at 128.
    """
    from .data import _list_images, read_gray

    preds = _list_images(Path(pred_dir))
    gts = _list_images(Path(gt_dir))
    missing_pred = sorted(set(gts) - set(preds))
    missing_gt = sorted(set(preds) - set(gts))
    if missing_pred or missing_gt:
        parts = []
        if missing_pred:
            parts.append(f"no prediction for: {', '.join(missing_pred)}")
        if missing_gt:
            parts.append(f"no ground truth for: {', '.join(missing_gt)}")
        raise ValidationError("; ".join(parts))
    report = MetricsReport(binarize_threshold=threshold)
    for i in sorted(gts):
        pred = read_gray(preds[i]).astype(np.float64) / 255.0
        gt = read_gray(gts[i]) >= 128
        report.per_image[i] = evaluate_pair(pred, gt, threshold, alpha)
    return report
