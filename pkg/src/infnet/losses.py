"""Edge BCE, hard-pixel weighted BCE + IoU, and the deep-supervision total.

All losses take logits. Predictions at a coarser resolution are bilinearly
upsampled to the ground truth before the loss is evaluated. Every term is a
mean over pixels, then over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ContractError
from .model.infnet import PredictionBundle, resample

SEG_TERMS = ("S_g", "S_5", "S_4", "S_3")


@dataclass
class LossWeights:
    lam: float = 1.0
    hard_pixel_gain: float = 5.0
    pool_window: int = 31
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.lam < 0:
            raise ContractError("lambda must be non-negative")
        if self.pool_window % 2 != 1:
            raise ContractError("pool_window must be odd")
        if not 0 < self.epsilon < 0.5:
            raise ContractError("epsilon must lie in (0, 0.5)")


def _align(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if logits.dim() != 4 or target.dim() != 4:
        raise ContractError("expected B x 1 x H x W tensors")
    if logits.shape[:2] != target.shape[:2]:
        raise ContractError(f"batch/channel mismatch: {tuple(logits.shape)} vs {tuple(target.shape)}")
    th, tw = target.shape[-2:]
    lh, lw = logits.shape[-2:]
    if (lh, lw) != (th, tw) and (lh > th or lw > tw):
        raise ContractError(f"prediction {lh}x{lw} is larger than target {th}x{tw}")
    return resample(logits, (th, tw))


def clamped_bce(logits: torch.Tensor, target: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Per-pixel BCE with the probability clamped to [eps, 1 - eps].

    Clamping is applied in log space (log p >= log eps, log(1-p) >= log eps),
    which is the same constraint but stays exact in float32.
    """
    floor = math.log(eps)
    log_p = F.logsigmoid(logits).clamp(min=floor)
    log_q = F.logsigmoid(-logits).clamp(min=floor)
    return -(target * log_p + (1 - target) * log_q)


def edge_loss(s_e: torch.Tensor, g_e: torch.Tensor, eps: float = 1e-8, reduction: str = "mean") -> torch.Tensor:
    """Binary cross entropy between the edge logits and edge ground truth."""
    bce = clamped_bce(_align(s_e, g_e), g_e, eps)
    if reduction == "sum":
        return bce.sum(dim=(1, 2, 3)).mean()
    if reduction != "mean":
        raise ContractError(f"unknown reduction {reduction!r}")
    return bce.mean()


def hard_pixel_weights(g: torch.Tensor, gain: float = 5.0, window: int = 31) -> torch.Tensor:
    """w = 1 + gain * |avgpool(G) - G|; boundary and isolated pixels get larger weights."""
    if window % 2 != 1:
        raise ContractError("pool window must be odd")
    local = F.avg_pool2d(g, window, stride=1, padding=window // 2)
    return 1 + gain * (local - g).abs()


def weighted_bce(s: torch.Tensor, g: torch.Tensor, weight: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    s = _align(s, g)
    if weight.shape != g.shape:
        raise ContractError("weight map must match the ground truth shape")
    bce = clamped_bce(s, g, eps)
    per_image = (weight * bce).sum(dim=(2, 3)) / weight.sum(dim=(2, 3))
    return per_image.mean()


def weighted_iou(s: torch.Tensor, g: torch.Tensor, weight: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    s = _align(s, g)
    if weight.shape != g.shape:
        raise ContractError("weight map must match the ground truth shape")
    p = torch.sigmoid(s)
    inter = (weight * p * g).sum(dim=(2, 3))
    union = (weight * (p + g - p * g)).sum(dim=(2, 3))
    return (1 - (inter + eps) / (union + eps)).mean()


def seg_loss(s: torch.Tensor, g: torch.Tensor, weights: LossWeights | None = None) -> torch.Tensor:
    w = weights or LossWeights()
    omega = hard_pixel_weights(g, w.hard_pixel_gain, w.pool_window)
    return weighted_iou(s, g, omega, w.epsilon) + w.lam * weighted_bce(s, g, omega, w.epsilon)


def total_loss(bundle: PredictionBundle, g_s: torch.Tensor, g_e: torch.Tensor | None,
               weights: LossWeights | None = None):
    """Deep-supervision loss. Returns ``(total, terms)``.

    ``terms`` maps S_g, S_5, S_4, S_3 and edge to their loss tensor, or to None
    when the ablation removed that output.
    """
    w = weights or LossWeights()
    omega = hard_pixel_weights(g_s, w.hard_pixel_gain, w.pool_window)
    terms: dict[str, torch.Tensor | None] = {}
    for name in SEG_TERMS:
        s = getattr(bundle, name)
        terms[name] = None if s is None else (
            weighted_iou(s, g_s, omega, w.epsilon) + w.lam * weighted_bce(s, g_s, omega, w.epsilon))
    if bundle.S_e is not None and g_e is not None:
        terms["edge"] = edge_loss(bundle.S_e, g_e, w.epsilon)
    else:
        terms["edge"] = None
    present = [t for t in terms.values() if t is not None]
    if not present:
        raise ContractError("bundle has no supervised outputs")
    return torch.stack(present).sum(), terms
