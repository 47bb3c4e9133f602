"""Infection-guided multi-class labeling (background / GGO / consolidation).

A generic segmentation head receives the CT slice and the binary-infection
probability map as a two-channel input. The infection network is never
updated here; the pipeline is strictly feed-forward.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .data import CTSlice, MultiClassMask, resize_image, resize_labels
from .errors import ContractError, ValidationError
from .metrics import METRIC_KEYS, evaluate_pair
from .model.infnet import load_checkpoint, resample

log = logging.getLogger(__name__)

CLASS_NAMES = {1: "GGO", 2: "Consolidation"}
CLASS_BLOCKS = ("GGO", "Consolidation", "Average")
PALETTE = [0, 0, 0, 255, 0, 0, 0, 255, 0]  # 0 black, 1 red (GGO), 2 green (consolidation)


@dataclass
class MCConfig:
    variant: str = "unet"  # "unet" or "fcn"
    width: int = 16
    input_size: tuple[int, int] = (512, 512)
    lr: float = 1e-10
    weight_decay: float = 5e-4
    momentum: float = 0.99
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    device: str = "cpu"

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        if self.variant not in ("unet", "fcn"):
            raise ContractError(f"unknown multi-class variant {self.variant!r}")


def _conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
    )


class MultiClassUNet(nn.Module):
    def __init__(self, in_channels=2, num_classes=3, width=16):
        super().__init__()
        w = width
        self.enc = nn.ModuleList([_conv_block(in_channels, w), _conv_block(w, 2 * w),
                                  _conv_block(2 * w, 4 * w), _conv_block(4 * w, 8 * w)])
        self.dec = nn.ModuleList([_conv_block(12 * w, 4 * w), _conv_block(6 * w, 2 * w), _conv_block(3 * w, w)])
        self.head = nn.Conv2d(w, num_classes, 1)

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.enc):
            x = block(x if i == 0 else F.max_pool2d(x, 2))
            skips.append(x)
        x = skips.pop()
        for block in self.dec:
            skip = skips.pop()
            x = block(torch.cat((resample(x, skip.shape[-2:]), skip), 1))
        return self.head(x)


class MultiClassFCN(nn.Module):
    """FCN-8s layout: class scores from strides 8, 16 and 32 fused coarse-to-fine."""

    def __init__(self, in_channels=2, num_classes=3, width=16):
        super().__init__()
        w = width
        chans = [w, 2 * w, 4 * w, 8 * w, 8 * w]
        blocks, prev = [], in_channels
        for c in chans:
            blocks.append(_conv_block(prev, c))
            prev = c
        self.blocks = nn.ModuleList(blocks)
        self.score8 = nn.Conv2d(chans[2], num_classes, 1)
        self.score16 = nn.Conv2d(chans[3], num_classes, 1)
        self.score32 = nn.Sequential(nn.Conv2d(chans[4], 16 * w, 3, padding=1), nn.ReLU(inplace=True),
                                     nn.Conv2d(16 * w, num_classes, 1))

    def forward(self, x):
        size = x.shape[-2:]
        feats = []
        for block in self.blocks:
            x = F.max_pool2d(block(x), 2)
            feats.append(x)
        s = self.score32(feats[4])
        s = resample(s, feats[3].shape[-2:]) + self.score16(feats[3])
        s = resample(s, feats[2].shape[-2:]) + self.score8(feats[2])
        return resample(s, size)


def build_mc_model(config: MCConfig) -> nn.Module:
    cls = MultiClassUNet if config.variant == "unet" else MultiClassFCN
    model = cls(2, 3, config.width)
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.xavier_uniform_(m.weight)
            nn.init.zeros_(m.bias)
    return model


def _input_tensor(pixels: np.ndarray, infection: np.ndarray, size) -> torch.Tensor:
    if pixels.shape != np.shape(infection):
        raise ContractError("infection map must match the slice size")
    img = resize_image(pixels, size)
    inf = resize_image(np.clip(np.asarray(infection, dtype=np.float32), 0, 1), size)
    return torch.from_numpy(np.stack((img, inf)))


def guided_train(samples: Sequence[tuple[CTSlice, np.ndarray, MultiClassMask]], config: MCConfig | None = None,
                 model: nn.Module | None = None):
    """Train the multi-class head; returns ``(model, loss_curve)`` with one mean loss per epoch."""
    cfg = config or MCConfig()
    if not samples:
        raise ValidationError("multi-class training needs at least one sample")
    xs, ys = [], []
    for s, inf, lab in samples:
        lab = lab if isinstance(lab, MultiClassMask) else MultiClassMask(lab, s.id)
        if lab.shape != s.shape:
            raise ContractError(f"labels for {s.id!r} are {lab.shape}, slice is {s.shape}")
        xs.append(_input_tensor(s.pixels, inf, cfg.input_size))
        ys.append(torch.from_numpy(resize_labels(lab.values, cfg.input_size).astype(np.int64)))
    x_all, y_all = torch.stack(xs), torch.stack(ys)
    torch.manual_seed(cfg.seed)
    model = model or build_mc_model(cfg)
    device = torch.device(cfg.device)
    model.to(device)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    curve = []
    for _ in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(samples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[start : start + cfg.batch_size])
            logits = model(x_all[idx].to(device))
            loss = F.cross_entropy(logits, y_all[idx].to(device))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        curve.append(float(np.mean(losses)))
    return model, curve


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the leading class axis; ties go to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=0).astype(np.uint8)


@torch.no_grad()
def guided_logits(slice_: CTSlice, infection: np.ndarray, model: nn.Module, input_size=(512, 512)) -> np.ndarray:
    model.eval()
    x = _input_tensor(slice_.pixels, infection, input_size)[None]
    logits = resample(model(x.to(next(model.parameters()).device)), slice_.shape)
    return logits[0].cpu().numpy()


def guided_infer(slice_: CTSlice, infection: np.ndarray, model: nn.Module, input_size=(512, 512)) -> MultiClassMask:
    return MultiClassMask(argmax_lowest(guided_logits(slice_, infection, model, input_size)), slice_.id)


def per_class_metrics(pred, gt, threshold: float = 0.5) -> dict[str, dict[str, float]]:
    """Binary metric suite on each class indicator, plus their unweighted average."""
    pred = pred.values if isinstance(pred, MultiClassMask) else np.asarray(pred)
    gt = gt.values if isinstance(gt, MultiClassMask) else np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    table = {}
    for c, name in CLASS_NAMES.items():
        table[name] = evaluate_pair((pred == c).astype(np.float64), gt == c, threshold)
    table["Average"] = {k: (table["GGO"][k] + table["Consolidation"][k]) / 2 for k in METRIC_KEYS}
    return table


def mean_tables(tables: Sequence[dict]) -> dict[str, dict[str, float]]:
    """Average per-image tables block by block."""
    if not tables:
        raise ValidationError("no tables to average")
    return {b: {k: float(np.mean([t[b][k] for t in tables])) for k in METRIC_KEYS} for b in CLASS_BLOCKS}


def multiclass_columns() -> list[str]:
    return ["method"] + [f"{b}_{k}" for b in CLASS_BLOCKS for k in METRIC_KEYS]


def write_multiclass_csv(rows: dict[str, dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(multiclass_columns())
        for method, table in rows.items():
            writer.writerow([method] + [f"{table[b][k]:.6f}" for b in CLASS_BLOCKS for k in METRIC_KEYS])
    return path


def save_palette_png(values, path):
    values = values.values if isinstance(values, MultiClassMask) else np.asarray(values, dtype=np.uint8)
    im = Image.fromarray(values.astype(np.uint8), mode="P")
    im.putpalette(PALETTE + [0] * (768 - len(PALETTE)))
    im.save(path)


def render_overlay(slice_: CTSlice, mask, path, alpha: float = 0.5):
    """CT slice in gray with GGO painted red and consolidation green."""
    values = mask.values if isinstance(mask, MultiClassMask) else np.asarray(mask)
    gray = np.repeat(slice_.pixels[..., None], 3, axis=2)
    colors = np.array(PALETTE, dtype=np.float32).reshape(3, 3) / 255.0
    out = gray.copy()
    for c in (1, 2):
        sel = values == c
        out[sel] = (1 - alpha) * gray[sel] + alpha * colors[c]
    Image.fromarray(np.round(out * 255).astype(np.uint8), mode="RGB").save(path)


def load_mc_model(path) -> tuple[nn.Module, MCConfig]:
    payload = load_checkpoint(path)
    cfg = MCConfig(**payload["config"])
    model = build_mc_model(cfg)
    model.load_state_dict(payload["state_dict"])
    return model, cfg
