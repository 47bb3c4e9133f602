from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import DEFAULT_SCALES, CTSlice, Pair, multiscale_batches, resize_image, resize_pair
from .losses import SEG_TERMS, LossWeights, total_loss
from .model.infnet import InfNet, resample

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step",) + SEG_TERMS + ("edge", "total")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    scales: tuple[float, ...] = DEFAULT_SCALES
    input_size: tuple[int, int] = (352, 352)
    loss: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    device: str = "cpu"


class Trainer:
    """Owns a model, its Adam optimizer and the per-step loss log."""

    def __init__(self, model: InfNet, config: TrainConfig | None = None):
        self.cfg = config or TrainConfig()
        self.device = torch.device(self.cfg.device)
        self.model = model.to(self.device)
        self.rng = np.random.default_rng(self.cfg.seed)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=self.cfg.lr)
        self.step = 0
        self.log_rows: list[dict] = []

    def reset_optimizer(self):
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=self.cfg.lr)

    def _prepare(self, pairs: Sequence[Pair]) -> list[Pair]:
        size = tuple(self.cfg.input_size)
        return [p if p[0].shape == size else resize_pair(p[0], p[1], size) for p in pairs]

    def train_batch(self, images, masks, edges) -> float:
        self.model.train()
        bundle = self.model(images.to(self.device))
        loss, terms = total_loss(bundle, masks.to(self.device), edges.to(self.device), self.cfg.loss)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.step += 1
        row = {"step": self.step, "total": float(loss.detach())}
        row.update({k: (None if v is None else float(v.detach())) for k, v in terms.items()})
        self.log_rows.append(row)
        return row["total"]

    def fit(self, pairs: Sequence[Pair], epochs: int, batch_size: int | None = None) -> list[float]:
        """Train for ``epochs`` passes over ``pairs``; returns the mean batch loss per epoch."""
        if epochs <= 0 or not pairs:
            return []
        prepared = self._prepare(pairs)
        bs = batch_size or self.cfg.batch_size
        curve = []
        for _ in range(epochs):
            losses = [self.train_batch(b.images, b.masks, b.edges)
                      for b in multiscale_batches(prepared, self.cfg.scales, bs, self.cfg.input_size, self.rng)]
            curve.append(float(np.mean(losses)))
        return curve

    @torch.no_grad()
    def evaluate_loss(self, pairs: Sequence[Pair], batch_size: int = 8) -> float:
        if not pairs:
            return float("nan")
        self.model.eval()
        losses = []
        for b in multiscale_batches(self._prepare(pairs), (1.0,), batch_size, self.cfg.input_size, shuffle=False):
            loss, _ = total_loss(self.model(b.images.to(self.device)), b.masks.to(self.device),
                                 b.edges.to(self.device), self.cfg.loss)
            losses.append(float(loss) * len(b.ids))
        return float(np.sum(losses) / len(pairs))

    @torch.no_grad()
    def predict(self, slices: Sequence[CTSlice], batch_size: int = 8) -> list[np.ndarray]:
        """Probability maps S_p at each slice's own resolution."""
        self.model.eval()
        size = tuple(self.cfg.input_size)
        out = []
        for start in range(0, len(slices), batch_size):
            chunk = slices[start : start + batch_size]
            x = torch.from_numpy(np.stack([resize_image(s.pixels, size) for s in chunk]))[:, None]
            final = self.model(x.to(self.device)).final
            for s, logit in zip(chunk, final):
                prob = torch.sigmoid(resample(logit[None], s.shape))[0, 0]
                out.append(prob.cpu().numpy().astype(np.float32))
        return out

    def write_log(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_COLUMNS)
            for row in self.log_rows:
                writer.writerow([row["step"]] + ["" if row.get(k) is None else f"{row[k]:.6f}"
                                                 for k in LOG_COLUMNS[1:]])
        return path
