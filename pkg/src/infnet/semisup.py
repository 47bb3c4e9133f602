"""Randomly-sampled pseudo-label propagation and the pretrain / fine-tune schedule."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import BinaryMask, CTSlice, DatasetSplit, Pair
from .errors import ValidationError
from .model.infnet import save_checkpoint, weights_digest

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingItem:
    slice: CTSlice
    mask: BinaryMask
    provenance: str  # "gt" or "pseudo"

    @property
    def id(self) -> str:
        return self.slice.id


@dataclass
class PseudoLabelState:
    training: list[TrainingItem]
    unlabeled: list[CTSlice]
    K: int = 5
    rng_seed: int = 0
    iteration: int = 0
    initial_labeled: int = -1
    initial_unlabeled: int = -1
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.K < 1:
            raise ValidationError("K must be at least 1")
        if self.initial_labeled < 0:
            self.initial_labeled = len(self.training)
        if self.initial_unlabeled < 0:
            self.initial_unlabeled = len(self.unlabeled)

    @classmethod
    def from_split(cls, split: DatasetSplit, K: int = 5, seed: int = 0) -> "PseudoLabelState":
        items = [TrainingItem(s, m, "gt") for s, m in split.train_labeled]
        return cls(items, list(split.unlabeled), K, seed)

    @property
    def max_rounds(self) -> int:
        return math.ceil(self.initial_unlabeled / self.K)

    def counts(self) -> dict[str, int]:
        gt = sum(1 for it in self.training if it.provenance == "gt")
        return {"gt": gt, "pseudo": len(self.training) - gt}

    def pairs(self, provenance: str | None = None) -> list[Pair]:
        return [(it.slice, it.mask) for it in self.training if provenance in (None, it.provenance)]

    def check_invariants(self, forbidden_ids=()):
        train_ids = [it.id for it in self.training]
        pool_ids = [s.id for s in self.unlabeled]
        if len(set(train_ids)) != len(train_ids) or set(train_ids) & set(pool_ids):
            raise ValidationError("training and unlabeled sets overlap")
        if len(self.training) + len(self.unlabeled) != self.initial_labeled + self.initial_unlabeled:
            raise ValidationError("pseudo-label bookkeeping lost or duplicated slices")
        if self.iteration > self.max_rounds:
            raise ValidationError("more rounds than the pool allows")
        leaked = set(train_ids) & set(forbidden_ids)
        if leaked:
            raise ValidationError(f"test ids leaked into training: {sorted(leaked)}")


@dataclass
class SemiConfig:
    K: int = 5
    threshold: float = 0.5
    round_epochs: int = 1
    round_batch: int = 16
    initial_epochs: int = 100
    initial_batch: int = 16
    reset_optimizer: bool = False
    seed: int = 0
    checkpoint_every: int = 0


@dataclass
class TrainSchedule:
    pretrain_epochs: int = 100
    pretrain_batch: int = 24
    finetune_epochs: int = 100
    finetune_batch: int = 16
    lr: float = 1e-4

    def __post_init__(self):
        if min(self.pretrain_epochs, self.finetune_epochs) < 0:
            raise ValidationError("epochs must be non-negative")
        if min(self.pretrain_batch, self.finetune_batch) <= 0 or self.lr <= 0:
            raise ValidationError("batch sizes and learning rate must be positive")


def sample_indices(pool_size: int, k: int, seed: int, round_index: int) -> list[int]:
    """Uniform sample without replacement; the generator is keyed by (seed, round)."""
    rng = np.random.default_rng([seed, round_index])
    return rng.choice(pool_size, size=min(k, pool_size), replace=False).tolist()


def pseudo_label_round(state: PseudoLabelState, trainer, config: SemiConfig | None = None) -> PseudoLabelState:
    """One pass of: sample K unlabeled slices, pseudo-label them, move them to training, fine-tune.

    ``trainer`` needs ``predict(slices) -> list[prob map]`` and ``fit(pairs, epochs, batch_size)``.
    """
    cfg = config or SemiConfig(K=state.K)
    if not state.unlabeled:
        log.warning("unlabeled pool is empty; pseudo-label round skipped")
        return state
    picked_idx = sample_indices(len(state.unlabeled), state.K, state.rng_seed, state.iteration)
    picked = [state.unlabeled[i] for i in picked_idx]
    probs = trainer.predict(picked)
    new_items = [
        TrainingItem(s, BinaryMask((np.asarray(p) >= cfg.threshold).astype(np.uint8), s.id), "pseudo")
        for s, p in zip(picked, probs)
    ]
    chosen = set(picked_idx)
    nxt = replace(
        state,
        training=state.training + new_items,
        unlabeled=[s for j, s in enumerate(state.unlabeled) if j not in chosen],
        iteration=state.iteration + 1,
        history=list(state.history),
    )
    if cfg.reset_optimizer and hasattr(trainer, "reset_optimizer"):
        trainer.reset_optimizer()
    curve = trainer.fit(nxt.pairs(), cfg.round_epochs, cfg.round_batch)
    nxt.history.append({
        "round": nxt.iteration,
        "sampled_ids": [s.id for s in picked],
        "n_train": len(nxt.training),
        "n_unlabeled": len(nxt.unlabeled),
        "mean_loss": float(np.mean(curve)) if curve else None,
    })
    return nxt


def run_semi_supervised(split: DatasetSplit, trainer, config: SemiConfig | None = None,
                        out_dir=None, forbidden_ids=None):
    """Train on labeled data, then pseudo-label the unlabeled pool K slices at a time until it is empty.

    Returns ``(model, state)``. With ``out_dir`` set, each round is appended to
    ``history.jsonl`` and checkpoints go to ``checkpoints/semi_round.pt``.
    """
    cfg = config or SemiConfig()
    forbidden = set(forbidden_ids) if forbidden_ids is not None else {s.id for s, _ in split.test}
    state = PseudoLabelState.from_split(split, cfg.K, cfg.seed)
    state.check_invariants(forbidden)
    history_path = ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        history_path = out_dir / "history.jsonl"
        history_path.write_text("")
        ckpt_path = out_dir / "checkpoints" / "semi_round.pt"

    trainer.fit(state.pairs(), cfg.initial_epochs, cfg.initial_batch)
    while state.unlabeled:
        state = pseudo_label_round(state, trainer, cfg)
        state.check_invariants(forbidden)
        if history_path is not None:
            with open(history_path, "a") as fh:
                fh.write(json.dumps(state.history[-1], sort_keys=True) + "\n")
        if ckpt_path is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            save_checkpoint(trainer.model, ckpt_path, extra={"round": state.iteration})
    if ckpt_path is not None and hasattr(trainer, "model"):
        save_checkpoint(trainer.model, ckpt_path, extra={"round": state.iteration})
    return getattr(trainer, "model", None), state


def read_history(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


@dataclass
class TwoStepResult:
    curves: dict[str, list[float]]
    pretrain_digest: str | None = None


def two_step_train(trainer, pseudo_set: Sequence[Pair], gt_set: Sequence[Pair],
                   schedule: TrainSchedule | None = None, val_set: Sequence[Pair] = ()) -> TwoStepResult:
    """(i) pretrain on pseudo-labeled slices, then (ii) fine-tune on ground-truth slices.

    Fine-tuning continues from the pretrained weights. Validation pairs only feed
    the loss curve. With no pseudo set (or zero pretrain epochs) this is the
    supervised-only baseline.
    """
    sched = schedule or TrainSchedule()
    if not gt_set and sched.finetune_epochs > 0:
        raise ValidationError("fine-tuning needs at least one ground-truth pair")
    curves: dict[str, list[float]] = {"pretrain_train": [], "finetune_train": [], "finetune_val": []}
    digest = None
    if pseudo_set and sched.pretrain_epochs > 0:
        trainer.reset_optimizer()
        curves["pretrain_train"] = trainer.fit(pseudo_set, sched.pretrain_epochs, sched.pretrain_batch)
        digest = weights_digest(trainer.model)
    if sched.finetune_epochs > 0:
        trainer.reset_optimizer()
        for _ in range(sched.finetune_epochs):
            curves["finetune_train"] += trainer.fit(gt_set, 1, sched.finetune_batch)
            if val_set:
                curves["finetune_val"].append(trainer.evaluate_loss(val_set))
    return TwoStepResult(curves, digest)


def semi_inf_net(split: DatasetSplit, make_trainer: Callable[[], object], semi: SemiConfig | None = None,
                 schedule: TrainSchedule | None = None, finetune_set: str = "train", out_dir=None):
    """Full semi-supervised pipeline.

    A first trainer runs the pseudo-labeling loop; a fresh trainer is then
    pretrained on the resulting pseudo labels and fine-tuned on ground truth.
    Returns ``(final_trainer, state, two_step_result)``.
    """
    semi = semi or SemiConfig()
    _, state = run_semi_supervised(split, make_trainer(), semi, out_dir)
    final = make_trainer()
    result = two_step_train(final, state.pairs("pseudo"), split.finetune_pairs(finetune_set),
                            schedule, split.val)
    return final, state, result
