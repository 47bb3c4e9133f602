"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Every key must be a field of
:class:`RunConfig`; values are parsed according to the field's default type.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .data import SplitSpec
from .errors import ConfigError
from .losses import LossWeights
from .model.infnet import ModelConfig
from .multiclass import MCConfig
from .semisup import SemiConfig, TrainSchedule
from .training import TrainConfig


@dataclass
class RunConfig:
    seed: int = 0
    device: str = "cpu"
    # data
    n_train: int = 45
    n_val: int = 5
    n_test: int = 50
    finetune_set: str = "train"
    input_size: int = 352
    scales: tuple = (0.75, 1.0, 1.25)
    # model
    encoder: str = "res2net"
    ablation: str = "EA,PPD,RA"
    ra_channels: int = 64
    toy_channels: tuple = (8, 16, 16, 32, 32)
    pretrained_path: str = ""
    input_mean: float = 0.0
    input_std: float = 1.0
    # loss
    lam: float = 1.0
    hard_pixel_gain: float = 5.0
    pool_window: int = 31
    epsilon: float = 1e-8
    # schedule
    lr: float = 1e-4
    pretrain_epochs: int = 100
    pretrain_batch: int = 24
    finetune_epochs: int = 100
    finetune_batch: int = 16
    # pseudo labeling
    K: int = 5
    pseudo_threshold: float = 0.5
    round_epochs: int = 1
    round_batch: int = 16
    initial_epochs: int = 100
    initial_batch: int = 16
    reset_optimizer: bool = False
    checkpoint_every: int = 0
    # evaluation
    threshold: float = 0.5
    alpha: float = 0.5
    # multi-class head
    mc_variant: str = "unet"
    mc_width: int = 16
    mc_input_size: int = 512
    mc_lr: float = 1e-10
    mc_weight_decay: float = 5e-4
    mc_momentum: float = 0.99
    mc_epochs: int = 100
    mc_batch: int = 4

    def update(self, overrides: dict[str, str]) -> "RunConfig":
        kinds = {f.name: type(f.default) for f in fields(self)}
        for key, raw in overrides.items():
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(self, key, _parse(key, raw, kinds[key]))
        return self

    # ---- builders for the library configs
    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.n_train, self.n_val, self.n_test, self.seed)

    def model_config(self) -> ModelConfig:
        cfg = ModelConfig(ra_channels=self.ra_channels, encoder=self.encoder,
                          pretrained=bool(self.pretrained_path), pretrained_path=self.pretrained_path or None,
                          input_size=(self.input_size, self.input_size), toy_channels=self.toy_channels,
                          input_mean=self.input_mean, input_std=self.input_std)
        return cfg.with_ablation(self.ablation)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lam, self.hard_pixel_gain, self.pool_window, self.epsilon)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.finetune_batch, scales=self.scales,
                           input_size=(self.input_size, self.input_size), loss=self.loss_weights(),
                           seed=self.seed, device=self.device)

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(self.pretrain_epochs, self.pretrain_batch, self.finetune_epochs,
                             self.finetune_batch, self.lr)

    def semi_config(self) -> SemiConfig:
        return SemiConfig(K=self.K, threshold=self.pseudo_threshold, round_epochs=self.round_epochs,
                          round_batch=self.round_batch, initial_epochs=self.initial_epochs,
                          initial_batch=self.initial_batch, reset_optimizer=self.reset_optimizer,
                          seed=self.seed, checkpoint_every=self.checkpoint_every)

    def mc_config(self) -> MCConfig:
        return MCConfig(self.mc_variant, self.mc_width, (self.mc_input_size, self.mc_input_size), self.mc_lr,
                        self.mc_weight_decay, self.mc_momentum, self.mc_epochs, self.mc_batch,
                        self.seed, self.device)


def _parse(key: str, raw: str, kind: type):
    raw = str(raw).strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(float(v) if "." in v or "e" in v.lower() else int(v)
                         for v in (p.strip() for p in raw.split(",")) if v)
        return raw
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for config key {key!r}") from None


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg.update(parse_config_text(Path(path).read_text()))
    if overrides:
        cfg.update(overrides)
    return cfg
