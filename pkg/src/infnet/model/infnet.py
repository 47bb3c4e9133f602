from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import CheckpointError, ConfigError, ContractError
from .encoders import BasicConv2d, build_encoder

COMPONENTS = ("EA", "PPD", "RA")

# ablation rows: enabled components per ablation setting
ABLATION_ROWS = {
    1: (),
    2: ("EA",),
    3: ("PPD",),
    4: ("RA",),
    5: ("RA", "EA"),
    6: ("PPD", "RA"),
    7: ("PPD", "RA", "EA"),
}


@dataclass
class ModelConfig:
    enable_EA: bool = True
    enable_PPD: bool = True
    enable_RA: bool = True
    ra_channels: int = 64
    encoder: str = "res2net"
    pretrained: bool = False
    pretrained_path: str | None = None
    input_size: tuple[int, int] = (352, 352)
    in_channels: int = 1
    toy_channels: tuple[int, ...] = field(default=(8, 16, 16, 32, 32))
    input_mean: float = 0.0
    input_std: float = 1.0

    def __post_init__(self):
        if self.ra_channels <= 0:
            raise ContractError("ra_channels must be positive")
        self.input_size = tuple(int(v) for v in self.input_size)
        self.toy_channels = tuple(int(v) for v in self.toy_channels)
        if self.input_std <= 0:
            raise ContractError("input_std must be positive")
        if self.pretrained and not self.pretrained_path:
            raise ContractError("pretrained=True needs pretrained_path pointing at encoder weights")

    @property
    def components(self) -> tuple[str, ...]:
        return tuple(c for c in COMPONENTS if getattr(self, f"enable_{c}"))

    def with_ablation(self, spec) -> "ModelConfig":
        """Return a copy with exactly the listed components enabled ("" = backbone only)."""
        enabled = parse_ablation(spec)
        kw = asdict(self)
        for c in COMPONENTS:
            kw[f"enable_{c}"] = c in enabled
        return ModelConfig(**kw)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config key(s): {', '.join(sorted(unknown))}")
        return cls(**d)


def parse_ablation(spec) -> set[str]:
    if isinstance(spec, int):
        if spec not in ABLATION_ROWS:
            raise ContractError(f"ablation rows are 1-7, got {spec}")
        return set(ABLATION_ROWS[spec])
    if isinstance(spec, str):
        items = [s.strip().upper() for s in spec.split(",") if s.strip()]
    else:
        items = [str(s).upper() for s in spec]
    bad = [s for s in items if s not in COMPONENTS]
    if bad:
        raise ConfigError(f"unknown ablation component(s): {', '.join(bad)} (expected EA, PPD, RA)")
    return set(items)


def resample(x: torch.Tensor, size) -> torch.Tensor:
    """Bilinear resampling (align_corners=False); a no-op when the size already matches."""
    size = tuple(size)
    if tuple(x.shape[-2:]) == size:
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def reverse_attention_weight(s_next: torch.Tensor, channels: int, size) -> torch.Tensor:
    """1 - sigmoid(resampled deeper prediction), repeated across ``channels``."""
    # sigmoid(-x) == 1 - sigmoid(x) without cancellation for large logits
    rev = torch.sigmoid(-resample(s_next, size))
    return rev.expand(-1, channels, -1, -1)


@dataclass
class PredictionBundle:
    S_g: torch.Tensor | None
    S_5: torch.Tensor | None
    S_4: torch.Tensor | None
    S_3: torch.Tensor | None
    S_e: torch.Tensor | None
    S_p: torch.Tensor

    @property
    def final(self) -> torch.Tensor:
        """Logits of the final prediction: S_3 when RA is on, otherwise the coarsest surviving map."""
        for s in (self.S_3, self.S_g, self.S_5):
            if s is not None:
                return s
        raise ContractError("bundle has no segmentation output")

    def side_outputs(self) -> dict[str, torch.Tensor | None]:
        return {"S_g": self.S_g, "S_5": self.S_5, "S_4": self.S_4, "S_3": self.S_3}


class EdgeAttention(nn.Module):
    def __init__(self, in_channels):
        super().__init__()
        self.edge_conv = nn.Conv2d(in_channels, 1, 3, padding=1)

    def forward(self, f2):
        return f2, self.edge_conv(f2)


class ParallelPartialDecoder(nn.Module):
    """Aggregates f3, f4, f5 into a coarse global map at stride 8."""

    def __init__(self, in_channels, channel):
        super().__init__()
        c3, c4, c5 = in_channels
        self.reduce3 = BasicConv2d(c3, channel, 1)
        self.reduce4 = BasicConv2d(c4, channel, 1)
        self.reduce5 = BasicConv2d(c5, channel, 1)
        self.fuse = BasicConv2d(3 * channel, channel, 3, padding=1)
        self.out = nn.Conv2d(channel, 1, 1)

    def forward(self, f3, f4, f5):
        h, w = f3.shape[-2:]
        if tuple(f4.shape[-2:]) != (h // 2, w // 2) or tuple(f5.shape[-2:]) != (h // 4, w // 4):
            raise ContractError("partial decoder expects f3, f4, f5 at strides 8, 16, 32")
        x3, x4, x5 = self.reduce3(f3), self.reduce4(f4), self.reduce5(f5)
        x4_up = resample(x4, (h, w))
        x5_up = resample(x5, (h, w))
        b5 = x5_up
        b4 = x4_up * x5_up
        b3 = x3 * x4_up * x5_up
        return self.out(self.fuse(torch.cat((b3, b4, b5), 1)))


class ReverseAttentionStage(nn.Module):
    """R_i = C(f_i, Dow(e_att)) * A_i and S_i = conv(R_i) + resample(S_next).

    ``edge_factor`` is the stride ratio between f_i and e_att (2, 4 or 8).
    With ``s_next=None`` the stage runs unguided and acts as a plain side-output head.
    """

    def __init__(self, in_channels, edge_channels, channel, edge_factor):
        super().__init__()
        self.edge_factor = edge_factor
        self.use_edge = edge_channels > 0
        self.fuse = nn.Sequential(
            BasicConv2d(in_channels + edge_channels, channel, 3, padding=1),
            BasicConv2d(channel, channel, 3, padding=1),
        )
        self.out = nn.Conv2d(channel, 1, 3, padding=1)

    def forward(self, f, e_att=None, s_next=None):
        size = tuple(f.shape[-2:])
        if self.use_edge:
            if e_att is None:
                raise ContractError("stage was built with edge attention but e_att is missing")
            k = self.edge_factor
            if tuple(e_att.shape[-2:]) != (size[0] * k, size[1] * k):
                raise ContractError(
                    f"e_att {tuple(e_att.shape[-2:])} is not {k}x the feature size {size}")
            x = torch.cat((f, F.avg_pool2d(e_att, k, k)), 1)
        else:
            x = f
        x = self.fuse(x)
        if s_next is None:
            return x, self.out(x)
        r = x * reverse_attention_weight(s_next, x.shape[1], size)
        return r, self.out(r) + resample(s_next, size)


class InfNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        self.encoder = build_encoder(cfg.encoder, cfg.in_channels, cfg.toy_channels)
        if cfg.pretrained:
            state = torch.load(cfg.pretrained_path, map_location="cpu", weights_only=True)
            self.encoder.load_state_dict(state)
        ch = self.encoder.channels
        c = cfg.ra_channels
        edge_ch = ch[1] if cfg.enable_EA else 0
        self.edge = EdgeAttention(ch[1]) if cfg.enable_EA else None
        self.decoder = ParallelPartialDecoder(ch[2:], c) if cfg.enable_PPD else None
        # stage 5 doubles as the backbone head whenever PPD is off
        need_ra5 = cfg.enable_RA or not cfg.enable_PPD
        self.ra5 = ReverseAttentionStage(ch[4], edge_ch, c, 8) if need_ra5 else None
        self.ra4 = ReverseAttentionStage(ch[3], edge_ch, c, 4) if cfg.enable_RA else None
        self.ra3 = ReverseAttentionStage(ch[2], edge_ch, c, 2) if cfg.enable_RA else None

    def encode(self, x):
        return self.encoder(x)

    def forward(self, x) -> PredictionBundle:
        cfg = self.config
        if cfg.input_mean != 0.0 or cfg.input_std != 1.0:
            x_in = (x - cfg.input_mean) / cfg.input_std
        else:
            x_in = x
        f1, f2, f3, f4, f5 = self.encode(x_in)
        e_att, s_e = self.edge(f2) if self.edge is not None else (None, None)
        s_g = self.decoder(f3, f4, f5) if self.decoder is not None else None
        s_5 = s_4 = s_3 = None
        if cfg.enable_RA:
            _, s_5 = self.ra5(f5, e_att, s_g)
            _, s_4 = self.ra4(f4, e_att, s_5)
            _, s_3 = self.ra3(f3, e_att, s_4)
        elif s_g is None:
            _, s_5 = self.ra5(f5, e_att, None)
        bundle = PredictionBundle(s_g, s_5, s_4, s_3, s_e, x.new_zeros(0))
        bundle.S_p = torch.sigmoid(resample(bundle.final, x.shape[-2:]))
        return bundle


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: nn.Module, path, config=None, extra: dict | None = None):
    """Atomically write {state_dict, config, extra}; a failed write leaves any previous file untouched."""
    path = Path(path)
    if config is None and hasattr(model, "config"):
        config = model.config
    payload = {
        "state_dict": model.state_dict(),
        "config": asdict(config) if config is not None else None,
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, tmp)
        os.replace(tmp, path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise CheckpointError(f"failed to write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path):
    try:
        return torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc


def load_infnet(path) -> InfNet:
    payload = load_checkpoint(path)
    cfg = dict(payload["config"])
    cfg["pretrained"] = False  # weights come from the checkpoint
    model = InfNet(ModelConfig.from_dict(cfg))
    model.load_state_dict(payload["state_dict"])
    return model


def weights_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
