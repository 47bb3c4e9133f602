"""Five-stage encoders producing features at strides 2, 4, 8, 16 and 32."""

import math

import torch
import torch.nn as nn

from ..errors import ContractError

STRIDES = (2, 4, 8, 16, 32)


class BasicConv2d(nn.Module):
    def __init__(self, in_planes, out_planes, kernel_size, stride=1, padding=0, dilation=1, relu=True):
        super().__init__()
        self.conv = nn.Conv2d(in_planes, out_planes, kernel_size, stride=stride,
                              padding=padding, dilation=dilation, bias=False)
        self.bn = nn.BatchNorm2d(out_planes)
        self.relu = nn.ReLU(inplace=True) if relu else nn.Identity()

    def forward(self, x):
        return self.relu(self.bn(self.conv(x)))


def check_input_dims(x: torch.Tensor):
    if x.dim() != 4:
        raise ContractError(f"expected a B x C x H x W batch, got shape {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % 32 or w % 32:
        raise ContractError(f"input {h}x{w} is not divisible by 32")


class ToyEncoder(nn.Module):
    """Small from-scratch encoder for CPU-scale experiments and tests."""

    def __init__(self, in_channels=1, channels=(8, 16, 16, 32, 32)):
        super().__init__()
        if len(channels) != 5:
            raise ContractError("toy encoder needs exactly five stage widths")
        self.channels = tuple(int(c) for c in channels)
        stages = []
        prev = in_channels
        for c in self.channels:
            stages.append(nn.Sequential(
                BasicConv2d(prev, c, 3, stride=2, padding=1),
                BasicConv2d(c, c, 3, padding=1),
            ))
            prev = c
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        check_input_dims(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return tuple(feats)


class Bottle2neck(nn.Module):
    """Res2Net bottleneck: the 3x3 stage is split into ``scale`` hierarchical groups."""

    expansion = 4

    def __init__(self, inplanes, planes, stride=1, downsample=None, base_width=26, scale=4, stype="normal"):
        super().__init__()
        width = int(math.floor(planes * (base_width / 64.0)))
        self.conv1 = nn.Conv2d(inplanes, width * scale, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width * scale)
        self.nums = 1 if scale == 1 else scale - 1
        if stype == "stage":
            self.pool = nn.AvgPool2d(3, stride=stride, padding=1)
        self.convs = nn.ModuleList(
            nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False) for _ in range(self.nums))
        self.bns = nn.ModuleList(nn.BatchNorm2d(width) for _ in range(self.nums))
        self.conv3 = nn.Conv2d(width * scale, planes * self.expansion, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(planes * self.expansion)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = downsample
        self.stype = stype
        self.scale = scale
        self.width = width

    def forward(self, x):
        residual = x
        out = self.relu(self.bn1(self.conv1(x)))
        spx = torch.split(out, self.width, 1)
        parts = []
        sp = None
        for i in range(self.nums):
            sp = spx[i] if i == 0 or self.stype == "stage" else sp + spx[i]
            sp = self.relu(self.bns[i](self.convs[i](sp)))
            parts.append(sp)
        if self.scale != 1:
            parts.append(self.pool(spx[self.nums]) if self.stype == "stage" else spx[self.nums])
        out = self.bn3(self.conv3(torch.cat(parts, 1)))
        if self.downsample is not None:
            residual = self.downsample(x)
        return self.relu(out + residual)


class Res2NetEncoder(nn.Module):
    """Res2Net-50 style encoder (deep stem, layers 3-4-6-3, width 26, scale 4).

    f1 is the stem output; f2..f5 are the four residual stages.
    """

    def __init__(self, in_channels=1, layers=(3, 4, 6, 3), base_width=26, scale=4):
        super().__init__()
        self.base_width = base_width
        self.scale = scale
        self.inplanes = 64
        self.stem = nn.Sequential(
            BasicConv2d(in_channels, 32, 3, stride=2, padding=1),
            BasicConv2d(32, 32, 3, padding=1),
            BasicConv2d(32, 64, 3, padding=1),
        )
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        self.layer1 = self._make_layer(64, layers[0])
        self.layer2 = self._make_layer(128, layers[1], stride=2)
        self.layer3 = self._make_layer(256, layers[2], stride=2)
        self.layer4 = self._make_layer(512, layers[3], stride=2)
        self.channels = (64, 256, 512, 1024, 2048)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def _make_layer(self, planes, blocks, stride=1):
        downsample = None
        if stride != 1 or self.inplanes != planes * Bottle2neck.expansion:
            downsample = nn.Sequential(
                nn.AvgPool2d(stride, stride=stride, ceil_mode=True, count_include_pad=False),
                nn.Conv2d(self.inplanes, planes * Bottle2neck.expansion, 1, bias=False),
                nn.BatchNorm2d(planes * Bottle2neck.expansion),
            )
        layers = [Bottle2neck(self.inplanes, planes, stride, downsample, self.base_width, self.scale, "stage")]
        self.inplanes = planes * Bottle2neck.expansion
        layers += [Bottle2neck(self.inplanes, planes, base_width=self.base_width, scale=self.scale)
                   for _ in range(1, blocks)]
        return nn.Sequential(*layers)

    def forward(self, x):
        check_input_dims(x)
        f1 = self.stem(x)
        f2 = self.layer1(self.maxpool(f1))
        f3 = self.layer2(f2)
        f4 = self.layer3(f3)
        f5 = self.layer4(f4)
        return f1, f2, f3, f4, f5


def build_encoder(kind: str, in_channels: int = 1, toy_channels=(8, 16, 16, 32, 32)) -> nn.Module:
    if kind in ("toy", "lightweight-toy"):
        return ToyEncoder(in_channels, toy_channels)
    if kind in ("res2net", "res2net-like"):
        return Res2NetEncoder(in_channels)
    raise ContractError(f"unknown encoder {kind!r}")
