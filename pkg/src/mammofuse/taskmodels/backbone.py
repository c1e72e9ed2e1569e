"""Depthwise-separable convolutional feature extractor terminated by global average pooling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import torch
from torch import nn

from ..preprocess import PreprocessProfile, findings_profile


@dataclass
class BackboneConfig:
    feature_width: int = 64
    stage_channel_multipliers: Tuple[float, ...] = (0.25, 0.5, 1.0)
    stage_strides: Tuple[int, ...] = (2, 2, 2)
    stem_stride: int = 2
    input_profile: PreprocessProfile = field(default_factory=findings_profile)
    dropout_rate: float = 0.001

    def __post_init__(self):
        if self.feature_width < 8:
            raise ValueError("feature_width must be >= 8")
        if len(self.stage_channel_multipliers) != len(self.stage_strides):
            raise ValueError("one stride per stage")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def stride(self) -> int:
        s = self.stem_stride
        for k in self.stage_strides:
            s *= k
        return s

    def channels(self) -> Tuple[int, ...]:
        return tuple(max(4, int(round(self.feature_width * m))) for m in self.stage_channel_multipliers[:-1]) \
            + (self.feature_width,)


def conv_bn(c_in: int, c_out: int, k: int, stride: int = 1, groups: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, k, stride, k // 2, groups=groups, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class SeparableBlock(nn.Sequential):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__(conv_bn(c_in, c_in, 3, stride, groups=c_in), conv_bn(c_in, c_out, 1))


class Backbone(nn.Module):
    """Stem conv, then per stage one strided and one plain separable block."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.channels()
        stem = max(4, chans[0] // 2)
        layers = [conv_bn(1, stem, 3, cfg.stem_stride)]
        c = stem
        for c_out, s in zip(chans, cfg.stage_strides):
            layers += [SeparableBlock(c, c_out, s), SeparableBlock(c_out, c_out, 1)]
            c = c_out
        self.body = nn.Sequential(*layers)
        self.feature_width = cfg.feature_width

    def feature_map(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x).mean(dim=(2, 3))


def as_batch(images) -> torch.Tensor:
    """(N, H, W) numpy/tensor -> (N, 1, H, W) float32 tensor."""
    t = torch.as_tensor(images, dtype=torch.float32)
    if t.dim() == 2:
        t = t[None]
    return t.unsqueeze(1) if t.dim() == 3 else t
