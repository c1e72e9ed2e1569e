"""Feature-level fusion: multi-branch 1-D convolutional embedding network over normalized bundles."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from ..dataset import VIEWS
from ..taskmodels.training import TrainConfig, TrainingLog, fit
from .layout import ContractError, FeatureBundle, FusionLayout
from .normalizer import Normalizer


@dataclass(frozen=True)
class EmbeddingNetConfig:
    feature_width: int
    n: int
    include_density: bool = True
    channels: int = 16
    hidden: int = 64
    dropout: float = 0.1
    kernel_size: int = 3
    density_blocks: int = 2
    findings_blocks: int = 2
    localizer_blocks: int = 3

    def __post_init__(self):
        if self.feature_width % (2 ** max(self.density_blocks, self.findings_blocks, self.localizer_blocks)):
            raise ValueError("feature_width must be divisible by 2**blocks")

    @classmethod
    def for_layout(cls, layout: FusionLayout, **kw) -> "EmbeddingNetConfig":
        if layout.feature_width is None:
            raise ContractError("layout lacks a feature width")
        return cls(layout.feature_width, layout.n, layout.include_density, **kw)


def feature_fusion_train_config(seed: int = 0, max_epochs: int = 200) -> TrainConfig:
    return TrainConfig(optimizer="adam", lr=5e-4, batch_size=8, epochs=max_epochs,
                       early_stopping="val_loss", patience=10, tolerance=0.001,
                       stratified=True, seed=seed)


def _branch(slots: int, cfg: EmbeddingNetConfig, blocks: int) -> nn.Sequential:
    """Slots act as input channels; convolutions run along the feature axis."""
    layers, c = [], slots
    for _ in range(blocks):
        layers += [nn.Conv1d(c, cfg.channels, cfg.kernel_size, padding=cfg.kernel_size // 2),
                   nn.ReLU(), nn.MaxPool1d(2)]
        c = cfg.channels
    return nn.Sequential(*layers, nn.Flatten())


class EmbeddingNet(nn.Module):
    def __init__(self, cfg: EmbeddingNetConfig):
        super().__init__()
        self.cfg = cfg
        v, fw, c = len(VIEWS), cfg.feature_width, cfg.channels
        self.density = _branch(v, cfg, cfg.density_blocks) if cfg.include_density else None
        self.findings = _branch(v, cfg, cfg.findings_blocks)
        self.localizer = _branch(v * cfg.n, cfg, cfg.localizer_blocks)
        width = c * (fw >> cfg.findings_blocks) + c * (fw >> cfg.localizer_blocks)
        if cfg.include_density:
            width += c * (fw >> cfg.density_blocks)
        self.head = nn.Sequential(nn.ReLU(), nn.Linear(width, cfg.hidden), nn.ReLU(),
                                  nn.Dropout(cfg.dropout), nn.Linear(cfg.hidden, 2))

    def forward(self, x: Tuple[Optional[torch.Tensor], torch.Tensor, torch.Tensor]) -> torch.Tensor:
        """x = (density (B, 4, fw) or None, findings (B, 4, fw), localizer (B, 4n, fw)) -> logits."""
        density, findings, localizer = x
        parts = [torch.relu(self.findings(findings)), torch.relu(self.localizer(localizer))]
        if self.density is not None:
            parts.insert(0, torch.relu(self.density(density)))
        return self.head(torch.cat(parts, dim=1))


def bundles_to_tensors(bundles: Sequence[FeatureBundle], layout: FusionLayout):
    for b in bundles:
        if b.layout != layout:
            raise ContractError(f"feature bundle layout {b.layout} does not match {layout}")
    v, fw = len(VIEWS), layout.feature_width
    dens = (torch.as_tensor(np.stack([b.density.reshape(v, fw) for b in bundles]), dtype=torch.float32)
            if layout.include_density else None)
    find = torch.as_tensor(np.stack([b.findings for b in bundles]), dtype=torch.float32)
    loc = torch.as_tensor(np.stack([b.localizer.reshape(v * layout.n, fw) for b in bundles]), dtype=torch.float32)
    return dens, find, loc


def _index(t, idx):
    return tuple(None if a is None else a[torch.as_tensor(idx)] for a in t)


@dataclass
class FeatureFusionModel:
    net: EmbeddingNet
    normalizer: Normalizer
    layout: FusionLayout

    @torch.no_grad()
    def predict_proba(self, bundles: Sequence[FeatureBundle]) -> np.ndarray:
        """Positive-class probability of raw (un-normalized) bundles."""
        if not bundles:
            return np.zeros(0)
        self.net.eval()
        x = bundles_to_tensors([self.normalizer.apply(b) for b in bundles], self.layout)
        return torch.softmax(self.net(x), 1)[:, 1].numpy().astype(np.float64)


def train_feature_fusion(bundles: Sequence[FeatureBundle], labels: Sequence[int],
                         val: Tuple[Sequence[FeatureBundle], Sequence[int]], normalizer: Normalizer,
                         cfg: Optional[EmbeddingNetConfig] = None, train_cfg: Optional[TrainConfig] = None,
                         log_: Optional[TrainingLog] = None) -> FeatureFusionModel:
    """``bundles`` are raw; ``normalizer`` (fitted on the training bundles) is applied here."""
    if not bundles:
        raise ContractError("no feature bundles given")
    layout = bundles[0].layout
    cfg = cfg or EmbeddingNetConfig.for_layout(layout)
    train_cfg = train_cfg or feature_fusion_train_config()
    y, yv = np.asarray(labels), np.asarray(val[1])
    for arr, what in ((y, "training"), (yv, "validation")):
        if len(np.unique(arr)) < 2:
            raise ValueError(f"{what} labels contain a single class")
    xt = bundles_to_tensors([normalizer.apply(b) for b in bundles], layout)
    xv = bundles_to_tensors([normalizer.apply(b) for b in val[0]], layout)
    torch.manual_seed(train_cfg.seed)
    net = EmbeddingNet(cfg)
    fit(net, lambda idx, _: (_index(xt, idx), torch.as_tensor(y[idx])), y,
        lambda idx, _: (_index(xv, idx), torch.as_tensor(yv[idx])), len(yv),
        train_cfg, log_ if log_ is not None else TrainingLog(), f"feature_fusion_{layout.tag}")
    return FeatureFusionModel(net, normalizer, layout)
