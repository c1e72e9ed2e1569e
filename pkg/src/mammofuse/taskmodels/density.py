"""Breast density: single-view model and the four-branch patient model."""

from __future__ import annotations

import copy
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from ..dataset import VIEWS, Exam, derive_case_labels
from ..preprocess import AugmentationPolicy, augment, prepare_view
from .backbone import Backbone, BackboneConfig, as_batch
from .training import TrainConfig, TrainingLog, fit

DENSE = 1  # class index of "dense"


def _scale(x: torch.Tensor) -> torch.Tensor:
    return x / 127.5 - 1.0  # rescale_0_255 inputs


class DensityViewModel(nn.Module):
    """Backbone, GAP, dropout and a 1x1 convolution to two logits."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.dropout = nn.Dropout(cfg.dropout_rate)
        self.head = nn.Conv2d(cfg.feature_width, 2, 1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(_scale(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f = self.dropout(self.features(x))
        return self.head(f[:, :, None, None]).flatten(1)


class DensityPatientModel(nn.Module):
    """One branch per view in fixed order, concatenated GAP features, one dense layer."""

    def __init__(self, cfg: BackboneConfig, dropout: float = 0.5):
        super().__init__()
        self.cfg = cfg
        self.branches = nn.ModuleList(Backbone(cfg) for _ in VIEWS)
        self.dropout = nn.Dropout(dropout)
        self.head = nn.Linear(len(VIEWS) * cfg.feature_width, 2)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, 4, 1, H, W) in view order -> (B, 4 * feature_width)."""
        x = _scale(x)
        return torch.cat([branch(x[:, i]) for i, branch in enumerate(self.branches)], dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.dropout(self.features(x)))

    def load_view_weights(self, view_model: DensityViewModel) -> None:
        for branch in self.branches:
            branch.load_state_dict(view_model.backbone.state_dict())


def _labels(exams: Sequence[Exam]) -> np.ndarray:
    return np.array([int(derive_case_labels(e).density_super == "dense") for e in exams])


def prepare_exam_views(exam: Exam, cfg: BackboneConfig) -> np.ndarray:
    return np.stack([prepare_view(exam.image(v), cfg.input_profile) for v in VIEWS])


def _augment_stack(images: np.ndarray, policy: AugmentationPolicy, seed: int) -> np.ndarray:
    return np.stack([augment(img, None, policy, seed + k).image for k, img in enumerate(images)])


def train_density_view(train: Sequence[Exam], val: Sequence[Exam], cfg: TrainConfig,
                       backbone: BackboneConfig, log: Optional[TrainingLog] = None,
                       prepared: Optional[dict] = None) -> DensityViewModel:
    """Every view image is a training sample labelled with its case's density superclass."""
    log = log if log is not None else TrainingLog()
    prepared = prepared if prepared is not None else {}

    def stack(exams):
        views = [prepared.get(e.case_id) if e.case_id in prepared else prepare_exam_views(e, backbone)
                 for e in exams]
        x = np.concatenate(views) if views else np.zeros((0,) + backbone.input_profile.shape, np.float32)
        return x, np.repeat(_labels(exams), len(VIEWS))

    xt, yt = stack(train)
    xv, yv = stack(val)
    torch.manual_seed(cfg.seed)
    model = DensityViewModel(backbone)

    def train_batch(idx, epoch):
        imgs = xt[idx]
        if epoch is not None:
            imgs = np.stack([augment(xt[i], None, cfg.augmentation, cfg.seed * 1_000_003 + epoch * 100_003 + int(i)).image
                             for i in idx])
        return as_batch(imgs), torch.as_tensor(yt[idx])

    def val_batch(idx, _):
        return as_batch(xv[idx]), torch.as_tensor(yv[idx])

    return fit(model, train_batch, yt, val_batch, len(yv), cfg, log, "density_view")


def train_density_patient(view_model: Optional[DensityViewModel], train: Sequence[Exam], val: Sequence[Exam],
                          cfg: TrainConfig, backbone: BackboneConfig, log: Optional[TrainingLog] = None,
                          freeze_branches: bool = False, prepared: Optional[dict] = None) -> DensityPatientModel:
    """Branches start from the view model's SWA weights (random init if ``view_model`` is None)."""
    log = log if log is not None else TrainingLog()
    prepared = prepared if prepared is not None else {}
    torch.manual_seed(cfg.seed)
    model = DensityPatientModel(backbone)
    if view_model is not None:
        model.load_view_weights(view_model)
    if freeze_branches:
        for p in model.branches.parameters():
            p.requires_grad_(False)

    def stack(exams):
        x = [prepared[e.case_id] if e.case_id in prepared else prepare_exam_views(e, backbone) for e in exams]
        return (np.stack(x) if x else np.zeros((0, 4) + backbone.input_profile.shape, np.float32)), _labels(exams)

    xt, yt = stack(train)
    xv, yv = stack(val)

    def train_batch(idx, epoch):
        imgs = xt[idx]
        if epoch is not None:
            imgs = np.stack([_augment_stack(xt[i], cfg.augmentation, cfg.seed * 1_000_003 + epoch * 100_003 + 4 * int(i))
                             for i in idx])
        return torch.as_tensor(imgs, dtype=torch.float32).unsqueeze(2), torch.as_tensor(yt[idx])

    def val_batch(idx, _):
        return torch.as_tensor(xv[idx], dtype=torch.float32).unsqueeze(2), torch.as_tensor(yv[idx])

    params = [p for p in model.parameters() if p.requires_grad]
    model = fit(model, train_batch, yt, val_batch, len(yv), cfg, log, "density_patient", params=params)
    if freeze_branches:
        for p in model.branches.parameters():
            p.requires_grad_(True)
    return model


@torch.no_grad()
def predict_density(model: DensityPatientModel, exam: Exam,
                    views: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
    """(probability of "dense", concatenated per-view GAP features)."""
    missing = [str(v) for v in VIEWS if v not in exam.images]
    if missing:
        raise ValueError(f"case {exam.case_id}: missing views {missing}")
    model.eval()
    x = views if views is not None else prepare_exam_views(exam, model.cfg)
    x = torch.as_tensor(x, dtype=torch.float32)[None, :, None]
    feat = model.features(x)
    p = torch.softmax(model.head(feat), 1)[0, DENSE].item()
    return float(p), feat[0].numpy().astype(np.float64)


@torch.no_grad()
def predict_density_views(model: DensityViewModel, exam: Exam, views: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-view dense probabilities in view order; their mean is the mean(D^v) baseline."""
    model.eval()
    x = views if views is not None else prepare_exam_views(exam, model.cfg)
    return torch.softmax(model(as_batch(x)), 1)[:, DENSE].numpy().astype(np.float64)
