"""Findings model (any lesion in a view) and its patch-classifier pre-training."""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from ..dataset import VIEWS, Exam, ViewKey
from ..preprocess import Patch, augment, prepare_view, sample_patches
from .backbone import Backbone, BackboneConfig, as_batch
from .training import TrainConfig, TrainingError, TrainingLog, fit


class PatchClassifier(nn.Module):
    def __init__(self, cfg: BackboneConfig, dropout: float = 0.5):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.head = nn.Sequential(nn.Dropout(dropout), nn.Linear(cfg.feature_width, 2))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))


class FindingsModel(nn.Module):
    """Backbone, GAP (the exported feature), dense layer, dropout 0.5, two-way head."""

    def __init__(self, cfg: BackboneConfig, dropout: float = 0.5):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.dense = nn.Sequential(nn.Linear(cfg.feature_width, cfg.feature_width), nn.ReLU())
        self.dropout = nn.Dropout(dropout)
        self.classifier = nn.Linear(cfg.feature_width, 2)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.dropout(self.dense(self.features(x))))


def collect_patches(exams: Sequence[Exam], cfg: BackboneConfig, patch_size: int,
                    per_lesion: int = 5, per_normal: int = 5, seed: int = 0) -> List[Patch]:
    out: List[Patch] = []
    for exam in exams:
        for view in VIEWS:
            out += sample_patches(exam, view, patch_size, per_lesion, per_normal, seed, cfg.input_profile)
    return out


def train_patch_classifier(train: Sequence[Patch], val: Sequence[Patch], cfg: TrainConfig,
                           backbone: BackboneConfig, log: Optional[TrainingLog] = None) -> PatchClassifier:
    """Trained from scratch with early stopping on validation loss, then a fine-tune pass
    at ``cfg.finetune_lr`` for ``cfg.finetune_epochs`` epochs."""
    log = log if log is not None else TrainingLog()
    yt = np.array([p.label for p in train])
    if len(set(yt.tolist())) < 2:
        raise TrainingError("degenerate patch labels")
    xt = np.stack([p.image for p in train])
    xv = np.stack([p.image for p in val])
    yv = np.array([p.label for p in val])
    torch.manual_seed(cfg.seed)
    model = PatchClassifier(backbone)

    def train_batch(idx, epoch):
        imgs = xt[idx]
        if epoch is not None:
            imgs = np.stack([augment(xt[i], None, cfg.augmentation, cfg.seed * 1_000_003 + epoch * 100_003 + int(i)).image
                             for i in idx])
        return as_batch(imgs), torch.as_tensor(yt[idx])

    def val_batch(idx, _):
        return as_batch(xv[idx]), torch.as_tensor(yv[idx])

    fit(model, train_batch, yt, val_batch, len(yv), cfg, log, "patch")
    if cfg.finetune_epochs > 0 and cfg.finetune_lr:
        fit(model, train_batch, yt, val_batch, len(yv), cfg, log, "patch_finetune",
            lr=cfg.finetune_lr, epochs=cfg.finetune_epochs)
    return model


def view_label(exam: Exam, view: ViewKey) -> int:
    return int(bool(exam.lesions_in(view)))


def prepare_findings_views(exam: Exam, cfg: BackboneConfig) -> np.ndarray:
    return np.stack([prepare_view(exam.image(v), cfg.input_profile) for v in VIEWS])


def train_findings(patch_model: Optional[PatchClassifier], train: Sequence[Exam], val: Sequence[Exam],
                   cfg: TrainConfig, backbone: BackboneConfig, log: Optional[TrainingLog] = None,
                   prepared: Optional[dict] = None) -> FindingsModel:
    """View-level lesion/normal classifier; the backbone starts from ``patch_model`` when given."""
    log = log if log is not None else TrainingLog()
    prepared = prepared if prepared is not None else {}

    def stack(exams):
        x = [prepared[e.case_id] if e.case_id in prepared else prepare_findings_views(e, backbone) for e in exams]
        y = [view_label(e, v) for e in exams for v in VIEWS]
        return np.concatenate(x), np.array(y)

    if not train or not val:
        raise TrainingError("findings: empty training or validation split")
    xt, yt = stack(train)
    xv, yv = stack(val)
    torch.manual_seed(cfg.seed)
    model = FindingsModel(backbone)
    if patch_model is not None:
        model.backbone.load_state_dict(patch_model.backbone.state_dict())

    def train_batch(idx, epoch):
        imgs = xt[idx]
        if epoch is not None:
            imgs = np.stack([augment(xt[i], None, cfg.augmentation, cfg.seed * 1_000_003 + epoch * 100_003 + int(i)).image
                             for i in idx])
        return as_batch(imgs), torch.as_tensor(yt[idx])

    def val_batch(idx, _):
        return as_batch(xv[idx]), torch.as_tensor(yv[idx])

    fit(model, train_batch, yt, val_batch, len(yv), cfg, log, "findings")
    if cfg.finetune_epochs > 0 and cfg.finetune_lr:
        fit(model, train_batch, yt, val_batch, len(yv), cfg, log, "findings_finetune",
            lr=cfg.finetune_lr, epochs=cfg.finetune_epochs)
    return model


@torch.no_grad()
def predict_findings(model: FindingsModel, image: np.ndarray, prepared: bool = False) -> Tuple[float, np.ndarray]:
    """(lesion probability, GAP feature) for one view image."""
    model.eval()
    x = image if prepared else prepare_view(image, model.cfg.input_profile)
    x = as_batch(np.asarray(x)[None])
    feat = model.features(x)
    p = torch.softmax(model.classifier(model.dense(feat)), 1)[0, 1].item()
    return float(p), feat[0].numpy().astype(np.float64)


@torch.no_grad()
def predict_findings_batch(model: FindingsModel, images: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Batched variant on prepared images (N, H, W)."""
    model.eval()
    feat = model.features(as_batch(images))
    p = torch.softmax(model.classifier(model.dense(feat)), 1)[:, 1]
    return p.numpy().astype(np.float64), feat.numpy().astype(np.float64)
