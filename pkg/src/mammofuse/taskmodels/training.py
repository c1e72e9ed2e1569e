"""Training configuration and the shared epoch loop (SWA, plateau schedule, early stopping)."""

from __future__ import annotations

import copy
import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..evalkit.metrics import roc_auc
from ..preprocess import IDENTITY, AugmentationPolicy

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    optimizer: str = "adam"  # "adam" | "sgd" (momentum)
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    plateau_factor: Optional[float] = None
    plateau_patience: int = 5
    epochs: int = 25
    iterations: Optional[int] = None  # iteration-based stages (localizer)
    warmup_iterations: int = 0
    batch_size: int = 16
    early_stopping: Optional[str] = None  # "val_loss" | "val_auc"
    patience: int = 10
    tolerance: float = 0.001
    swa_start: Optional[int] = None  # 1-based epoch
    stratified: bool = False
    finetune_lr: Optional[float] = None
    finetune_epochs: int = 0
    augmentation: AugmentationPolicy = IDENTITY
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs, batch_size and patience must be positive")
        if self.iterations is not None and self.iterations < 1:
            raise ValueError("iterations must be positive")
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")
        if self.early_stopping not in (None, "val_loss", "val_auc"):
            raise ValueError(f"unknown early-stopping monitor {self.early_stopping!r}")
        if self.finetune_epochs < 0:
            raise ValueError("finetune_epochs must be >= 0")

    def replace(self, **changes) -> "TrainConfig":
        d = dict(self.__dict__)
        d.update(changes)
        return TrainConfig(**d)


def make_optimizer(params, cfg: TrainConfig, lr: Optional[float] = None) -> torch.optim.Optimizer:
    lr = cfg.lr if lr is None else lr
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return torch.optim.Adam(params, lr=lr, weight_decay=cfg.weight_decay)


class EarlyStopping:
    """Stops once the monitored value fails to improve by more than ``tolerance``
    for ``patience`` consecutive epochs."""

    def __init__(self, patience: int, tolerance: float = 0.0, mode: str = "min"):
        self.patience, self.tolerance, self.mode = patience, tolerance, mode
        self.best: Optional[float] = None
        self.bad_epochs = 0
        self.improved = False

    def step(self, value: float) -> bool:
        if self.best is None:
            better = True
        elif self.mode == "min":
            better = value < self.best - self.tolerance
        else:
            better = value > self.best + self.tolerance
        self.improved = better
        if better:
            self.best, self.bad_epochs = value, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


class WeightAverager:
    """Uniform running average of a model's floating-point parameters."""

    def __init__(self):
        self.n = 0
        self.avg: Optional[Dict[str, torch.Tensor]] = None

    @torch.no_grad()
    def update(self, model: nn.Module) -> None:
        params = {k: v.detach().clone() for k, v in model.named_parameters()}
        if self.avg is None:
            self.avg = params
        else:
            for k, v in params.items():
                self.avg[k] += (v - self.avg[k]) / (self.n + 1)
        self.n += 1

    @torch.no_grad()
    def apply(self, model: nn.Module) -> None:
        for k, p in model.named_parameters():
            p.copy_(self.avg[k])


@torch.no_grad()
def recompute_bn(model: nn.Module, batches) -> None:
    """Re-estimate BatchNorm running statistics with a cumulative average over ``batches``."""
    bns = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not bns:
        return
    momenta = {m: m.momentum for m in bns}
    for m in bns:
        m.reset_running_stats()
        m.momentum = None
    was_training = model.training
    model.train()
    for x in batches:
        model(x)
    for m in bns:
        m.momentum = momenta[m]
    model.train(was_training)


def shuffled_batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def stratified_batches(labels: Sequence[int], batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Class-balanced batches: each batch draws half its items from each class,
    cycling through per-class permutations (the minority class is oversampled)."""
    labels = np.asarray(labels)
    pos, neg = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)
    if len(pos) == 0 or len(neg) == 0 or batch_size < 2:
        return shuffled_batches(len(labels), batch_size, rng)
    n_batches = int(np.ceil(len(labels) / batch_size))
    n_pos = batch_size // 2
    n_neg = batch_size - n_pos

    def stream(idx: np.ndarray, count: int) -> np.ndarray:
        reps = int(np.ceil(count / len(idx)))
        return np.concatenate([rng.permutation(idx) for _ in range(reps)])[:count]

    p = stream(pos, n_batches * n_pos).reshape(n_batches, n_pos)
    q = stream(neg, n_batches * n_neg).reshape(n_batches, n_neg)
    return [rng.permutation(np.concatenate([a, b])) for a, b in zip(p, q)]


@dataclass
class TrainingLog:
    rows: List[dict] = field(default_factory=list)

    def add(self, stage: str, epoch: int, split: str, loss: float, auc: Optional[float] = None) -> None:
        self.rows.append({"stage": stage, "epoch": epoch, "split": split, "loss": float(loss),
                          "auc": "" if auc is None else float(auc)})

    def for_stage(self, stage: str, split: Optional[str] = None) -> List[dict]:
        return [r for r in self.rows if r["stage"] == stage and (split is None or r["split"] == split)]

    def to_csv(self, path: os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, ["stage", "epoch", "split", "loss", "auc"], lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, "loss": repr(r["loss"]), "auc": "" if r["auc"] == "" else repr(r["auc"])})


# make_batch(indices, epoch) -> (inputs, targets); epoch None means no augmentation
BatchFn = Callable[[np.ndarray, Optional[int]], Tuple[torch.Tensor, torch.Tensor]]


@torch.no_grad()
def evaluate(model: nn.Module, make_batch: BatchFn, n: int, batch_size: int) -> Tuple[float, Optional[float], np.ndarray]:
    """Mean cross-entropy, AUC (None if single-class) and positive-class probabilities."""
    model.eval()
    losses, probs, ys = [], [], []
    for start in range(0, n, batch_size):
        x, y = make_batch(np.arange(start, min(n, start + batch_size)), None)
        logits = model(x)
        losses.append(F.cross_entropy(logits, y, reduction="sum").item())
        probs.append(torch.softmax(logits, 1)[:, 1].numpy())
        ys.append(y.numpy())
    p, y = np.concatenate(probs), np.concatenate(ys)
    auc = roc_auc(p, y)[0] if 0 < y.sum() < len(y) else None
    return sum(losses) / n, auc, p


def check_finite(loss: torch.Tensor, stage: str, epoch: int, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()} in stage {stage!r} at epoch {epoch}, step {step}")


def fit(model: nn.Module, train_batch: BatchFn, train_labels: Sequence[int], val_batch: BatchFn,
        n_val: int, cfg: TrainConfig, log_: TrainingLog, stage: str,
        lr: Optional[float] = None, epochs: Optional[int] = None,
        params=None) -> nn.Module:
    """Cross-entropy training with the configured schedule; returns ``model`` (updated in place).

    With SWA the averaged weights are loaded at the end (BatchNorm statistics recomputed);
    if the averaging window is empty the last-epoch weights are kept. Without SWA but with
    early stopping the best monitored weights are restored.
    """
    n_train = len(train_labels)
    if n_train == 0 or n_val == 0:
        raise TrainingError(f"stage {stage!r}: empty training or validation split")
    epochs = cfg.epochs if epochs is None else epochs
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(params if params is not None else model.parameters(), cfg, lr)
    sched = (torch.optim.lr_scheduler.ReduceLROnPlateau(opt, factor=cfg.plateau_factor,
                                                        patience=cfg.plateau_patience)
             if cfg.plateau_factor else None)
    stopper = (EarlyStopping(cfg.patience, cfg.tolerance, "min" if cfg.early_stopping == "val_loss" else "max")
               if cfg.early_stopping else None)
    swa = WeightAverager() if cfg.swa_start is not None else None
    best_state = None
    for epoch in range(1, epochs + 1):
        model.train()
        batches = (stratified_batches(train_labels, cfg.batch_size, rng) if cfg.stratified
                   else shuffled_batches(n_train, cfg.batch_size, rng))
        total, count = 0.0, 0
        for step, idx in enumerate(batches):
            x, y = train_batch(idx, epoch)
            if len(idx) < 2 and any(isinstance(m, nn.BatchNorm2d) for m in model.modules()):
                continue  # BatchNorm needs more than one sample
            loss = F.cross_entropy(model(x), y)
            check_finite(loss, stage, epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        log_.add(stage, epoch, "train", total / max(count, 1))
        val_loss, val_auc, _ = evaluate(model, val_batch, n_val, max(cfg.batch_size, 16))
        log_.add(stage, epoch, "validation", val_loss, val_auc)
        log.info("%s epoch %d: train %.4f val %.4f auc %s", stage, epoch, total / max(count, 1), val_loss, val_auc)
        if swa is not None and epoch >= cfg.swa_start:
            swa.update(model)
        if sched is not None:
            sched.step(val_loss)
        if stopper is not None:
            monitored = val_loss if cfg.early_stopping == "val_loss" else (val_auc if val_auc is not None else 0.0)
            stop = stopper.step(monitored)
            if stopper.improved:
                best_state = copy.deepcopy(model.state_dict())
            if stop:
                log.info("%s: early stop at epoch %d", stage, epoch)
                break
    if swa is not None and swa.n > 0:
        swa.apply(model)
        bn_rng = np.random.default_rng(cfg.seed)
        recompute_bn(model, (train_batch(idx, None)[0]
                             for idx in shuffled_batches(n_train, max(cfg.batch_size, 16), bn_rng)))
    elif swa is None and best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model
