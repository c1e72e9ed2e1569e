"""Score-level fusion: classical heads on the concatenated score vector, grid-searched on validation AUC."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import ClassifierMixin
from sklearn.ensemble import RandomForestClassifier
from sklearn.neural_network import MLPClassifier
from sklearn.svm import SVC

from ..evalkit.metrics import roc_auc
from .layout import ContractError, FusionLayout, FusionVector

log = logging.getLogger(__name__)

HEAD_KINDS = ("mlp", "svm_rbf", "random_forest")
SVM_C_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 500.0, 1000.0)
FOREST_TREES_GRID = (3, 5, 7, 10, 15, 20)


def mlp_hidden_grid(width: int) -> List[Tuple[int, ...]]:
    """Hidden layers of the layer configurations [|w|, 2], [|w|, |w|, 2], [|w|, |w|//2, 2];
    the trailing 2 is the output layer."""
    return [(width,), (width, width), (width, max(1, width // 2))]


def default_grid(kind: str, width: int) -> List[dict]:
    if kind == "svm_rbf":
        return [{"C": c} for c in SVM_C_GRID]
    if kind == "random_forest":
        return [{"n_estimators": t} for t in FOREST_TREES_GRID]
    if kind == "mlp":
        return [{"hidden_layer_sizes": h} for h in mlp_hidden_grid(width)]
    raise ValueError(f"unknown head kind {kind!r}; expected one of {HEAD_KINDS}")


def make_estimator(kind: str, params: dict, seed: int) -> ClassifierMixin:
    if kind == "svm_rbf":
        return SVC(kernel="rbf", probability=True, random_state=seed, **params)
    if kind == "random_forest":
        return RandomForestClassifier(random_state=seed, n_jobs=1, **params)
    if kind == "mlp":
        return MLPClassifier(max_iter=1000, random_state=seed, **params)
    raise ValueError(f"unknown head kind {kind!r}; expected one of {HEAD_KINDS}")


@dataclass
class GridEntry:
    params: dict
    val_auc: float


@dataclass
class ScoreFusionHead:
    kind: str
    params: dict
    estimator: ClassifierMixin
    layout: FusionLayout
    val_auc: float
    grid_log: List[GridEntry] = field(default_factory=list)

    def predict_proba(self, vectors: Sequence[FusionVector]) -> np.ndarray:
        x = _stack(vectors, self.layout)
        return self.estimator.predict_proba(x)[:, list(self.estimator.classes_).index(1)]


def _stack(vectors: Sequence[FusionVector], layout: Optional[FusionLayout] = None) -> np.ndarray:
    if not vectors:
        raise ContractError("no score vectors given")
    layout = layout or vectors[0].layout
    for v in vectors:
        if v.layout != layout:
            raise ContractError(f"score vector layout {v.layout} does not match {layout}")
    return np.stack([v.values for v in vectors])


def _check_labels(labels: np.ndarray, what: str) -> None:
    if len(np.unique(labels)) < 2:
        raise ValueError(f"{what} labels contain a single class")


def train_score_fusion(vectors: Sequence[FusionVector], labels: Sequence[int], head_kind: str,
                       val: Tuple[Sequence[FusionVector], Sequence[int]],
                       grid: Optional[List[dict]] = None, seed: int = 0) -> ScoreFusionHead:
    """Fits one head per grid entry and keeps the one with the highest validation AUC
    (first entry wins ties)."""
    x, y = _stack(vectors), np.asarray(labels)
    layout = vectors[0].layout
    xv, yv = _stack(val[0], layout), np.asarray(val[1])
    _check_labels(y, "training")
    _check_labels(yv, "validation")
    grid = default_grid(head_kind, x.shape[1]) if grid is None else grid
    best, entries = None, []
    for params in grid:
        est = make_estimator(head_kind, params, seed).fit(x, y)
        p = est.predict_proba(xv)[:, list(est.classes_).index(1)]
        auc = roc_auc(p, yv)[0]
        entries.append(GridEntry(dict(params), auc))
        if best is None or auc > best[0]:
            best = (auc, params, est)
    log.info("score fusion %s %s: %d grid models trained, best %s (val AUC %.4f)",
             head_kind, layout, len(entries), best[1], best[0])
    return ScoreFusionHead(head_kind, dict(best[1]), best[2], layout, best[0], entries)
