"""Threshold metrics, ROC/AUC and precision-recall area."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class CurvePoint:
    x: float
    y: float
    threshold: float


def _arrays(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(int)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return s, y


def confusion(scores, labels, threshold: float = 0.5) -> Dict[str, int]:
    s, y = _arrays(scores, labels)
    pred = s >= threshold
    return {"tp": int(np.sum(pred & (y == 1))), "fp": int(np.sum(pred & (y == 0))),
            "tn": int(np.sum(~pred & (y == 0))), "fn": int(np.sum(~pred & (y == 1)))}


def classification_metrics(scores, labels, threshold: float = 0.5) -> Dict[str, Optional[float]]:
    """TPR, TNR, accuracy, F1 and precision at ``threshold`` (score >= threshold is positive).

    Metrics whose denominator is empty are reported as ``None``.
    """
    s, _ = _arrays(scores, labels)
    if s.size == 0:
        raise ValueError("classification_metrics needs at least one sample")
    c = confusion(scores, labels, threshold)
    tp, fp, tn, fn = c["tp"], c["fp"], c["tn"], c["fn"]
    tpr = tp / (tp + fn) if tp + fn else None
    tnr = tn / (tn + fp) if tn + fp else None
    precision = tp / (tp + fp) if tp + fp else None
    p, r = precision or 0.0, tpr or 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return {"tpr": tpr, "tnr": tnr, "accuracy": (tp + tn) / s.size, "f1": f1,
            "precision": precision, **c}


def roc_auc(scores, labels) -> Tuple[float, List[CurvePoint]]:
    """Mann-Whitney AUC (ties count one half) and the ROC curve at every distinct threshold."""
    s, y = _arrays(scores, labels)
    n_pos, n_neg = int(y.sum()), int((1 - y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: need both classes")
    ranks = rankdata(s)
    auc = (ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s_sorted)), s.size - 1]
    tps = np.cumsum(y_sorted)[last]
    fps = (last + 1) - tps
    curve = [CurvePoint(0.0, 0.0, float("inf"))]
    curve += [CurvePoint(fp / n_neg, tp / n_pos, float(s_sorted[i])) for i, tp, fp in zip(last, tps, fps)]
    if (curve[-1].x, curve[-1].y) != (1.0, 1.0):
        curve.append(CurvePoint(1.0, 1.0, float("-inf")))
    return float(auc), curve


def trapezoid_area(curve: Sequence[CurvePoint]) -> float:
    x = np.array([p.x for p in curve])
    y = np.array([p.y for p in curve])
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def auprc(scores, labels) -> Tuple[float, List[CurvePoint]]:
    """Step-interpolated precision-recall area; curve points are (recall, precision)."""
    s, y = _arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("AUPRC undefined: no positive samples")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s_sorted)), s.size - 1]
    tps = np.cumsum(y_sorted)[last]
    precision = tps / (last + 1)
    recall = tps / n_pos
    area = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    curve = [CurvePoint(float(r), float(p), float(s_sorted[i])) for i, r, p in zip(last, recall, precision)]
    return area, curve
