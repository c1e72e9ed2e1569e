"""Detection-to-lesion matching and FROC curves."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .metrics import CurvePoint


def _box(b) -> Tuple[float, float, float, float]:
    if hasattr(b, "as_tuple"):
        return b.as_tuple()
    return tuple(float(v) for v in b)


def iou(a, b) -> float:
    a, b = _box(a), _box(b)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def center_inside(det, gt) -> bool:
    d, g = _box(det), _box(gt)
    cx, cy = (d[0] + d[2]) / 2.0, (d[1] + d[3]) / 2.0
    return g[0] <= cx <= g[2] and g[1] <= cy <= g[3]


@dataclass(frozen=True)
class ScoredBox:
    """Minimal detection/ground-truth record used by the matcher."""

    box: Tuple[float, float, float, float]
    score: float = 1.0
    label: Optional[int] = None


@dataclass
class MatchResult:
    detection_tp: np.ndarray  # bool per detection, input order
    gt_detected: np.ndarray  # bool per ground truth
    pairs: List[Tuple[int, int]]  # (detection index, ground-truth index)


def _as_scored(items) -> List[ScoredBox]:
    out = []
    for it in items:
        if isinstance(it, ScoredBox):
            out.append(it)
        elif hasattr(it, "confidence"):  # taskmodels Detection
            out.append(ScoredBox(_box(it.box), float(it.confidence), int(it.class_index)))
        elif hasattr(it, "class_index") and hasattr(it, "box"):  # LesionAnnotation
            out.append(ScoredBox(_box(it.box), 1.0, int(it.class_index)))
        else:
            out.append(ScoredBox(_box(it)))
    return out


def match_detections(detections, ground_truths, iou_threshold: float = 0.2,
                     class_sensitive: bool = False) -> MatchResult:
    """Greedy one-to-one matching in descending confidence.

    A pair qualifies when IoU >= ``iou_threshold`` or the detection center lies in the
    ground-truth box. Among qualifying free ground truths the highest IoU wins.
    """
    dets = _as_scored(detections)
    gts = _as_scored(ground_truths)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    det_tp = np.zeros(len(dets), dtype=bool)
    gt_hit = np.zeros(len(gts), dtype=bool)
    pairs: List[Tuple[int, int]] = []
    for i in order:
        best, best_iou = -1, -1.0
        for j, g in enumerate(gts):
            if gt_hit[j]:
                continue
            if class_sensitive and dets[i].label != g.label:
                continue
            o = iou(dets[i].box, g.box)
            if (o >= iou_threshold or center_inside(dets[i].box, g.box)) and o > best_iou:
                best, best_iou = j, o
        if best >= 0:
            det_tp[i] = True
            gt_hit[best] = True
            pairs.append((i, best))
    return MatchResult(det_tp, gt_hit, pairs)


@dataclass
class FROCResult:
    curve: List[CurvePoint]  # x = FPI, y = TPR, ordered by descending threshold
    n_lesions: int
    n_images: int

    def tpr_at_fpi(self, q: float) -> float:
        """Linear interpolation of TPR at FPI = q (curve starts at the origin)."""
        fpi = np.array([0.0] + [p.x for p in self.curve])
        tpr = np.array([0.0] + [p.y for p in self.curve])
        xs = np.unique(fpi)
        ys = np.array([tpr[fpi == x].max() for x in xs])
        return float(np.interp(q, xs, ys))


def froc(images: Sequence[Tuple[Sequence, Sequence]], class_filter: Optional[Iterable[int]] = None,
         iou_threshold: float = 0.2) -> FROCResult:
    """Lesion-level FROC over ``images`` = [(detections, ground_truths), ...].

    With ``class_filter`` both detections and ground truths are restricted to those classes
    and matching becomes class-sensitive. FPI divides by the number of images given.
    """
    keep = None if class_filter is None else set(class_filter)
    all_scores, all_tp = [], []
    n_lesions = 0
    for dets, gts in images:
        dets, gts = _as_scored(dets), _as_scored(gts)
        if keep is not None:
            dets = [d for d in dets if d.label in keep]
            gts = [g for g in gts if g.label in keep]
        n_lesions += len(gts)
        m = match_detections(dets, gts, iou_threshold, class_sensitive=keep is not None)
        # greedy matching in confidence order makes thresholded results prefixes of this one
        all_scores.extend(d.score for d in dets)
        all_tp.extend(m.detection_tp.tolist())
    if n_lesions == 0:
        raise ValueError("FROC undefined: no ground-truth lesions")
    n_images = len(images)
    scores = np.asarray(all_scores, dtype=float)
    tp = np.asarray(all_tp, dtype=bool)
    curve: List[CurvePoint] = []
    for t in np.unique(scores)[::-1]:
        sel = scores >= t
        curve.append(CurvePoint(float(np.sum(sel & ~tp)) / n_images,
                                float(np.sum(sel & tp)) / n_lesions, float(t)))
    return FROCResult(curve, n_lesions, n_images)
