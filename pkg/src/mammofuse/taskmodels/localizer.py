"""Single-stage anchor-based lesion localizer with four lesion classes.

Output contract per detection: box, class, confidence and a ``feature_width`` vector
pooled from the backbone feature map under the box.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..dataset import CLASS_NAMES, VIEWS, BBox, Exam
from ..preprocess import augment, localizer_profile, prepare_view
from .backbone import Backbone, BackboneConfig, as_batch, conv_bn
from .training import TrainConfig, TrainingError, TrainingLog, check_finite, make_optimizer

log = logging.getLogger(__name__)

N_CLASSES = len(CLASS_NAMES)
_VARIANCES = (0.1, 0.2)


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_index: int
    confidence: float
    feature: np.ndarray = field(repr=False, compare=False)

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_index]


def _default_backbone() -> BackboneConfig:
    return BackboneConfig(stage_strides=(2, 2, 1), input_profile=localizer_profile())


@dataclass
class LocalizerConfig:
    backbone: BackboneConfig = field(default_factory=_default_backbone)
    # (width, height) in input pixels of the localizer profile
    anchor_sizes: Tuple[Tuple[float, float], ...] = (
        (10.0, 14.0), (16.0, 22.0), (22.0, 32.0), (30.0, 44.0),
    )
    score_threshold: float = 0.05
    report_threshold: float = 0.5
    nms_iou: float = 0.5
    positive_iou: float = 0.45
    negative_iou: float = 0.3
    pre_nms_top_k: int = 200
    max_detections: int = 100


class Localizer(nn.Module):
    def __init__(self, cfg: LocalizerConfig):
        super().__init__()
        self.cfg = cfg
        fw = cfg.backbone.feature_width
        a = len(cfg.anchor_sizes)
        self.backbone = Backbone(cfg.backbone)
        self.neck = conv_bn(fw, fw, 3)
        self.cls = nn.Conv2d(fw, a * (N_CLASSES + 1), 1)
        self.reg = nn.Conv2d(fw, a * 4, 1)
        self._anchor_cache = {}

    def forward(self, x: torch.Tensor):
        """x: (B, 1, H, W) in 0..255 -> (feature map, class logits (B, N, 5), box deltas (B, N, 4))."""
        fmap = self.backbone.feature_map(x / 127.5 - 1.0)
        h = self.neck(fmap)
        b = x.shape[0]
        logits = self.cls(h).permute(0, 2, 3, 1).reshape(b, -1, N_CLASSES + 1)
        deltas = self.reg(h).permute(0, 2, 3, 1).reshape(b, -1, 4)
        return fmap, logits, deltas

    def anchors(self, map_h: int, map_w: int) -> np.ndarray:
        """(N, 4) anchors as (cx, cy, w, h), ordered (row, col, anchor) like the head outputs."""
        key = (map_h, map_w)
        if key not in self._anchor_cache:
            s = self.cfg.backbone.stride
            cy, cx = np.meshgrid((np.arange(map_h) + 0.5) * s, (np.arange(map_w) + 0.5) * s, indexing="ij")
            sizes = np.asarray(self.cfg.anchor_sizes, dtype=float)
            a = np.zeros((map_h, map_w, len(sizes), 4))
            a[..., 0] = cx[..., None]
            a[..., 1] = cy[..., None]
            a[..., 2] = sizes[:, 0]
            a[..., 3] = sizes[:, 1]
            self._anchor_cache[key] = a.reshape(-1, 4)
        return self._anchor_cache[key]


# --------------------------------------------------------------------------- box utilities

def corners(a: np.ndarray) -> np.ndarray:
    return np.column_stack([a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2,
                            a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2])


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between corner-format boxes a (n, 4) and b (m, 4)."""
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / np.maximum(area_a[:, None] + area_b[None, :] - inter, 1e-12)


def encode(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    cx = boxes[:, 0] + w / 2
    cy = boxes[:, 1] + h / 2
    return np.column_stack([(cx - anchors[:, 0]) / anchors[:, 2] / _VARIANCES[0],
                            (cy - anchors[:, 1]) / anchors[:, 3] / _VARIANCES[0],
                            np.log(w / anchors[:, 2]) / _VARIANCES[1],
                            np.log(h / anchors[:, 3]) / _VARIANCES[1]])


def decode(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    d = np.clip(deltas, -10, 10)
    cx = anchors[:, 0] + d[:, 0] * _VARIANCES[0] * anchors[:, 2]
    cy = anchors[:, 1] + d[:, 1] * _VARIANCES[0] * anchors[:, 3]
    w = anchors[:, 2] * np.exp(d[:, 2] * _VARIANCES[1])
    h = anchors[:, 3] * np.exp(d[:, 3] * _VARIANCES[1])
    return np.column_stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices in descending score order."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    boxes = np.asarray(boxes, dtype=float)
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        ious = pairwise_iou(boxes[i:i + 1], boxes[order[1:]])[0]
        order = order[1:][ious <= iou_threshold]
    return np.asarray(keep, dtype=int)


def class_nms(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray, iou_threshold: float) -> np.ndarray:
    """NMS applied independently within each class."""
    keep = []
    for c in np.unique(classes):
        idx = np.flatnonzero(classes == c)
        keep.extend(idx[nms(boxes[idx], scores[idx], iou_threshold)])
    return np.sort(np.asarray(keep, dtype=int))


def sort_detections(dets: Sequence[Detection]) -> List[Detection]:
    """Confidence descending; ties by larger area, then (x_min, y_min) ascending."""
    return sorted(dets, key=lambda d: (-d.confidence, -d.box.area, d.box.x_min, d.box.y_min))


def roi_features(fmap: np.ndarray, boxes: np.ndarray, stride: int) -> np.ndarray:
    """Mean of feature-map cells whose centers fall inside each box (nearest cell if none)."""
    c, hm, wm = fmap.shape
    integral = np.zeros((c, hm + 1, wm + 1))
    integral[:, 1:, 1:] = fmap.cumsum(1).cumsum(2)
    out = np.zeros((len(boxes), c))
    for k, (x0, y0, x1, y1) in enumerate(boxes):
        j0 = max(0, math.ceil(x0 / stride - 0.5))
        j1 = min(wm - 1, math.floor(x1 / stride - 0.5))
        i0 = max(0, math.ceil(y0 / stride - 0.5))
        i1 = min(hm - 1, math.floor(y1 / stride - 0.5))
        if j1 < j0 or i1 < i0:
            j0 = j1 = int(np.clip((x0 + x1) / 2 // stride, 0, wm - 1))
            i0 = i1 = int(np.clip((y0 + y1) / 2 // stride, 0, hm - 1))
        s = (integral[:, i1 + 1, j1 + 1] - integral[:, i0, j1 + 1]
             - integral[:, i1 + 1, j0] + integral[:, i0, j0])
        out[k] = s / ((i1 - i0 + 1) * (j1 - j0 + 1))
    return out


# --------------------------------------------------------------------------- inference

@torch.no_grad()
def _run(model: Localizer, image: np.ndarray):
    model.eval()
    fmap, logits, deltas = model(as_batch(np.asarray(image, dtype=np.float32)[None]))
    return fmap[0].numpy().astype(np.float64), torch.softmax(logits[0], 1).numpy(), deltas[0].numpy()


def _postprocess(model: Localizer, fmap, probs, deltas, shape, max_detections, score_threshold):
    cfg = model.cfg
    anchors = model.anchors(*fmap.shape[1:])
    h, w = shape
    boxes, scores, classes = [], [], []
    for c in range(N_CLASSES):
        sc = probs[:, c + 1]
        idx = np.flatnonzero(sc >= score_threshold)
        if idx.size == 0:
            continue
        idx = idx[np.argsort(-sc[idx], kind="stable")[:cfg.pre_nms_top_k]]
        b = decode(anchors[idx], deltas[idx])
        b[:, [0, 2]] = b[:, [0, 2]].clip(0, w)
        b[:, [1, 3]] = b[:, [1, 3]].clip(0, h)
        ok = (b[:, 2] - b[:, 0] > 1e-3) & (b[:, 3] - b[:, 1] > 1e-3)
        boxes.append(b[ok])
        scores.append(sc[idx][ok])
        classes.append(np.full(ok.sum(), c))
    if not boxes:
        return []
    boxes, scores, classes = np.concatenate(boxes), np.concatenate(scores), np.concatenate(classes)
    keep = class_nms(boxes, scores, classes, cfg.nms_iou)
    boxes, scores, classes = boxes[keep], scores[keep], classes[keep]
    feats = roi_features(fmap, boxes, cfg.backbone.stride)
    dets = [Detection(BBox(*map(float, b)), int(c), float(s), f) for b, c, s, f in zip(boxes, classes, scores, feats)]
    return sort_detections(dets)[:max_detections]


def detect_lesions(model: Localizer, image: np.ndarray, max_detections: Optional[int] = None,
                   score_threshold: Optional[float] = None) -> List[Detection]:
    """Detections on an image already prepared with the localizer profile."""
    fmap, probs, deltas = _run(model, image)
    return _postprocess(model, fmap, probs, deltas, np.asarray(image).shape,
                        max_detections or model.cfg.max_detections,
                        model.cfg.score_threshold if score_threshold is None else score_threshold)


def detect_view(model: Localizer, raw_image: np.ndarray, max_detections: Optional[int] = None,
                prepared: Optional[np.ndarray] = None) -> Tuple[List[Detection], np.ndarray]:
    """Detections mapped back to the raw image frame plus the whole-image background feature."""
    img = prepared if prepared is not None else prepare_view(raw_image, model.cfg.backbone.input_profile)
    fmap, probs, deltas = _run(model, img)
    dets = _postprocess(model, fmap, probs, deltas, img.shape,
                        max_detections or model.cfg.max_detections, model.cfg.score_threshold)
    sy, sx = raw_image.shape[0] / img.shape[0], raw_image.shape[1] / img.shape[1]
    dets = [Detection(d.box.scaled(sx, sy), d.class_index, d.confidence, d.feature) for d in dets]
    return dets, fmap.mean(axis=(1, 2))


# --------------------------------------------------------------------------- training

def assign_targets(model: Localizer, map_shape: Tuple[int, int], boxes: np.ndarray,
                   classes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-anchor class targets (0 background, -1 ignore, 1 + lesion class) and box deltas."""
    cfg = model.cfg
    anchors = model.anchors(*map_shape)
    labels = np.zeros(len(anchors), dtype=np.int64)
    deltas = np.zeros((len(anchors), 4))
    if len(boxes) == 0:
        return labels, deltas
    ious = pairwise_iou(corners(anchors), boxes)
    best_gt = ious.argmax(1)
    best_iou = ious.max(1)
    labels[(best_iou >= cfg.negative_iou) & (best_iou < cfg.positive_iou)] = -1
    pos = best_iou >= cfg.positive_iou
    forced = ious.argmax(0)  # every ground truth keeps its best anchor
    best_gt[forced] = np.arange(len(boxes))
    pos[forced] = True
    labels[pos] = 1 + classes[best_gt[pos]]
    deltas[pos] = encode(anchors[pos], boxes[best_gt[pos]])
    return labels, deltas


def detection_loss(logits: torch.Tensor, deltas: torch.Tensor, labels: torch.Tensor,
                   targets: torch.Tensor, neg_ratio: int = 3) -> torch.Tensor:
    """Cross-entropy with hard-negative mining plus smooth-L1 on positive anchors."""
    total = logits.new_zeros(())
    n_pos_total = 0
    for lg, dl, lb, tg in zip(logits, deltas, labels, targets):
        pos = lb > 0
        n_pos = int(pos.sum())
        ce = F.cross_entropy(lg, lb.clamp(min=0), reduction="none")
        neg_ce = torch.where(lb == 0, ce, torch.zeros_like(ce))
        k = min(int((lb == 0).sum()), max(neg_ratio * n_pos, 16))
        hard = torch.topk(neg_ce, k).values.sum() if k > 0 else ce.new_zeros(())
        total = total + ce[pos].sum() + hard
        if n_pos:
            total = total + F.smooth_l1_loss(dl[pos], tg[pos], reduction="sum")
        n_pos_total += n_pos
    return total / max(n_pos_total, 1)


def _lesion_views(exams: Sequence[Exam], profile) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    out = []
    for exam in exams:
        for view in VIEWS:
            lesions = exam.lesions_in(view)
            if not lesions:
                continue
            raw = exam.image(view)
            img = prepare_view(raw, profile)
            sy, sx = img.shape[0] / raw.shape[0], img.shape[1] / raw.shape[1]
            boxes = np.array([les.box.scaled(sx, sy).as_tuple() for les in lesions])
            out.append((img, boxes, np.array([les.class_index for les in lesions])))
    return out


def train_localizer(train: Sequence[Exam], val: Sequence[Exam], cfg: TrainConfig,
                    loc_cfg: Optional[LocalizerConfig] = None, log_: Optional[TrainingLog] = None) -> Localizer:
    """Iteration-based momentum-SGD training on views with at least one lesion."""
    loc_cfg = loc_cfg or LocalizerConfig()
    log_ = log_ if log_ is not None else TrainingLog()
    data = _lesion_views(train, loc_cfg.backbone.input_profile)
    if not data:
        raise TrainingError("localizer: no annotated lesions in training split")
    val_data = _lesion_views(val, loc_cfg.backbone.input_profile)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = Localizer(loc_cfg)
    opt = make_optimizer(model.parameters(), cfg)
    iterations = cfg.iterations or cfg.epochs * math.ceil(len(data) / cfg.batch_size)
    per_epoch = max(1, math.ceil(len(data) / cfg.batch_size))
    map_shape = None

    def batch(items, seed_base):
        imgs, labels, targets = [], [], []
        for k, (img, boxes, classes) in enumerate(items):
            if seed_base is not None:
                aug = augment(img, boxes, cfg.augmentation, seed_base + k)
                img, boxes, classes = aug.image, aug.boxes, classes[~aug.dropped]
            imgs.append(img)
            labels.append(boxes)
            targets.append(classes)
        x = as_batch(np.stack(imgs))
        return x, labels, targets

    def loss_on(x, boxes_list, classes_list):
        nonlocal map_shape
        fmap, logits, deltas = model(x)
        map_shape = tuple(fmap.shape[2:])
        lab, tgt = zip(*(assign_targets(model, map_shape, b, c) for b, c in zip(boxes_list, classes_list)))
        return detection_loss(logits, deltas, torch.as_tensor(np.stack(lab)),
                              torch.as_tensor(np.stack(tgt), dtype=torch.float32))

    running, count = 0.0, 0
    order = rng.permutation(len(data))
    cursor = 0
    for it in range(1, iterations + 1):
        if cursor + cfg.batch_size > len(order):
            order, cursor = rng.permutation(len(data)), 0
        idx = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        lr = cfg.lr * min(1.0, it / cfg.warmup_iterations) if cfg.warmup_iterations else cfg.lr
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        x, b, c = batch([data[i] for i in idx], cfg.seed * 1_000_003 + it * 101)
        loss = loss_on(x, b, c)
        check_finite(loss, "localizer", it // per_epoch, it)
        opt.zero_grad()
        loss.backward()
        opt.step()
        running += loss.item()
        count += 1
        if it % per_epoch == 0 or it == iterations:
            epoch = math.ceil(it / per_epoch)
            log_.add("localizer", epoch, "train", running / count)
            running, count = 0.0, 0
            if val_data:
                model.eval()
                with torch.no_grad():
                    vl = [loss_on(*batch(val_data[s:s + 8], None)).item() for s in range(0, len(val_data), 8)]
                log_.add("localizer", epoch, "validation", float(np.mean(vl)))
    model.eval()
    return model
