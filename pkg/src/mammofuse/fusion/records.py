"""Per-case task-model outputs and the fusion input cache built from them."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .. import container
from ..dataset import VIEWS, BBox
from ..taskmodels.localizer import Detection
from .layout import ContractError, FeatureBundle, FusionConfig, FusionVector, build_feature_bundle, build_score_vector

CACHE_KIND = "fusion-input-cache"


@dataclass
class CaseRecord:
    """Everything the meta-models consume for one exam, plus its patient labels."""

    case_id: str
    p_density: float
    feat_density: np.ndarray  # (4 * fw,)
    p_findings: np.ndarray  # (4,)
    feat_findings: np.ndarray  # (4, fw)
    detections: List[List[Detection]]  # per view, confidence-descending
    background: np.ndarray  # (4, fw)
    lesion: int = 0
    malignancy: int = 0
    dense: int = 0
    p_density_views: np.ndarray = field(default_factory=lambda: np.zeros(len(VIEWS)))

    def label(self, target: str) -> int:
        return self.lesion if target == "lesion" else self.malignancy

    def score_vector(self, cfg: FusionConfig) -> FusionVector:
        return build_score_vector(self.p_density, self.p_findings, self.detections, cfg)

    def feature_bundle(self, cfg: FusionConfig) -> FeatureBundle:
        return build_feature_bundle(self.feat_density, self.feat_findings, self.detections, self.background, cfg)


def write_cache(path: os.PathLike, records: Sequence[CaseRecord], split: str, meta: Optional[dict] = None) -> None:
    """One record per case; the shared slot-layout descriptor is stored once in the header."""
    if not records:
        raise ContractError("empty record set")
    fw = records[0].feat_findings.shape[1]
    det_rows = [(i, v, d) for i, r in enumerate(records) for v, dets in enumerate(r.detections) for d in dets]
    arrays = {
        "p_density": np.array([r.p_density for r in records]),
        "p_density_views": np.stack([r.p_density_views for r in records]),
        "feat_density": np.stack([r.feat_density for r in records]),
        "p_findings": np.stack([r.p_findings for r in records]),
        "feat_findings": np.stack([r.feat_findings for r in records]),
        "background": np.stack([r.background for r in records]),
        "labels": np.array([[r.lesion, r.malignancy, r.dense] for r in records], dtype=np.int64),
        "det_case": np.array([i for i, _, _ in det_rows], dtype=np.int64),
        "det_view": np.array([v for _, v, _ in det_rows], dtype=np.int64),
        "det_box": np.array([d.box.as_tuple() for _, _, d in det_rows], dtype=np.float64).reshape(-1, 4),
        "det_class": np.array([d.class_index for _, _, d in det_rows], dtype=np.int64),
        "det_conf": np.array([d.confidence for _, _, d in det_rows], dtype=np.float64),
        "det_feat": np.array([d.feature for _, _, d in det_rows], dtype=np.float64).reshape(-1, fw),
    }
    header = {
        "kind": CACHE_KIND,
        "split": split,
        "case_ids": [r.case_id for r in records],
        "views": [str(v) for v in VIEWS],
        "layout": {
            "density": "p_density + feat_density (4 * feature_width, view order)",
            "findings": "p_findings + feat_findings per view",
            "localizer": "all detections per view, confidence-descending, with box/class/confidence/feature",
            "feature_width": int(fw),
        },
        **(meta or {}),
    }
    container.save(path, arrays, header)


def read_cache(path: os.PathLike) -> tuple[List[CaseRecord], dict]:
    arrays, header = container.load(path)
    if header.get("kind") != CACHE_KIND:
        raise container.IntegrityError(f"{path}: not a fusion input cache")
    ids = header["case_ids"]
    dets: List[List[List[Detection]]] = [[[] for _ in VIEWS] for _ in ids]
    for c, v, box, k, conf, feat in zip(arrays["det_case"], arrays["det_view"], arrays["det_box"],
                                        arrays["det_class"], arrays["det_conf"], arrays["det_feat"]):
        dets[c][v].append(Detection(BBox(*map(float, box)), int(k), float(conf), feat))
    records = [
        CaseRecord(cid, float(arrays["p_density"][i]), arrays["feat_density"][i], arrays["p_findings"][i],
                   arrays["feat_findings"][i], dets[i], arrays["background"][i],
                   *map(int, arrays["labels"][i]), p_density_views=arrays["p_density_views"][i])
        for i, cid in enumerate(ids)
    ]
    return records, header
