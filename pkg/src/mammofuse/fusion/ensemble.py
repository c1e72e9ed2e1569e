"""Max-ensemble baselines and patient-level prediction wrappers."""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np

from ..dataset import MALIGNANT_CLASSES
from .feature_fusion import FeatureFusionModel
from .layout import ContractError, FeatureBundle, FusionConfig, FusionVector
from .records import CaseRecord
from .score_fusion import ScoreFusionHead

DECISION_THRESHOLD = 0.5


def ensemble_max(target: str, p_findings: Optional[Sequence[float]] = None,
                 detections: Optional[Sequence[Sequence]] = None) -> float:
    """Lesion: max of the per-view findings scores. Malignancy: max malignant-class
    detection confidence over all views, 0 when there is none."""
    if target == "lesion":
        if p_findings is None:
            raise ContractError("lesion baseline needs findings scores")
        return float(max(p_findings))
    if target == "malignancy":
        if detections is None:
            raise ContractError("malignancy baseline needs detections")
        return max_detection_confidence(detections, MALIGNANT_CLASSES)
    raise ValueError(f"unknown target {target!r}")


def max_detection_confidence(detections: Sequence[Sequence], classes=None) -> float:
    conf = [d.confidence for dets in detections for d in dets if classes is None or d.class_index in classes]
    return float(max(conf, default=0.0))


MetaModel = Union[ScoreFusionHead, FeatureFusionModel]


def _inputs(model: MetaModel, item: Union[CaseRecord, FusionVector, FeatureBundle]):
    lay = model.layout
    if isinstance(item, CaseRecord):
        cfg = FusionConfig(lay.n, lay.target, lay.include_density)
        return item.score_vector(cfg) if isinstance(model, ScoreFusionHead) else item.feature_bundle(cfg)
    expected = FusionVector if isinstance(model, ScoreFusionHead) else FeatureBundle
    if not isinstance(item, expected):
        raise ContractError(f"{type(model).__name__} expects {expected.__name__}, got {type(item).__name__}")
    if item.layout != lay:
        raise ContractError(f"input layout {item.layout} does not match training layout {lay}")
    return item


def predict_patients(model: MetaModel, items: Sequence) -> np.ndarray:
    """Positive-class probabilities, aligned with ``items``."""
    return model.predict_proba([_inputs(model, it) for it in items])


def predict_patient(model: MetaModel, item) -> float:
    return float(predict_patients(model, [item])[0])


def decide(probability: float, threshold: float = DECISION_THRESHOLD) -> bool:
    return probability >= threshold
