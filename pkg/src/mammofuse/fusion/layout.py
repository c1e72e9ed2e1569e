"""Slot layouts for the fused score vector and the feature bundle.

Order: optional density slot, four findings slots, then ``n`` localizer slots per view,
views in L-CC, L-MLO, R-CC, R-MLO order and detections by descending confidence.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence

import numpy as np

from ..dataset import MALIGNANT_CLASSES, VIEWS

TARGETS = ("lesion", "malignancy")
N_CHOICES = (1, 2, 3, 4, 5)


class ContractError(ValueError):
    """Inputs violate a shape or layout contract."""


@dataclass(frozen=True)
class FusionConfig:
    n: int = 3
    target: str = "lesion"
    include_density: bool = True

    def __post_init__(self):
        if self.n not in N_CHOICES:
            raise ValueError(f"n must be one of {N_CHOICES}, got {self.n}")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}, got {self.target!r}")

    @property
    def tag(self) -> str:
        return f"{self.target}_n{self.n}{'' if self.include_density else '_nodensity'}"


@dataclass(frozen=True)
class FusionLayout:
    n: int
    target: str
    include_density: bool
    feature_width: Optional[int] = None
    # each localizer slot carries the retained detection's own confidence
    localizer_value: str = "detection_confidence"

    @classmethod
    def of(cls, cfg: FusionConfig, feature_width: Optional[int] = None) -> "FusionLayout":
        return cls(cfg.n, cfg.target, cfg.include_density, feature_width)

    def slots(self) -> List[str]:
        names = ["density"] if self.include_density else []
        names += [f"findings:{v}" for v in VIEWS]
        names += [f"localizer:{v}:{k}" for v in VIEWS for k in range(self.n)]
        return names

    @property
    def tag(self) -> str:
        return f"{self.target}_n{self.n}{'' if self.include_density else '_nodensity'}"

    def __len__(self) -> int:
        return int(self.include_density) + len(VIEWS) + len(VIEWS) * self.n

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FusionLayout":
        return cls(**json.loads(text))


def select_detections(detections: Sequence, target: str, n: int) -> List[int]:
    """Indices of the detections that fill one view's localizer slots.

    Shared by the score vector and the feature bundle so both retain the same subset.
    """
    conf = [d.confidence for d in detections]
    if any(a < b for a, b in zip(conf, conf[1:])):
        raise ContractError("detections must be sorted by descending confidence")
    if target == "malignancy":
        idx = [i for i, d in enumerate(detections) if d.class_index in MALIGNANT_CLASSES]
    else:
        idx = list(range(len(detections)))
    return idx[:n]


@dataclass
class FusionVector:
    values: np.ndarray
    layout: FusionLayout


def build_score_vector(p_density: Optional[float], p_findings: Sequence[float],
                       detections: Sequence[Sequence], cfg: FusionConfig) -> FusionVector:
    layout = FusionLayout.of(cfg)
    if len(p_findings) != len(VIEWS) or len(detections) != len(VIEWS):
        raise ContractError("need one findings score and one detection list per view")
    values = []
    if cfg.include_density:
        if p_density is None:
            raise ContractError("density score required when include_density is set")
        values.append(float(p_density))
    values += [float(p) for p in p_findings]
    for dets in detections:
        slot = [float(dets[i].confidence) for i in select_detections(dets, cfg.target, cfg.n)]
        values += slot + [0.0] * (cfg.n - len(slot))
    return FusionVector(np.asarray(values, dtype=np.float64), layout)


@dataclass
class FeatureBundle:
    density: Optional[np.ndarray]  # (4 * fw,)
    findings: np.ndarray  # (4, fw)
    localizer: np.ndarray  # (4, n, fw)
    presence: np.ndarray  # (4, n) bool
    layout: FusionLayout

    def flatten(self) -> np.ndarray:
        parts = ([self.density] if self.density is not None else []) + [self.findings.ravel(), self.localizer.ravel()]
        return np.concatenate(parts)

    def with_values(self, flat: np.ndarray) -> "FeatureBundle":
        fw = self.findings.shape[1]
        k = 0
        density = None
        if self.density is not None:
            density, k = flat[:self.density.size].copy(), self.density.size
        findings = flat[k:k + 4 * fw].reshape(4, fw).copy()
        localizer = flat[k + 4 * fw:].reshape(self.localizer.shape).copy()
        return FeatureBundle(density, findings, localizer, self.presence.copy(), self.layout)


def build_feature_bundle(feat_density: Optional[np.ndarray], feat_findings: Sequence[np.ndarray],
                         detections: Sequence[Sequence], background: Sequence[np.ndarray],
                         cfg: FusionConfig) -> FeatureBundle:
    findings = np.asarray(feat_findings, dtype=np.float64)
    if findings.ndim != 2 or findings.shape[0] != len(VIEWS):
        raise ContractError(f"findings branch: expected (4, feature_width), got {findings.shape}")
    fw = findings.shape[1]
    layout = FusionLayout.of(cfg, fw)
    density = None
    if cfg.include_density:
        if feat_density is None:
            raise ContractError("density branch: features required when include_density is set")
        density = np.asarray(feat_density, dtype=np.float64).ravel()
        if density.size != len(VIEWS) * fw:
            raise ContractError(f"density branch: expected {len(VIEWS) * fw} values, got {density.size}")
    background = np.asarray(background, dtype=np.float64)
    if background.shape != (len(VIEWS), fw):
        raise ContractError(f"background: expected (4, {fw}), got {background.shape}")
    if len(detections) != len(VIEWS):
        raise ContractError("localizer branch: need one detection list per view")
    loc = np.repeat(background[:, None, :], cfg.n, axis=1)
    presence = np.zeros((len(VIEWS), cfg.n), dtype=bool)
    for v, dets in enumerate(detections):
        for k, i in enumerate(select_detections(dets, cfg.target, cfg.n)):
            f = np.asarray(dets[i].feature, dtype=np.float64)
            if f.shape != (fw,):
                raise ContractError(f"localizer branch: detection feature length {f.shape} != ({fw},)")
            loc[v, k] = f
            presence[v, k] = True
    return FeatureBundle(density, findings.copy(), loc, presence, layout)
