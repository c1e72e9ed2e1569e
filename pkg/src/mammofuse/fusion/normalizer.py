"""Per-dimension min-max map of feature bundles onto [-1, 1]."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .layout import ContractError, FeatureBundle


@dataclass
class Normalizer:
    lo: np.ndarray
    hi: np.ndarray

    def transform(self, flat: np.ndarray) -> np.ndarray:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape[-1] != self.lo.size:
            raise ContractError(f"normalizer fitted on {self.lo.size} dims, got {flat.shape[-1]}")
        span = self.hi - self.lo
        degenerate = span == 0
        z = 2.0 * (flat - self.lo) / np.where(degenerate, 1.0, span) - 1.0
        z = np.where(degenerate, 0.0, z)
        return np.clip(z, -1.0, 1.0)

    def apply(self, bundle: FeatureBundle) -> FeatureBundle:
        return bundle.with_values(self.transform(bundle.flatten()))


def fit_normalizer(bundles: Sequence[FeatureBundle]) -> Normalizer:
    if not bundles:
        raise ValueError("normalizer needs at least one training bundle")
    x = np.stack([b.flatten() for b in bundles])
    return Normalizer(x.min(axis=0), x.max(axis=0))


def apply_normalizer(norm: Normalizer, bundle: FeatureBundle) -> FeatureBundle:
    return norm.apply(bundle)
