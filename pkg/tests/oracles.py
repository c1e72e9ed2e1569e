"""Independent reference implementations used by the unit and acceptance tests.

These are deliberately slow and literal: they enumerate instead of vectorizing, and they
hardcode the slot order rather than importing it from the package.
"""

import itertools
from typing import List, Optional

import numpy as np
from scipy.stats import rankdata

from mammofuse.dataset import BBox
from mammofuse.taskmodels.localizer import Detection

VIEW_NAMES = ("L-CC", "L-MLO", "R-CC", "R-MLO")
# benign mass, malignant mass, benign calcification, malignant calcification
MALIGNANT = (1, 3)


def pair_auc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def brute_wilcoxon(a, b) -> float:
    """Two-sided exact p-value by enumerating every sign assignment of the ranks."""
    d = np.asarray(a, float) - np.asarray(b, float)
    d = d[d != 0]
    if d.size == 0:
        return 1.0
    r = rankdata(np.abs(d))
    w = r[d > 0].sum()
    sums = np.array([sum(ri for ri, s in zip(r, signs) if s)
                     for signs in itertools.product((0, 1), repeat=len(r))])
    lo = np.sum(sums <= w + 1e-9)
    hi = np.sum(sums >= w - 1e-9)
    return min(1.0, 2 * min(lo, hi) / len(sums))


# --- fusion slot oracle ---

def make_detection(cls: int, conf: float, fw: int, tag: float) -> Detection:
    feat = np.full(fw, tag) + np.arange(fw) * 1e-3
    return Detection(BBox(0.0, 0.0, 1.0, 1.0), cls, conf, feat)


def per_view_patterns(seed: int = 0, long_samples: int = 200) -> List[tuple]:
    """Class sequences for one view: every sequence of length 0..4, plus random ones of length 5 and 6."""
    pats = [p for k in range(5) for p in itertools.product(range(4), repeat=k)]
    rng = np.random.default_rng(seed)
    for k in (5, 6):
        pats += [tuple(rng.integers(0, 4, k).tolist()) for _ in range(long_samples)]
    return pats


def oracle_slots(n: int, include_density: bool) -> List[str]:
    names = []
    if include_density:
        names.append("density")
    for v in VIEW_NAMES:
        names.append("findings:" + v)
    for v in VIEW_NAMES:
        for k in range(n):
            names.append(f"localizer:{v}:{k}")
    return names


def _kept(dets, target, n):
    out = []
    for d in sorted(dets, key=lambda d: -d.confidence):
        if target == "malignancy" and d.class_index not in MALIGNANT:
            continue
        if len(out) < n:
            out.append(d)
    return out


def oracle_score_vector(p_density: Optional[float], p_findings, detections, n, target, include_density):
    slot_values = {}
    if include_density:
        slot_values["density"] = p_density
    for v, name in enumerate(VIEW_NAMES):
        slot_values["findings:" + name] = p_findings[v]
        kept = _kept(detections[v], target, n)
        for k in range(n):
            slot_values[f"localizer:{name}:{k}"] = kept[k].confidence if k < len(kept) else 0.0
    return np.array([slot_values[s] for s in oracle_slots(n, include_density)])


def oracle_localizer_features(detections, background, n, target):
    """(4, n, fw) features and (4, n) presence, slot by slot."""
    fw = background.shape[1]
    feats = np.zeros((4, n, fw))
    present = np.zeros((4, n), dtype=bool)
    for v in range(4):
        kept = _kept(detections[v], target, n)
        for k in range(n):
            if k < len(kept):
                feats[v, k] = kept[k].feature
                present[v, k] = True
            else:
                feats[v, k] = background[v]
    return feats, present


def enumerate_fusion_cases(fw: int = 3, seed: int = 0):
    """Yields (n, target, include_density, inputs) over every per-view class pattern.

    Each pattern is used in each view position across the cases, mixed with other patterns
    in the remaining views. Confidences are distinct and drawn at random, then sorted.
    """
    pats = per_view_patterns(seed)
    m = len(pats)
    rng = np.random.default_rng(seed + 1)
    for n in range(1, 6):
        for target in ("lesion", "malignancy"):
            for include_density in (True, False):
                for i in range(m):
                    views = [pats[i], pats[(i + 97) % m], pats[(i + 211) % m], pats[(i + 389) % m]]
                    detections = []
                    for v, classes in enumerate(views):
                        conf = np.sort(rng.choice(np.arange(1, 1000), size=len(classes), replace=False))[::-1] / 1000
                        detections.append([make_detection(c, float(p), fw, 10 * v + j + 1)
                                           for j, (c, p) in enumerate(zip(classes, conf))])
                    inputs = dict(
                        p_density=float(rng.random()),
                        p_findings=rng.random(4),
                        feat_density=rng.random(4 * fw),
                        feat_findings=rng.random((4, fw)),
                        background=-rng.random((4, fw)),
                        detections=detections,
                    )
                    yield n, target, include_density, inputs
