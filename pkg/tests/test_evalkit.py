"""Metrics, matching, FROC and Wilcoxon tests against hand-computed values and oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mammofuse.evalkit import (auprc, classification_metrics, froc, iou, match_detections, roc_auc,
                               wilcoxon_signed_rank)
from mammofuse.evalkit.detection import ScoredBox
from mammofuse.evalkit.metrics import trapezoid_area
from oracles import brute_wilcoxon, pair_auc


# --- classification metrics ---

def test_classification_perfect():
    m = classification_metrics([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0], 0.5)
    assert (m["tpr"], m["tnr"], m["accuracy"], m["f1"]) == (1.0, 1.0, 1.0, 1.0)


def test_classification_all_positive():
    m = classification_metrics([0.9, 0.9, 0.9, 0.9], [1, 0, 1, 0])
    assert m["tnr"] == 0.0
    assert m["precision"] == 0.5


def test_classification_mixed_confusion():
    m = classification_metrics([0.6, 0.4, 0.7, 0.2], [1, 1, 0, 0], 0.5)
    assert (m["tp"], m["fn"], m["fp"], m["tn"]) == (1, 1, 1, 1)
    assert m["tpr"] == 0.5 and m["f1"] == 0.5


def test_classification_threshold_inclusive():
    m = classification_metrics([0.5], [1], 0.5)
    assert m["tp"] == 1


def test_classification_undefined_and_empty():
    m = classification_metrics([0.2, 0.7], [0, 0])
    assert m["tpr"] is None and m["tnr"] == 0.5
    m = classification_metrics([0.1], [1])
    assert m["f1"] == 0.0
    with pytest.raises(ValueError):
        classification_metrics([], [])


@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=50), st.floats(0, 1))
def test_accuracy_identity(pairs, t):
    s, y = zip(*pairs)
    m = classification_metrics(s, y, t)
    assert m["accuracy"] == (m["tp"] + m["tn"]) / len(s)


# --- ROC ---

def test_roc_examples():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])[0] == 1.0
    assert roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0])[0] == 0.5
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])[0] == pytest.approx(0.75, abs=1e-15)


def test_roc_single_class():
    with pytest.raises(ValueError, match="AUC undefined"):
        roc_auc([0.1, 0.2], [1, 1])


def test_roc_curve_endpoints():
    _, curve = roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    assert (curve[0].x, curve[0].y) == (0.0, 0.0)
    assert (curve[-1].x, curve[-1].y) == (1.0, 1.0)
    assert all(0 <= p.x <= 1 and 0 <= p.y <= 1 for p in curve)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 1)), min_size=2, max_size=60))
def test_roc_matches_pairs(pairs):
    s, y = zip(*pairs)
    if len(set(y)) < 2:
        return
    s = [v / 20 for v in s]  # coarse grid forces ties
    auc, curve = roc_auc(s, y)
    assert abs(auc - pair_auc(s, y)) < 1e-12
    assert abs(trapezoid_area(curve) - auc) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-50, 50), st.integers(0, 1)), min_size=2, max_size=40))
def test_roc_monotone_invariance(pairs):
    s, y = zip(*pairs)
    if len(set(y)) < 2:
        return
    s = np.array(s, dtype=float) / 10
    assert roc_auc(s, y)[0] == pytest.approx(roc_auc(np.exp(s), y)[0], abs=1e-12)
    assert roc_auc(s, y)[0] == pytest.approx(roc_auc(3 * s ** 3 + 1, y)[0], abs=1e-12)


# --- AUPRC ---

def test_auprc_examples():
    assert auprc([0.9, 0.8, 0.2], [1, 1, 0])[0] == 1.0
    assert auprc([0.9, 0.7, 0.6], [1, 0, 1])[0] == pytest.approx(5 / 6, abs=1e-12)
    assert auprc([0.5] * 10, [1, 0, 0, 0, 1, 0, 0, 0, 0, 0])[0] == pytest.approx(0.2)
    with pytest.raises(ValueError):
        auprc([0.1, 0.2], [0, 0])


def test_auprc_recall_monotone():
    rng = np.random.default_rng(0)
    _, curve = auprc(rng.random(50), rng.integers(0, 2, 50) | np.r_[1, np.zeros(49, int)])
    rec = [p.x for p in curve]
    assert rec == sorted(rec)


# --- matching ---

def test_iou_values():
    assert iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0
    assert iou((0, 0, 10, 10), (5, 0, 15, 10)) == pytest.approx(1 / 3)
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0


def test_match_identical():
    m = match_detections([ScoredBox((0, 0, 10, 10), 0.9)], [(0, 0, 10, 10)])
    assert m.detection_tp.tolist() == [True] and m.gt_detected.tolist() == [True]


def test_match_partial_overlap():
    m = match_detections([(0, 0, 10, 10)], [(5, 0, 15, 10)])
    assert m.pairs == [(0, 0)]


def test_match_center_rule():
    m = match_detections([(4, 4, 6, 6)], [(0, 0, 100, 100)])
    assert iou((4, 4, 6, 6), (0, 0, 100, 100)) < 0.2
    assert m.detection_tp.tolist() == [True]


def test_match_iou_boundary():
    det, gt = (0, 0, 12, 10), (8, 0, 20, 10)  # inter 40, union 120+120-40=200 -> 0.2; center (6,5) outside gt
    assert iou(det, gt) == 0.2
    assert match_detections([det], [gt]).pairs == [(0, 0)]
    det2 = (0, 0, 12, 10)
    gt2 = (8.01, 0, 20, 10)
    assert iou(det2, gt2) < 0.2
    assert match_detections([det2], [gt2]).pairs == []


def test_match_greedy_one_to_one():
    gt = [(0, 0, 10, 10)]
    dets = [ScoredBox((0, 0, 10, 10), 0.5), ScoredBox((1, 1, 10, 10), 0.9)]
    m = match_detections(dets, gt)
    assert m.pairs == [(1, 0)]
    assert m.detection_tp.tolist() == [False, True]


def test_match_greedy_prefers_highest_iou():
    gts = [(0, 0, 10, 10), (2, 0, 12, 10)]
    m = match_detections([ScoredBox((2, 0, 12, 10), 0.9), ScoredBox((0, 0, 10, 10), 0.8)], gts)
    assert sorted(m.pairs) == [(0, 1), (1, 0)]


def test_match_class_sensitive():
    det = ScoredBox((0, 0, 10, 10), 0.9, label=1)
    gt = ScoredBox((0, 0, 10, 10), 1.0, label=0)
    assert match_detections([det], [gt]).pairs == [(0, 0)]
    assert match_detections([det], [gt], class_sensitive=True).pairs == []


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 50), st.integers(0, 50), st.integers(1, 30), st.integers(1, 30),
                          st.floats(0, 1)), max_size=8),
       st.lists(st.tuples(st.integers(0, 50), st.integers(0, 50), st.integers(1, 30), st.integers(1, 30)),
                max_size=5))
def test_match_never_reuses(dets, gts):
    d = [ScoredBox((x, y, x + w, y + h), s) for x, y, w, h, s in dets]
    g = [(x, y, x + w, y + h) for x, y, w, h in gts]
    m = match_detections(d, g)
    assert len({j for _, j in m.pairs}) == len(m.pairs)
    assert len({i for i, _ in m.pairs}) == len(m.pairs)
    assert m.detection_tp.sum() == m.gt_detected.sum() == len(m.pairs)


# --- FROC ---

def test_froc_simple():
    images = [
        ([ScoredBox((0, 0, 10, 10), 0.9), ScoredBox((50, 50, 60, 60), 0.4)], [(0, 0, 10, 10)]),
        ([ScoredBox((80, 80, 90, 90), 0.7)], [(20, 20, 30, 30)]),
    ]
    r = froc(images)
    pts = [(p.x, p.y) for p in r.curve]
    assert pts == [(0.0, 0.5), (0.5, 0.5), (1.0, 0.5)]
    assert r.tpr_at_fpi(2.0) == 0.5
    assert r.tpr_at_fpi(0.0) == 0.5


def test_froc_interpolation():
    images = [([ScoredBox((100, 100, 110, 110), 0.9), ScoredBox((0, 0, 10, 10), 0.5)], [(0, 0, 10, 10)])]
    r = froc(images)
    # (1 FP, 0 TP) then (1 FP, 1 TP); at one FPI the best TPR is taken
    assert r.tpr_at_fpi(1.0) == 1.0
    assert r.tpr_at_fpi(0.5) == 0.5
    assert r.tpr_at_fpi(0.0) == 0.0


def test_froc_class_filter_and_errors():
    images = [([ScoredBox((0, 0, 10, 10), 0.9, 1)], [ScoredBox((0, 0, 10, 10), 1.0, 0)])]
    with pytest.raises(ValueError):
        froc(images, class_filter=[1])
    r = froc(images, class_filter=[0])
    assert r.curve == [] and r.tpr_at_fpi(2.0) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_froc_monotone(seed):
    rng = np.random.default_rng(seed)
    images = []
    for _ in range(4):
        gts = [tuple(rng.integers(0, 60, 2).tolist()) for _ in range(rng.integers(1, 3))]
        gts = [(x, y, x + 10, y + 10) for x, y in gts]
        dets = [ScoredBox((x, y, x + 10, y + 10), float(rng.random()))
                for x, y in rng.integers(0, 60, (rng.integers(0, 6), 2)).tolist()]
        images.append((dets, gts))
    r = froc(images)
    xs = [p.x for p in r.curve]
    ys = [p.y for p in r.curve]
    assert xs == sorted(xs) and ys == sorted(ys)


# --- Wilcoxon ---

def test_wilcoxon_known():
    a = [1.83, 0.50, 1.62, 2.48, 1.68, 1.88, 1.55, 3.06, 1.30]
    b = [0.878, 0.647, 0.598, 2.05, 1.06, 1.29, 1.06, 3.14, 1.29]
    r = wilcoxon_signed_rank(a, b)
    from scipy.stats import wilcoxon
    assert r.method == "exact"
    assert r.p_value == pytest.approx(wilcoxon(a, b).pvalue, rel=1e-12)
    assert r.statistic == 40.0


def test_wilcoxon_degenerate_and_errors():
    assert wilcoxon_signed_rank([1] * 6, [1] * 6).degenerate
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1, 2, 3], [1, 2, 4])
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1] * 6, [1] * 5)


def test_wilcoxon_all_positive_small():
    r = wilcoxon_signed_rank(np.arange(6) + 1.0, np.zeros(6))
    assert r.p_value == pytest.approx(2 / 64)
    assert r.significant


def test_wilcoxon_normal_branch():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=60), rng.normal(size=60)
    r = wilcoxon_signed_rank(a, b)
    assert r.method == "normal"
    from scipy.stats import wilcoxon
    ref = wilcoxon(a, b, method="approx", correction=True).pvalue
    assert r.p_value == pytest.approx(ref, rel=1e-9)


@settings(max_examples=150, deadline=None)
@given(st.integers(5, 12), st.integers(0, 10 ** 6))
def test_wilcoxon_exact_matches_enumeration(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 6, n).astype(float)  # small integer range forces ties and zeros
    b = rng.integers(0, 6, n).astype(float)
    assert math.isclose(wilcoxon_signed_rank(a, b).p_value, brute_wilcoxon(a, b), abs_tol=1e-12)
