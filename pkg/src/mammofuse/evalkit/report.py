"""Per-model metric tables, curve files and the pairwise significance matrix."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .metrics import CurvePoint, auprc, classification_metrics, roc_auc
from .wilcoxon import WilcoxonResult, wilcoxon_signed_rank

# published full-scale figures, kept for side-by-side display only
REFERENCE_PATIENT_AUC = {
    ("P_score", "lesion"): 0.942, ("P_score", "malignancy"): 0.778,
    ("P_feat", "lesion"): 0.962, ("P_feat", "malignancy"): 0.791,
    ("max(p_F)", "lesion"): 0.922, ("max(p_L)", "malignancy"): 0.762,
}
REFERENCE_FROC = {
    "malignant_mass": (0.84, 1.0), "malignant_calcification": (0.93, 1.09),
    "benign_mass": (0.70, 1.06), "benign_calcification": (0.68, 1.06),
}
REFERENCE_SPLIT = (1511, 290, 453)

METRIC_KEYS = ("auc", "auprc", "f1", "tpr", "tnr", "specificity", "acc")


@dataclass
class Predictions:
    model: str
    case_ids: Sequence[str]
    scores: Sequence[float]


@dataclass
class MetricsReport:
    target: str
    models: List[str]
    rows: List[Dict[str, object]]
    p_matrix: np.ndarray
    tests: Dict[Tuple[str, str], WilcoxonResult]
    curves: Dict[str, Dict[str, List[CurvePoint]]] = field(default_factory=dict)

    def row(self, model: str) -> Dict[str, object]:
        return next(r for r in self.rows if r["model"] == model)


def _align(preds: Sequence[Predictions], labels: Mapping[str, int]) -> Tuple[List[str], Dict[str, np.ndarray]]:
    ids = sorted(labels)
    out = {}
    for p in preds:
        if len(set(p.case_ids)) != len(p.case_ids):
            raise ValueError(f"model {p.model}: duplicate case ids")
        given = dict(zip(p.case_ids, p.scores))
        missing = sorted(set(ids) - set(given))
        extra = sorted(set(given) - set(ids))
        if missing or extra:
            raise ValueError(f"id mismatch for model {p.model}: missing ids {missing}, unexpected ids {extra}")
        out[p.model] = np.array([given[i] for i in ids], dtype=np.float64)
    return ids, out


def build_report(predictions: Sequence[Predictions], labels: Mapping[str, int], target: str,
                 threshold: float = 0.5) -> MetricsReport:
    """Metrics per model and two-sided Wilcoxon p-values on raw probabilities for every
    model pair (diagonal entries are the degenerate self-comparison)."""
    if not predictions:
        raise ValueError("no predictions given")
    ids, scores = _align(predictions, labels)
    y = np.array([labels[i] for i in ids])
    names = [p.model for p in predictions]
    rows, curves = [], {}
    for name in names:
        s = scores[name]
        cm = classification_metrics(s, y, threshold)
        both = 0 < y.sum() < len(y)
        auc, roc = roc_auc(s, y) if both else (None, [])
        ap, pr = auprc(s, y) if y.sum() > 0 else (None, [])
        rows.append({"model": name, "target": target, "auc": auc, "auprc": ap, "f1": cm["f1"],
                     "tpr": cm["tpr"], "tnr": cm["tnr"], "specificity": cm["tnr"], "acc": cm["accuracy"]})
        curves[name] = {"roc": roc, "pr": pr}
    k = len(names)
    pm = np.ones((k, k))
    tests = {}
    for i in range(k):
        for j in range(k):
            t = wilcoxon_signed_rank(scores[names[i]], scores[names[j]])
            tests[(names[i], names[j])] = t
            pm[i, j] = t.p_value
    for i, r in enumerate(rows):
        for j, other in enumerate(names):
            r[f"p_vs_{other}"] = pm[i, j]
    return MetricsReport(target, names, rows, pm, tests, curves)


def fmt(v) -> str:
    if v is None:
        return "undefined"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def format_rows(rows: Sequence[Mapping[str, object]]) -> str:
    """One line per row, tab-separated ``key=value`` pairs in the row's key order."""
    return "".join("\t".join(f"{k}={fmt(v)}" for k, v in r.items()) + "\n" for r in rows)


def write_curves_csv(path: os.PathLike, curves: Mapping[str, Sequence[CurvePoint]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "threshold", "x", "y"])
        for name, pts in curves.items():
            for p in pts:
                w.writerow([name, repr(p.threshold), repr(p.x), repr(p.y)])


def write_curves_svg(path: os.PathLike, curves: Mapping[str, Sequence[CurvePoint]], xlabel: str, ylabel: str,
                     title: str, xlim: Optional[Tuple[float, float]] = None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "mammofuse"
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, pts in curves.items():
        if pts:
            ax.plot([p.x for p in pts], [p.y for p in pts], label=name, drawstyle="default")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if xlim:
        ax.set_xlim(*xlim)
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower right", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def write_report_files(report: MetricsReport, out_dir: os.PathLike, prefix: str) -> List[str]:
    """ROC and precision-recall curves as CSV plus one SVG per curve family."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for family, (xl, yl) in {"roc": ("false-positive rate", "true-positive rate"),
                             "pr": ("recall", "precision")}.items():
        curves = {m: c[family] for m, c in report.curves.items()}
        csv_path = os.path.join(out_dir, f"{prefix}_{family}.csv")
        svg_path = os.path.join(out_dir, f"{prefix}_{family}.svg")
        write_curves_csv(csv_path, curves)
        write_curves_svg(svg_path, curves, xl, yl, f"{report.target} {family.upper()}", (0, 1))
        written += [csv_path, svg_path]
    return written
