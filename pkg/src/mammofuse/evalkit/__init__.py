from .detection import FROCResult, MatchResult, ScoredBox, froc, iou, match_detections
from .metrics import CurvePoint, auprc, classification_metrics, confusion, roc_auc, trapezoid_area
from .report import MetricsReport, Predictions, build_report, format_rows, write_report_files
from .wilcoxon import ALPHA, WilcoxonResult, wilcoxon_signed_rank

__all__ = [
    "ALPHA", "CurvePoint", "FROCResult", "MatchResult", "MetricsReport", "Predictions", "ScoredBox",
    "WilcoxonResult", "auprc", "build_report", "classification_metrics", "confusion", "format_rows", "froc",
    "iou", "match_detections", "roc_auc", "trapezoid_area", "wilcoxon_signed_rank", "write_report_files",
]
