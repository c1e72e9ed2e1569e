from .ensemble import (DECISION_THRESHOLD, decide, ensemble_max, max_detection_confidence, predict_patient,
                       predict_patients)
from .feature_fusion import (EmbeddingNet, EmbeddingNetConfig, FeatureFusionModel, feature_fusion_train_config,
                             train_feature_fusion)
from .layout import (N_CHOICES, TARGETS, ContractError, FeatureBundle, FusionConfig, FusionLayout, FusionVector,
                     build_feature_bundle, build_score_vector, select_detections)
from .normalizer import Normalizer, apply_normalizer, fit_normalizer
from .records import CaseRecord, read_cache, write_cache
from .score_fusion import HEAD_KINDS, ScoreFusionHead, default_grid, mlp_hidden_grid, train_score_fusion

__all__ = [
    "CaseRecord", "ContractError", "DECISION_THRESHOLD", "EmbeddingNet", "EmbeddingNetConfig",
    "FeatureBundle", "FeatureFusionModel", "FusionConfig", "FusionLayout", "FusionVector", "HEAD_KINDS",
    "N_CHOICES", "Normalizer", "ScoreFusionHead", "TARGETS", "apply_normalizer", "build_feature_bundle",
    "build_score_vector", "decide", "default_grid", "ensemble_max", "feature_fusion_train_config",
    "fit_normalizer", "max_detection_confidence", "mlp_hidden_grid", "predict_patient", "predict_patients",
    "read_cache",
    "select_detections", "train_feature_fusion", "train_score_fusion", "write_cache",
]
