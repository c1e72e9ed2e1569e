from .backbone import Backbone, BackboneConfig
from .checkpoint import IntegrityError, load_checkpoint, save_checkpoint
from .density import (DensityPatientModel, DensityViewModel, predict_density, predict_density_views,
                      train_density_patient, train_density_view)
from .findings import (FindingsModel, PatchClassifier, collect_patches, predict_findings, predict_findings_batch,
                       train_findings, train_patch_classifier)
from .gradcheck import GradCheckResult, gradient_check
from .localizer import Detection, Localizer, LocalizerConfig, detect_lesions, detect_view, train_localizer
from .training import EarlyStopping, TrainConfig, TrainingError, TrainingLog, WeightAverager

__all__ = [
    "Backbone", "BackboneConfig", "DensityPatientModel", "DensityViewModel", "Detection", "EarlyStopping",
    "FindingsModel", "GradCheckResult", "IntegrityError", "Localizer", "LocalizerConfig", "PatchClassifier",
    "TrainConfig", "TrainingError", "TrainingLog", "WeightAverager", "collect_patches", "detect_lesions",
    "detect_view", "gradient_check", "load_checkpoint", "predict_density", "predict_density_views",
    "predict_findings", "predict_findings_batch", "save_checkpoint", "train_density_patient",
    "train_density_view", "train_findings", "train_localizer", "train_patch_classifier",
]
