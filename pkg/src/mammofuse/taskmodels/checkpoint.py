"""Model checkpoints: config echo plus named weight arrays in the versioned container."""

from __future__ import annotations

import os
from dataclasses import fields
from fractions import Fraction
from typing import Tuple

import numpy as np
import torch
from torch import nn

from .. import container
from ..container import IntegrityError
from ..preprocess import IntensityMode, PreprocessProfile
from .backbone import BackboneConfig
from .density import DensityPatientModel, DensityViewModel
from .findings import FindingsModel, PatchClassifier
from .localizer import Localizer, LocalizerConfig

KINDS = {
    "density_view": DensityViewModel,
    "density_patient": DensityPatientModel,
    "patch": PatchClassifier,
    "findings": FindingsModel,
    "localizer": Localizer,
}


def profile_to_dict(p: PreprocessProfile) -> dict:
    return {"full_height": p.full_height, "full_width": p.full_width,
            "intensity_mode": p.intensity_mode.value, "scale_factor": str(p.scale_factor)}


def profile_from_dict(d: dict) -> PreprocessProfile:
    return PreprocessProfile(d["full_height"], d["full_width"], IntensityMode(d["intensity_mode"]),
                             Fraction(d["scale_factor"]))


def backbone_to_dict(cfg: BackboneConfig) -> dict:
    return {"feature_width": cfg.feature_width,
            "stage_channel_multipliers": list(cfg.stage_channel_multipliers),
            "stage_strides": list(cfg.stage_strides), "stem_stride": cfg.stem_stride,
            "input_profile": profile_to_dict(cfg.input_profile), "dropout_rate": cfg.dropout_rate}


def backbone_from_dict(d: dict) -> BackboneConfig:
    return BackboneConfig(d["feature_width"], tuple(d["stage_channel_multipliers"]), tuple(d["stage_strides"]),
                          d["stem_stride"], profile_from_dict(d["input_profile"]), d["dropout_rate"])


def _config_of(model: nn.Module) -> dict:
    if isinstance(model, Localizer):
        c = model.cfg
        d = {f.name: getattr(c, f.name) for f in fields(c) if f.name != "backbone"}
        d["anchor_sizes"] = [list(a) for a in c.anchor_sizes]
        return {"backbone": backbone_to_dict(c.backbone), "localizer": d}
    return {"backbone": backbone_to_dict(model.cfg)}


def _build(kind: str, config: dict) -> nn.Module:
    if kind not in KINDS:
        raise IntegrityError(f"unknown checkpoint kind {kind!r}")
    bb = backbone_from_dict(config["backbone"])
    if kind == "localizer":
        d = dict(config["localizer"])
        d["anchor_sizes"] = tuple(tuple(a) for a in d["anchor_sizes"])
        return Localizer(LocalizerConfig(backbone=bb, **d))
    return KINDS[kind](bb)


def save_checkpoint(path: os.PathLike, model: nn.Module, extra: dict | None = None) -> None:
    kind = next((k for k, cls in KINDS.items() if type(model) is cls), None)
    if kind is None:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    container.save(path, arrays, {"kind": kind, "config": _config_of(model), "extra": extra or {}})


def load_checkpoint(path: os.PathLike, expected_kind: str | None = None) -> Tuple[nn.Module, dict]:
    arrays, meta = container.load(path)
    kind = meta.get("kind")
    if expected_kind is not None and kind != expected_kind:
        raise IntegrityError(f"{path}: expected a {expected_kind} checkpoint, found {kind!r}")
    model = _build(kind, meta["config"])
    state = model.state_dict()
    if set(state) != set(arrays):
        raise IntegrityError(f"{path}: weight names do not match the {kind} architecture")
    try:
        model.load_state_dict({k: torch.as_tensor(np.asarray(v)) for k, v in arrays.items()})
    except RuntimeError as exc:
        raise IntegrityError(f"{path}: {exc}")
    model.eval()
    return model, meta
