"""Flat ``section.key = value`` experiment configuration with typed defaults and presets."""

from __future__ import annotations

import os
from fractions import Fraction
from typing import Any, Dict, Mapping, Optional, Tuple

from .taskmodels.training import TrainConfig


class ConfigError(ValueError):
    pass


# key -> (type, default); "opt_*" types accept "none"
_TRAIN_FIELDS = {
    "optimizer": "str", "lr": "float", "momentum": "float", "weight_decay": "float",
    "plateau_factor": "opt_float", "plateau_patience": "int", "epochs": "int", "iterations": "opt_int",
    "warmup_iterations": "int", "batch_size": "int", "early_stopping": "opt_str", "patience": "int",
    "tolerance": "float", "swa_start": "opt_int", "stratified": "bool", "finetune_lr": "opt_float",
    "finetune_epochs": "int",
}

_STAGE_DEFAULTS = {
    "density_view": dict(lr=1e-3, epochs=25, batch_size=16, swa_start=10, plateau_factor=0.2),
    "density_patient": dict(lr=1e-4, epochs=25, batch_size=8, swa_start=5, plateau_factor=0.2),
    "patch": dict(lr=1e-3, epochs=10, batch_size=64, early_stopping="val_loss", finetune_lr=1e-4,
                  finetune_epochs=3),
    "findings": dict(lr=1e-3, epochs=8, batch_size=6, early_stopping="val_auc", swa_start=5, stratified=True,
                     finetune_lr=1e-4, finetune_epochs=2),
    "localizer": dict(lr=1e-3, iterations=1500, warmup_iterations=100, batch_size=2, weight_decay=1e-4),
    "fusion": dict(lr=5e-4, epochs=200, batch_size=8, early_stopping="val_loss", stratified=True),
}

SCHEMA: Dict[str, Tuple[str, Any]] = {
    "seed": ("int", 7),
    "threads": ("int", 1),
    "data.source": ("str", "synthetic"),
    "data.manifest": ("str", ""),
    "synth.n_cases": ("int", 320),
    "synth.image_height": ("int", 288),
    "synth.image_width": ("int", 224),
    "synth.malignant_fraction": ("float", 0.5),
    "synth.occlusion_prob": ("float", 0.15),
    "synth.noise_sigma": ("float", 400.0),
    "split.ratios": ("floats", (0.67, 0.13, 0.20)),
    "preprocess.scale": ("fraction", Fraction(1, 8)),
    "backbone.feature_width": ("int", 64),
    "patch.per_lesion": ("int", 5),
    "patch.per_normal": ("int", 5),
    "findings.ablation_scratch": ("bool", True),
    "localizer.score_threshold": ("float", 0.05),
    "localizer.report_threshold": ("float", 0.5),
    "localizer.max_detections": ("int", 100),
    "fusion.n_grid": ("ints", (1, 2, 3, 4, 5)),
    "fusion.heads": ("strs", ("mlp", "svm_rbf", "random_forest")),
    "fusion.targets": ("strs", ("lesion", "malignancy")),
    "fusion.ablation": ("bool", True),
    "fusion.channels": ("int", 16),
    "fusion.hidden": ("int", 64),
    "evaluate.threshold": ("float", 0.5),
    "evaluate.density_thresholds": ("floats", (0.5, 0.6, 0.7, 0.8)),
    "evaluate.froc_fpi": ("floats", (0.5, 1.0, 2.0)),
}
for _stage, _over in _STAGE_DEFAULTS.items():
    _base = TrainConfig(**_over)
    for _f, _t in _TRAIN_FIELDS.items():
        SCHEMA[f"{_stage}.{_f}"] = (_t, getattr(_base, _f))

# published full-resolution settings; the data source should then be a real manifest
PAPER_SCALE = {
    "preprocess.scale": Fraction(1),
    "backbone.feature_width": 1024,
    "patch.lr": 1e-4, "patch.epochs": 200, "patch.finetune_lr": 1e-5, "patch.finetune_epochs": 10,
    "findings.lr": 1e-4, "findings.epochs": 50, "findings.finetune_lr": 1e-5, "findings.finetune_epochs": 10,
    "localizer.optimizer": "sgd", "localizer.momentum": 0.9, "localizer.lr": 1e-4,
    "localizer.iterations": 100_000, "localizer.warmup_iterations": 0, "localizer.weight_decay": 0.0,
}


def _parse(kind: str, text: str, key: str):
    text = text.strip()
    try:
        if kind.startswith("opt_"):
            return None if text.lower() in ("none", "") else _parse(kind[4:], text, key)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "str":
            return text
        if kind == "bool":
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if kind == "fraction":
            return Fraction(text).limit_denominator(1000)
        if kind in ("ints", "floats", "strs"):
            elem = {"ints": int, "floats": float, "strs": str}[kind]
            return tuple(elem(t.strip()) for t in text.split(",") if t.strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind} ({exc})")
    raise ConfigError(f"{key}: unknown type {kind}")


def _render(kind: str, value) -> str:
    if value is None:
        return "none"
    if kind in ("ints", "floats", "strs"):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if kind == "bool":
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class PipelineConfig:
    def __init__(self, values: Optional[Mapping[str, Any]] = None):
        self.values = {k: d for k, (_, d) in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)
        self.validate()

    def __getitem__(self, key: str):
        return self.values[key]

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _parse(SCHEMA[key][0], value, key) if isinstance(value, str) else value

    def updated(self, changes: Mapping[str, Any]) -> "PipelineConfig":
        c = PipelineConfig(self.values)
        for k, v in changes.items():
            c.set(k, v)
        c.validate()
        return c

    def validate(self) -> None:
        v = self.values
        if v["data.source"] not in ("synthetic", "manifest"):
            raise ConfigError("data.source must be 'synthetic' or 'manifest'")
        if v["data.source"] == "manifest" and not os.path.isfile(v["data.manifest"]):
            raise ConfigError(f"data.manifest: file not found: {v['data.manifest']!r}")
        r = v["split.ratios"]
        if len(r) != 3 or min(r) <= 0 or abs(sum(r) - 1) > 1e-9:
            raise ConfigError("split.ratios must be three positive fractions summing to 1")
        if not set(v["fusion.n_grid"]) <= {1, 2, 3, 4, 5} or not v["fusion.n_grid"]:
            raise ConfigError("fusion.n_grid entries must lie in 1..5")
        if not set(v["fusion.heads"]) <= {"mlp", "svm_rbf", "random_forest"} or not v["fusion.heads"]:
            raise ConfigError("fusion.heads must be drawn from mlp, svm_rbf, random_forest")
        if not set(v["fusion.targets"]) <= {"lesion", "malignancy"} or not v["fusion.targets"]:
            raise ConfigError("fusion.targets must be drawn from lesion, malignancy")
        if v["threads"] < 1:
            raise ConfigError("threads must be >= 1")
        for stage in _STAGE_DEFAULTS:
            try:
                self.train_config(stage)
            except ValueError as exc:
                raise ConfigError(f"{stage}: {exc}")

    def train_config(self, stage: str, **extra) -> TrainConfig:
        fields = {f: self.values[f"{stage}.{f}"] for f in _TRAIN_FIELDS}
        return TrainConfig(seed=self.values["seed"], **fields, **extra)

    def render(self) -> str:
        return "".join(f"{k} = {_render(SCHEMA[k][0], self.values[k])}\n" for k in sorted(SCHEMA))

    def write(self, path: os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# experiment configuration; rerun with --config on this file\n")
            fh.write(self.render())

    @classmethod
    def parse_text(cls, text: str, source: str = "<config>") -> Dict[str, str]:
        out = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in SCHEMA:
                raise ConfigError(f"{source}:{lineno}: unknown config key {k!r}")
            out[k] = v
        return out

    @classmethod
    def load(cls, path: Optional[os.PathLike] = None, overrides: Optional[Mapping[str, Any]] = None,
             paper_scale: bool = False) -> "PipelineConfig":
        values: Dict[str, Any] = dict(PAPER_SCALE) if paper_scale else {}
        if path is not None:
            try:
                text = open(path, encoding="utf-8").read()
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}")
            values.update(cls.parse_text(text, str(path)))
        values.update(overrides or {})
        return cls(values)
