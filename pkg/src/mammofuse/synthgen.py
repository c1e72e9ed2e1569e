"""Deterministic synthetic four-view exams with the same label structure as the real data.

Every case draws from its own counter-derived random stream, so ``generate_exam`` output
depends only on ``(seed, case_index)`` and never on generation order.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .dataset import (
    VIEWS, BBox, Density, Exam, ImageRef, LesionAnnotation, LesionType, Laterality,
    Pathology, Projection, ViewKey, bounding_box_from_mask, write_manifest,
)

_CLASS_KEYS = ("benign_mass", "malignant_mass", "benign_calcification", "malignant_calcification")


class UnplaceableLesion(RuntimeError):
    pass


@dataclass
class SynthSpec:
    image_height: int = 288
    image_width: int = 224
    n_cases: int = 320
    density_class_probs: Tuple[float, ...] = (0.13, 0.38, 0.30, 0.19)
    lesion_count_distribution: Tuple[float, ...] = (0.35, 0.45, 0.15, 0.05)
    malignant_fraction: float = 0.5
    mass_fraction: float = 0.5
    mass_radius_range: Tuple[float, float] = (7.0, 14.0)
    calc_radius_range: Tuple[float, float] = (6.0, 11.0)
    texture_grain: float = 5.0
    # texture amplitude per density class a..d, 16-bit units
    density_texture_amplitude: Tuple[float, ...] = (900.0, 2200.0, 3800.0, 5600.0)
    contrast_ranges: Dict[str, Tuple[float, float]] = field(default_factory=lambda: {
        "benign_mass": (3500.0, 6500.0),
        "malignant_mass": (6500.0, 10500.0),
        "benign_calcification": (9000.0, 15000.0),
        "malignant_calcification": (9000.0, 15000.0),
    })
    noise_sigma: float = 400.0
    occlusion_prob: float = 0.15
    seed: int = 7

    def __post_init__(self):
        for name in ("density_class_probs", "lesion_count_distribution"):
            probs = np.asarray(getattr(self, name), dtype=float)
            if (probs < 0).any() or abs(probs.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} must be a probability vector summing to 1")
        if len(self.density_class_probs) != 4 or len(self.density_texture_amplitude) != 4:
            raise ValueError("density vectors need four entries (a..d)")
        limit = min(self.image_height, self.image_width) / 4
        for name in ("mass_radius_range", "calc_radius_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi < limit):
                raise ValueError(f"{name} must be positive and below {limit}")
        for p in (self.malignant_fraction, self.mass_fraction, self.occlusion_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("fractions must lie in [0, 1]")
        if set(self.contrast_ranges) != set(_CLASS_KEYS):
            raise ValueError(f"contrast_ranges needs keys {_CLASS_KEYS}")
        if self.n_cases < 1 or self.texture_grain <= 0:
            raise ValueError("n_cases and texture_grain must be positive")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        for k in ("density_class_probs", "lesion_count_distribution", "density_texture_amplitude",
                  "mass_radius_range", "calc_radius_range"):
            if k in d:
                d[k] = tuple(d[k])
        if "contrast_ranges" in d:
            d["contrast_ranges"] = {k: tuple(v) for k, v in d["contrast_ranges"].items()}
        return cls(**d)


@dataclass
class _Breast:
    wall_x: float  # chest wall column
    direction: int  # +1 breast extends right, -1 left
    cy: float
    ax: float
    ay: float

    def point(self, rho: float, theta: float) -> Tuple[float, float]:
        return (self.wall_x + self.direction * rho * self.ax * np.cos(theta),
                self.cy + rho * self.ay * np.sin(theta))

    def mask(self, h: int, w: int, shrink: float = 1.0) -> np.ndarray:
        yy, xx = np.mgrid[0:h, 0:w]
        u = (xx - self.wall_x) * self.direction / (self.ax * shrink)
        v = (yy - self.cy) / (self.ay * shrink)
        return (u >= -1e-9) & (u * u + v * v <= 1.0)


def _case_rng(seed: int, case_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(case_index,)))


def _breast_geometry(view: ViewKey, spec: SynthSpec, rng: np.random.Generator) -> _Breast:
    h, w = spec.image_height, spec.image_width
    right_side = view.laterality.value == "R"
    wall_x = 0.0 if right_side else float(w - 1)
    tall = view.projection is Projection.MLO
    return _Breast(
        wall_x=wall_x,
        direction=1 if right_side else -1,
        cy=h / 2 + rng.uniform(-0.04, 0.04) * h,
        ax=w * rng.uniform(0.62, 0.82),
        ay=h * (rng.uniform(0.40, 0.46) if tall else rng.uniform(0.34, 0.40)),
    )


def _tissue(breast: _Breast, spec: SynthSpec, density_idx: int, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.image_height, spec.image_width
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    u = (xx - breast.wall_x) * breast.direction / breast.ax
    v = (yy - breast.cy) / breast.ay
    r2 = u * u + v * v
    inside = (u >= 0) & (r2 <= 1.0)
    thickness = np.sqrt(np.clip(1.0 - r2, 0.0, 1.0))
    texture = ndimage.gaussian_filter(rng.standard_normal((h, w)), spec.texture_grain)
    texture /= texture.std() + 1e-12
    amp = spec.density_texture_amplitude[density_idx]
    img = np.where(inside, 16000.0 + 9000.0 * np.sqrt(thickness)
                   + amp * (0.6 + texture) * thickness, 300.0)
    return img


def _mass_shape(malignant: bool, rng: np.random.Generator):
    if malignant:
        k, phase = int(rng.integers(6, 11)), rng.uniform(0, 2 * np.pi)
        return lambda t: 0.85 + 0.45 * np.maximum(0.0, np.cos(k * t + phase)) ** 6
    ecc, phase = rng.uniform(0.0, 0.2), rng.uniform(0, np.pi)
    return lambda t: 1.0 + ecc * np.cos(2 * (t - phase))


@dataclass
class _LesionPlan:
    lesion_type: LesionType
    pathology: Pathology
    side: str
    radius: float
    contrast: float
    rho: float
    theta: float
    shape: object = None  # mass boundary function
    speckles: Optional[np.ndarray] = None  # calc offsets (n, 2) in units of radius, + radii
    hidden_view: Optional[ViewKey] = None


def _lesion_field(plan: _LesionPlan, cx: float, cy: float, h: int, w: int):
    """Return (additive intensity field, rendered-extent mask)."""
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    dx, dy = xx - cx, yy - cy
    if plan.lesion_type is LesionType.MASS:
        d = np.hypot(dx, dy)
        bound = plan.radius * plan.shape(np.arctan2(dy, dx))
        weight = np.clip((bound - d) / 1.5 + 0.5, 0.0, 1.0)
        return plan.contrast * weight, weight > 0
    field_ = np.zeros((h, w))
    extent = np.zeros((h, w), dtype=bool)
    for ox, oy, sr in plan.speckles:
        sx, sy = cx + ox * plan.radius, cy + oy * plan.radius
        d2 = (xx - sx) ** 2 + (yy - sy) ** 2
        field_ = np.maximum(field_, np.exp(-d2 / (2 * (sr / 1.5) ** 2)))
        extent |= d2 <= (sr + 0.5) ** 2
    return plan.contrast * field_ * extent, extent


def _plan_lesions(spec: SynthSpec, rng: np.random.Generator) -> List[_LesionPlan]:
    n = int(rng.choice(len(spec.lesion_count_distribution), p=spec.lesion_count_distribution))
    plans = []
    for _ in range(n):
        is_mass = rng.random() < spec.mass_fraction
        malignant = rng.random() < spec.malignant_fraction
        ltype = LesionType.MASS if is_mass else LesionType.CALCIFICATION
        path = Pathology.MALIGNANT if malignant else Pathology.BENIGN
        key = f"{path.value}_{ltype.value}"
        side = "L" if rng.random() < 0.5 else "R"
        lo, hi = spec.mass_radius_range if is_mass else spec.calc_radius_range
        plan = _LesionPlan(ltype, path, side, rng.uniform(lo, hi), rng.uniform(*spec.contrast_ranges[key]),
                           0.0, 0.0)
        if is_mass:
            plan.shape = _mass_shape(malignant, rng)
        else:
            count = int(rng.integers(10, 17)) if malignant else int(rng.integers(4, 7))
            sizes = rng.uniform(1.0, 1.6, count) if malignant else rng.uniform(1.8, 2.6, count)
            ang = rng.uniform(0, 2 * np.pi, count)
            rad = np.sqrt(rng.uniform(0, 1, count))
            plan.speckles = np.column_stack([rad * np.cos(ang), rad * np.sin(ang), sizes])
        if rng.random() < spec.occlusion_prob:
            proj = Projection.CC if rng.random() < 0.5 else Projection.MLO
            plan.hidden_view = ViewKey(Laterality(side), proj)
        plans.append(plan)
    return plans


def _place(plan: _LesionPlan, breasts: Dict[ViewKey, _Breast], spec: SynthSpec,
           rng: np.random.Generator) -> Dict[ViewKey, Tuple[np.ndarray, np.ndarray]]:
    h, w = spec.image_height, spec.image_width
    side_views = [v for v in VIEWS if v.laterality.value == plan.side]
    inner = {v: breasts[v].mask(h, w, shrink=0.97) for v in side_views}
    for attempt in range(2):
        for _ in range(100):
            plan.rho = rng.uniform(0.1, 0.75)
            plan.theta = rng.uniform(-1.2, 1.2)
            rendered = {}
            for v in side_views:
                cx, cy = breasts[v].point(plan.rho, plan.theta)
                rendered[v] = _lesion_field(plan, cx, cy, h, w)
            if all(not (ext & ~inner[v]).any() for v, (_, ext) in rendered.items()):
                return rendered
        plan.radius *= 0.7
    raise UnplaceableLesion("unplaceable lesion")


def generate_exam(spec: SynthSpec, case_index: int) -> Exam:
    if not 0 <= case_index < spec.n_cases:
        raise IndexError(f"case_index {case_index} outside [0, {spec.n_cases})")
    rng = _case_rng(spec.seed, case_index)
    h, w = spec.image_height, spec.image_width
    density_idx = int(rng.choice(4, p=spec.density_class_probs))
    breasts = {v: _breast_geometry(v, spec, rng) for v in VIEWS}
    images = {v: _tissue(breasts[v], spec, density_idx, rng) for v in VIEWS}
    lesions: List[LesionAnnotation] = []
    for plan in _plan_lesions(spec, rng):
        for v, (field_, extent) in _place(plan, breasts, spec, rng).items():
            if v == plan.hidden_view:
                continue
            images[v] = images[v] + field_
            lesions.append(LesionAnnotation(v, bounding_box_from_mask(extent), plan.lesion_type, plan.pathology))
    refs = {}
    for v in VIEWS:
        img = images[v] + rng.normal(0.0, spec.noise_sigma, (h, w))
        refs[v] = ImageRef(array=np.clip(np.rint(img), 0, 65535).astype(np.uint16))
    lesions.sort(key=lambda les: (str(les.view), les.box.as_tuple()))
    return Exam(f"synth-{case_index:05d}", refs, list(Density)[density_idx], lesions)


def generate_dataset(spec: SynthSpec, out_dir: Optional[os.PathLike] = None) -> List[Exam]:
    exams = [generate_exam(spec, i) for i in range(spec.n_cases)]
    if out_dir is not None:
        emit(exams, spec, out_dir)
    return exams


def image_relpath(exam: Exam, view: ViewKey) -> str:
    return f"images/{exam.case_id}_{view}.png"


def emit(exams: Sequence[Exam], spec: SynthSpec, out_dir: os.PathLike) -> Path:
    """Write PNGs, ``manifest.csv`` and ``synth_spec.json``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for exam in exams:
        for view in VIEWS:
            Image.fromarray(exam.image(view)).save(out / image_relpath(exam, view), optimize=False)
    manifest = out / "manifest.csv"
    write_manifest(exams, manifest, image_relpath)
    (out / "synth_spec.json").write_text(spec.to_json() + "\n", encoding="utf-8")
    return manifest
