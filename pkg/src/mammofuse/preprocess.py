"""Breast segmentation, resizing/normalization, patch sampling and augmentation."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, NamedTuple, Optional, Sequence, Tuple

import cv2
import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from .dataset import BBox, Exam, ViewKey

log = logging.getLogger(__name__)


class IntensityMode(str, enum.Enum):
    RESCALE_0_255 = "rescale_0_255"
    RESCALE_0_1_ZSCORE = "rescale_0_1_zscore"
    RAW = "raw"


def _round4(x: float) -> int:
    return max(4, int(math.floor(x / 4 + 0.5)) * 4)


@dataclass(frozen=True)
class PreprocessProfile:
    """Resize target derived from full-resolution dimensions times ``scale_factor``."""

    full_height: int
    full_width: int
    intensity_mode: IntensityMode
    scale_factor: Fraction = Fraction(1, 8)

    def __post_init__(self):
        if not 0 < self.scale_factor <= 1:
            raise ValueError("scale_factor must lie in (0, 1]")

    @property
    def target_height(self) -> int:
        return _round4(self.full_height * self.scale_factor)

    @property
    def target_width(self) -> int:
        return _round4(self.full_width * self.scale_factor)

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.target_height, self.target_width)

    def scaled(self, scale_factor) -> "PreprocessProfile":
        return PreprocessProfile(self.full_height, self.full_width, self.intensity_mode,
                                 Fraction(scale_factor).limit_denominator(1000))


def density_profile(scale=Fraction(1, 8)) -> PreprocessProfile:
    return PreprocessProfile(336, 224, IntensityMode.RESCALE_0_255, Fraction(scale))


def findings_profile(scale=Fraction(1, 8)) -> PreprocessProfile:
    return PreprocessProfile(1152, 896, IntensityMode.RESCALE_0_1_ZSCORE, Fraction(scale))


def localizer_profile(scale=Fraction(1, 8)) -> PreprocessProfile:
    return PreprocessProfile(2700, 1200, IntensityMode.RESCALE_0_255, Fraction(scale))


# --------------------------------------------------------------------------- segmentation

_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def segment_breast(image: np.ndarray) -> np.ndarray:
    """Otsu threshold, largest 4-connected component, 3x3 closing."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("segment_breast expects a 2-D image")
    if img.max() == img.min():
        raise ValueError("no breast found")
    fg = img > threshold_otsu(img)
    labels, n = ndimage.label(fg, structure=_FOUR_CONNECTED)
    if n == 0:
        raise ValueError("no breast found")
    sizes = np.bincount(labels.ravel())[1:]
    mask = labels == (int(np.argmax(sizes)) + 1)
    # edge padding keeps the closing from eroding regions that touch the frame
    padded = np.pad(mask, 1, mode="edge")
    closed = ndimage.binary_closing(padded, structure=np.ones((3, 3), dtype=bool))
    return closed[1:-1, 1:-1]


# --------------------------------------------------------------------------- resize / normalize

def resize(image: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    h, w = shape
    return cv2.resize(np.asarray(image, dtype=np.float32), (w, h), interpolation=cv2.INTER_CUBIC)


def prepare_view(image: np.ndarray, profile: PreprocessProfile,
                 mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Clean background, bicubic-resize to the profile and map intensities; float32 output."""
    img = np.asarray(image, dtype=np.float32)
    if mask is None:
        mask = segment_breast(img)
    img = np.where(mask, img, 0.0).astype(np.float32)
    lo, hi = float(img.min()), float(img.max())
    if hi == lo:
        raise ValueError("prepare_view needs a non-constant image")
    # clip cubic overshoot back into the source range
    out = np.clip(resize(img, profile.shape), lo, hi)
    mode = IntensityMode(profile.intensity_mode)
    if mode is IntensityMode.RAW:
        return out
    unit = (out - lo) / (hi - lo)
    if mode is IntensityMode.RESCALE_0_255:
        return (unit * 255.0).astype(np.float32)
    unit = unit.astype(np.float64)
    std = unit.std()
    if std < 1e-8:
        log.warning("zero standard deviation in z-score normalization; clamped to 1e-8")
        std = 1e-8
    return ((unit - unit.mean()) / std).astype(np.float32)


# --------------------------------------------------------------------------- patches

class Patch(NamedTuple):
    image: np.ndarray
    label: int  # 1 lesion, 0 background
    box: BBox  # patch window in the sampled image frame


def _overlap(a: Tuple[float, float, float, float], b: Tuple[float, float, float, float]) -> float:
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    return max(w, 0.0) * max(h, 0.0)


def sample_patches(exam: Exam, view: ViewKey, patch_size: int, per_lesion: int = 5,
                   per_normal: int = 5, seed: int = 0,
                   profile: Optional[PreprocessProfile] = None,
                   max_attempts: int = 1000) -> List[Patch]:
    """Lesion patches cover >= 90% of their lesion box; normal-view patches lie >= 90% in breast.

    With ``profile`` the view is prepared first and boxes rescaled into that frame.
    """
    raw = exam.image(view)
    mask = segment_breast(raw)
    boxes = [les.box for les in exam.lesions_in(view)]
    if profile is not None:
        img = prepare_view(raw, profile, mask)
        sy, sx = img.shape[0] / raw.shape[0], img.shape[1] / raw.shape[1]
        mask = resize(mask.astype(np.float32), img.shape) > 0.5
        boxes = [b.scaled(sx, sy) for b in boxes]
    else:
        img = raw.astype(np.float32)
    h, w = img.shape
    p = int(patch_size)
    if p > h or p > w:
        raise ValueError(f"patch_size {p} exceeds image {w}x{h}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, *map(ord, exam.case_id + str(view))]))
    out: List[Patch] = []

    def crop(x0: int, y0: int, label: int):
        out.append(Patch(img[y0:y0 + p, x0:x0 + p].copy(), label, BBox(x0, y0, x0 + p, y0 + p)))

    for box in boxes:
        bt = box.as_tuple()
        cx, cy = box.center
        for _ in range(per_lesion):
            if box.width > p or box.height > p:
                log.warning("lesion box %s larger than patch %d; center crop", bt, p)
                crop(int(np.clip(round(cx - p / 2), 0, w - p)), int(np.clip(round(cy - p / 2), 0, h - p)), 1)
                continue
            for _ in range(max_attempts):
                x0 = int(rng.integers(max(0, math.ceil(cx - p)), min(w - p, int(cx)) + 1))
                y0 = int(rng.integers(max(0, math.ceil(cy - p)), min(h - p, int(cy)) + 1))
                if _overlap((x0, y0, x0 + p, y0 + p), bt) >= 0.9 * box.area:
                    crop(x0, y0, 1)
                    break
            else:
                log.warning("no patch with 90%% lesion overlap after %d attempts; center crop", max_attempts)
                crop(int(np.clip(round(cx - p / 2), 0, w - p)), int(np.clip(round(cy - p / 2), 0, h - p)), 1)
    if not boxes:
        integral = np.pad(mask.astype(np.int64), ((1, 0), (1, 0))).cumsum(0).cumsum(1)
        for _ in range(per_normal):
            for _ in range(max_attempts):
                x0, y0 = int(rng.integers(0, w - p + 1)), int(rng.integers(0, h - p + 1))
                inside = (integral[y0 + p, x0 + p] - integral[y0, x0 + p]
                          - integral[y0 + p, x0] + integral[y0, x0])
                if inside >= 0.9 * p * p:
                    crop(x0, y0, 0)
                    break
            else:
                log.warning("no background patch inside breast after %d attempts", max_attempts)
    return out


# --------------------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentationPolicy:
    horizontal_flip: bool = False
    vertical_flip: bool = False
    rotation_degrees: Tuple[float, float] = (0.0, 0.0)
    crop_scale: Tuple[float, float] = (1.0, 1.0)
    shear: bool = False
    shear_degrees: float = 10.0
    blur: bool = False
    grid_distortion: bool = False
    transpose: bool = False
    shift_scale_rotate: bool = False
    box_jitter_ratio: float = 0.0

    def __post_init__(self):
        lo, hi = self.rotation_degrees
        if not -45.0 <= lo <= hi <= 45.0:
            raise ValueError("rotation_degrees must lie within [-45, 45]")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("crop_scale must lie within (0, 1]")
        if self.box_jitter_ratio < 0:
            raise ValueError("box_jitter_ratio must be non-negative")


# standard set: flips, small rotations, crops
STANDARD_AUGMENTATION = AugmentationPolicy(horizontal_flip=True, rotation_degrees=(-15.0, 15.0),
                                           crop_scale=(0.85, 1.0))
IDENTITY = AugmentationPolicy()


class Augmented(NamedTuple):
    image: np.ndarray
    boxes: np.ndarray  # (k, 4) float, surviving boxes
    dropped: np.ndarray  # (n,) bool over the input boxes
    applied: Tuple[str, ...]


def _affine_boxes(boxes: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Axis-aligned hull of the four transformed corners."""
    if len(boxes) == 0:
        return boxes
    x0, y0, x1, y1 = boxes.T
    corners = np.stack([np.stack([x0, y0], -1), np.stack([x1, y0], -1),
                        np.stack([x0, y1], -1), np.stack([x1, y1], -1)], 1)  # (n, 4, 2)
    pts = corners @ m[:, :2].T + m[:, 2]
    return np.concatenate([pts.min(1), pts.max(1)], axis=1)


def rotation_matrix(angle_deg: float, shape: Tuple[int, int], scale: float = 1.0) -> np.ndarray:
    """Counter-clockwise rotation about the image center (cv2 convention)."""
    h, w = shape
    return cv2.getRotationMatrix2D((w / 2.0, h / 2.0), angle_deg, scale)


def _warp(img: np.ndarray, m: np.ndarray) -> np.ndarray:
    h, w = img.shape
    return cv2.warpAffine(img, m, (w, h), flags=cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=float(img.min()))


def augment(image: np.ndarray, boxes: Optional[Sequence] = None,
            policy: AugmentationPolicy = IDENTITY, seed: int = 0) -> Augmented:
    """Apply each enabled transform with probability 0.5, carrying boxes along."""
    img = np.asarray(image, dtype=np.float32)
    b = np.zeros((0, 4)) if boxes is None or len(boxes) == 0 else np.array(
        [x.as_tuple() if isinstance(x, BBox) else x for x in boxes], dtype=float)
    n_in = len(b)
    rng = np.random.default_rng(seed)
    applied: List[str] = []

    def coin(name: str, enabled: bool) -> bool:
        hit = enabled and rng.random() < 0.5
        if hit:
            applied.append(name)
        return hit

    h, w = img.shape
    if coin("horizontal_flip", policy.horizontal_flip):
        img = img[:, ::-1]
        b = np.column_stack([w - b[:, 2], b[:, 1], w - b[:, 0], b[:, 3]])
    if coin("vertical_flip", policy.vertical_flip):
        img = img[::-1, :]
        b = np.column_stack([b[:, 0], h - b[:, 3], b[:, 2], h - b[:, 1]])
    if coin("transpose", policy.transpose):
        img = img.T
        b = b[:, [1, 0, 3, 2]]
        h, w = img.shape
    img = np.ascontiguousarray(img)
    lo, hi = policy.rotation_degrees
    if coin("rotation", (lo, hi) != (0.0, 0.0)):
        m = rotation_matrix(rng.uniform(lo, hi), img.shape)
        img, b = _warp(img, m), _affine_boxes(b, m)
    if coin("shear", policy.shear):
        k = math.tan(math.radians(rng.uniform(-policy.shear_degrees, policy.shear_degrees)))
        m = np.array([[1.0, k, -k * h / 2.0], [0.0, 1.0, 0.0]])
        img, b = _warp(img, m), _affine_boxes(b, m)
    if coin("shift_scale_rotate", policy.shift_scale_rotate):
        rot = rng.uniform(lo, hi) if (lo, hi) != (0.0, 0.0) else rng.uniform(-15.0, 15.0)
        m = rotation_matrix(rot, img.shape, rng.uniform(0.9, 1.1))
        m[:, 2] += rng.uniform(-0.0625, 0.0625, 2) * np.array([w, h])
        img, b = _warp(img, m), _affine_boxes(b, m)
    lo, hi = policy.crop_scale
    if coin("crop", (lo, hi) != (1.0, 1.0)):
        s = math.sqrt(rng.uniform(lo, hi))
        ch, cw = max(1, int(round(h * s))), max(1, int(round(w * s)))
        y0, x0 = int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))
        img = cv2.resize(img[y0:y0 + ch, x0:x0 + cw], (w, h), interpolation=cv2.INTER_LINEAR)
        b = (b - [x0, y0, x0, y0]) * [w / cw, h / ch, w / cw, h / ch]
    if coin("grid_distortion", policy.grid_distortion):
        ctrl = rng.uniform(-0.02, 0.02, (2, 4, 4)) * np.array([w, h])[:, None, None]
        dx = cv2.resize(ctrl[0].astype(np.float32), (w, h), interpolation=cv2.INTER_LINEAR)
        dy = cv2.resize(ctrl[1].astype(np.float32), (w, h), interpolation=cv2.INTER_LINEAR)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
        img = cv2.remap(img, xx + dx, yy + dy, cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT)
        if len(b):
            # output point p samples input p + d(p); move boxes by -d at their corners
            def disp(x, y):
                xi = np.clip(np.rint(x).astype(int), 0, w - 1)
                yi = np.clip(np.rint(y).astype(int), 0, h - 1)
                return dx[yi, xi], dy[yi, xi]
            pts = []
            for cx, cy in ((0, 1), (2, 1), (0, 3), (2, 3)):
                ddx, ddy = disp(b[:, cx], b[:, cy])
                pts.append(np.stack([b[:, cx] - ddx, b[:, cy] - ddy], -1))
            pts = np.stack(pts, 1)
            b = np.concatenate([pts.min(1), pts.max(1)], 1)
    if coin("blur", policy.blur):
        img = cv2.GaussianBlur(img, (0, 0), rng.uniform(0.5, 1.5))
    if policy.box_jitter_ratio > 0 and len(b):
        r = policy.box_jitter_ratio
        b = b + rng.uniform(-r, r, b.shape) * np.array([w, h, w, h])

    b = np.column_stack([np.clip(b[:, 0], 0, w), np.clip(b[:, 1], 0, h),
                         np.clip(b[:, 2], 0, w), np.clip(b[:, 3], 0, h)]) if len(b) else b
    keep = (b[:, 2] > b[:, 0]) & (b[:, 3] > b[:, 1]) if len(b) else np.zeros(0, dtype=bool)
    dropped = np.zeros(n_in, dtype=bool)
    dropped[:len(keep)] = ~keep
    return Augmented(np.ascontiguousarray(img, dtype=np.float32), b[keep] if len(b) else b.reshape(0, 4),
                     dropped, tuple(applied))
