"""Exam data model, manifest ingestion, label derivation and case-level splitting."""

from __future__ import annotations

import csv
import enum
import logging
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from PIL import Image

log = logging.getLogger(__name__)


class ManifestError(ValueError):
    """Raised for malformed manifests (missing columns, duplicate views, bad values)."""


class Laterality(str, enum.Enum):
    L = "L"
    R = "R"


class Projection(str, enum.Enum):
    CC = "CC"
    MLO = "MLO"


@dataclass(frozen=True, order=True)
class ViewKey:
    laterality: Laterality
    projection: Projection

    def __str__(self) -> str:
        return f"{self.laterality.value}-{self.projection.value}"

    @classmethod
    def parse(cls, text: str) -> "ViewKey":
        try:
            lat, proj = text.strip().split("-")
            return cls(Laterality(lat), Projection(proj))
        except ValueError:
            raise ManifestError(f"invalid view {text!r}; expected one of {[str(v) for v in VIEWS]}")


# Fixed branch/slot order used everywhere downstream.
VIEWS: Tuple[ViewKey, ...] = (
    ViewKey(Laterality.L, Projection.CC),
    ViewKey(Laterality.L, Projection.MLO),
    ViewKey(Laterality.R, Projection.CC),
    ViewKey(Laterality.R, Projection.MLO),
)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box; max edges are exclusive."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_tuple()}")
        if min(self.x_min, self.y_min) < 0:
            raise ValueError(f"negative box coordinate {self.as_tuple()}")

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def fits(self, height: int, width: int) -> bool:
        return self.x_max <= width and self.y_max <= height

    def scaled(self, sx: float, sy: float) -> "BBox":
        return BBox(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy)


class LesionType(str, enum.Enum):
    MASS = "mass"
    CALCIFICATION = "calcification"


class Pathology(str, enum.Enum):
    BENIGN = "benign"
    MALIGNANT = "malignant"


# Localizer class index <-> (type, pathology). Bijective by construction.
LESION_CLASSES: Tuple[Tuple[LesionType, Pathology], ...] = (
    (LesionType.MASS, Pathology.BENIGN),
    (LesionType.MASS, Pathology.MALIGNANT),
    (LesionType.CALCIFICATION, Pathology.BENIGN),
    (LesionType.CALCIFICATION, Pathology.MALIGNANT),
)
CLASS_NAMES: Tuple[str, ...] = tuple(f"{p.value}_{t.value}" for t, p in LESION_CLASSES)
MALIGNANT_CLASSES = frozenset(i for i, (_, p) in enumerate(LESION_CLASSES) if p is Pathology.MALIGNANT)


@dataclass(frozen=True)
class LesionAnnotation:
    view: ViewKey
    box: BBox
    lesion_type: LesionType
    pathology: Pathology
    source_mask_path: Optional[str] = None

    @property
    def class_index(self) -> int:
        return LESION_CLASSES.index((self.lesion_type, self.pathology))


class Density(str, enum.Enum):
    A = "a"
    B = "b"
    C = "c"
    D = "d"


class ImageRef:
    """Lazy handle on a 2-D uint16 image, either on disk or already in memory."""

    def __init__(self, path: Optional[os.PathLike] = None, array: Optional[np.ndarray] = None):
        if path is None and array is None:
            raise ValueError("ImageRef needs a path or an array")
        self.path = Path(path) if path is not None else None
        self._array = array

    def load(self) -> np.ndarray:
        if self._array is None:
            arr = np.asarray(Image.open(self.path))
            if arr.ndim != 2:
                raise ManifestError(f"{self.path}: expected a single-channel image")
            return arr.astype(np.uint16, copy=False)
        return self._array

    @property
    def shape(self) -> Tuple[int, int]:
        if self._array is not None:
            return self._array.shape
        with Image.open(self.path) as im:
            w, h = im.size
        return (h, w)

    def __repr__(self) -> str:
        return f"ImageRef({self.path or 'in-memory'})"


@dataclass
class Exam:
    case_id: str
    images: Dict[ViewKey, ImageRef]
    density: Density
    lesions: List[LesionAnnotation] = field(default_factory=list)
    preassigned_split: Optional[str] = None

    def image(self, view: ViewKey) -> np.ndarray:
        return self.images[view].load()

    def lesions_in(self, view: ViewKey) -> List[LesionAnnotation]:
        return [les for les in self.lesions if les.view == view]


@dataclass(frozen=True)
class CaseLabels:
    density_super: str  # "fatty" | "dense"
    has_lesion: bool
    is_malignant: bool
    lesion_category: str  # "normal" | "mass" | "calcification"
    pathology_category: str  # "normal" | "benign" | "malignant"


def derive_case_labels(exam: Exam) -> CaseLabels:
    has_lesion = bool(exam.lesions)
    is_malignant = any(les.pathology is Pathology.MALIGNANT for les in exam.lesions)
    types = {les.lesion_type for les in exam.lesions}
    # mass takes precedence when a case has both kinds
    if LesionType.MASS in types:
        lesion_category = "mass"
    elif LesionType.CALCIFICATION in types:
        lesion_category = "calcification"
    else:
        lesion_category = "normal"
    if is_malignant:
        pathology_category = "malignant"
    elif has_lesion:
        pathology_category = "benign"
    else:
        pathology_category = "normal"
    return CaseLabels(
        density_super="fatty" if exam.density in (Density.A, Density.B) else "dense",
        has_lesion=has_lesion,
        is_malignant=is_malignant,
        lesion_category=lesion_category,
        pathology_category=pathology_category,
    )


def bounding_box_from_mask(mask: np.ndarray) -> BBox:
    """Tightest box around the foreground of a binary mask."""
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2:
        raise ValueError("mask must be 2-D")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty lesion mask")
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


# --------------------------------------------------------------------------- manifest

MANIFEST_COLUMNS = (
    "case_id", "view", "image_path", "density", "row_kind", "lesion_type", "pathology",
    "x_min", "y_min", "x_max", "y_max",
)
OPTIONAL_COLUMNS = ("preassigned_split",)


@dataclass(frozen=True)
class Rejection:
    case_id: str
    reason: str


@dataclass
class Dataset:
    """Validated exams in manifest order plus the cases rejected at ingestion."""

    exams: List[Exam]
    rejected: List[Rejection] = field(default_factory=list)

    def __iter__(self) -> Iterator[Exam]:
        return iter(self.exams)

    def __len__(self) -> int:
        return len(self.exams)

    def __getitem__(self, i):
        return self.exams[i]

    def by_id(self) -> Dict[str, Exam]:
        return {e.case_id: e for e in self.exams}


def _int_field(row: dict, key: str, lineno: int) -> int:
    try:
        return int(float(row[key]))
    except (TypeError, ValueError):
        raise ManifestError(f"line {lineno}: column {key!r} must be numeric, got {row[key]!r}")


def load_manifest(path: os.PathLike) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    base = path.parent
    views: Dict[str, Dict[ViewKey, ImageRef]] = defaultdict(dict)
    density: Dict[str, str] = {}
    lesion_rows: Dict[str, List[Tuple[int, dict]]] = defaultdict(list)
    preassigned: Dict[str, Optional[str]] = {}
    order: List[str] = []

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in MANIFEST_COLUMNS:
            if col not in header:
                raise ManifestError(f"manifest is missing column {col!r}")
        for lineno, row in enumerate(reader, start=2):
            cid = row["case_id"].strip()
            if not cid:
                raise ManifestError(f"line {lineno}: empty case_id")
            if cid not in density:
                order.append(cid)
                density[cid] = row["density"].strip()
            elif row["density"].strip() and row["density"].strip() != density[cid]:
                raise ManifestError(f"line {lineno}: conflicting density for case {cid}")
            split = (row.get("preassigned_split") or "").strip() or None
            if split not in (None, "train", "test"):
                raise ManifestError(f"line {lineno}: preassigned_split must be train|test|empty")
            if split is not None:
                preassigned[cid] = split
            kind = row["row_kind"].strip()
            view = ViewKey.parse(row["view"])
            if kind == "view":
                if view in views[cid]:
                    raise ManifestError(f"line {lineno}: duplicate view {view} for case {cid}")
                img_path = base / row["image_path"].strip()
                if not row["image_path"].strip() or not img_path.exists():
                    raise ManifestError(f"line {lineno}: image file not found: {img_path}")
                views[cid][view] = ImageRef(img_path)
            elif kind == "lesion":
                lesion_rows[cid].append((lineno, row))
            else:
                raise ManifestError(f"line {lineno}: row_kind must be 'view' or 'lesion', got {kind!r}")

    exams: List[Exam] = []
    rejected: List[Rejection] = []
    for cid in order:
        if len(views[cid]) < 4:
            rejected.append(Rejection(cid, "incomplete"))
            log.warning("case %s rejected: only %d of 4 views", cid, len(views[cid]))
            continue
        try:
            dens = Density(density[cid])
        except ValueError:
            raise ManifestError(f"case {cid}: density must be one of a|b|c|d, got {density[cid]!r}")
        lesions = []
        for lineno, row in lesion_rows[cid]:
            view = ViewKey.parse(row["view"])
            try:
                box = BBox(*(_int_field(row, k, lineno) for k in ("x_min", "y_min", "x_max", "y_max")))
                les = LesionAnnotation(view, box, LesionType(row["lesion_type"].strip()),
                                       Pathology(row["pathology"].strip()))
            except ValueError as exc:
                raise ManifestError(f"line {lineno}: {exc}")
            h, w = views[cid][view].shape
            if not box.fits(h, w):
                raise ManifestError(f"line {lineno}: box {box.as_tuple()} outside {w}x{h} image")
            lesions.append(les)
        exams.append(Exam(cid, dict(sorted(views[cid].items())), dens, lesions, preassigned.get(cid)))
    return Dataset(exams, rejected)


def write_manifest(exams: Iterable[Exam], path: os.PathLike,
                   image_paths: Callable[[Exam, ViewKey], str]) -> None:
    """Emit the manifest CSV; ``image_paths`` returns each view's path relative to the manifest."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS + OPTIONAL_COLUMNS)
        for exam in exams:
            split = exam.preassigned_split or ""
            for view in VIEWS:
                w.writerow([exam.case_id, str(view), image_paths(exam, view), exam.density.value,
                            "view", "", "", "", "", "", "", split])
            for les in exam.lesions:
                b = les.box
                w.writerow([exam.case_id, str(les.view), "", exam.density.value, "lesion",
                            les.lesion_type.value, les.pathology.value,
                            int(b.x_min), int(b.y_min), int(b.x_max), int(b.y_max), split])


# --------------------------------------------------------------------------- splitting

STRATA_KEYS = ("density", "lesion_category", "pathology_category")
SPLIT_NAMES = ("train", "validation", "test")


@dataclass
class DatasetSplit:
    train: List[str]
    validation: List[str]
    test: List[str]
    warnings: List[str] = field(default_factory=list)

    def as_dict(self) -> Dict[str, List[str]]:
        return {"train": self.train, "validation": self.validation, "test": self.test}

    def split_of(self) -> Dict[str, str]:
        return {cid: name for name, ids in self.as_dict().items() for cid in ids}


def stratum_of(exam: Exam, keys: Sequence[str]) -> Tuple[str, ...]:
    labels = derive_case_labels(exam)
    values = {"density": exam.density.value, "lesion_category": labels.lesion_category,
              "pathology_category": labels.pathology_category}
    return tuple(values[k] for k in keys)


def largest_remainder(total: int, ratios: Sequence[float]) -> np.ndarray:
    quotas = np.asarray(ratios, dtype=float) * total
    counts = np.floor(quotas).astype(int)
    short = total - counts.sum()
    # stable: ties go to the earlier split
    order = np.argsort(-(quotas - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def controlled_round(quotas: np.ndarray, col_totals: np.ndarray) -> np.ndarray:
    """Round a strata x splits quota table so every cell is floor or ceil of its quota,
    every row sums to its (integer) row total and every column to ``col_totals``.

    Solved as a min-cost flow that hands the leftover units to the largest remainders.
    """
    quotas = np.asarray(quotas, dtype=float)
    base = np.floor(quotas + 1e-9).astype(int)
    frac = quotas - base
    row_need = np.rint(quotas.sum(axis=1)).astype(int) - base.sum(axis=1)
    col_need = np.asarray(col_totals, dtype=int) - base.sum(axis=0)
    if row_need.sum() != col_need.sum() or (col_need < 0).any():
        raise ValueError("inconsistent apportionment totals")
    if row_need.sum() == 0:
        return base
    g = nx.DiGraph()
    for s, need in enumerate(row_need):
        if need:
            g.add_edge("src", ("s", s), capacity=int(need), weight=0)
    for j, need in enumerate(col_need):
        if need:
            g.add_edge(("j", j), "sink", capacity=int(need), weight=0)
    for s in range(quotas.shape[0]):
        for j in range(quotas.shape[1]):
            if row_need[s] and col_need[j] and frac[s, j] > 1e-9:
                g.add_edge(("s", s), ("j", j), capacity=1, weight=-int(round(frac[s, j] * 1e6)))
    flow = nx.max_flow_min_cost(g, "src", "sink")
    out = base.copy()
    for s in range(quotas.shape[0]):
        for node, f in flow.get(("s", s), {}).items():
            if f:
                out[s, node[1]] += f
    if (out.sum(axis=1) != np.rint(quotas.sum(axis=1))).any():
        raise ValueError("apportionment infeasible")
    return out


def _apportion(pool: List[Exam], ratios: Sequence[float], split_idx: Sequence[int],
               strata_keys: Sequence[str], rng: np.random.Generator,
               warnings: List[str]) -> Dict[str, int]:
    ratios = np.asarray(ratios, dtype=float)
    ratios = ratios / ratios.sum()
    groups: Dict[Tuple[str, ...], List[Exam]] = defaultdict(list)
    for exam in pool:
        groups[stratum_of(exam, strata_keys)].append(exam)
    keys = sorted(groups)
    for key in keys:
        if len(groups[key]) < len(ratios):
            warnings.append(f"stratum {key} has {len(groups[key])} case(s), fewer than "
                            f"{len(ratios)} splits; apportioned by global ratio")
    quotas = np.array([[len(groups[k]) * r for r in ratios] for k in keys])
    counts = controlled_round(quotas, largest_remainder(len(pool), ratios))
    assignment: Dict[str, int] = {}
    for row, key in zip(counts, keys):
        members = sorted(groups[key], key=lambda e: e.case_id)
        perm = rng.permutation(len(members))
        start = 0
        for j, c in enumerate(row):
            for p in perm[start:start + c]:
                assignment[members[p].case_id] = split_idx[j]
            start += c
    return assignment


def split_dataset(dataset: Iterable[Exam], ratios: Sequence[float] = (0.67, 0.13, 0.20),
                  strata_keys: Sequence[str] = STRATA_KEYS, seed: int = 0) -> DatasetSplit:
    """Stratified case-level split by largest-remainder apportionment.

    Cases pre-assigned to ``test`` stay in test; cases pre-assigned to ``train`` are
    divided between train and validation; everything else uses all three ratios.
    """
    exams = list(dataset)
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive fractions summing to 1, got {ratios}")
    bad = set(strata_keys) - set(STRATA_KEYS)
    if bad:
        raise ValueError(f"unknown strata keys {sorted(bad)}")
    ids = [e.case_id for e in exams]
    if len(set(ids)) != len(ids):
        raise ValueError("case_id values must be unique")

    rng = np.random.default_rng(seed)
    warnings: List[str] = []
    assignment: Dict[str, int] = {}
    pre_test = [e for e in exams if e.preassigned_split == "test"]
    pre_train = [e for e in exams if e.preassigned_split == "train"]
    free = [e for e in exams if e.preassigned_split is None]
    assignment.update({e.case_id: 2 for e in pre_test})
    if pre_train:
        assignment.update(_apportion(pre_train, ratios[:2], (0, 1), strata_keys, rng, warnings))
    if free:
        assignment.update(_apportion(free, ratios, (0, 1, 2), strata_keys, rng, warnings))
    for w in warnings:
        log.warning(w)
    buckets: List[List[str]] = [[], [], []]
    for cid in ids:
        buckets[assignment[cid]].append(cid)
    return DatasetSplit(*buckets, warnings=warnings)


def write_split_report(split: DatasetSplit, dataset: Iterable[Exam], path: os.PathLike,
                       strata_keys: Sequence[str] = STRATA_KEYS) -> None:
    where = split.split_of()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "split", *strata_keys])
        for exam in dataset:
            w.writerow([exam.case_id, where[exam.case_id], *stratum_of(exam, strata_keys)])


def read_split_report(path: os.PathLike) -> DatasetSplit:
    buckets: Dict[str, List[str]] = {name: [] for name in SPLIT_NAMES}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            buckets[row["split"]].append(row["case_id"])
    return DatasetSplit(buckets["train"], buckets["validation"], buckets["test"])
