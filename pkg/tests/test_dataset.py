import csv
from collections import Counter, defaultdict

import numpy as np
import pytest
from PIL import Image

from mammofuse.dataset import (STRATA_KEYS, VIEWS, BBox, ManifestError, bounding_box_from_mask, controlled_round,
                               derive_case_labels, largest_remainder, load_manifest, read_split_report,
                               split_dataset, stratum_of, write_split_report)
from builders import exam, reported_split_exams, random_exams

REPORTED_RATIOS = (1511 / 2254, 290 / 2254, 453 / 2254)


def check_split(exams, split, ratios):
    """Returns the worst per-stratum deviation from the ideal ratio counts."""
    parts = split.as_dict()
    ids = [e.case_id for e in exams]
    flat = [c for name in ("train", "validation", "test") for c in parts[name]]
    assert sorted(flat) == sorted(ids), "coverage"
    assert len(set(flat)) == len(flat), "disjointness"
    where = split.split_of()
    groups = defaultdict(Counter)
    for e in exams:
        groups[stratum_of(e, STRATA_KEYS)][where[e.case_id]] += 1
    worst = 0.0
    for counts in groups.values():
        total = sum(counts.values())
        for name, r in zip(("train", "validation", "test"), ratios):
            worst = max(worst, abs(counts[name] - r * total))
    return worst


# --- labels and boxes ---

def test_case_labels_examples():
    lab = derive_case_labels(exam("a", "b"))
    assert (lab.density_super, lab.has_lesion, lab.is_malignant, lab.lesion_category, lab.pathology_category) == \
        ("fatty", False, False, "normal", "normal")
    lab = derive_case_labels(exam("a", "c", [("calcification", "benign")]))
    assert (lab.density_super, lab.has_lesion, lab.is_malignant, lab.lesion_category, lab.pathology_category) == \
        ("dense", True, False, "calcification", "benign")
    lab = derive_case_labels(exam("a", "d", [("mass", "benign"), ("calcification", "malignant")]))
    assert lab.is_malignant and lab.pathology_category == "malignant" and lab.lesion_category == "mass"


def test_box_from_mask():
    m = np.zeros((10, 10), bool)
    m[7, 5] = True
    assert bounding_box_from_mask(m) == BBox(5, 7, 6, 8)
    assert bounding_box_from_mask(np.ones((10, 10))) == BBox(0, 0, 10, 10)
    m = np.zeros((12, 12), bool)
    m[2:5, 3] = True
    m[4, 3:10] = True
    assert bounding_box_from_mask(m) == BBox(3, 2, 10, 5)
    with pytest.raises(ValueError, match="empty lesion mask"):
        bounding_box_from_mask(np.zeros((3, 3)))


def test_box_validation():
    with pytest.raises(ValueError):
        BBox(5, 5, 5, 6)
    with pytest.raises(ValueError):
        BBox(-1, 0, 2, 2)
    assert BBox(0, 0, 4, 2).center == (2.0, 1.0)


# --- manifest ---

def _write_manifest(tmp_path, rows, header=None):
    (tmp_path / "img").mkdir(exist_ok=True)
    for name in ("a.png", "b.png"):
        Image.fromarray(np.full((20, 16), 1000, np.uint16)).save(tmp_path / "img" / name)
    header = header or ["case_id", "view", "image_path", "density", "row_kind", "lesion_type", "pathology",
                        "x_min", "y_min", "x_max", "y_max", "preassigned_split"]
    with open(tmp_path / "m.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return tmp_path / "m.csv"


def _view_rows(cid, views=VIEWS, density="b", split=""):
    return [[cid, str(v), "img/a.png", density, "view", "", "", "", "", "", "", split] for v in views]


def test_manifest_minimal(tmp_path):
    ds = load_manifest(_write_manifest(tmp_path, _view_rows("c1")))
    assert len(ds) == 1 and ds[0].lesions == [] and ds.rejected == []
    assert ds[0].image(VIEWS[0]).dtype == np.uint16


def test_manifest_lesions(tmp_path):
    rows = _view_rows("c1") + [["c1", "R-CC", "", "b", "lesion", "mass", "malignant", 1, 2, 5, 6, ""]] * 2
    ds = load_manifest(_write_manifest(tmp_path, rows))
    assert len(ds[0].lesions) == 2
    assert ds[0].lesions[0].box == BBox(1, 2, 5, 6)


def test_manifest_incomplete_rejected(tmp_path):
    rows = _view_rows("c1", VIEWS[:3]) + _view_rows("c2")
    ds = load_manifest(_write_manifest(tmp_path, rows))
    assert [e.case_id for e in ds] == ["c2"]
    assert [(r.case_id, r.reason) for r in ds.rejected] == [("c1", "incomplete")]


def test_manifest_errors(tmp_path):
    with pytest.raises(ManifestError, match="missing column 'view'"):
        load_manifest(_write_manifest(tmp_path, [["c1"]], header=["case_id"]))
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(_write_manifest(tmp_path, _view_rows("c1") + _view_rows("c1", VIEWS[:1])))
    bad_box = _view_rows("c1") + [["c1", "L-CC", "", "b", "lesion", "mass", "benign", 0, 0, 99, 5, ""]]
    with pytest.raises(ManifestError, match="outside"):
        load_manifest(_write_manifest(tmp_path, bad_box))
    with pytest.raises(ManifestError, match="density"):
        load_manifest(_write_manifest(tmp_path, _view_rows("c1", density="x")))
    with pytest.raises(ManifestError, match="view"):
        load_manifest(_write_manifest(tmp_path, [["c1", "L-XX", "img/a.png", "b", "view"] + [""] * 7]))
    missing = _view_rows("c1")
    missing[0][2] = "img/nope.png"
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(_write_manifest(tmp_path, missing))
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "absent.csv")


def test_manifest_preassigned(tmp_path):
    ds = load_manifest(_write_manifest(tmp_path, _view_rows("c1", split="test") + _view_rows("c2")))
    assert [e.preassigned_split for e in ds] == ["test", None]
    with pytest.raises(ManifestError, match="preassigned"):
        load_manifest(_write_manifest(tmp_path, _view_rows("c1", split="validation")))


# --- apportionment ---

def test_largest_remainder():
    assert largest_remainder(10, (0.8, 0.1, 0.1)).tolist() == [8, 1, 1]
    assert largest_remainder(7, (0.5, 0.25, 0.25)).tolist() == [3, 2, 2]
    assert largest_remainder(0, (0.5, 0.5)).tolist() == [0, 0]


def test_controlled_round_margins():
    rng = np.random.default_rng(0)
    for _ in range(50):
        sizes = rng.integers(1, 30, rng.integers(1, 8))
        r = rng.dirichlet(np.ones(3))
        q = np.outer(sizes, r)
        out = controlled_round(q, largest_remainder(int(sizes.sum()), r))
        assert (out.sum(1) == sizes).all()
        assert (np.abs(out - q) < 1).all()


# --- splitting ---

def test_split_single_stratum():
    exams = [exam(f"c{i}") for i in range(10)]
    s = split_dataset(exams, (0.8, 0.1, 0.1), seed=1)
    assert (len(s.train), len(s.validation), len(s.test)) == (8, 1, 1)


def test_split_deterministic():
    exams = random_exams(np.random.default_rng(3), 80)
    assert split_dataset(exams, seed=5) == split_dataset(exams, seed=5)
    assert split_dataset(exams, seed=5).as_dict() != split_dataset(exams, seed=6).as_dict()


def test_split_random_datasets():
    rng = np.random.default_rng(0)
    for _ in range(40):
        exams = random_exams(rng, int(rng.integers(5, 150)))
        ratios = (0.67, 0.13, 0.20)
        assert check_split(exams, split_dataset(exams, ratios, seed=int(rng.integers(1000))), ratios) < 1.0


def test_split_small_stratum_warns():
    exams = [exam(f"c{i}") for i in range(10)] + [exam("odd", "d", [("mass", "malignant")])]
    s = split_dataset(exams)
    assert any("fewer than" in w for w in s.warnings)


def test_split_preassigned_preserved():
    exams = random_exams(np.random.default_rng(1), 120, preassign=True)
    s = split_dataset(exams)
    where = s.split_of()
    for e in exams:
        if e.preassigned_split == "test":
            assert where[e.case_id] == "test"
        elif e.preassigned_split == "train":
            assert where[e.case_id] in ("train", "validation")


def test_split_reported_sizes():
    exams = reported_split_exams()
    assert len(exams) == 2254
    s = split_dataset(exams, REPORTED_RATIOS, seed=0)
    assert (len(s.train), len(s.validation), len(s.test)) == (1511, 290, 453)


def test_split_errors():
    exams = [exam("a"), exam("a")]
    with pytest.raises(ValueError, match="unique"):
        split_dataset(exams)
    with pytest.raises(ValueError):
        split_dataset([exam("a")], (0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        split_dataset([exam("a")], strata_keys=("age",))


def test_split_report_roundtrip(tmp_path):
    exams = random_exams(np.random.default_rng(2), 30)
    s = split_dataset(exams)
    write_split_report(s, exams, tmp_path / "split.csv")
    back = read_split_report(tmp_path / "split.csv")
    assert back.as_dict() == s.as_dict()
    header = (tmp_path / "split.csv").read_text().splitlines()[0]
    assert header == "case_id,split,density,lesion_category,pathology_category"
