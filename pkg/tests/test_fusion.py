import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mammofuse.fusion import (CaseRecord, ContractError, EmbeddingNet, EmbeddingNetConfig, FusionConfig, FusionLayout,
                              Normalizer, build_feature_bundle, build_score_vector, decide, default_grid,
                              ensemble_max, feature_fusion_train_config, fit_normalizer, max_detection_confidence,
                              mlp_hidden_grid, predict_patient, predict_patients, read_cache, select_detections,
                              train_feature_fusion, train_score_fusion, write_cache)
from mammofuse.container import IntegrityError
from oracles import (enumerate_fusion_cases, make_detection, oracle_localizer_features, oracle_score_vector,
                     oracle_slots)

FW = 8


def _case(rng, case_id="c0", lesion=0, fw=FW, n_dets=3):
    dets = []
    for v in range(4):
        conf = np.sort(rng.random(n_dets))[::-1]
        dets.append([make_detection(int(rng.integers(0, 4)), float(c), fw, float(rng.random())) for c in conf])
    return CaseRecord(case_id, float(rng.random()), rng.random(4 * fw), rng.random(4), rng.random((4, fw)),
                      dets, rng.random((4, fw)), lesion=lesion, malignancy=int(rng.integers(0, 2)),
                      dense=int(rng.integers(0, 2)), p_density_views=rng.random(4))


def _separable(rng, n_cases, fw=FW):
    recs = []
    for i in range(n_cases):
        y = i % 2
        r = _case(rng, f"c{i}", lesion=y, fw=fw)
        r.p_findings = r.p_findings * 0.3 + 0.6 * y
        r.feat_findings = r.feat_findings + 2.0 * y
        recs.append(r)
    return recs


# --- layout ---

def test_layout_slots_match_oracle():
    for n, dens in itertools.product(range(1, 6), (True, False)):
        lay = FusionLayout(n, "lesion", dens)
        assert lay.slots() == oracle_slots(n, dens)
        assert len(lay) == len(oracle_slots(n, dens)) == int(dens) + 4 + 4 * n


def test_layout_json_roundtrip():
    lay = FusionLayout(4, "malignancy", False, feature_width=32)
    assert FusionLayout.from_json(lay.to_json()) == lay


def test_fusion_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(n=0)
    with pytest.raises(ValueError):
        FusionConfig(n=6)
    with pytest.raises(ValueError):
        FusionConfig(target="density")
    assert FusionConfig(2, "malignancy", False).tag == "malignancy_n2_nodensity"


def test_select_requires_sorted():
    dets = [make_detection(0, 0.2, 2, 0), make_detection(0, 0.9, 2, 0)]
    with pytest.raises(ContractError):
        select_detections(dets, "lesion", 2)


def test_select_malignancy_filter():
    dets = [make_detection(c, p, 2, 0) for c, p in zip((0, 1, 2, 3), (0.9, 0.8, 0.7, 0.6))]
    assert select_detections(dets, "lesion", 3) == [0, 1, 2]
    assert select_detections(dets, "malignancy", 3) == [1, 3]


def test_score_vector_zero_pads():
    dets = [[make_detection(1, 0.7, 2, 0)], [], [], []]
    v = build_score_vector(0.4, [0.1, 0.2, 0.3, 0.4], dets, FusionConfig(2, "lesion", True))
    assert v.values.tolist() == [0.4, 0.1, 0.2, 0.3, 0.4, 0.7, 0.0] + [0.0] * 6


def test_score_vector_contract_errors():
    with pytest.raises(ContractError):
        build_score_vector(None, [0.1] * 4, [[]] * 4, FusionConfig(1, "lesion", True))
    with pytest.raises(ContractError):
        build_score_vector(0.5, [0.1] * 3, [[]] * 4, FusionConfig(1))
    v = build_score_vector(None, [0.1] * 4, [[]] * 4, FusionConfig(1, "lesion", False))
    assert len(v.values) == 8


def test_feature_bundle_errors_name_branch():
    cfg = FusionConfig(1)
    bg = np.zeros((4, 4))
    with pytest.raises(ContractError, match="density"):
        build_feature_bundle(np.zeros(7), np.zeros((4, 4)), [[]] * 4, bg, cfg)
    with pytest.raises(ContractError, match="findings"):
        build_feature_bundle(np.zeros(16), np.zeros((3, 4)), [[]] * 4, bg, cfg)
    with pytest.raises(ContractError, match="localizer"):
        build_feature_bundle(np.zeros(16), np.zeros((4, 4)), [[make_detection(0, 0.5, 3, 0)], [], [], []], bg, cfg)


def test_fusion_oracle_sample():
    """A slice of the exhaustive enumeration; the acceptance suite runs all of it."""
    for idx, (n, target, dens, inp) in enumerate(enumerate_fusion_cases()):
        if idx % 37:
            continue
        cfg = FusionConfig(n, target, dens)
        v = build_score_vector(inp["p_density"], inp["p_findings"], inp["detections"], cfg)
        want = oracle_score_vector(inp["p_density"], inp["p_findings"], inp["detections"], n, target, dens)
        np.testing.assert_array_equal(v.values, want)
        b = build_feature_bundle(inp["feat_density"], inp["feat_findings"], inp["detections"], inp["background"], cfg)
        feats, present = oracle_localizer_features(inp["detections"], inp["background"], n, target)
        np.testing.assert_array_equal(b.localizer, feats)
        np.testing.assert_array_equal(b.presence, present)


def test_score_and_feature_share_selection():
    rng = np.random.default_rng(1)
    for _ in range(50):
        r = _case(rng, n_dets=int(rng.integers(0, 7)))
        for target in ("lesion", "malignancy"):
            cfg = FusionConfig(3, target, True)
            v = r.score_vector(cfg).values[5:].reshape(4, 3)
            b = r.feature_bundle(cfg)
            assert np.array_equal(v > 0, b.presence)


# --- normalizer ---

def test_normalizer_maps_training_into_range():
    rng = np.random.default_rng(0)
    cfg = FusionConfig(2)
    bundles = [_case(rng).feature_bundle(cfg) for _ in range(20)]
    norm = fit_normalizer(bundles)
    for b in bundles:
        z = norm.apply(b).flatten()
        assert z.min() >= -1.0 and z.max() <= 1.0
    stacked = np.stack([norm.apply(b).flatten() for b in bundles])
    assert np.all(stacked.min(0) == -1.0) and np.all(stacked.max(0) == 1.0)


def test_normalizer_clamps_and_degenerate():
    norm = Normalizer(np.array([0.0, 5.0, -1.0]), np.array([2.0, 5.0, 1.0]))
    z = norm.transform(np.array([4.0, 7.0, -3.0]))
    assert z.tolist() == [1.0, 0.0, -1.0]
    assert norm.transform(np.array([1.0, 5.0, 0.0])).tolist() == [0.0, 0.0, 0.0]
    with pytest.raises(ContractError):
        norm.transform(np.zeros(2))
    with pytest.raises(ValueError):
        fit_normalizer([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3), min_size=1, max_size=10),
       st.lists(st.floats(-1e7, 1e7), min_size=3, max_size=3))
def test_normalizer_output_bounded(rows, probe):
    x = np.array(rows)
    norm = Normalizer(x.min(0), x.max(0))
    z = norm.transform(np.array(probe))
    assert np.all(np.abs(z) <= 1.0)
    assert np.all(np.abs(norm.transform(x)) <= 1.0)


def test_bundle_roundtrip_values():
    rng = np.random.default_rng(2)
    b = _case(rng).feature_bundle(FusionConfig(3))
    b2 = b.with_values(b.flatten())
    np.testing.assert_array_equal(b2.flatten(), b.flatten())
    assert b2.layout == b.layout


# --- ensembles ---

def test_ensemble_max():
    assert ensemble_max("lesion", p_findings=[0.1, 0.7, 0.3, 0.2]) == 0.7
    dets = [[make_detection(0, 0.9, 2, 0), make_detection(1, 0.4, 2, 0)], [make_detection(3, 0.6, 2, 0)], [], []]
    assert ensemble_max("malignancy", detections=dets) == 0.6
    assert ensemble_max("malignancy", detections=[[make_detection(0, 0.9, 2, 0)], [], [], []]) == 0.0
    assert max_detection_confidence(dets) == 0.9
    with pytest.raises(ValueError):
        ensemble_max("density", p_findings=[0.1])
    with pytest.raises(ContractError):
        ensemble_max("lesion")


@given(st.lists(st.floats(0, 1), min_size=4, max_size=4))
def test_ensemble_max_is_upper_bound(p):
    m = ensemble_max("lesion", p_findings=p)
    assert all(m >= v for v in p) and m in p


def test_decide_threshold():
    assert decide(0.5) and not decide(0.4999) and decide(0.3, 0.3)


# --- meta-models ---

def test_mlp_grid_shapes():
    assert mlp_hidden_grid(13) == [(13,), (13, 13), (13, 6)]
    assert len(default_grid("svm_rbf", 5)) == 9
    assert [g["n_estimators"] for g in default_grid("random_forest", 5)] == [3, 5, 7, 10, 15, 20]
    with pytest.raises(ValueError):
        default_grid("xgboost", 5)


@pytest.mark.parametrize("kind", ["mlp", "svm_rbf", "random_forest"])
def test_score_fusion_learns_and_predicts(kind):
    rng = np.random.default_rng(0)
    recs = _separable(rng, 40)
    cfg = FusionConfig(2)
    x = [r.score_vector(cfg) for r in recs]
    y = [r.lesion for r in recs]
    grid = default_grid(kind, len(x[0].values))[-3:]
    head = train_score_fusion(x[:30], y[:30], kind, (x[30:], y[30:]), grid=grid, seed=0)
    assert len(head.grid_log) == 3
    assert head.val_auc == max(e.val_auc for e in head.grid_log)
    p = predict_patients(head, recs[30:])
    assert p.shape == (10,) and np.all((p >= 0) & (p <= 1))
    assert predict_patient(head, recs[30]) == pytest.approx(p[0])
    assert head.val_auc >= 0.9


def test_score_fusion_single_class():
    rng = np.random.default_rng(0)
    x = [r.score_vector(FusionConfig(1)) for r in _separable(rng, 10)]
    with pytest.raises(ValueError, match="single class"):
        train_score_fusion(x, [1] * 10, "svm_rbf", (x, [0, 1] * 5))


def test_predict_layout_mismatch():
    rng = np.random.default_rng(0)
    recs = _separable(rng, 20)
    x = [r.score_vector(FusionConfig(2)) for r in recs]
    y = [r.lesion for r in recs]
    head = train_score_fusion(x, y, "random_forest", (x, y), grid=[{"n_estimators": 3}])
    wrong = recs[0].score_vector(FusionConfig(3))
    with pytest.raises(ContractError, match="does not match"):
        predict_patient(head, wrong)
    with pytest.raises(ContractError):
        predict_patient(head, recs[0].feature_bundle(FusionConfig(2)))


def test_embedding_net_shapes():
    for dens in (True, False):
        cfg = EmbeddingNetConfig(16, 3, dens)
        net = EmbeddingNet(cfg)
        d = torch.zeros(5, 4, 16) if dens else None
        out = net((d, torch.zeros(5, 4, 16), torch.zeros(5, 12, 16)))
        assert out.shape == (5, 2)
    with pytest.raises(ValueError):
        EmbeddingNetConfig(12, 1)


def test_feature_fusion_trains():
    rng = np.random.default_rng(0)
    recs = _separable(rng, 48)
    cfg = FusionConfig(2)
    b = [r.feature_bundle(cfg) for r in recs]
    y = [r.lesion for r in recs]
    norm = fit_normalizer(b[:36])
    model = train_feature_fusion(b[:36], y[:36], (b[36:], y[36:]), norm,
                                 train_cfg=feature_fusion_train_config(seed=0, max_epochs=30))
    p = predict_patients(model, recs[36:])
    assert np.all(np.isfinite(p))
    from mammofuse.evalkit import roc_auc
    assert roc_auc(p, y[36:])[0] >= 0.9
    with pytest.raises(ContractError):
        predict_patient(model, recs[0].feature_bundle(FusionConfig(1)))


# --- cache ---

def test_cache_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    recs = [_case(rng, f"case{i}", lesion=i % 2, n_dets=i % 4) for i in range(6)]
    path = tmp_path / "val.cache"
    write_cache(path, recs, "validation", {"seed": 7})
    back, header = read_cache(path)
    assert header["split"] == "validation" and header["seed"] == 7
    assert [r.case_id for r in back] == [r.case_id for r in recs]
    for a, b in zip(recs, back):
        for cfg in (FusionConfig(3, "lesion"), FusionConfig(2, "malignancy", False)):
            np.testing.assert_array_equal(a.score_vector(cfg).values, b.score_vector(cfg).values)
            np.testing.assert_array_equal(a.feature_bundle(cfg).flatten(), b.feature_bundle(cfg).flatten())
        assert (a.lesion, a.malignancy, a.dense) == (b.lesion, b.malignancy, b.dense)


def test_cache_deterministic_bytes(tmp_path):
    rng = np.random.default_rng(4)
    recs = [_case(rng, f"case{i}") for i in range(3)]
    write_cache(tmp_path / "a", recs, "test")
    write_cache(tmp_path / "b", recs, "test")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_cache_corruption(tmp_path):
    rng = np.random.default_rng(4)
    path = tmp_path / "c"
    write_cache(path, [_case(rng)], "test")
    data = bytearray(path.read_bytes())
    data[-3] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(IntegrityError):
        read_cache(path)
    with pytest.raises(ContractError):
        write_cache(tmp_path / "d", [], "test")
