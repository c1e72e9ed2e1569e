"""Stage-wise experiment: data, split, task models, fusion input cache, fusion heads, evaluation.

Every stage reads its inputs from and writes its outputs to one run directory, so stages
can be rerun independently (for instance fusion retraining without task retraining).
"""

from __future__ import annotations

import json
import logging
import os
import pickle
import shutil
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import container
from .config import ConfigError, PipelineConfig
from .dataset import (CLASS_NAMES, VIEWS, Dataset, DatasetSplit, Exam, ImageRef, ManifestError, derive_case_labels,
                      load_manifest, read_split_report, split_dataset, write_split_report)
from .evalkit import Predictions, build_report, classification_metrics, format_rows, froc, roc_auc
from .evalkit.detection import FROCResult
from .evalkit.report import (REFERENCE_FROC, REFERENCE_PATIENT_AUC, fmt, write_curves_csv, write_curves_svg,
                             write_report_files)
from .fusion import (CaseRecord, EmbeddingNet, EmbeddingNetConfig, FeatureFusionModel, FusionConfig, FusionLayout,
                     Normalizer, ScoreFusionHead, ensemble_max, fit_normalizer, max_detection_confidence,
                     predict_patients, read_cache, train_feature_fusion, train_score_fusion, write_cache)
from .preprocess import (STANDARD_AUGMENTATION, AugmentationPolicy, density_profile, findings_profile,
                         localizer_profile)
from .synthgen import SynthSpec, emit, generate_dataset
from .taskmodels import (BackboneConfig, LocalizerConfig, TrainingLog, collect_patches, detect_view,
                         load_checkpoint, predict_density, predict_density_views, predict_findings_batch,
                         save_checkpoint, train_density_patient, train_density_view, train_findings,
                         train_localizer, train_patch_classifier)
from .taskmodels.density import prepare_exam_views
from .taskmodels.findings import prepare_findings_views, view_label

log = logging.getLogger(__name__)


class MissingArtifact(RuntimeError):
    pass


class DataError(RuntimeError):
    pass


SPLITS = ("train", "validation", "test")
TASK_CHECKPOINTS = {"localizer": "localizer.ckpt", "findings": "findings.ckpt", "density": "density_patient.ckpt"}

DENSITY_VIEW_AUG = replace(STANDARD_AUGMENTATION, shear=True)
DENSITY_PATIENT_AUG = replace(STANDARD_AUGMENTATION, horizontal_flip=False, blur=True, grid_distortion=True)
PATCH_AUG = replace(STANDARD_AUGMENTATION, vertical_flip=True, transpose=True, shift_scale_rotate=True)
FINDINGS_AUG = replace(STANDARD_AUGMENTATION, vertical_flip=True)
LOCALIZER_AUG = AugmentationPolicy(horizontal_flip=True, box_jitter_ratio=0.005)


def setup_determinism(cfg: PipelineConfig) -> None:
    torch.set_num_threads(cfg["threads"])
    torch.use_deterministic_algorithms(True, warn_only=True)


class Run:
    """Paths and lazily loaded state of one run directory."""

    def __init__(self, cfg: PipelineConfig, out: os.PathLike):
        self.cfg = cfg
        self.out = Path(out)
        self._dataset: Optional[Dataset] = None
        self._split: Optional[DatasetSplit] = None
        self._prepared: Dict[str, Dict[str, np.ndarray]] = {}

    # ------------------------------------------------------------------ paths
    def path(self, *parts: str) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    @property
    def manifest(self) -> Path:
        if self.cfg["data.source"] == "manifest":
            return Path(self.cfg["data.manifest"])
        return self.out / "data" / "manifest.csv"

    def checkpoint(self, name: str) -> Path:
        return self.path("checkpoints", name)

    def require(self, path: Path, what: str) -> Path:
        if not path.exists():
            raise MissingArtifact(f"missing {what}: {path}")
        return path

    # ------------------------------------------------------------------ configs
    def scale(self):
        return self.cfg["preprocess.scale"]

    def backbone(self, profile, **kw) -> BackboneConfig:
        return BackboneConfig(feature_width=self.cfg["backbone.feature_width"], input_profile=profile, **kw)

    def density_backbone(self) -> BackboneConfig:
        return self.backbone(density_profile(self.scale()))

    def findings_backbone(self) -> BackboneConfig:
        return self.backbone(findings_profile(self.scale()), dropout_rate=0.5)

    def localizer_config(self) -> LocalizerConfig:
        s = float(self.scale()) * 8  # anchor sizes are tuned for the 1/8 profile
        base = LocalizerConfig()
        return LocalizerConfig(
            backbone=self.backbone(localizer_profile(self.scale()), stage_strides=(2, 2, 1)),
            anchor_sizes=tuple((w * s, h * s) for w, h in base.anchor_sizes),
            score_threshold=self.cfg["localizer.score_threshold"],
            report_threshold=self.cfg["localizer.report_threshold"],
            max_detections=self.cfg["localizer.max_detections"])

    # ------------------------------------------------------------------ data
    def dataset(self) -> Dataset:
        if self._dataset is None:
            path = self.require(self.manifest, "manifest (run generate first)")
            try:
                ds = load_manifest(path)
            except (ManifestError, OSError) as exc:
                raise DataError(str(exc))
            for rej in ds.rejected:
                log.warning("rejected case %s: %s", rej.case_id, rej.reason)
            for e in ds.exams:  # decode every image once
                e.images = {v: ImageRef(array=ref.load()) for v, ref in e.images.items()}
            self._dataset = ds
        return self._dataset

    def split(self) -> DatasetSplit:
        if self._split is None:
            self._split = read_split_report(self.require(self.out / "split.csv", "split (run split first)"))
        return self._split

    def exams(self, split: str) -> List[Exam]:
        by_id = self.dataset().by_id()
        return [by_id[c] for c in getattr(self.split(), split)]

    def prepared(self, kind: str) -> Dict[str, np.ndarray]:
        if kind not in self._prepared:
            bb = {"density": self.density_backbone(), "findings": self.findings_backbone()}[kind]
            fn = prepare_exam_views if kind == "density" else prepare_findings_views
            self._prepared[kind] = {e.case_id: fn(e, bb) for e in self.dataset()}
        return self._prepared[kind]


# ---------------------------------------------------------------------- stages

def cmd_generate(run: Run, force: bool = False) -> Path:
    if run.cfg["data.source"] != "synthetic":
        raise ConfigError("generate needs data.source = synthetic")
    out = run.out / "data"
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} is not empty; use --force to overwrite")
        shutil.rmtree(out)
    c = run.cfg
    spec = SynthSpec(image_height=c["synth.image_height"], image_width=c["synth.image_width"],
                     n_cases=c["synth.n_cases"], malignant_fraction=c["synth.malignant_fraction"],
                     occlusion_prob=c["synth.occlusion_prob"], noise_sigma=c["synth.noise_sigma"],
                     seed=c["seed"])
    exams = generate_dataset(spec)
    return emit(exams, spec, out)


def cmd_split(run: Run) -> DatasetSplit:
    ds = run.dataset()
    split = split_dataset(ds, run.cfg["split.ratios"], seed=run.cfg["seed"])
    for w in split.warnings:
        log.warning("split: %s", w)
    write_split_report(split, ds, run.path("split.csv"))
    run._split = None
    s = run.split()
    for name in SPLITS:
        if not getattr(s, name):
            raise DataError(f"split produced an empty {name} set")
    return s


def train_density_stage(run: Run) -> None:
    train, val = run.exams("train"), run.exams("validation")
    prep = run.prepared("density")
    bb = run.density_backbone()
    tlog = TrainingLog()
    vm = train_density_view(train, val, run.cfg.train_config("density_view", augmentation=DENSITY_VIEW_AUG),
                            bb, tlog, prepared=prep)
    pm = train_density_patient(vm, train, val,
                               run.cfg.train_config("density_patient", augmentation=DENSITY_PATIENT_AUG),
                               bb, tlog, prepared=prep)
    save_checkpoint(run.checkpoint("density_view.ckpt"), vm)
    save_checkpoint(run.checkpoint("density_patient.ckpt"), pm)
    tlog.to_csv(run.path("logs", "density.csv"))


def train_findings_stage(run: Run) -> None:
    train, val = run.exams("train"), run.exams("validation")
    bb = run.findings_backbone()
    seed = run.cfg["seed"]
    size = int(round(224 * run.scale()))
    per = dict(per_lesion=run.cfg["patch.per_lesion"], per_normal=run.cfg["patch.per_normal"])
    tlog = TrainingLog()
    ptrain = collect_patches(train, bb, size, seed=seed, **per)
    pval = collect_patches(val, bb, size, seed=seed + 1, **per)
    patch = train_patch_classifier(ptrain, pval, run.cfg.train_config("patch", augmentation=PATCH_AUG), bb, tlog)
    fcfg = run.cfg.train_config("findings", augmentation=FINDINGS_AUG)
    prep = run.prepared("findings")
    fm = train_findings(patch, train, val, fcfg, bb, tlog, prepared=prep)
    save_checkpoint(run.checkpoint("patch.ckpt"), patch)
    save_checkpoint(run.checkpoint("findings.ckpt"), fm)
    tlog.to_csv(run.path("logs", "findings.csv"))
    if run.cfg["findings.ablation_scratch"]:
        slog = TrainingLog()
        scratch = train_findings(None, train, val, fcfg, bb, slog, prepared=prep)
        save_checkpoint(run.checkpoint("findings_scratch.ckpt"), scratch)
        slog.to_csv(run.path("logs", "findings_scratch.csv"))


def train_localizer_stage(run: Run) -> None:
    tlog = TrainingLog()
    model = train_localizer(run.exams("train"), run.exams("validation"),
                            run.cfg.train_config("localizer", augmentation=LOCALIZER_AUG),
                            run.localizer_config(), tlog)
    save_checkpoint(run.checkpoint("localizer.ckpt"), model)
    tlog.to_csv(run.path("logs", "localizer.csv"))


def _require_tasks(run: Run) -> None:
    for stage, name in TASK_CHECKPOINTS.items():
        if not run.checkpoint(name).exists():
            raise MissingArtifact(f"missing checkpoint: {stage}")


def _load(run: Run, name: str, kind: str):
    return load_checkpoint(run.require(run.checkpoint(name), f"checkpoint: {kind}"), kind)[0]


def cmd_extract(run: Run) -> Dict[str, int]:
    """Writes one fusion-input cache per split with one record per case."""
    _require_tasks(run)
    dens = _load(run, "density_patient.ckpt", "density_patient")
    dview = _load(run, "density_view.ckpt", "density_view")
    find = _load(run, "findings.ckpt", "findings")
    loc = _load(run, "localizer.ckpt", "localizer")
    scratch_path = run.checkpoint("findings_scratch.ckpt")
    scratch = load_checkpoint(scratch_path, "findings")[0] if scratch_path.exists() else None
    dprep, fprep = run.prepared("density"), run.prepared("findings")
    counts = {}
    for split in SPLITS:
        records, extra = [], []
        for e in run.exams(split):
            p_d, f_d = predict_density(dens, e, dprep[e.case_id])
            p_dv = predict_density_views(dview, e, dprep[e.case_id])
            p_f, f_f = predict_findings_batch(find, fprep[e.case_id])
            dets, bgs = zip(*(detect_view(loc, e.image(v)) for v in VIEWS))
            lab = derive_case_labels(e)
            records.append(CaseRecord(e.case_id, p_d, f_d, p_f, f_f, [list(d) for d in dets], np.stack(bgs),
                                      int(lab.has_lesion), int(lab.is_malignant),
                                      int(lab.density_super == "dense"), p_dv))
            extra.append(predict_findings_batch(scratch, fprep[e.case_id])[0] if scratch is not None
                         else np.full(len(VIEWS), np.nan))
        if not records:
            raise DataError(f"empty {split} split")
        write_cache(run.path("cache", f"{split}.cache"), records, split)
        container.save(run.path("cache", f"{split}.scratch"), {"p_findings": np.stack(extra)},
                       {"case_ids": [r.case_id for r in records]})
        counts[split] = len(records)
    return counts


def load_records(run: Run, split: str) -> List[CaseRecord]:
    path = run.require(run.out / "cache" / f"{split}.cache", "fusion input cache (run extract first)")
    return read_cache(path)[0]


# ---------------------------------------------------------------------- fusion heads

def _variants(cfg: PipelineConfig) -> List[Tuple[str, bool]]:
    return [(t, d) for t in cfg["fusion.targets"] for d in ((True, False) if cfg["fusion.ablation"] else (True,))]


def _variant_tag(target: str, include_density: bool) -> str:
    return target + ("" if include_density else "_nodensity")


def save_score_head(path: Path, head: ScoreFusionHead) -> None:
    blob = np.frombuffer(pickle.dumps(head.estimator, protocol=4), dtype=np.uint8)
    container.save(path, {"estimator": blob}, {
        "kind": "score_fusion", "head": head.kind, "params": {k: list(v) if isinstance(v, tuple) else v
                                                             for k, v in head.params.items()},
        "layout": json.loads(head.layout.to_json()), "val_auc": head.val_auc,
        "grid": [{"params": {k: list(v) if isinstance(v, tuple) else v for k, v in g.params.items()},
                  "val_auc": g.val_auc} for g in head.grid_log]})


def load_score_head(path: Path) -> ScoreFusionHead:
    arrays, meta = container.load(path)
    if meta.get("kind") != "score_fusion":
        raise container.IntegrityError(f"{path}: not a score-fusion head")
    est = pickle.loads(arrays["estimator"].tobytes())
    return ScoreFusionHead(meta["head"], meta["params"], est, FusionLayout(**meta["layout"]), meta["val_auc"])


def save_feature_model(path: Path, model: FeatureFusionModel) -> None:
    arrays = {f"net.{k}": v.detach().numpy() for k, v in model.net.state_dict().items()}
    arrays["normalizer.lo"], arrays["normalizer.hi"] = model.normalizer.lo, model.normalizer.hi
    c = model.net.cfg
    container.save(path, arrays, {"kind": "feature_fusion", "layout": json.loads(model.layout.to_json()),
                                  "net": {"channels": c.channels, "hidden": c.hidden, "dropout": c.dropout}})


def load_feature_model(path: Path) -> FeatureFusionModel:
    arrays, meta = container.load(path)
    if meta.get("kind") != "feature_fusion":
        raise container.IntegrityError(f"{path}: not a feature-fusion model")
    layout = FusionLayout(**meta["layout"])
    net = EmbeddingNet(EmbeddingNetConfig.for_layout(layout, **meta["net"]))
    net.load_state_dict({k[4:]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith("net.")})
    net.eval()
    return FeatureFusionModel(net, Normalizer(arrays["normalizer.lo"], arrays["normalizer.hi"]), layout)


def cmd_train_fusion(run: Run) -> dict:
    """Grid over n (and head kinds / hyper-parameters for score fusion), chosen on validation AUC."""
    _require_tasks(run)
    cfg = run.cfg
    train, val = load_records(run, "train"), load_records(run, "validation")
    seed = cfg["seed"]
    summary = {}
    tlog = TrainingLog()
    for target, dens in _variants(cfg):
        tag = _variant_tag(target, dens)
        yt = [r.label(target) for r in train]
        yv = [r.label(target) for r in val]
        best_per_kind: Dict[str, Tuple[float, int, ScoreFusionHead]] = {}
        for n in cfg["fusion.n_grid"]:
            fc = FusionConfig(n, target, dens)
            xt = [r.score_vector(fc) for r in train]
            xv = [r.score_vector(fc) for r in val]
            for kind in cfg["fusion.heads"]:
                head = train_score_fusion(xt, yt, kind, (xv, yv), seed=seed)
                if kind not in best_per_kind or head.val_auc > best_per_kind[kind][0]:
                    best_per_kind[kind] = (head.val_auc, n, head)
        score_rows = []
        for kind in cfg["fusion.heads"]:
            auc, n, head = best_per_kind[kind]
            save_score_head(run.path("fusion", f"score_{kind}_{tag}.ckpt"), head)
            score_rows.append({"head": kind, "n": n, "params": head.params, "val_auc": auc})
        best_kind = max(cfg["fusion.heads"], key=lambda k: (best_per_kind[k][0], -cfg["fusion.heads"].index(k)))
        save_score_head(run.path("fusion", f"score_{tag}.ckpt"), best_per_kind[best_kind][2])

        best_feat = None
        for n in cfg["fusion.n_grid"]:
            fc = FusionConfig(n, target, dens)
            bt = [r.feature_bundle(fc) for r in train]
            bv = [r.feature_bundle(fc) for r in val]
            norm = fit_normalizer(bt)
            model = train_feature_fusion(
                bt, yt, (bv, yv), norm,
                EmbeddingNetConfig.for_layout(bt[0].layout, channels=cfg["fusion.channels"],
                                              hidden=cfg["fusion.hidden"]),
                cfg.train_config("fusion"), tlog)
            auc = roc_auc(model.predict_proba(bv), yv)[0]
            if best_feat is None or auc > best_feat[0]:
                best_feat = (auc, n, model)
        save_feature_model(run.path("fusion", f"feature_{tag}.ckpt"), best_feat[2])
        summary[tag] = {"score": {"head": best_kind, "n": best_per_kind[best_kind][1],
                                  "val_auc": best_per_kind[best_kind][0], "per_head": score_rows},
                        "feature": {"n": best_feat[1], "val_auc": best_feat[0]}}
    tlog.to_csv(run.path("logs", "fusion.csv"))
    with open(run.path("fusion", "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=list)
    return summary


# ---------------------------------------------------------------------- evaluation

def _froc_images(exams: Sequence[Exam], records: Sequence[CaseRecord], abnormal_only: bool):
    out = []
    for e, r in zip(exams, records):
        for v, dets in zip(VIEWS, r.detections):
            gts = e.lesions_in(v)
            if abnormal_only and not gts:
                continue
            out.append((dets, gts))
    return out


def cmd_evaluate(run: Run) -> dict:
    cfg = run.cfg
    test = load_records(run, "test")
    if not test:
        raise DataError("empty test split")
    for tag in (_variant_tag(t, d) for t, d in _variants(cfg)):
        for kind in ("score", "feature"):
            run.require(run.out / "fusion" / f"{kind}_{tag}.ckpt", "trained fusion heads (run train fusion)")
    by_id = run.dataset().by_id()
    exams = [by_id[r.case_id] for r in test]
    ids = [r.case_id for r in test]
    rep_dir = run.out / "report"
    if rep_dir.exists():
        shutil.rmtree(rep_dir)
    rep_dir.mkdir(parents=True)
    metrics: dict = {"n_test_cases": len(test)}
    text: List[str] = []

    # density: patient model D against the mean of the view model's four scores
    dense = [r.dense for r in test]
    p_d = [r.p_density for r in test]
    p_mean = [float(np.mean(r.p_density_views)) for r in test]
    dens_rows, dens_curves = [], {}
    for name, s in (("D", p_d), ("mean(D^v)", p_mean)):
        auc, curve = roc_auc(s, dense) if 0 < sum(dense) < len(dense) else (None, [])
        dens_curves[name] = curve
        for t in cfg["evaluate.density_thresholds"]:
            m = classification_metrics(s, dense, t)
            dens_rows.append({"model": name, "threshold": t, "auc": auc, "acc": m["accuracy"], "f1": m["f1"],
                              "tpr": m["tpr"], "tnr": m["tnr"]})
    metrics["density"] = dens_rows
    write_curves_csv(rep_dir / "density_roc.csv", dens_curves)
    write_curves_svg(rep_dir / "density_roc.svg", dens_curves, "false-positive rate", "true-positive rate",
                     "density ROC", (0, 1))
    text += ["[density]\n", format_rows(dens_rows)]

    # findings: view-level AUC of the pre-trained and the from-scratch model
    yv = [view_label(e, v) for e in exams for v in VIEWS]
    pf = np.concatenate([r.p_findings for r in test])
    find_rows = [{"model": "F", "pretrained": True, "auc": roc_auc(pf, yv)[0]}]
    scratch_path = run.out / "cache" / "test.scratch"
    if scratch_path.exists():
        ps = container.load(scratch_path)[0]["p_findings"].ravel()
        if not np.isnan(ps).any():
            find_rows.append({"model": "F", "pretrained": False, "auc": roc_auc(ps, yv)[0]})
    metrics["findings"] = find_rows
    text += ["[findings]\n", format_rows(find_rows)]

    # localizer: per-class FROC on abnormal test images, false positives on normal images
    loc_rows, froc_curves = [], {}
    images = _froc_images(exams, test, abnormal_only=True)
    for k, cname in enumerate(CLASS_NAMES):
        try:
            f: FROCResult = froc(images, class_filter=[k])
        except ValueError:
            continue
        froc_curves[cname] = f.curve
        row = {"class": cname, "n_lesions": f.n_lesions, "n_images": f.n_images}
        row.update({f"tpr@{q:g}fpi": f.tpr_at_fpi(q) for q in cfg["evaluate.froc_fpi"]})
        ref = REFERENCE_FROC.get(cname)
        if ref:
            row["reference"] = f"{ref[0]}@{ref[1]}"
        loc_rows.append(row)
    normal = _froc_images(exams, test, abnormal_only=False)
    normal = [d for d, g in normal if not g]
    thr = cfg["localizer.report_threshold"]
    loc_rows.append({"class": "normal_images", "n_images": len(normal),
                     "false_positives": sum(1 for d in normal for x in d if x.confidence >= thr),
                     "threshold": thr})
    metrics["localizer"] = loc_rows
    write_curves_csv(rep_dir / "localizer_froc.csv", froc_curves)
    max_fpi = max([p.x for c in froc_curves.values() for p in c] + [1.0])
    write_curves_svg(rep_dir / "localizer_froc.svg", froc_curves, "false positives per image", "sensitivity",
                     "localizer FROC", (0, max_fpi))
    text += ["[localizer]\n", format_rows(loc_rows)]

    # patient-level meta-models and baselines
    patient = {}
    for target in cfg["fusion.targets"]:
        preds = []
        for dens in ((True, False) if cfg["fusion.ablation"] else (True,)):
            tag = _variant_tag(target, dens)
            star = "" if dens else "*"
            sh = load_score_head(run.out / "fusion" / f"score_{tag}.ckpt")
            fm = load_feature_model(run.out / "fusion" / f"feature_{tag}.ckpt")
            preds.append(Predictions(f"P_score{star}", ids, predict_patients(sh, test)))
            preds.append(Predictions(f"P_feat{star}", ids, predict_patients(fm, test)))
        # baselines: max findings score, and max localizer confidence (malignant classes for malignancy)
        preds.append(Predictions("max(p_F)", ids, [ensemble_max("lesion", p_findings=r.p_findings) for r in test]))
        preds.append(Predictions("max(p_L)", ids, [
            ensemble_max("malignancy", detections=r.detections) if target == "malignancy"
            else max_detection_confidence(r.detections) for r in test]))
        labels = {r.case_id: r.label(target) for r in test}
        rep = build_report(preds, labels, target, cfg["evaluate.threshold"])
        for row in rep.rows:
            ref = REFERENCE_PATIENT_AUC.get((row["model"], target))
            row["reference_auc"] = ref
        write_report_files(rep, rep_dir, f"patient_{target}")
        patient[target] = rep.rows
        text += [f"[patient:{target}]\n", format_rows(rep.rows)]
    metrics["patient"] = patient

    # score-fusion heads: best configuration per head kind, evaluated on test
    head_rows = []
    for target, dens in _variants(cfg):
        tag = _variant_tag(target, dens)
        for kind in cfg["fusion.heads"]:
            h = load_score_head(run.out / "fusion" / f"score_{kind}_{tag}.ckpt")
            p = predict_patients(h, test)
            y = [r.label(target) for r in test]
            head_rows.append({"target": target, "density": dens, "head": kind, "n": h.layout.n,
                              "params": json.dumps(h.params, sort_keys=True), "val_auc": h.val_auc,
                              "test_auc": roc_auc(p, y)[0]})
    metrics["score_heads"] = head_rows
    text += ["[score_fusion_heads]\n", format_rows(head_rows)]

    (rep_dir / "report.txt").write_text("".join(text), encoding="utf-8")
    with open(rep_dir / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=1, sort_keys=True)
    return metrics


def run_all(cfg: PipelineConfig, out: os.PathLike, force: bool = True) -> dict:
    """Every stage in order; returns the evaluation metrics."""
    setup_determinism(cfg)
    run = Run(cfg, out)
    run.out.mkdir(parents=True, exist_ok=True)
    cfg.write(run.out / "config.txt")
    if cfg["data.source"] == "synthetic":
        cmd_generate(run, force=force)
    cmd_split(run)
    train_density_stage(run)
    train_findings_stage(run)
    train_localizer_stage(run)
    cmd_extract(run)
    cmd_train_fusion(run)
    return cmd_evaluate(run)
