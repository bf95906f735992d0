"""Evaluation: accuracy/macro-F1/confusion reports, the cross-test suite,
the patch-position study, and the robustness attack suite.

Inference always runs on the full (preprocessed and magnified) image rather
than patches; the encoder's global pooling makes that size change free.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace, field
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np
import torch

from .core import (DatasetManifest, LabelSpace, config_with, load_image,
                   resolve_record_path, rng_stream, to_uint8, from_uint8,
                   filter_split)
from .model import AttributionNet, images_to_tensor, load_checkpoint
from .sampler import (PatchPlan, equalize_then_magnify, grid_patch_at,
                      preprocess, source_kind)
from .trainer import TrainRun, run_step, plan_from_config

EVAL_BATCH = 8


# ---------------------------------------------------------------------------
# reports

@dataclass
class EvalReport:
    split_name: str
    accuracy: float
    macro_f1: float
    confusion: np.ndarray            # rows = true class, cols = predicted
    class_names: tuple[str, ...]
    excluded_classes: tuple[str, ...] = ()
    per_position: Optional[tuple[float, ...]] = None

    def to_dict(self) -> dict:
        d = {"split_name": self.split_name, "accuracy": self.accuracy,
             "macro_f1": self.macro_f1, "n_total": int(self.confusion.sum()),
             "class_names": list(self.class_names),
             "excluded_classes": list(self.excluded_classes)}
        if self.per_position is not None:
            d["per_position"] = list(self.per_position)
        return d

    def to_text(self) -> str:
        lines = [f"split: {self.split_name}",
                 f"accuracy: {self.accuracy:.6f}",
                 f"macro_f1: {self.macro_f1:.6f}",
                 f"n_total: {int(self.confusion.sum())}"]
        if self.excluded_classes:
            lines.append("excluded_from_macro_f1: " + ",".join(self.excluded_classes))
        if self.per_position is not None:
            lines.append("per_position: " + ",".join(f"{a:.4f}" for a in self.per_position))
        lines.append("confusion (rows true / cols predicted, order "
                     + ",".join(self.class_names) + "):")
        for row in self.confusion:
            lines.append("  " + " ".join(f"{int(v):6d}" for v in row))
        return "\n".join(lines) + "\n"


def compute_report(y_true: np.ndarray, y_pred: np.ndarray, labels: LabelSpace,
                   split_name: str) -> EvalReport:
    """Confusion-matrix based metrics. Classes absent from y_true are
    excluded from the macro-F1 mean and flagged."""
    c = len(labels)
    confusion = np.zeros((c, c), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        confusion[t, p] += 1
    total = confusion.sum()
    accuracy = float(np.trace(confusion) / total) if total else float("nan")
    f1s, excluded = [], []
    for k in range(c):
        support = confusion[k, :].sum()
        if support == 0:
            excluded.append(labels.class_names[k])
            continue
        tp = confusion[k, k]
        predicted = confusion[:, k].sum()
        precision = tp / predicted if predicted else 0.0
        recall = tp / support
        f1s.append(2 * precision * recall / (precision + recall)
                   if precision + recall > 0 else 0.0)
    macro_f1 = float(np.mean(f1s)) if f1s else float("nan")
    return EvalReport(split_name, accuracy, macro_f1, confusion,
                      labels.class_names, tuple(excluded))


def _as_net(model) -> AttributionNet:
    if isinstance(model, AttributionNet):
        return model
    net, _, _ = load_checkpoint(model)
    return net


def predict_manifest(model, manifest: DatasetManifest, labels: LabelSpace,
                     plan: PatchPlan, manifest_base=None,
                     image_hook=None) -> tuple[np.ndarray, np.ndarray]:
    """Full-image predictions over a manifest; image_hook (if given) maps the
    loaded raw image before preprocessing (used for attacks)."""
    net = _as_net(model)
    net.eval()
    trues, preds = [], []
    with torch.no_grad():
        for start in range(0, len(manifest), EVAL_BATCH):
            chunk = manifest.records[start:start + EVAL_BATCH]
            imgs = []
            for i, r in enumerate(chunk):
                img = load_image(resolve_record_path(r, manifest_base))
                if image_hook is not None:
                    img = image_hook(start + i, img)
                img = preprocess(img, source_kind(r.source_dataset))
                imgs.append(equalize_then_magnify(img, plan))
            x = images_to_tensor(imgs)
            logits = net.classifier(net.encoder(x))
            preds.extend(logits.argmax(dim=1).tolist())
            trues.extend(labels.index_of(r.class_label) for r in chunk)
    return np.array(trues), np.array(preds)


def evaluate(model, manifest: DatasetManifest, labels: LabelSpace,
             plan: PatchPlan, manifest_base=None, split_name: str = "test",
             image_hook=None) -> EvalReport:
    manifest.validate_labels(labels)
    y_true, y_pred = predict_manifest(model, manifest, labels, plan,
                                      manifest_base, image_hook)
    return compute_report(y_true, y_pred, labels, split_name)


def cross_test_suite(model, suite: dict[str, DatasetManifest], labels: LabelSpace,
                     plan: PatchPlan, manifest_base=None) -> dict[str, EvalReport]:
    """One report per named manifest; absent splits are simply omitted."""
    net = _as_net(model)
    return {name: evaluate(net, m, labels, plan, manifest_base, split_name=name)
            for name, m in suite.items() if len(m) > 0}


def build_zoo_suite(manifest: DatasetManifest) -> dict[str, DatasetManifest]:
    """Closed-set (held-out seed-0 records) and cross-seed (seeds >= 1) pools."""
    suite = {
        "closed": filter_split(manifest, split="val", seed=0),
        "cross_seed": filter_split(manifest, split="test", seed=lambda s: s >= 1),
    }
    return {k: v for k, v in suite.items() if len(v) > 0}


def save_report(report: EvalReport, out_dir: str | Path) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{report.split_name}.report.txt").write_text(report.to_text())
    conf_path = out_dir / f"{report.split_name}.confusion.csv"
    with open(conf_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([""] + list(report.class_names))
        for name, row in zip(report.class_names, report.confusion):
            w.writerow([name] + [int(v) for v in row])
    entry = report.to_dict()
    entry["confusion_csv"] = conf_path.name
    return entry


def save_suite_summary(reports: dict[str, EvalReport], out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    summary = {name: save_report(rep, out_dir) for name, rep in reports.items()}
    path = out_dir / "summary.json"
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# attacks

ATTACK_KINDS = ("noise", "blur", "crop", "jpeg", "relight", "combination")
COMBINATION_ORDER = ("crop", "blur", "noise", "jpeg", "relight")

# sampling ranges, following the usual convention for these perturbations
DEFAULT_ATTACK_PARAMS = {
    "noise": {"sigma_max": 5.0 / 255.0},
    "blur": {"sigma_max": 3.0},
    "crop": {"area_min": 0.8},
    "jpeg": {"quality_min": 50, "quality_max": 100},
    "relight": {"gain_low": 0.8, "gain_high": 1.2, "bias_low": -0.05, "bias_high": 0.05},
}

ZERO_STRENGTH_PARAMS = {
    "noise": {"sigma_max": 0.0},
    "blur": {"sigma_max": 0.0},
    "crop": {"area_min": 1.0},
    "jpeg": {"quality_min": 100, "quality_max": 100},
    "relight": {"gain_low": 1.0, "gain_high": 1.0, "bias_low": 0.0, "bias_high": 0.0},
}

_PARAM_BOUNDS = {
    "noise": {"sigma_max": (0.0, 5.0 / 255.0)},
    "blur": {"sigma_max": (0.0, 3.0)},
    "crop": {"area_min": (0.8, 1.0)},
    "jpeg": {"quality_min": (50, 100), "quality_max": (50, 100)},
    "relight": {"gain_low": (0.8, 1.2), "gain_high": (0.8, 1.2),
                "bias_low": (-0.05, 0.05), "bias_high": (-0.05, 0.05)},
}


@dataclass
class AttackSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        base = {} if self.kind == "combination" else dict(DEFAULT_ATTACK_PARAMS[self.kind])
        base.update(self.params)
        self.params = base
        bounds = _PARAM_BOUNDS.get(self.kind, {})
        for key, (lo, hi) in bounds.items():
            v = self.params[key]
            if not (lo <= v <= hi):
                raise ValueError(f"{self.kind} parameter {key}={v} outside [{lo}, {hi}]")


def default_attack(kind: str, seed: int = 0) -> AttackSpec:
    return AttackSpec(kind, {}, seed)


def zero_strength_attack(kind: str, seed: int = 0) -> AttackSpec:
    if kind == "combination":
        raise ValueError("combination has no zero-strength form")
    return AttackSpec(kind, dict(ZERO_STRENGTH_PARAMS[kind]), seed)


def _attack_noise(img, rng, p):
    sigma = rng.uniform(0.0, p["sigma_max"])
    if sigma == 0.0:
        return img
    out = img + sigma * rng.standard_normal(img.shape, dtype=np.float32)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _attack_blur(img, rng, p):
    sigma = rng.uniform(0.0, p["sigma_max"])
    if sigma == 0.0:
        return img
    k = int(2 * np.ceil(3 * sigma) + 1)
    return np.clip(cv2.GaussianBlur(img, (k, k), sigmaX=sigma, sigmaY=sigma), 0.0, 1.0)


def _attack_crop(img, rng, p):
    h, w = img.shape[:2]
    area = rng.uniform(p["area_min"], 1.0)
    side = np.sqrt(area)
    ch, cw = max(1, round(h * side)), max(1, round(w * side))
    if (ch, cw) == (h, w):
        return img
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    crop = img[y0:y0 + ch, x0:x0 + cw]
    return np.clip(cv2.resize(crop, (w, h), interpolation=cv2.INTER_LINEAR), 0.0, 1.0)


def _attack_jpeg(img, rng, p):
    q = int(rng.integers(p["quality_min"], p["quality_max"] + 1))
    if q >= 100:  # full quality treated as no compression, the identity case
        return img
    u8 = cv2.cvtColor(to_uint8(img), cv2.COLOR_RGB2BGR)
    ok, enc = cv2.imencode(".jpg", u8, [cv2.IMWRITE_JPEG_QUALITY, q])
    if not ok:
        raise RuntimeError("jpeg encode failed")
    return from_uint8(cv2.cvtColor(cv2.imdecode(enc, cv2.IMREAD_COLOR), cv2.COLOR_BGR2RGB))


def _attack_relight(img, rng, p):
    gain = rng.uniform(p["gain_low"], p["gain_high"], size=3).astype(np.float32)
    bias = rng.uniform(p["bias_low"], p["bias_high"], size=3).astype(np.float32)
    if np.all(gain == 1.0) and np.all(bias == 0.0):
        return img
    return np.clip(img * gain + bias, 0.0, 1.0).astype(np.float32)


_ATTACK_FNS = {"noise": _attack_noise, "blur": _attack_blur, "crop": _attack_crop,
               "jpeg": _attack_jpeg, "relight": _attack_relight}


def attack(img: np.ndarray, spec: AttackSpec) -> np.ndarray:
    """Apply one attack; deterministic given (img, spec). The combination
    kind applies a uniformly drawn non-empty subset of the five base attacks
    in the fixed order crop, blur, noise, jpeg, relight."""
    img = np.ascontiguousarray(img, dtype=np.float32)
    rng = rng_stream(spec.seed, f"attack/{spec.kind}")
    if spec.kind != "combination":
        return _ATTACK_FNS[spec.kind](img, rng, spec.params)
    mask = int(rng.integers(1, 2 ** len(COMBINATION_ORDER)))
    out = img
    for bit, kind in enumerate(COMBINATION_ORDER):
        if mask >> bit & 1:
            out = _ATTACK_FNS[kind](out, rng, DEFAULT_ATTACK_PARAMS[kind])
    return out


def attack_augment_hook(base_seed: int):
    """Training-time robustness augmentation: each loaded image receives the
    combination attack under its own derived seed (deterministic per run)."""
    def hook(counter: int, img: np.ndarray) -> np.ndarray:
        return attack(img, AttackSpec("combination", {},
                                      seed=base_seed * 1_000_003 + counter))
    return hook


def robustness_eval(model, manifest: DatasetManifest, labels: LabelSpace,
                    attacks: Sequence[AttackSpec], plan: PatchPlan,
                    manifest_base=None) -> dict[str, EvalReport]:
    """Per-attack reports; every test image gets its own derived seed."""
    if not attacks:
        raise ValueError("attacks must be non-empty")
    net = _as_net(model)
    reports = {}
    for spec in attacks:
        def hook(i, img, _spec=spec):
            return attack(img, replace(_spec, params=dict(_spec.params),
                                       seed=_spec.seed * 1_000_003 + i))
        reports[spec.kind] = evaluate(net, manifest, labels, plan, manifest_base,
                                      split_name=f"attack_{spec.kind}", image_hook=hook)
    return reports


# ---------------------------------------------------------------------------
# patch-position study

STUDY_TASKS = ("architecture", "weight")


def build_study_manifests(zoo_manifest: DatasetManifest, task: str,
                          train_per_class: int, test_per_class: int,
                          weight_arch: str = "ProGAN"
                          ) -> tuple[DatasetManifest, DatasetManifest, LabelSpace]:
    """Train/test pools for the two study tasks.

    architecture: seed-0 models of every architecture, labeled by architecture.
    weight: every seed of one architecture, relabeled by model id.
    """
    if task not in STUDY_TASKS:
        raise ValueError(f"unknown study task {task!r}")
    if task == "architecture":
        pool = filter_split(zoo_manifest, seed=0)
        key = lambda r: r.architecture_id
    else:
        pool = filter_split(zoo_manifest, architecture_id=weight_arch)
        key = lambda r: r.model_id
    by_class: dict[str, list] = {}
    for r in pool:
        by_class.setdefault(key(r), []).append(r)
    if len(by_class) < 2:
        raise ValueError(f"study task {task!r} needs >= 2 classes, found {len(by_class)}")
    train, test = [], []
    for c in sorted(by_class):
        recs = by_class[c]
        if len(recs) < train_per_class + test_per_class:
            raise ValueError(f"class {c!r} has {len(recs)} records, need "
                             f"{train_per_class + test_per_class}")
        for r in recs[:train_per_class]:
            train.append(replace(r, class_label=c, split="train"))
        for r in recs[train_per_class:train_per_class + test_per_class]:
            test.append(replace(r, class_label=c, split="test"))
    labels = LabelSpace(tuple(sorted(by_class)))
    return DatasetManifest(tuple(train)), DatasetManifest(tuple(test)), labels


def patch_position_study(task: str, train_position: int, config, zoo_manifest,
                         manifest_base, out_dir, init_checkpoint=None,
                         pcl: bool = True, train_per_class: int = 200,
                         test_per_class: int = 100,
                         weight_arch: str = "ProGAN") -> np.ndarray:
    """Train on grid tiles from one position, test on tiles from all 16.

    Returns the 16 per-position test accuracies (index 0 = position 1) and
    writes them to <out_dir>/<task>_pos<k>_accuracies.csv.
    """
    if not (1 <= train_position <= 16):
        raise ValueError("train_position must be in [1, 16]")
    out_dir = Path(out_dir)
    train_m, test_m, labels = build_study_manifests(
        zoo_manifest, task, train_per_class, test_per_class, weight_arch)
    study_config = config_with(config, class_names=labels.class_names)
    run = TrainRun(config=study_config, step="architecture_train",
                   train_manifest=train_m, out_dir=out_dir / f"train_pos{train_position:02d}",
                   manifest_base=manifest_base, init_checkpoint=init_checkpoint,
                   pretrain_enabled=init_checkpoint is not None, pcl_enabled=pcl,
                   grid_position=train_position)
    ckpt = run_step(run)
    net, _, _ = load_checkpoint(ckpt)
    plan = plan_from_config(study_config)

    accs = []
    for pos in range(1, 17):
        y_true, y_pred = _predict_tiles(net, test_m, labels, plan, manifest_base, pos)
        accs.append(float((y_true == y_pred).mean()))
    accs = np.array(accs)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{task}_pos{train_position:02d}_accuracies.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["position", "accuracy"])
        for pos, a in enumerate(accs, start=1):
            w.writerow([pos, f"{a:.6f}"])
    return accs


def _predict_tiles(net, manifest, labels, plan, manifest_base, position):
    net.eval()
    trues, preds = [], []
    with torch.no_grad():
        for start in range(0, len(manifest), EVAL_BATCH):
            chunk = manifest.records[start:start + EVAL_BATCH]
            tiles = []
            for r in chunk:
                img = load_image(resolve_record_path(r, manifest_base))
                img = preprocess(img, source_kind(r.source_dataset))
                img = equalize_then_magnify(img, plan)
                tiles.append(grid_patch_at(img, position))
            x = images_to_tensor(tiles)
            logits = net.classifier(net.encoder(x))
            preds.extend(logits.argmax(dim=1).tolist())
            trues.extend(labels.index_of(r.class_label) for r in chunk)
    return np.array(trues), np.array(preds)
