"""Figure emission from persisted artifacts: GradCAM panels, t-SNE plots of
encoder features, training curves, confusion heatmaps, position-accuracy
grids. Figures are a pure function of their input artifacts plus a fixed
seed; emission never mutates inputs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .core import load_image, load_manifest, resolve_record_path
from .model import gradcam, images_to_tensor, load_checkpoint
from .sampler import PatchPlan, equalize_then_magnify, preprocess, source_kind

FIGURE_KINDS = ("gradcam_panel", "tsne", "curves", "confusion_heatmap", "position_grid")

_REQUIRED_INPUTS = {
    "gradcam_panel": ("checkpoint", "images"),
    "tsne": ("checkpoint", "manifest"),
    "curves": ("iterations",),
    "confusion_heatmap": ("confusion",),
    "position_grid": ("accuracies",),
}


@dataclass
class FigureRequest:
    kind: str
    inputs: dict
    out_path: Path
    seed: int = 0

    def __post_init__(self):
        if self.kind not in FIGURE_KINDS:
            raise ValueError(f"unknown figure kind {self.kind!r}")
        self.out_path = Path(self.out_path)
        for key in _REQUIRED_INPUTS[self.kind]:
            if key not in self.inputs:
                raise ValueError(f"figure kind {self.kind!r} missing input {key!r}")


def _require_file(req: FigureRequest, key: str) -> Path:
    p = Path(req.inputs[key])
    if not p.exists():
        raise ValueError(f"input {key!r} does not exist: {p}")
    return p


def _read_csv_rows(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _save(fig, out_path: Path) -> Path:
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def emit_figure(req: FigureRequest) -> Path:
    """Render one figure; deterministic for identical inputs and seed."""
    return {
        "gradcam_panel": _emit_gradcam_panel,
        "tsne": _emit_tsne,
        "curves": _emit_curves,
        "confusion_heatmap": _emit_confusion,
        "position_grid": _emit_position_grid,
    }[req.kind](req)


def _eval_plan(req: FigureRequest) -> PatchPlan:
    resize = int(req.inputs.get("resize_size", 256))
    eq = req.inputs.get("low_res_equalize")
    return PatchPlan(resize_size=resize, patch_size=min(64, resize),
                     low_res_equalize=int(eq) if eq else None)


def _emit_gradcam_panel(req: FigureRequest) -> Path:
    net, labels, _ = load_checkpoint(_require_file(req, "checkpoint"))
    paths = req.inputs["images"]
    if isinstance(paths, str):
        paths = [p for p in paths.split(",") if p]
    if not paths:
        raise ValueError("input 'images' is empty")
    layer = int(req.inputs.get("layer", 4))
    plan = _eval_plan(req)
    fig, axes = plt.subplots(2, len(paths), figsize=(2.2 * len(paths), 4.6), squeeze=False)
    import torch
    for col, p in enumerate(paths):
        img = load_image(p)
        img = equalize_then_magnify(preprocess(img, "native"), plan)
        with torch.no_grad():
            logits = net.classifier(net.encoder(images_to_tensor([img])))
        target = int(logits.argmax(dim=1).item())
        cam = gradcam(net, img, target, layer=layer)
        axes[0][col].imshow(img)
        axes[0][col].set_title(labels.class_names[target], fontsize=8)
        axes[1][col].imshow(img)
        axes[1][col].imshow(cam, cmap="jet", alpha=0.5)
        for row in (0, 1):
            axes[row][col].set_xticks([])
            axes[row][col].set_yticks([])
    return _save(fig, req.out_path)


def _emit_tsne(req: FigureRequest) -> Path:
    from sklearn.manifold import TSNE
    import torch
    net, _, _ = load_checkpoint(_require_file(req, "checkpoint"))
    manifest_path = _require_file(req, "manifest")
    manifest = load_manifest(manifest_path)
    if len(manifest) < 5:
        raise ValueError("t-SNE needs at least 5 records")
    plan = _eval_plan(req)
    net.eval()
    feats, names = [], []
    with torch.no_grad():
        for r in manifest:
            img = load_image(resolve_record_path(r, manifest_path.parent))
            img = equalize_then_magnify(preprocess(img, source_kind(r.source_dataset)), plan)
            feats.append(net.encoder(images_to_tensor([img]))[0].numpy())
            names.append(r.class_label)
    feats = np.stack(feats)
    perplexity = min(30.0, (len(feats) - 1) / 3.0)
    emb = TSNE(n_components=2, perplexity=perplexity, init="pca",
               random_state=req.seed).fit_transform(feats)
    fig, ax = plt.subplots(figsize=(5, 5))
    classes = sorted(set(names))
    cmap = plt.get_cmap("tab10")
    for k, c in enumerate(classes):
        sel = np.array([n == c for n in names])
        ax.scatter(emb[sel, 0], emb[sel, 1], s=8, color=cmap(k % 10), label=c)
    ax.legend(fontsize=7)
    ax.set_xticks([])
    ax.set_yticks([])
    return _save(fig, req.out_path)


def _emit_curves(req: FigureRequest) -> Path:
    rows = _read_csv_rows(_require_file(req, "iterations"))
    if not rows:
        raise ValueError("iterations history is empty")
    iters = [int(r["iteration"]) for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    for key, label in (("loss_total", "total"), ("loss_con_mean", "contrastive (per anchor)"),
                       ("loss_ce", "cross-entropy")):
        axes[0].plot(iters, [float(r[key]) for r in rows], label=label, linewidth=0.9)
    axes[0].set_xlabel("iteration")
    axes[0].set_ylabel("loss")
    axes[0].legend(fontsize=7)
    if "epochs" in req.inputs:
        erows = _read_csv_rows(_require_file(req, "epochs"))
        axes[1].plot([int(r["epoch"]) for r in erows],
                     [float(r["val_accuracy"]) for r in erows], marker="o")
        axes[1].set_xlabel("epoch")
        axes[1].set_ylabel("val accuracy")
        axes[1].set_ylim(0, 1.05)
    else:
        axes[1].plot(iters, [float(r["lr"]) for r in rows])
        axes[1].set_xlabel("iteration")
        axes[1].set_ylabel("learning rate")
    fig.tight_layout()
    return _save(fig, req.out_path)


def _emit_confusion(req: FigureRequest) -> Path:
    path = _require_file(req, "confusion")
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if len(rows) < 2:
        raise ValueError("confusion csv is empty")
    names = rows[0][1:]
    mat = np.array([[int(v) for v in row[1:]] for row in rows[1:]], dtype=np.int64)
    norm = mat / np.maximum(mat.sum(axis=1, keepdims=True), 1)
    fig, ax = plt.subplots(figsize=(4.2, 3.8))
    im = ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(len(names)), names, rotation=45, fontsize=7, ha="right")
    ax.set_yticks(range(len(names)), names, fontsize=7)
    for i in range(len(names)):
        for j in range(len(names)):
            ax.text(j, i, str(mat[i, j]), ha="center", va="center", fontsize=6,
                    color="white" if norm[i, j] > 0.5 else "black")
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.colorbar(im, fraction=0.046)
    fig.tight_layout()
    return _save(fig, req.out_path)


def _emit_position_grid(req: FigureRequest) -> Path:
    rows = _read_csv_rows(_require_file(req, "accuracies"))
    if len(rows) != 16:
        raise ValueError(f"position grid needs 16 accuracies, got {len(rows)}")
    acc = np.array([float(r["accuracy"]) for r in rows]).reshape(4, 4)
    fig, ax = plt.subplots(figsize=(3.6, 3.4))
    im = ax.imshow(acc, cmap="viridis", vmin=0, vmax=1)
    for i in range(4):
        for j in range(4):
            ax.text(j, i, f"{acc[i, j]:.2f}", ha="center", va="center", fontsize=8,
                    color="white" if acc[i, j] < 0.6 else "black")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, fraction=0.046)
    fig.tight_layout()
    return _save(fig, req.out_path)
