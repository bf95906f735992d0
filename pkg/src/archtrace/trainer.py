"""Two-step training: transformation-classification pretraining, then
architecture classification initialized from the pretrained weights.

Both steps share one engine (:func:`run_step`): per iteration a balanced
batch of records becomes a batch of patches, the contrastive loss is taken
on projection outputs and cross-entropy on classifier logits, and the
uncertainty-weighted total drives one Adam step. The learning rate is
lr0 * decay^floor(iteration / interval). Checkpoints are written every
epoch; the returned model is the checkpoint-epoch snapshot.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .core import (ConfigError, DatasetManifest, ExperimentConfig, LabelSpace,
                   load_image, resolve_record_path, rng_stream, torch_seed_for)
from .losses import auto_weighted_total, cross_entropy, supcon_loss
from .model import (AttributionNet, images_to_tensor, save_checkpoint,
                    surgery_for_new_head)
from .sampler import (PatchPlan, balanced_batches, batches_per_epoch,
                      equalize_then_magnify, grid_patch_at, preprocess,
                      sample_patches, source_kind)

STEPS = ("transform_pretrain", "architecture_train")

VAL_FRACTION = 0.1
EVAL_BATCH = 8


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainRun:
    config: ExperimentConfig
    step: str
    train_manifest: DatasetManifest
    out_dir: Path
    manifest_base: Optional[Path] = None
    val_manifest: Optional[DatasetManifest] = None
    init_checkpoint: Optional[str] = None
    pretrain_enabled: bool = True
    pcl_enabled: bool = True
    grid_position: Optional[int] = None  # fixed-tile mode for the position study
    # robustness-training mode: maps (per-image counter, raw image) -> image
    augment_hook: Optional[Callable[[int, np.ndarray], np.ndarray]] = None
    iteration: int = 0
    history: list = field(default_factory=list)
    epoch_history: list = field(default_factory=list)

    def __post_init__(self):
        if self.step not in STEPS:
            raise ConfigError(f"unknown step {self.step!r}")
        self.out_dir = Path(self.out_dir)

    def tag(self) -> str:
        parts = ["Base"]
        if self.step == "architecture_train" and self.pretrain_enabled:
            parts.append("PT")
        if self.pcl_enabled:
            parts.append("PCL")
        return "+".join(parts)


def plan_from_config(config: ExperimentConfig) -> PatchPlan:
    return PatchPlan(config.resize_size, config.patch_size,
                     config.patches_per_image, config.low_res_equalize)


def learning_rate_at(lr0: float, decay: float, interval: int, iteration: int) -> float:
    return lr0 * decay ** (iteration // interval)


def carve_val_split(manifest: DatasetManifest, rng: np.random.Generator,
                    fraction: float = VAL_FRACTION) -> tuple[DatasetManifest, DatasetManifest]:
    """Per-class held-out fraction, fixed by the rng; every class keeps
    at least one training record."""
    by_class: dict[str, list[int]] = {}
    for i, r in enumerate(manifest.records):
        by_class.setdefault(r.class_label, []).append(i)
    val_idx = set()
    for c in sorted(by_class):
        idxs = np.array(by_class[c])
        rng.shuffle(idxs)
        n_val = min(len(idxs) - 1, int(round(fraction * len(idxs))))
        val_idx.update(int(i) for i in idxs[:max(0, n_val)])
    train = tuple(r for i, r in enumerate(manifest.records) if i not in val_idx)
    val = tuple(r for i, r in enumerate(manifest.records) if i in val_idx)
    return DatasetManifest(train), DatasetManifest(val)


def load_network_input(record, manifest_base, plan: PatchPlan) -> np.ndarray:
    img = load_image(resolve_record_path(record, manifest_base))
    img = preprocess(img, source_kind(record.source_dataset))
    return equalize_then_magnify(img, plan)


def full_image_accuracy(net: AttributionNet, manifest: DatasetManifest,
                        labels: LabelSpace, manifest_base, plan: PatchPlan,
                        grid_position: Optional[int] = None) -> float:
    """Accuracy with full-image inference (or one fixed tile in study mode)."""
    if len(manifest) == 0:
        return float("nan")
    net.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(manifest), EVAL_BATCH):
            chunk = manifest.records[start:start + EVAL_BATCH]
            imgs = [load_network_input(r, manifest_base, plan) for r in chunk]
            if grid_position is not None:
                imgs = [grid_patch_at(im, grid_position) for im in imgs]
            x = images_to_tensor(imgs)
            pred = net.classifier(net.encoder(x)).argmax(dim=1).numpy()
            want = np.array([labels.index_of(r.class_label) for r in chunk])
            correct += int((pred == want).sum())
    return correct / len(manifest)


def run_step(run: TrainRun) -> Path:
    """Execute one training step; returns the selected checkpoint path.

    Side effects in run.out_dir: epoch checkpoints, iterations.csv and
    epochs.csv metric histories. Aborts with DivergenceError on a
    non-finite loss.
    """
    config = run.config
    labels = config.label_space()
    if run.step == "architecture_train" and run.pretrain_enabled and not run.init_checkpoint:
        raise ConfigError("init_checkpoint is required for architecture training "
                          "with pretraining enabled")
    if len(run.train_manifest) == 0:
        raise ConfigError("empty training manifest")

    if run.val_manifest is None:
        train_m, val_m = carve_val_split(run.train_manifest,
                                         rng_stream(config.rng_seed, "valsplit"))
    else:
        train_m, val_m = run.train_manifest, run.val_manifest
    train_m.validate_labels(labels)

    torch.manual_seed(torch_seed_for(config.rng_seed, "model_init"))
    if run.init_checkpoint:
        net = surgery_for_new_head(run.init_checkpoint, len(labels))
    else:
        net = AttributionNet(len(labels))

    plan = plan_from_config(config)
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    data_rng = rng_stream(config.rng_seed, "data")
    patch_rng = rng_stream(config.rng_seed, "patches")
    batches = balanced_batches(train_m, config.per_class_batch, data_rng, labels)
    bpe = batches_per_epoch(train_m, config.per_class_batch, labels)

    run.out_dir.mkdir(parents=True, exist_ok=True)
    checkpoints = {}
    loads_done = 0
    for epoch in range(1, config.max_epochs + 1):
        net.train()
        for _ in range(bpe):
            run.iteration += 1
            lr = learning_rate_at(config.learning_rate, config.lr_decay_factor,
                                  config.lr_decay_interval, run.iteration)
            for group in opt.param_groups:
                group["lr"] = lr

            idxs = next(batches)
            patches, patch_labels = [], []
            for i in idxs:
                r = train_m.records[i]
                if run.augment_hook is not None:
                    raw = load_image(resolve_record_path(r, run.manifest_base))
                    raw = run.augment_hook(loads_done, raw)
                    img = equalize_then_magnify(
                        preprocess(raw, source_kind(r.source_dataset)), plan)
                else:
                    img = load_network_input(r, run.manifest_base, plan)
                loads_done += 1
                if run.grid_position is not None:
                    crops = [grid_patch_at(img, run.grid_position)]
                else:
                    crops = sample_patches(img, plan, patch_rng)
                patches.extend(crops)
                patch_labels.extend([labels.index_of(r.class_label)] * len(crops))
            x = images_to_tensor(patches)
            y = torch.tensor(patch_labels, dtype=torch.long)

            logits, emb = net(x)
            if not bool(torch.isfinite(logits).all()) or not bool(torch.isfinite(emb).all()):
                raise DivergenceError(run.iteration)
            l_ce = cross_entropy(logits, y)
            if run.pcl_enabled:
                try:
                    # exploded weights can squash projections off the unit sphere
                    l_con = supcon_loss(emb, y, config.temperature)
                except ValueError as e:
                    raise DivergenceError(run.iteration) from e
                total = auto_weighted_total(l_con, l_ce, net.loss_weights)
                n_anchors = int(((y.unsqueeze(0) == y.unsqueeze(1)).sum(1) > 1).sum())
                l_con_mean = l_con.item() / max(1, n_anchors)
            else:
                l_con, l_con_mean, total = torch.zeros(()), 0.0, l_ce
            if not torch.isfinite(total):
                raise DivergenceError(run.iteration)

            opt.zero_grad()
            total.backward()
            opt.step()

            w_con, w_ce = net.loss_weights.weights()
            run.history.append({
                "iteration": run.iteration, "lr": lr,
                "loss_total": float(total.item()), "loss_con": float(l_con.item()),
                "loss_con_mean": float(l_con_mean), "loss_ce": float(l_ce.item()),
                "w_con": w_con, "w_ce": w_ce,
            })

        val_acc = full_image_accuracy(net, val_m, labels, run.manifest_base, plan,
                                      run.grid_position)
        ckpt = run.out_dir / f"epoch_{epoch:03d}.ckpt"
        save_checkpoint(net, ckpt, labels, run.iteration)
        checkpoints[epoch] = ckpt
        run.epoch_history.append({"epoch": epoch, "iteration": run.iteration,
                                  "val_accuracy": val_acc})

    write_history(run)
    final_epoch = min(config.checkpoint_epoch, config.max_epochs)
    return checkpoints[final_epoch]


def write_history(run: TrainRun) -> None:
    """Persist metric histories as delimited text for the curves emitter."""
    if run.history:
        with open(run.out_dir / "iterations.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(run.history[0].keys()))
            w.writeheader()
            w.writerows(run.history)
    if run.epoch_history:
        with open(run.out_dir / "epochs.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(run.epoch_history[0].keys()))
            w.writeheader()
            w.writerows(run.epoch_history)
    (run.out_dir / "run_tag.txt").write_text(run.tag() + "\n")


def pretrain_transforms(config: ExperimentConfig, train_manifest: DatasetManifest,
                        out_dir: Path, manifest_base=None) -> Path:
    """Step 1 on the full transformation bank; the label space must be the
    170 transformation classes."""
    if len(config.class_names) != 170:
        raise ConfigError(f"transform pretraining needs a 170-class label space, "
                          f"got {len(config.class_names)}")
    run = TrainRun(config=config, step="transform_pretrain",
                   train_manifest=train_manifest, out_dir=Path(out_dir),
                   manifest_base=manifest_base, pretrain_enabled=False)
    return run_step(run)
