"""Pixel-space plumbing between datasets and the network: source-specific
preprocessing to 128px, the equalize-then-magnify resize chain, random and
grid patch extraction, and class-balanced batch streaming.

The magnifying resize uses one fixed kernel (bilinear) for every class; the
resize itself injects resampling artifacts, so varying it per class would be
a confound.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import cv2
import numpy as np

from .core import DatasetManifest, LabelSpace, ManifestError, validate_image

CANONICAL_SIDE = 128          # the size source-specific preprocessing lands on
CELEBA_CENTER = (89, 121)     # (x, y) crop center for celebA-shaped inputs


@dataclass(frozen=True)
class PatchPlan:
    resize_size: int = 512
    patch_size: int = 64
    patches_per_image: int = 16
    low_res_equalize: Optional[int] = None

    def __post_init__(self):
        if self.patch_size > self.resize_size:
            raise ValueError("patch_size must not exceed resize_size")
        if self.patches_per_image < 1:
            raise ValueError("patches_per_image must be >= 1")


def source_kind(source_dataset: str) -> str:
    """Map a manifest source_dataset tag onto a preprocessing rule."""
    if source_dataset == "celeba":
        return "celeba"
    if source_dataset in ("zoo", "transforms"):
        return "native"
    return "generic"


def preprocess(img: np.ndarray, source: str = "generic") -> np.ndarray:
    """Source-specific crop to 128x128; native images pass through unchanged.

    celebA-shaped inputs are cropped centered at (x,y)=(89,121); generic
    inputs get a plain center crop. Inputs already at 128x128 are returned
    as-is under any rule.
    """
    validate_image(img)
    h, w = img.shape[:2]
    if source == "native" or (h == CANONICAL_SIDE and w == CANONICAL_SIDE):
        return img
    if source not in ("celeba", "generic"):
        raise ValueError(f"unknown source kind {source!r}")
    if h < CANONICAL_SIDE or w < CANONICAL_SIDE:
        raise ValueError(f"image {h}x{w} too small for a {CANONICAL_SIDE}px crop")
    half = CANONICAL_SIDE // 2
    if source == "celeba":
        cx, cy = CELEBA_CENTER
    else:
        cx, cy = w // 2, h // 2
    x0 = min(max(cx - half, 0), w - CANONICAL_SIDE)
    y0 = min(max(cy - half, 0), h - CANONICAL_SIDE)
    return img[y0:y0 + CANONICAL_SIDE, x0:x0 + CANONICAL_SIDE]


def equalize_then_magnify(img: np.ndarray, plan: PatchPlan) -> np.ndarray:
    """Optionally rescale to the equalizing size, then magnify to resize_size.

    When the equalizing size is set the chain always goes through it, even
    for inputs that are already larger than the target, so different native
    resolutions cannot leak through as a bias.
    """
    validate_image(img)
    out = img
    if plan.low_res_equalize is not None:
        eq = plan.low_res_equalize
        if out.shape[0] != eq or out.shape[1] != eq:
            out = cv2.resize(out, (eq, eq), interpolation=cv2.INTER_LINEAR)
    if out.shape[0] != plan.resize_size or out.shape[1] != plan.resize_size:
        out = cv2.resize(out, (plan.resize_size, plan.resize_size),
                         interpolation=cv2.INTER_LINEAR)
    return np.clip(out, 0.0, 1.0)


# patch extraction ------------------------------------------------------------

def sample_patch_offsets(shape: tuple, plan: PatchPlan,
                         rng: np.random.Generator) -> np.ndarray:
    """(n, 2) array of (row, col) offsets, uniform over the valid range,
    drawn with replacement."""
    h, w = shape[:2]
    ps = plan.patch_size
    if h < ps or w < ps:
        raise ValueError(f"image {h}x{w} smaller than patch size {ps}")
    rows = rng.integers(0, h - ps + 1, size=plan.patches_per_image)
    cols = rng.integers(0, w - ps + 1, size=plan.patches_per_image)
    return np.stack([rows, cols], axis=1)


def sample_patches(img: np.ndarray, plan: PatchPlan,
                   rng: np.random.Generator) -> list[np.ndarray]:
    """Randomly crop patches_per_image patches of patch_size from the image."""
    offsets = sample_patch_offsets(img.shape, plan, rng)
    ps = plan.patch_size
    return [img[r:r + ps, c:c + ps] for r, c in offsets]


def grid_offsets(shape: tuple, grid: int = 4) -> list[tuple[int, int]]:
    h, w = shape[:2]
    if h % grid or w % grid:
        raise ValueError(f"image {h}x{w} not divisible into a {grid}x{grid} grid")
    th, tw = h // grid, w // grid
    return [(i * th, j * tw) for i in range(grid) for j in range(grid)]


def grid_patches(img: np.ndarray, grid: int = 4) -> list[np.ndarray]:
    """Non-overlapping grid tiling, numbered row-major with 1 at top-left.

    Position k (1-based) corresponds to index k-1 in the returned list.
    """
    offs = grid_offsets(img.shape, grid)
    th, tw = img.shape[0] // grid, img.shape[1] // grid
    return [img[r:r + th, c:c + tw] for r, c in offs]


def grid_patch_at(img: np.ndarray, position: int, grid: int = 4) -> np.ndarray:
    if not (1 <= position <= grid * grid):
        raise ValueError(f"position must be in [1, {grid * grid}]")
    return grid_patches(img, grid)[position - 1]


def reassemble_grid(patches: Sequence[np.ndarray], grid: int = 4) -> np.ndarray:
    if len(patches) != grid * grid:
        raise ValueError(f"need {grid * grid} tiles")
    rows = [np.concatenate(patches[i * grid:(i + 1) * grid], axis=1) for i in range(grid)]
    return np.concatenate(rows, axis=0)


# batching --------------------------------------------------------------------

def class_index_lists(manifest: DatasetManifest,
                      labels: Optional[LabelSpace] = None) -> dict[str, list[int]]:
    by_class: dict[str, list[int]] = {}
    for i, r in enumerate(manifest.records):
        by_class.setdefault(r.class_label, []).append(i)
    if labels is not None:
        for name in labels.class_names:
            if not by_class.get(name):
                raise ManifestError(f"class {name!r} has no records")
    return by_class


def batches_per_epoch(manifest: DatasetManifest, per_class: int,
                      labels: Optional[LabelSpace] = None) -> int:
    """One epoch is one pass over the smallest class (balanced batching
    breaks the natural epoch notion)."""
    by_class = class_index_lists(manifest, labels)
    smallest = min(len(v) for v in by_class.values())
    return max(1, int(np.ceil(smallest / per_class)))


def balanced_batches(manifest: DatasetManifest, per_class: int,
                     rng: np.random.Generator,
                     labels: Optional[LabelSpace] = None) -> Iterator[list[int]]:
    """Endless stream of balanced record-index batches.

    Every batch holds exactly per_class records of every class, classes in
    label-space order (sorted order otherwise). Each class cycles through
    its records independently, reshuffling whenever it is exhausted, so the
    whole sequence replays exactly for the same rng seed.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    by_class = class_index_lists(manifest, labels)
    if not by_class:
        raise ManifestError("manifest has no records")
    class_order = list(labels.class_names) if labels is not None else sorted(by_class)
    pools = {c: np.array(by_class[c]) for c in class_order}

    def refill(c):
        order = pools[c].copy()
        rng.shuffle(order)
        return list(order)

    queues = {c: [] for c in class_order}
    while True:
        batch: list[int] = []
        for c in class_order:
            while len(queues[c]) < per_class:
                queues[c].extend(refill(c))
            batch.extend(int(i) for i in queues[c][:per_class])
            queues[c] = queues[c][per_class:]
        yield batch
