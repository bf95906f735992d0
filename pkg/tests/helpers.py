"""Shared test utilities: procedural natural images and tiny datasets."""

from pathlib import Path

import cv2
import numpy as np

from archtrace.core import DatasetManifest, ManifestRecord, save_image, save_manifest


def synth_natural(seed: int, size: int = 128) -> np.ndarray:
    """Deterministic natural-looking image: smooth color field plus gradient,
    faint texture and a few rectangles."""
    rng = np.random.default_rng(seed)
    base = rng.random((8, 8, 3)).astype(np.float32)
    img = cv2.resize(base, (size, size), interpolation=cv2.INTER_CUBIC)
    ramp = np.linspace(0.2, 0.8, size, dtype=np.float32)
    grad = np.outer(ramp, np.linspace(0, 1, size, dtype=np.float32))[..., None] \
        * rng.random(3).astype(np.float32)
    tex = rng.standard_normal((size, size, 1)).astype(np.float32) * 0.03
    out = img * 0.6 + grad * 0.4 + tex
    for _ in range(4):
        y0, x0 = rng.integers(0, size - 16, 2) if size > 16 else (0, 0)
        h, w = rng.integers(8, size // 2, 2) if size >= 32 else (size // 2, size // 2)
        color = rng.random(3).astype(np.float32)
        out[y0:y0 + h, x0:x0 + w] = 0.7 * out[y0:y0 + h, x0:x0 + w] + 0.3 * color
    return np.clip(out, 0, 1).astype(np.float32)


def make_naturals(out_dir: Path, n: int, size: int = 128, seed: int = 0,
                  source_dataset: str = "naturals") -> DatasetManifest:
    """Write n synthetic naturals and a manifest next to them."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n):
        name = f"nat_{i:04d}.png"
        save_image(synth_natural(seed * 100_003 + i, size), out_dir / name)
        records.append(ManifestRecord(name, "natural", "none", "none", 0,
                                      source_dataset, "train"))
    manifest = DatasetManifest(tuple(records))
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def subset_per_class(manifest: DatasetManifest, per_class: int,
                     offset: int = 0) -> DatasetManifest:
    """First per_class records of each class (after offset), in manifest order."""
    taken: dict[str, int] = {}
    seen: dict[str, int] = {}
    out = []
    for r in manifest:
        seen[r.class_label] = seen.get(r.class_label, 0) + 1
        if seen[r.class_label] <= offset:
            continue
        if taken.get(r.class_label, 0) < per_class:
            taken[r.class_label] = taken.get(r.class_label, 0) + 1
            out.append(r)
    return DatasetManifest(tuple(out))
