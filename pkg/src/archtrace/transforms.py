"""The 170-class image transformation bank used as the pretraining task.

Four families: compression, blur, resample, noise. Each operation with a
specific parameter is one class. The full grid (documented in
docs/transform_bank.tsv, regenerated by :func:`export_bank_table`):

  compression (35): jpeg quality 30,32,...,98
  blur        (36): gaussian sigma 0.5,0.75,...,3.0 x kernel {3,5,7} (33)
                    + median kernel {3,5,7} (3)
  resample    (54): rescale-and-restore, scale {0.5,0.67,0.8,1.25,1.5,2.0}
                    x kernel {nearest,bilinear,bicubic}, same kernel both
                    ways (18); factor-2 pixel-shuffle phase subsample,
                    phase {0..3} x restore kernel (12); cross-kernel
                    down/up pairs, 6 ordered distinct kernel pairs x scale
                    {0.5,0.8,1.25,2.0} (24)
  noise       (45): additive gaussian sigma {2,4,...,30}/255 (15); poisson
                    with count scale {8,16,...,120} (15); salt-and-pepper
                    rate {0.002,...,0.030} (15)

Resample transforms restore the original size with the kernel given, so the
class is carried by the artifact rather than by the output shape. Noise is
clamped to [0,1], matching 8-bit image semantics.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import cv2
import numpy as np

from .core import (DatasetManifest, LabelSpace, ManifestRecord, rng_stream,
                   resolve_record_path, save_manifest, to_uint8, from_uint8,
                   validate_image, load_image)

FAMILIES = ("compression", "blur", "resample", "noise")

_KERNELS = {"nearest": cv2.INTER_NEAREST, "bilinear": cv2.INTER_LINEAR, "bicubic": cv2.INTER_CUBIC}


@dataclass(frozen=True)
class TransformSpec:
    family: str
    operation: str
    parameter: tuple
    class_index: int

    def describe(self) -> str:
        return f"{self.operation}({','.join(str(p) for p in self.parameter)})"


@dataclass(frozen=True)
class TransformBank:
    specs: tuple[TransformSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))

    def __len__(self) -> int:
        return len(self.specs)

    def __iter__(self):
        return iter(self.specs)

    def label_space(self) -> LabelSpace:
        return LabelSpace(tuple(str(s.class_index) for s in self.specs))


def build_bank() -> TransformBank:
    """The fixed 170-class bank; ordering and class indices are stable."""
    specs: list[TransformSpec] = []

    def add(family, operation, parameter):
        specs.append(TransformSpec(family, operation, tuple(parameter), len(specs)))

    for q in range(30, 100, 2):                       # 35 jpeg qualities
        add("compression", "jpeg", (q,))

    for k in (3, 5, 7):                               # 33 gaussian blurs
        for i in range(11):
            add("blur", "gaussian_blur", (round(0.5 + 0.25 * i, 2), k))
    for k in (3, 5, 7):                               # 3 median blurs
        add("blur", "median_blur", (k,))

    scales = (0.5, 0.67, 0.8, 1.25, 1.5, 2.0)
    kernels = ("nearest", "bilinear", "bicubic")
    for s in scales:                                  # 18 same-kernel rescales
        for k in kernels:
            add("resample", "rescale", (s, k))
    for phase in range(4):                            # 12 pixel-shuffle subsamples
        for k in kernels:
            add("resample", "pixel_shuffle", (phase, k))
    for kd in kernels:                                # 24 cross-kernel pairs
        for ku in kernels:
            if kd == ku:
                continue
            for s in (0.5, 0.8, 1.25, 2.0):
                add("resample", "cross_rescale", (s, kd, ku))

    for i in range(1, 16):                            # 15 gaussian noises
        add("noise", "gaussian_noise", (2 * i,))
    for i in range(1, 16):                            # 15 poisson noises
        add("noise", "poisson", (8 * i,))
    for i in range(1, 16):                            # 15 salt-and-pepper
        add("noise", "salt_pepper", (round(0.002 * i, 4),))

    bank = TransformBank(tuple(specs))
    assert len(bank) == 170
    return bank


def export_bank_table(bank: TransformBank) -> str:
    """Tab-delimited documentation table of the full bank."""
    lines = ["class_index\tfamily\toperation\tparameter"]
    for s in bank:
        lines.append(f"{s.class_index}\t{s.family}\t{s.operation}\t{','.join(str(p) for p in s.parameter)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# application

def _rescale(img, scale, kd, ku):
    h, w = img.shape[:2]
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    if (nh, nw) == (h, w) and kd == ku:
        return img.copy()
    mid = cv2.resize(img, (nw, nh), interpolation=_KERNELS[kd])
    return cv2.resize(mid, (w, h), interpolation=_KERNELS[ku])


def _pixel_shuffle(img, phase, up_kernel):
    # space-to-depth style down by 2: keep one of the four subpixel phases
    h, w = img.shape[:2]
    pi, pj = phase // 2, phase % 2
    low = img[pi::2, pj::2]
    return cv2.resize(low, (w, h), interpolation=_KERNELS[up_kernel])


def _check_spec(spec: TransformSpec) -> None:
    ok = {
        "jpeg": lambda p: len(p) == 1 and 1 <= p[0] <= 100,
        "gaussian_blur": lambda p: len(p) == 2 and p[0] >= 0 and p[1] in (3, 5, 7),
        "median_blur": lambda p: len(p) == 1 and p[0] in (3, 5, 7),
        "rescale": lambda p: len(p) == 2 and p[0] > 0 and p[1] in _KERNELS,
        "pixel_shuffle": lambda p: len(p) == 2 and p[0] in (0, 1, 2, 3) and p[1] in _KERNELS,
        "cross_rescale": lambda p: len(p) == 3 and p[0] > 0 and p[1] in _KERNELS and p[2] in _KERNELS,
        "gaussian_noise": lambda p: len(p) == 1 and p[0] >= 0,
        "poisson": lambda p: len(p) == 1 and p[0] > 0,
        "salt_pepper": lambda p: len(p) == 1 and 0 <= p[0] <= 1,
    }
    if spec.operation not in ok:
        raise ValueError(f"transform operation {spec.operation!r} not in bank")
    if not ok[spec.operation](spec.parameter):
        raise ValueError(f"invalid parameter {spec.parameter} for {spec.operation}")


def apply_transform(img: np.ndarray, spec: TransformSpec, seed: int = 0) -> np.ndarray:
    """Apply one transformation class; deterministic given (img, spec, seed).

    Output has the same shape as the input and stays inside [0,1]. The seed
    only matters for the noise family.
    """
    validate_image(img)
    _check_spec(spec)
    img = np.ascontiguousarray(img, dtype=np.float32)
    op, p = spec.operation, spec.parameter

    if op == "jpeg":
        u8 = to_uint8(img)
        code, enc = cv2.imencode(".jpg", cv2.cvtColor(u8, cv2.COLOR_RGB2BGR),
                                 [cv2.IMWRITE_JPEG_QUALITY, int(p[0])])
        if not code:
            raise RuntimeError("jpeg encode failed")
        out = from_uint8(cv2.cvtColor(cv2.imdecode(enc, cv2.IMREAD_COLOR), cv2.COLOR_BGR2RGB))
    elif op == "gaussian_blur":
        sigma, k = p
        out = cv2.GaussianBlur(img, (k, k), sigmaX=sigma, sigmaY=sigma)
    elif op == "median_blur":
        out = from_uint8(cv2.medianBlur(to_uint8(img), int(p[0])))
    elif op == "rescale":
        out = _rescale(img, p[0], p[1], p[1])
    elif op == "pixel_shuffle":
        out = _pixel_shuffle(img, int(p[0]), p[1])
    elif op == "cross_rescale":
        out = _rescale(img, p[0], p[1], p[2])
    elif op == "gaussian_noise":
        rng = rng_stream(seed, f"noise{spec.class_index}")
        out = img + (p[0] / 255.0) * rng.standard_normal(img.shape, dtype=np.float32)
    elif op == "poisson":
        rng = rng_stream(seed, f"noise{spec.class_index}")
        out = rng.poisson(img * p[0]).astype(np.float32) / p[0]
    else:  # salt_pepper
        rng = rng_stream(seed, f"noise{spec.class_index}")
        u = rng.random(img.shape[:2], dtype=np.float32)
        out = img.copy()
        out[u < p[0] / 2] = 0.0
        out[u > 1.0 - p[0] / 2] = 1.0

    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset emission

def generate_pretrain_dataset(naturals: DatasetManifest, bank: TransformBank,
                              out_dir: str | Path, per_class: int, seed: int,
                              manifest_base: Optional[Path] = None) -> DatasetManifest:
    """Emit per_class transformed images for every class in the bank.

    Compression classes are written as the compressed format itself (.jpg);
    all others as lossless .png. The returned manifest labels records by
    class_index over the bank's label space, all in the train split.
    Deterministic: (naturals, bank, seed) fix all output bytes.
    """
    if len(naturals) == 0:
        raise ValueError("naturals manifest is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = rng_stream(seed, "pretrain_sources")
    records = []
    for spec in bank:
        picks = rng.integers(0, len(naturals), size=per_class)
        for j, src_idx in enumerate(picks):
            src = naturals.records[int(src_idx)]
            img = load_image(resolve_record_path(src, manifest_base))
            img_seed = seed * 1_000_003 + spec.class_index * 1000 + j
            if spec.operation == "jpeg":
                name = f"c{spec.class_index:03d}_{j:03d}.jpg"
                bgr = cv2.cvtColor(to_uint8(img), cv2.COLOR_RGB2BGR)
                cv2.imwrite(str(out_dir / name), bgr,
                            [cv2.IMWRITE_JPEG_QUALITY, int(spec.parameter[0])])
            else:
                name = f"c{spec.class_index:03d}_{j:03d}.png"
                out = apply_transform(img, spec, seed=img_seed)
                bgr = cv2.cvtColor(to_uint8(out), cv2.COLOR_RGB2BGR)
                cv2.imwrite(str(out_dir / name), bgr)
            records.append(ManifestRecord(
                image_path=name, class_label=str(spec.class_index),
                architecture_id=spec.operation, model_id=spec.describe(),
                seed=img_seed, source_dataset="transforms", split="train"))
    manifest = DatasetManifest(tuple(records))
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def reduced_bank(bank: TransformBank, n_classes: int, seed: int = 0) -> TransformBank:
    """Evenly strided subset spanning all families, for desk-scale pretraining.

    Class indices are renumbered 0..n-1 so the subset forms its own label
    space; the original grid position is preserved in the operation/parameter.
    """
    if not (2 <= n_classes <= len(bank)):
        raise ValueError(f"n_classes must be in [2, {len(bank)}]")
    stride = len(bank) / n_classes
    picked = [bank.specs[min(len(bank) - 1, int(i * stride))] for i in range(n_classes)]
    renumbered = tuple(TransformSpec(s.family, s.operation, s.parameter, i)
                       for i, s in enumerate(picked))
    return TransformBank(renumbered)
