"""Shared domain types: images, label spaces, dataset manifests, experiment config.

Everything else in the package depends only on this module. All randomness
flows from ``ExperimentConfig.rng_seed`` through named sub-streams obtained
via :func:`rng_stream`, so experiments are bit-reproducible.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import cv2
import numpy as np

MIN_IMAGE_SIDE = 16  # smallest spatial size the encoder's stride chain supports

VALID_SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    """Raised for malformed or inconsistent experiment configuration."""


class ManifestError(ValueError):
    """Raised for malformed dataset manifests."""


# ---------------------------------------------------------------------------
# rng plumbing

def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Named, independent random stream derived from one experiment seed.

    The stream key is a CRC of the name, so the mapping is stable across
    processes and Python versions (unlike hash()).
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def torch_seed_for(seed: int, name: str) -> int:
    """Stable 63-bit seed for torch.manual_seed, derived like rng_stream."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


# ---------------------------------------------------------------------------
# images

def validate_image(img: np.ndarray) -> np.ndarray:
    """Check the universal pixel currency: HxWx3 float array, finite, in [0,1]."""
    if not isinstance(img, np.ndarray) or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 array, got shape {getattr(img, 'shape', None)}")
    if img.shape[0] < MIN_IMAGE_SIDE or img.shape[1] < MIN_IMAGE_SIDE:
        raise ValueError(f"image {img.shape[0]}x{img.shape[1]} below minimum side {MIN_IMAGE_SIDE}")
    if not np.isfinite(img).all():
        raise ValueError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values outside [0,1]")
    return img


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return (img.astype(np.float32) / 255.0)


def save_image(img: np.ndarray, path: str | Path) -> None:
    """Write an image buffer to disk. PNG (default) is lossless; .jpg paths get JPEG."""
    validate_image(img)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    bgr = cv2.cvtColor(to_uint8(img), cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), bgr):
        raise IOError(f"failed to write image {path}")


def load_image(path: str | Path) -> np.ndarray:
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise IOError(f"failed to read image {path}")
    return from_uint8(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB))


# ---------------------------------------------------------------------------
# label space

@dataclass(frozen=True)
class LabelSpace:
    """Ordered class names. When a 'real' class exists it sits at index 0."""

    class_names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.class_names)
        object.__setattr__(self, "class_names", names)
        if len(names) < 2:
            raise ValueError("label space needs at least 2 classes")
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        if "real" in names and names[0] != "real":
            raise ValueError("'real' class must be at index 0")

    def __len__(self) -> int:
        return len(self.class_names)

    def index_of(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise KeyError(f"label {name!r} not in label space {self.class_names}")


# ---------------------------------------------------------------------------
# manifests

MANIFEST_HEADER = ("image_path", "class_label", "architecture_id", "model_id",
                   "seed", "source_dataset", "split")


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    class_label: str
    architecture_id: str
    model_id: str
    seed: int
    source_dataset: str
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable list of records; safe to share read-only across workers."""

    records: tuple[ManifestRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        for r in self.records:
            if r.split not in VALID_SPLITS:
                raise ManifestError(f"invalid split {r.split!r} in record {r.image_path}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def class_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for r in self.records:
            counts[r.class_label] = counts.get(r.class_label, 0) + 1
        return counts

    def validate_labels(self, labels: LabelSpace) -> "DatasetManifest":
        for i, r in enumerate(self.records):
            if r.class_label not in labels.class_names:
                raise ManifestError(f"record {i} ({r.image_path}): unknown label {r.class_label!r}")
        return self

    def validate_paths(self, base: Optional[Path] = None) -> "DatasetManifest":
        for i, r in enumerate(self.records):
            p = Path(r.image_path)
            if base is not None and not p.is_absolute():
                p = base / p
            if not p.exists():
                raise ManifestError(f"record {i}: unresolvable path {r.image_path}")
        return self


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            w.writerow([r.image_path, r.class_label, r.architecture_id, r.model_id,
                        r.seed, r.source_dataset, r.split])


def load_manifest(path: str | Path, labels: Optional[LabelSpace] = None,
                  check_paths: bool = True) -> DatasetManifest:
    """Load and validate a manifest file. Records preserve file order."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest file not found: {path}")
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != MANIFEST_HEADER:
        raise ManifestError(f"{path}: bad header, expected {','.join(MANIFEST_HEADER)}")
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(MANIFEST_HEADER):
            raise ManifestError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
        try:
            seed = int(row[4])
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: seed {row[4]!r} is not an integer")
        records.append(ManifestRecord(row[0], row[1], row[2], row[3], seed, row[5], row[6]))
    manifest = DatasetManifest(tuple(records))
    if labels is not None:
        try:
            manifest.validate_labels(labels)
        except ManifestError as e:
            raise ManifestError(f"{path}: {e}")
    if check_paths:
        manifest.validate_paths(base=path.parent)
    return manifest


def filter_split(manifest: DatasetManifest, split: Optional[str] = None,
                 **constraints: object) -> DatasetManifest:
    """Subset a manifest by split and/or field constraints.

    A constraint value may be a scalar (equality), a set/list (membership)
    or a callable (predicate). Empty results are legal and returned empty.
    Filtering is idempotent and commutes across independent fields.
    """
    if split is not None and split not in VALID_SPLITS:
        raise ManifestError(f"unknown split {split!r}")
    field_names = {f.name for f in fields(ManifestRecord)}
    for key in constraints:
        if key not in field_names:
            raise ManifestError(f"unknown manifest field {key!r}")

    def keep(r: ManifestRecord) -> bool:
        if split is not None and r.split != split:
            return False
        for key, want in constraints.items():
            have = getattr(r, key)
            if callable(want):
                if not want(have):
                    return False
            elif isinstance(want, (set, frozenset, list, tuple)):
                if have not in want:
                    return False
            elif have != want:
                return False
        return True

    return DatasetManifest(tuple(r for r in manifest.records if keep(r)))


def resolve_record_path(record: ManifestRecord, base: Optional[Path]) -> Path:
    p = Path(record.image_path)
    if base is not None and not p.is_absolute():
        p = base / p
    return p


# ---------------------------------------------------------------------------
# experiment configuration

@dataclass
class ExperimentConfig:
    """Flat experiment configuration; file format is `key=value` lines."""

    class_names: tuple[str, ...] = ()
    train_manifest: Optional[str] = None
    val_manifest: Optional[str] = None
    test_manifest: Optional[str] = None
    resize_size: int = 512
    low_res_equalize: Optional[int] = None
    patch_size: int = 64
    patches_per_image: int = 16
    temperature: float = 0.07
    learning_rate: float = 1e-4
    lr_decay_factor: float = 0.9
    lr_decay_interval: int = 500
    per_class_batch: int = 32
    max_epochs: int = 25
    checkpoint_epoch: int = 20
    rng_seed: int = 0

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        if self.patch_size > self.resize_size:
            raise ConfigError("patch_size must not exceed resize_size")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if not (0.0 < self.lr_decay_factor <= 1.0):
            raise ConfigError("lr_decay_factor must be in (0, 1]")
        for key in ("resize_size", "patch_size", "patches_per_image", "per_class_batch",
                    "max_epochs", "checkpoint_epoch", "lr_decay_interval"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")

    def label_space(self) -> LabelSpace:
        if not self.class_names:
            raise ConfigError("config does not define class_names")
        return LabelSpace(self.class_names)


_OPTIONAL_INT_KEYS = {"low_res_equalize"}
_PATH_KEYS = {"train_manifest", "val_manifest", "test_manifest"}
_INT_KEYS = {"resize_size", "patch_size", "patches_per_image", "lr_decay_interval",
             "per_class_batch", "max_epochs", "checkpoint_epoch", "rng_seed"}
_FLOAT_KEYS = {"temperature", "learning_rate", "lr_decay_factor"}


def _parse_config_value(key: str, raw: str):
    raw = raw.strip()
    if key == "class_names":
        return tuple(s.strip() for s in raw.split(",") if s.strip())
    if key in _PATH_KEYS:
        return raw or None
    if key in _OPTIONAL_INT_KEYS:
        return None if raw.lower() in ("", "none") else int(raw)
    if key in _INT_KEYS:
        return int(raw)
    if key in _FLOAT_KEYS:
        return float(raw)
    raise ConfigError(f"unknown config key {key!r}")


def load_config(path: str | Path, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Parse a flat key=value config file; unknown keys are rejected.

    `overrides` (already-typed values keyed by field name) win over the file.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    known = {f.name for f in fields(ExperimentConfig)}
    values: dict = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _parse_config_value(key, raw)
    if overrides:
        for key, val in overrides.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            if val is not None:
                values[key] = val
    try:
        return ExperimentConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e))


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for f in fields(ExperimentConfig):
        val = getattr(config, f.name)
        if f.name == "class_names":
            val = ",".join(val)
        elif val is None:
            val = ""
        lines.append(f"{f.name}={val}")
    path.write_text("\n".join(lines) + "\n")


def config_with(config: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(config, **changes)
