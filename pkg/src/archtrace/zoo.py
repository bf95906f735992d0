"""Synthetic generator zoo: the four generator architectures instantiated
with random weights under controlled seeds.

No GAN training happens here. Random-weight generators still imprint the
traces of their structural components (upsampler kind, block wiring,
normalization), which is what the attribution experiments need; varying the
weight seed stands in for retraining with a different seed. Loss functions
and discriminators are not part of an architecture and do not exist here.

Architectures (structural components):
  ProGAN      DCGAN blocks, no skip, nearest upsampling, pixel norm
  MMDGAN      ResNet blocks, upsample+conv skip, depth-to-space, batch norm
  SNGAN       ResNet blocks, upsample+conv skip, nearest, batch norm
  InfoMaxGAN  ResNet blocks, upsample+conv skip, bilinear, batch norm

SNGAN and InfoMaxGAN share the block structure and differ only in the
upsampling layer. Batch norm uses per-chunk statistics at sampling time
(there are no trained running stats), with a fixed chunk size so sampling
stays deterministic.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (DatasetManifest, ManifestRecord, save_manifest, save_image)

SAMPLE_CHUNK = 32   # batch-norm statistics window during sampling
INIT_STD_GAIN = 0.2  # trunc-normal std = 0.2 / sqrt(fan_in), cut at 2 std

BLOCK_TYPES = ("DCGAN", "ResNet")
SKIP_KINDS = ("none", "upsample_conv")
UPSAMPLE_KINDS = ("nearest", "bilinear", "depth_to_space")
NORM_KINDS = ("pixel_norm", "batch_norm")
NONLINEARITIES = ("sigmoid", "tanh", "none")
TAILS = ("to_rgb_conv", "bn_relu_conv", "bn_relu_deconv")


@dataclass(frozen=True)
class GeneratorSpec:
    name: str
    block_type: str
    skip_connect: str
    upsample: str
    norm: str
    latent_dim: int
    stem_channels: int
    stage_channels: tuple[int, ...]
    output_resolution: int
    output_nonlinearity: str
    tail: str

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        if self.block_type not in BLOCK_TYPES or self.skip_connect not in SKIP_KINDS \
                or self.upsample not in UPSAMPLE_KINDS or self.norm not in NORM_KINDS \
                or self.output_nonlinearity not in NONLINEARITIES or self.tail not in TAILS:
            raise ValueError(f"invalid component in spec {self.name!r}")
        n_up = len(self.stage_channels) + (1 if self.tail == "bn_relu_deconv" else 0)
        if self.output_resolution != 4 * 2 ** n_up:
            raise ValueError(f"{self.name}: output_resolution {self.output_resolution} "
                             f"inconsistent with {n_up} upsampling stages")
        if self.upsample == "depth_to_space":
            c_in = self.stem_channels
            for c_out in self.stage_channels:
                if c_in % 4 != 0:
                    raise ValueError(f"{self.name}: depth_to_space needs input channels "
                                     f"divisible by 4, got {c_in}")
                c_in = c_out


def builtin_specs(output_resolution: int = 64) -> list[GeneratorSpec]:
    """The four architectures at 64px (desk scale) or 128px (full schedule)."""
    if output_resolution == 128:
        pro, mmd, sn = (512, 512, 512, 256, 128), (512, 256, 128, 64), (1024, 512, 256, 128, 64)
    elif output_resolution == 64:
        pro, mmd, sn = (512, 512, 256, 128), (512, 256, 128), (512, 256, 128, 64)
    else:
        raise ValueError("output_resolution must be 64 or 128")
    return [
        GeneratorSpec("ProGAN", "DCGAN", "none", "nearest", "pixel_norm",
                      512, 512, pro, output_resolution, "none", "to_rgb_conv"),
        GeneratorSpec("MMDGAN", "ResNet", "upsample_conv", "depth_to_space", "batch_norm",
                      100, 1024, mmd, output_resolution, "sigmoid", "bn_relu_deconv"),
        GeneratorSpec("SNGAN", "ResNet", "upsample_conv", "nearest", "batch_norm",
                      128, 1024, sn, output_resolution, "tanh", "bn_relu_conv"),
        GeneratorSpec("InfoMaxGAN", "ResNet", "upsample_conv", "bilinear", "batch_norm",
                      128, 1024, sn, output_resolution, "tanh", "bn_relu_conv"),
    ]


# building blocks -------------------------------------------------------------

class PixelNorm(nn.Module):
    def forward(self, x):
        return x / torch.sqrt(x.pow(2).mean(dim=1, keepdim=True) + 1e-8)


class Upsample2x(nn.Module):
    """One of the three upsamplers; depth-to-space divides channels by 4."""

    def __init__(self, mode: str):
        super().__init__()
        self.mode = mode

    def forward(self, x):
        if self.mode == "depth_to_space":
            return F.pixel_shuffle(x, 2)
        return F.interpolate(x, scale_factor=2, mode=self.mode)


def _up_channels(c_in: int, mode: str) -> int:
    return c_in // 4 if mode == "depth_to_space" else c_in


class DCBlock(nn.Module):
    """Upsample, then two conv + LReLU + pixel-norm stages."""

    def __init__(self, c_in, c_out, up_mode):
        super().__init__()
        c_up = _up_channels(c_in, up_mode)
        self.net = nn.Sequential(
            Upsample2x(up_mode),
            nn.Conv2d(c_up, c_out, 3, 1, 1), nn.LeakyReLU(0.2), PixelNorm(),
            nn.Conv2d(c_out, c_out, 3, 1, 1), nn.LeakyReLU(0.2), PixelNorm(),
        )

    def forward(self, x):
        return self.net(x)


class ResBlock(nn.Module):
    """Two paths merged by addition; the skip path is upsample + conv."""

    def __init__(self, c_in, c_out, up_mode):
        super().__init__()
        c_up = _up_channels(c_in, up_mode)
        self.skip = nn.Sequential(Upsample2x(up_mode), nn.Conv2d(c_up, c_out, 3, 1, 1))
        self.main = nn.Sequential(
            nn.BatchNorm2d(c_in), nn.ReLU(),
            Upsample2x(up_mode), nn.Conv2d(c_up, c_out, 3, 1, 1),
            nn.BatchNorm2d(c_out), nn.ReLU(),
            nn.Conv2d(c_out, c_out, 3, 1, 1),
        )

    def forward(self, x):
        return self.skip(x) + self.main(x)


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        c0 = spec.stem_channels
        if spec.block_type == "DCGAN":
            self.stem_norm = PixelNorm()
            self.stem_fc = nn.Linear(spec.latent_dim, 16 * c0)
            self.stem_conv = nn.Sequential(
                nn.LeakyReLU(0.2), PixelNorm(),
                nn.Conv2d(c0, c0, 3, 1, 1), nn.LeakyReLU(0.2), PixelNorm())
            block_cls = DCBlock
        else:
            self.stem_fc = nn.Linear(spec.latent_dim, 16 * c0)
            block_cls = ResBlock
        blocks, c_in = [], c0
        for c_out in spec.stage_channels:
            blocks.append(block_cls(c_in, c_out, spec.upsample))
            c_in = c_out
        self.blocks = nn.Sequential(*blocks)
        if spec.tail == "to_rgb_conv":
            self.tail = nn.Conv2d(c_in, 3, 3, 1, 1)
        elif spec.tail == "bn_relu_conv":
            self.tail = nn.Sequential(nn.BatchNorm2d(c_in), nn.ReLU(), nn.Conv2d(c_in, 3, 3, 1, 1))
        else:
            self.tail = nn.Sequential(nn.BatchNorm2d(c_in), nn.ReLU(),
                                      nn.ConvTranspose2d(c_in, 3, 5, 2, padding=2, output_padding=1))

    def forward(self, z):
        if self.spec.block_type == "DCGAN":
            z = self.stem_norm(z)
        x = self.stem_fc(z).view(z.shape[0], self.spec.stem_channels, 4, 4)
        if self.spec.block_type == "DCGAN":
            x = self.stem_conv(x)
        x = self.tail(self.blocks(x))
        if self.spec.output_nonlinearity == "sigmoid":
            return torch.sigmoid(x)
        if self.spec.output_nonlinearity == "tanh":
            return torch.tanh(x)
        return x


@dataclass(frozen=True)
class GeneratorInstance:
    spec: GeneratorSpec
    weight_seed: int
    module: Generator


def build_generator(spec: GeneratorSpec, weight_seed: int) -> GeneratorInstance:
    """Instantiate the architecture with weights fixed by (spec, weight_seed).

    Conv/linear weights are truncated-normal with std 0.2/sqrt(fan_in), cut
    at two standard deviations; biases zero. Absolute-scale init saturates
    the output nonlinearity into near-binary images, which would erase the
    component traces, hence the fan-in scaling.
    """
    g = torch.Generator().manual_seed(
        zlib.crc32(f"{spec.name}/{weight_seed}".encode()) & 0x7FFFFFFF)
    module = Generator(spec)
    for _, p in sorted(module.named_parameters()):
        if p.dim() >= 2:  # conv / deconv / linear weights
            fan_in = int(np.prod(p.shape[1:]))
            std = INIT_STD_GAIN / np.sqrt(fan_in)
            nn.init.trunc_normal_(p, std=std, a=-2 * std, b=2 * std, generator=g)
        else:
            nn.init.zeros_(p)
    # batch-norm affine params: identity transform
    for m in module.modules():
        if isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    module.train()  # batch-norm uses per-chunk stats; no trained running stats exist
    return GeneratorInstance(spec, weight_seed, module)


def sample_images(inst: GeneratorInstance, n: int, latent_seed: int) -> list[np.ndarray]:
    """Draw n images; standard-normal latents, deterministic given latent_seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    g = torch.Generator().manual_seed(int(latent_seed) & 0x7FFFFFFF)
    z = torch.randn(n, inst.spec.latent_dim, generator=g)
    outs = []
    with torch.no_grad():
        for start in range(0, n, SAMPLE_CHUNK):
            x = inst.module(z[start:start + SAMPLE_CHUNK])
            if inst.spec.output_nonlinearity == "tanh":
                x = (x + 1.0) / 2.0
            elif inst.spec.output_nonlinearity == "none":
                x = 0.5 + 0.5 * x
            x = x.clamp(0.0, 1.0)
            outs.extend(x.permute(0, 2, 3, 1).numpy().astype(np.float32))
    return outs


# dataset emission ------------------------------------------------------------

def make_zoo_dataset(specs: list[GeneratorSpec], seeds_per_arch: int, n_per_model: int,
                     out_dir: str | Path, val_fraction: float = 0.1) -> DatasetManifest:
    """Sample every (architecture, weight seed) model into out_dir.

    Seed-0 records are split train/val (every k-th record goes to val);
    records from seeds >= 1 form the cross-seed test pool.
    """
    if not specs:
        raise ValueError("specs must be non-empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    val_every = max(2, round(1.0 / val_fraction)) if val_fraction > 0 else 0
    records = []
    for spec in specs:
        for weight_seed in range(seeds_per_arch):
            inst = build_generator(spec, weight_seed)
            latent_seed = zlib.crc32(f"latents/{spec.name}/{weight_seed}".encode())
            images = sample_images(inst, n_per_model, latent_seed)
            model_id = f"{spec.name}_s{weight_seed}"
            for i, img in enumerate(images):
                name = f"{model_id}_{i:04d}.png"
                save_image(img, out_dir / name)
                if weight_seed == 0:
                    split = "val" if val_every and i % val_every == val_every - 1 else "train"
                else:
                    split = "test"
                records.append(ManifestRecord(
                    image_path=name, class_label=spec.name, architecture_id=spec.name,
                    model_id=model_id, seed=weight_seed, source_dataset="zoo", split=split))
    manifest = DatasetManifest(tuple(records))
    save_manifest(manifest, out_dir / "manifest.csv")
    (out_dir / "zoo.txt").write_text(describe_zoo(specs, seeds_per_arch, n_per_model))
    return manifest


def describe_zoo(specs, seeds_per_arch, n_per_model) -> str:
    lines = [f"generator zoo: {len(specs)} architectures x {seeds_per_arch} seeds "
             f"x {n_per_model} images"]
    for s in specs:
        lines.append(f"  {s.name}: block={s.block_type} skip={s.skip_connect} "
                     f"up={s.upsample} norm={s.norm} latent={s.latent_dim} "
                     f"stages={s.stage_channels} res={s.output_resolution} "
                     f"out={s.output_nonlinearity} tail={s.tail}")
    return "\n".join(lines) + "\n"


# spectral diagnostics --------------------------------------------------------

def mirror_band_energy_ratio(images: list[np.ndarray], band: float = 0.375) -> float:
    """Fraction of AC spectral energy in the near-Nyquist mirror bands.

    Nearest-neighbour upsampling leaves spectral replicas of the low-frequency
    content near the Nyquist rows/columns; smoother kernels attenuate them.
    """
    ratios = []
    for img in images:
        gray = np.asarray(img, dtype=np.float64).mean(axis=2)
        gray = gray - gray.mean()
        p = np.abs(np.fft.fft2(gray)) ** 2
        fy = np.abs(np.fft.fftfreq(gray.shape[0]))[:, None]
        fx = np.abs(np.fft.fftfreq(gray.shape[1]))[None, :]
        mask = (np.maximum(fy, fx) >= band)
        total = p.sum() - p[0, 0]
        if total <= 0:
            continue
        ratios.append(p[mask].sum() / total)
    return float(np.mean(ratios))
