"""The attribution network: 8-layer convolutional encoder with global average
pooling, a 2-layer projection head producing unit-norm 128-d embeddings, and
a linear classification head.

Conv layers alternate kernel [4,4] stride 2 and [3,3] stride 1 (padding 1 in
both), channels 64,64,128,128,256,256,512,512, each followed by batch norm
and leaky ReLU with slope 0.2. The global pool makes the feature dimension
512 for any input of spatial size >= 16, so training runs on small patches
while inference runs on full images.
"""

from __future__ import annotations

import pickle
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import MIN_IMAGE_SIDE, LabelSpace
from .losses import LossWeights

LRELU_SLOPE = 0.2
FEATURE_DIM = 512
EMBED_DIM = 128
NORM_EPS = 1e-12  # guards the projection's length normalization


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple[int, ...] = (64, 64, 128, 128, 256, 256, 512, 512)
    slope: float = LRELU_SLOPE


class Encoder(nn.Module):
    """Conv blocks + global average pool to a 512-vector."""

    def __init__(self, config: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.config = config
        blocks = []
        c_in = 3
        for i, c_out in enumerate(config.channels):
            k, s = ((4, 2) if i % 2 == 0 else (3, 1))
            blocks.append(nn.Sequential(
                nn.Conv2d(c_in, c_out, k, s, padding=1, bias=False),
                nn.BatchNorm2d(c_out),
                nn.LeakyReLU(config.slope),
            ))
            c_in = c_out
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x, return_block: int | None = None):
        if x.shape[-1] < MIN_IMAGE_SIDE or x.shape[-2] < MIN_IMAGE_SIDE:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} below minimum {MIN_IMAGE_SIDE}")
        block_out = None
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if return_block == i:
                block_out = x
        feats = x.mean(dim=(2, 3))
        if return_block is not None:
            return feats, block_out
        return feats


class ProjectionHead(nn.Module):
    def __init__(self):
        super().__init__()
        self.fc1 = nn.Linear(FEATURE_DIM, FEATURE_DIM)
        self.fc2 = nn.Linear(FEATURE_DIM, EMBED_DIM)

    def forward(self, feats):
        z = self.fc2(F.relu(self.fc1(feats)))
        return z / z.norm(dim=1, keepdim=True).clamp(min=NORM_EPS)


class AttributionNet(nn.Module):
    """Encoder + projection + classifier + loss-weighting parameters."""

    def __init__(self, num_classes: int, encoder_config: EncoderConfig = EncoderConfig()):
        super().__init__()
        if num_classes < 2:
            raise ValueError("need at least 2 classes")
        self.num_classes = num_classes
        self.encoder = Encoder(encoder_config)
        self.projection = ProjectionHead()
        self.classifier = nn.Linear(FEATURE_DIM, num_classes)
        self.loss_weights = LossWeights()
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, a=LRELU_SLOPE, mode="fan_in",
                                        nonlinearity="leaky_relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def forward(self, x):
        feats = self.encoder(x)
        return self.classifier(feats), self.projection(feats)


# functional surface ---------------------------------------------------------

def images_to_tensor(images) -> torch.Tensor:
    """Stack HxWx3 buffers into an N,3,H,W float tensor (uniform shapes only)."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError("expected a batch of HxWx3 buffers")
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def encoder_forward(net: AttributionNet, batch: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return net.encoder(batch)


def project(net: AttributionNet, feats: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return net.projection(feats)


def classify(net: AttributionNet, feats: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return net.classifier(feats)


def predict_classes(net: AttributionNet, batch: torch.Tensor) -> np.ndarray:
    net.eval()
    with torch.no_grad():
        logits = net.classifier(net.encoder(batch))
    return logits.argmax(dim=1).numpy()


def gradcam(net: AttributionNet, image: np.ndarray, target_class: int,
            layer: int = 4) -> np.ndarray:
    """Gradient-weighted class activation map at one encoder block.

    Returns a heatmap of the input's spatial size, nonnegative and
    max-normalized to 1 (an all-zero map passes through as zeros).
    """
    n_blocks = len(net.encoder.blocks)
    if not (1 <= layer <= n_blocks):
        raise ValueError(f"layer must be in [1, {n_blocks}]")
    if not (0 <= target_class < net.num_classes):
        raise ValueError("target_class out of range")
    net.eval()
    x = images_to_tensor([image])
    acts = None
    out = x
    for i, block in enumerate(net.encoder.blocks, start=1):
        out = block(out)
        if i == layer:
            acts = out
    feats = out.mean(dim=(2, 3))
    logits = net.classifier(feats)
    net.zero_grad(set_to_none=True)
    grads = torch.autograd.grad(logits[0, target_class], acts)[0]

    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * acts).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)
    cam = cam[0, 0].detach().numpy()
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return cam


# checkpoints ----------------------------------------------------------------

CHECKPOINT_FORMAT = 1


def save_checkpoint(net: AttributionNet, path: str | Path, labels: LabelSpace,
                    iteration: int = 0) -> None:
    """Self-describing container; byte-stable for identical state."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "encoder_config": asdict(net.encoder.config),
        "num_classes": net.num_classes,
        "class_names": list(labels.class_names),
        "iteration": int(iteration),
        "state": {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(pickle.dumps(payload, protocol=4))


def load_checkpoint(path: str | Path) -> tuple[AttributionNet, LabelSpace, int]:
    payload = pickle.loads(Path(path).read_bytes())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {payload.get('format')!r}")
    cfg = EncoderConfig(channels=tuple(payload["encoder_config"]["channels"]),
                        slope=payload["encoder_config"]["slope"])
    net = AttributionNet(payload["num_classes"], cfg)
    state = {k: torch.from_numpy(np.asarray(v)) for k, v in payload["state"].items()}
    net.load_state_dict(state)
    net.eval()
    return net, LabelSpace(tuple(payload["class_names"])), payload["iteration"]


def surgery_for_new_head(ckpt_path: str | Path, num_classes: int) -> AttributionNet:
    """Start a new run from a pretrained encoder + projection.

    The classifier head and the loss-weighting parameters are re-initialized
    because class counts differ between the two steps.
    """
    old, _, _ = load_checkpoint(ckpt_path)
    net = AttributionNet(num_classes, old.encoder.config)
    net.encoder.load_state_dict(old.encoder.state_dict())
    net.projection.load_state_dict(old.projection.state_dict())
    return net
