"""Training losses: iterative homography loss, perceptual transfer loss,
feature-consistency (FGHomo) loss and the pixel-loss ablation variants."""
import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, LayerOutOfRange, ShapeMismatch

logger = logging.getLogger(__name__)

BACKBONE_ENV = "INTERNET_BACKBONE_CACHE"
VGG16_FILE = "vgg16-397923af.pth"
VGG16_SHA256_PREFIX = "397923af"
# relu1_2, relu2_2, relu3_3 in torchvision's vgg16().features
VGG16_LAYERS = (3, 8, 15)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class LossConfig:
    alpha: float = 0.8
    trans_type: str = "perceptual"  # l1 | l2 | perceptual
    fghomo_type: str = "correlation"  # none | l1 | l2 | correlation
    fghomo_weight: float = 1.0
    perceptual_layers: tuple = field(default=None)

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ConfigError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.trans_type not in ("l1", "l2", "perceptual"):
            raise ConfigError(f"unknown trans_type {self.trans_type!r}")
        if self.fghomo_type not in ("none", "l1", "l2", "correlation"):
            raise ConfigError(f"unknown fghomo_type {self.fghomo_type!r}")


def sequence_weights(n, alpha):
    return [alpha ** (n - i - 1) for i in range(n)]


def homography_loss(history, d_gt, alpha=0.8):
    """Decayed sum of per-iteration L1 displacement errors.

    The L1 norm sums over the 8 displacement scalars; the result is averaged
    over the batch.
    """
    if len(history) < 1:
        raise ValueError("empty estimate history")
    weights = sequence_weights(len(history), alpha)
    total = 0.0
    for w, d in zip(weights, history):
        err = (d - d_gt).abs().reshape(-1, 8).sum(dim=1).mean()
        total = total + w * err
    return total


def pixel_loss(img1, img2, kind="l1"):
    if kind == "l1":
        return (img1 - img2).abs().mean()
    if kind == "l2":
        return ((img1 - img2) ** 2).mean()
    raise ConfigError(f"unknown pixel loss {kind!r}")


class FeatureNet(nn.Module):
    """Frozen convolutional backbone returning activations at chosen layers."""

    def __init__(self, features, layers, mean=None, std=None, name="backbone"):
        super().__init__()
        self.features = features
        self.default_layers = tuple(layers)
        self.name = name
        self.register_buffer("mean", torch.tensor(mean or (0.0, 0.0, 0.0)).reshape(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(std or (1.0, 1.0, 1.0)).reshape(1, 3, 1, 1), persistent=False)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        # always stays in inference mode
        return super().train(False)

    def forward(self, x, layers=None):
        layers = tuple(self.default_layers if layers is None else layers)
        n = len(self.features)
        for j in layers:
            if not 0 <= j < n:
                raise LayerOutOfRange(f"layer {j} outside backbone with {n} layers")
        x = (x - self.mean) / self.std
        out = []
        last = max(layers)
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in layers:
                out.append(x)
            if i == last:
                break
        return out


def standin_backbone(seed=0, widths=(64, 64, 64)):
    """Small randomly initialised VGG-style backbone for offline use and tests.

    A random ReLU layer only preserves its input when it is well over-complete
    (3x3x3 = 27 inputs here); with 16 or 32 first-layer channels a generator
    trained against it drifts to outputs unrelated to the target.
    """
    gen = torch.Generator().manual_seed(seed)
    layers, taps = [], []
    prev = 3
    for i, w in enumerate(widths):
        if i:
            layers.append(nn.MaxPool2d(2))
        for _ in range(2):
            conv = nn.Conv2d(prev, w, 3, padding=1)
            with torch.no_grad():
                conv.weight.normal_(0.0, (2.0 / (prev * 9)) ** 0.5, generator=gen)
                conv.bias.zero_()
            layers += [conv, nn.ReLU()]
            prev = w
        taps.append(len(layers) - 1)
    return FeatureNet(nn.Sequential(*layers), taps, name=f"standin-{seed}")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def vgg16_backbone(cache_dir=None):
    """ImageNet VGG-16 read from ``$INTERNET_BACKBONE_CACHE/vgg16-397923af.pth``.

    Fetch the file once with
    ``curl -o $INTERNET_BACKBONE_CACHE/vgg16-397923af.pth https://download.pytorch.org/models/vgg16-397923af.pth``.
    The content hash must start with the prefix in the file name.
    """
    from torchvision.models import vgg16

    cache_dir = Path(cache_dir or os.environ.get(BACKBONE_ENV, Path.home() / ".cache" / "internet"))
    path = cache_dir / VGG16_FILE
    if not path.is_file():
        raise FileNotFoundError(f"pretrained backbone not found at {path}")
    digest = _sha256(path)
    if not digest.startswith(VGG16_SHA256_PREFIX):
        raise ConfigError(f"{path} has sha256 {digest[:12]}..., expected prefix {VGG16_SHA256_PREFIX}")
    model = vgg16(weights=None)
    model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    return FeatureNet(model.features[: max(VGG16_LAYERS) + 1], VGG16_LAYERS, IMAGENET_MEAN, IMAGENET_STD, "vgg16")


def load_backbone(name="auto", seed=0):
    if name == "standin":
        return standin_backbone(seed)
    if name == "vgg16":
        return vgg16_backbone()
    if name == "auto":
        try:
            return vgg16_backbone()
        except FileNotFoundError as exc:
            logger.warning("%s; using the random stand-in backbone", exc)
            return standin_backbone(seed)
    raise ConfigError(f"unknown backbone {name!r}")


def perceptual_loss(img1, img2, feature_net, layers=None):
    """Sum over layers of the per-element mean squared feature difference,
    averaged over the batch."""
    if img1.shape != img2.shape:
        raise ShapeMismatch(f"image shapes differ: {tuple(img1.shape)} vs {tuple(img2.shape)}")
    f1 = feature_net(img1, layers)
    f2 = feature_net(img2, layers)
    total = 0.0
    for a, b in zip(f1, f2):
        total = total + ((a - b) ** 2).flatten(1).mean(dim=1).mean()
    return total


def fghomo_loss(f_a, f_b, kind="correlation"):
    """Feature consistency between warped pseudo image and target features.

    ``correlation`` is the negative sum over positions of same-position inner
    products (batch averaged) and is unbounded below.
    """
    if f_a.shape != f_b.shape:
        raise ShapeMismatch(f"feature shapes differ: {tuple(f_a.shape)} vs {tuple(f_b.shape)}")
    if kind == "correlation":
        fa = f_a if f_a.dim() == 4 else f_a[None]
        fb = f_b if f_b.dim() == 4 else f_b[None]
        return -(fa * fb).sum(dim=(1, 2, 3)).mean()
    if kind in ("l1", "l2"):
        return pixel_loss(f_a, f_b, kind)
    raise ConfigError(f"unknown FGHomo loss {kind!r}")


def transfer_loss(warped, target, kind, feature_net=None, layers=None):
    if kind == "perceptual":
        return perceptual_loss(warped, target, feature_net, layers)
    return pixel_loss(warped, target, kind)
