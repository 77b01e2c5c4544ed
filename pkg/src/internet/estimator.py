"""Correlation-based iterative homography estimation module.

A shared-weight CNN extracts 1/4-resolution features from both images, an
all-pairs correlation volume is built once, and a motion head repeatedly
reads a local window of that volume around the currently predicted
correspondences to refine the four corner displacements.
"""
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatch
from .geometry import image_corners, pixel_grid, project_points, solve_dlt

FEATURE_STRIDE = 4


class ResidualBlock(nn.Module):
    """Pre-activation residual block: (IN, ReLU, conv3x3) x 2 plus skip."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.norm1 = nn.InstanceNorm2d(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = nn.InstanceNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Identity() if in_ch == out_ch else nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x):
        y = self.conv1(F.relu(self.norm1(x)))
        y = self.conv2(F.relu(self.norm2(y)))
        return self.skip(x) + y


class FeatureExtractor(nn.Module):
    def __init__(self, in_ch=3, widths=(64, 96), out_dim=256):
        super().__init__()
        self.stem = nn.Conv2d(in_ch, widths[0], 7, padding=3)
        self.stem_norm = nn.InstanceNorm2d(widths[0])
        units = []
        prev = widths[0]
        for w in widths:
            units.append(nn.Sequential(nn.MaxPool2d(2), ResidualBlock(prev, w), ResidualBlock(w, w)))
            prev = w
        self.units = nn.Sequential(*units)
        self.proj = nn.Conv2d(prev, out_dim, 1)
        self.out_dim = out_dim

    def forward(self, x):
        if x.shape[-1] % FEATURE_STRIDE or x.shape[-2] % FEATURE_STRIDE:
            raise ShapeMismatch(f"input size {tuple(x.shape[-2:])} is not a multiple of {FEATURE_STRIDE}")
        x = F.relu(self.stem_norm(self.stem(x)))
        return self.proj(self.units(x))


def correlation_volume(f_a, f_b):
    """All-pairs correlation ``relu(<F_A(i,j), F_B(k,l)>)`` as (B, H, W, H, W)."""
    if f_a.shape != f_b.shape:
        raise ShapeMismatch(f"feature shapes differ: {tuple(f_a.shape)} vs {tuple(f_b.shape)}")
    B, D, H, W = f_a.shape
    corr = torch.einsum("bdn,bdm->bnm", f_a.reshape(B, D, H * W), f_b.reshape(B, D, H * W))
    return F.relu(corr).reshape(B, H, W, H, W)


def feature_homography(h, stride=FEATURE_STRIDE):
    """Express an image-space homography in feature-map coordinates."""
    s = torch.diag(torch.tensor([1.0 / stride, 1.0 / stride, 1.0], dtype=h.dtype, device=h.device))
    s_inv = torch.diag(torch.tensor([float(stride), float(stride), 1.0], dtype=h.dtype, device=h.device))
    return s @ h @ s_inv


def sample_correlation(corr, h_feat, radius):
    """Read a (2r+1)^2 window of ``corr`` around every projected source position.

    ``h_feat`` (B, 3, 3) is in feature coordinates. Output is
    (B, (2r+1)^2, H, W); channel ``(dy + r) * (2r + 1) + (dx + r)`` holds the
    value at offset ``(dx, dy)``.
    """
    if radius < 1:
        raise ValueError("search radius must be >= 1")
    B, H, W = corr.shape[:3]
    grid = pixel_grid(H, W, dtype=corr.dtype, device=corr.device)
    target = project_points(h_feat, grid.unsqueeze(0).expand(B, -1, -1, -1))  # B, H, W, 2
    d = torch.arange(-radius, radius + 1, dtype=corr.dtype, device=corr.device)
    dy, dx = torch.meshgrid(d, d, indexing="ij")
    offsets = torch.stack([dx, dy], dim=-1).reshape(-1, 2)  # K, 2
    pts = target.reshape(B * H * W, 1, -1, 2) + offsets  # BHW, 1, K, 2
    # align_corners=False maps integer pixels exactly for power-of-two sizes
    size = torch.tensor([W, H], dtype=corr.dtype, device=corr.device)
    norm = (2 * pts + 1) / size - 1
    norm = torch.nan_to_num(norm, nan=-2.0)
    vol = corr.reshape(B * H * W, 1, H, W)
    out = F.grid_sample(vol, norm, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out.reshape(B, H, W, -1).permute(0, 3, 1, 2).contiguous()


class MotionHead(nn.Module):
    """Motion aggregation blocks down to 2x2, then a 1x1 conv to a 2x2x2 cube."""

    def __init__(self, in_ch, spatial, hidden=128, groups=8):
        super().__init__()
        if spatial < 2 or spatial & (spatial - 1):
            raise ShapeMismatch(f"motion head needs a power-of-two spatial size >= 2, got {spatial}")
        blocks = []
        prev = in_ch
        size = spatial
        while size > 2:
            blocks += [nn.Conv2d(prev, hidden, 3, padding=1), nn.GroupNorm(groups, hidden), nn.ReLU(), nn.MaxPool2d(2)]
            prev = hidden
            size //= 2
        self.blocks = nn.Sequential(*blocks)
        self.out = nn.Conv2d(prev, 2, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.spatial = spatial

    def forward(self, x):
        if x.shape[-2:] != (self.spatial, self.spatial):
            raise ShapeMismatch(f"expected {self.spatial}x{self.spatial} input, got {tuple(x.shape[-2:])}")
        return cube_to_displacement(self.out(self.blocks(x)))


def cube_to_displacement(cube):
    """(B, 2, 2, 2) cube ``P[c, row, col]`` -> (B, 4, 2) corner offsets.

    Channel 0 is the u offset, channel 1 the v offset; (row, col) = (0, 0),
    (0, 1), (1, 0), (1, 1) are the TL, TR, BL, BR corners.
    """
    return cube.flatten(2).transpose(1, 2)


@dataclass
class EstimatorConfig:
    image_size: int = 128
    widths: tuple = (64, 96)
    feature_dim: int = 256
    head_hidden: int = 128
    head_groups: int = 8
    radius: int = 4
    n_iters: int = 6
    detach_iterations: bool = False


@dataclass
class EstimatorState:
    """Refinement state; ``h`` is always ``solve_dlt(corners, displacement)``."""

    iteration: int
    displacement: torch.Tensor
    h: torch.Tensor
    history: list = field(default_factory=list)


class HomographyEstimator(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        self.config = config or EstimatorConfig()
        c = self.config
        self.feature_extractor = FeatureExtractor(widths=tuple(c.widths), out_dim=c.feature_dim)
        self.motion_head = MotionHead(
            (2 * c.radius + 1) ** 2, c.image_size // FEATURE_STRIDE, hidden=c.head_hidden, groups=c.head_groups
        )

    def features(self, img_a, img_b):
        f = self.feature_extractor(torch.cat([img_a, img_b], dim=0))
        return f.chunk(2, dim=0)

    def forward(self, img_a, img_b, n_iters=None, return_state=False):
        """Return the list of per-iteration displacements (B, 4, 2)."""
        c = self.config
        n_iters = n_iters or c.n_iters
        if img_a.shape != img_b.shape or img_a.shape[-1] != c.image_size or img_a.shape[-2] != c.image_size:
            raise ShapeMismatch(
                f"expected two {c.image_size}x{c.image_size} images, got {tuple(img_a.shape)} and {tuple(img_b.shape)}"
            )
        f_a, f_b = self.features(img_a, img_b)
        corr = correlation_volume(f_a, f_b)
        B = img_a.shape[0]
        corners = image_corners(c.image_size, c.image_size, dtype=img_a.dtype, device=img_a.device)
        disp = img_a.new_zeros(B, 4, 2)
        state = EstimatorState(0, disp, solve_dlt(corners, disp))
        for n in range(n_iters):
            state.iteration = n
            src = state.displacement.detach() if c.detach_iterations else state.displacement
            h = solve_dlt(corners, src, iteration=n)
            sampled = sample_correlation(corr, feature_homography(h), c.radius)
            state.displacement = state.displacement + self.motion_head(sampled)
            state.h = solve_dlt(corners, state.displacement, iteration=n)
            state.history.append(state.displacement)
        return state if return_state else state.history


def estimate(model, img_a, img_b, n_iters=None):
    """Final displacement and per-iteration history."""
    history = model(img_a, img_b, n_iters=n_iters)
    return history[-1], history
