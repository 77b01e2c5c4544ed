"""Transformer U-shaped generator translating modality A towards modality B.

Layout: 3x3 conv embedding, four encoder stages (two shifted-window blocks,
space-to-depth, 1x1 conv doubling the channels), a six-block bottleneck,
four mirrored decoder stages (depth-to-space, 1x1 conv, concatenated skip,
two blocks) and a 1x1 conv back to three channels. The output is not
squashed; clamp only for display.
"""
import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ShapeMismatch


@dataclass
class GeneratorConfig:
    base_channels: int = 32
    window_size: int = 8
    depths: tuple = (2, 2, 2, 2)
    bottleneck_depth: int = 6
    heads: tuple = (1, 2, 4, 8, 16)  # per encoder/decoder stage, last entry for the bottleneck
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if len(self.depths) != 4 or len(self.heads) != 5:
            raise ShapeMismatch("generator needs 4 stage depths and 5 head counts")
        for s, h in enumerate(self.heads):
            if (self.base_channels * 2**s) % h:
                raise ShapeMismatch(f"stage {s} width {self.base_channels * 2**s} not divisible by {h} heads")


def window_attention(q, k, v, bias=None):
    """``softmax(q k^T / sqrt(d) + bias) v`` over the last two dims."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch(f"incompatible q/k/v shapes {tuple(q.shape)}, {tuple(k.shape)}, {tuple(v.shape)}")
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if bias is not None:
        logits = logits + bias
    return torch.softmax(logits, dim=-1) @ v


def window_partition(x, m):
    B, H, W, C = x.shape
    x = x.reshape(B, H // m, m, W // m, m, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, m * m, C)


def window_reverse(windows, m, B, H, W):
    x = windows.reshape(B, H // m, W // m, m, m, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(B, H, W, -1)


def relative_position_index(m):
    coords = torch.stack(torch.meshgrid(torch.arange(m), torch.arange(m), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (m - 1)
    return rel[..., 0] * (2 * m - 1) + rel[..., 1]


def shift_mask(H, W, m, shift):
    """Additive mask keeping cyclically shifted windows from mixing regions."""
    label = torch.zeros(H, W)
    cnt = 0
    for hs in (slice(0, -m), slice(-m, -shift), slice(-shift, None)):
        for ws in (slice(0, -m), slice(-m, -shift), slice(-shift, None)):
            label[hs, ws] = cnt
            cnt += 1
    lw = window_partition(label[None, :, :, None], m).squeeze(-1)
    diff = lw[:, None, :] - lw[:, :, None]
    return torch.where(diff != 0, torch.tensor(-100.0), torch.tensor(0.0))


class SwinBlock(nn.Module):
    def __init__(self, dim, heads, window, shift, mlp_ratio=4.0):
        super().__init__()
        self.dim, self.heads, self.window, self.shift = dim, heads, window, shift
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.bias_table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        nn.init.trunc_normal_(self.bias_table, std=0.02)
        self.register_buffer("rel_index", relative_position_index(window), persistent=False)
        self._mask_cache = {}

    def _mask(self, H, W, device):
        key = (H, W)
        if key not in self._mask_cache:
            self._mask_cache[key] = shift_mask(H, W, self.window, self.shift).to(device)
        return self._mask_cache[key]

    def forward(self, x):
        B, H, W, C = x.shape
        m = self.window
        if H % m or W % m:
            raise ShapeMismatch(f"feature size {H}x{W} not divisible by window {m}")
        shift = self.shift if min(H, W) > m else 0
        y = self.norm1(x)
        if shift:
            y = torch.roll(y, shifts=(-shift, -shift), dims=(1, 2))
        win = window_partition(y, m)  # nB, m*m, C
        n = win.shape[1]
        qkv = self.qkv(win).reshape(-1, n, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        bias = self.bias_table[self.rel_index.reshape(-1)].reshape(n, n, -1).permute(2, 0, 1)
        if shift:
            mask = self._mask(H, W, x.device)
            bias = (bias[None] + mask[:, None]).repeat(B, 1, 1, 1)
        out = window_attention(qkv[0], qkv[1], qkv[2], bias)
        out = self.proj(out.transpose(1, 2).reshape(-1, n, C))
        out = window_reverse(out, m, B, H, W)
        if shift:
            out = torch.roll(out, shifts=(shift, shift), dims=(1, 2))
        x = x + out
        return x + self.mlp(self.norm2(x))


class SwinStage(nn.Module):
    def __init__(self, dim, depth, heads, window, mlp_ratio):
        super().__init__()
        self.blocks = nn.ModuleList(
            SwinBlock(dim, heads, window, 0 if i % 2 == 0 else window // 2, mlp_ratio) for i in range(depth)
        )

    def forward(self, x):
        # x: B, C, H, W
        y = x.permute(0, 2, 3, 1)
        for blk in self.blocks:
            y = blk(y)
        return y.permute(0, 3, 1, 2).contiguous()


class ModalityTransfer(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        self.config = c = config or GeneratorConfig()
        C, M = c.base_channels, c.window_size
        self.embed = nn.Conv2d(3, C, 3, padding=1)
        self.encoders = nn.ModuleList()
        self.downs = nn.ModuleList()
        for s in range(4):
            dim = C * 2**s
            self.encoders.append(SwinStage(dim, c.depths[s], c.heads[s], M, c.mlp_ratio))
            self.downs.append(nn.Sequential(nn.PixelUnshuffle(2), nn.Conv2d(4 * dim, 2 * dim, 1)))
        self.bottleneck = SwinStage(C * 16, c.bottleneck_depth, c.heads[4], M, c.mlp_ratio)
        self.ups = nn.ModuleList()
        self.fuse = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for s in reversed(range(4)):
            dim = C * 2**s
            self.ups.append(nn.Sequential(nn.PixelShuffle(2), nn.Conv2d(dim // 2, dim, 1)))
            self.fuse.append(nn.Conv2d(2 * dim, dim, 1))
            self.decoders.append(SwinStage(dim, c.depths[s], c.heads[s], M, c.mlp_ratio))
        self.head = nn.Conv2d(C, 3, 1)
        self.stage_shapes = []

    def forward(self, img):
        c = self.config
        H, W = img.shape[-2:]
        if img.shape[-3] != 3 or H % (16 * c.window_size) or W % (16 * c.window_size):
            raise ShapeMismatch(
                f"input {tuple(img.shape)} must be 3-channel with sides divisible by {16 * c.window_size}"
            )
        shapes = []
        x = self.embed(img)
        skips = []
        for enc, down in zip(self.encoders, self.downs):
            x = enc(x)
            skips.append(x)
            x = down(x)
            shapes.append(tuple(x.shape[1:]))
        x = self.bottleneck(x)
        shapes.append(tuple(x.shape[1:]))
        for up, fuse, dec, skip in zip(self.ups, self.fuse, self.decoders, reversed(skips)):
            x = up(x)
            if x.shape != skip.shape:
                raise ShapeMismatch(f"skip shape {tuple(skip.shape)} does not match decoder {tuple(x.shape)}")
            x = dec(fuse(torch.cat([x, skip], dim=1)))
            shapes.append(tuple(x.shape[1:]))
        self.stage_shapes = shapes
        return self.head(x)


def transfer(model, img):
    return model(img)
