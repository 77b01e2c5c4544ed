"""Paired-image datasets, synthetic perturbation pairs and toy modalities."""
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import DataError, DegenerateWarp, MissingPair, SingularSystem, UnknownPreset, UnreadableImage
from .geometry import image_corners, solve_dlt, warp_image

logger = logging.getLogger(__name__)

PATCH_SIZE = 128
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff")
MAX_REDRAWS = 8
GAMMA = 2.2
PRESETS = ("invert-gamma", "channel-mix-blur", "edge-like")


@dataclass
class SamplePair:
    """One record of the training or evaluation stream.

    Training records carry two intra-modal pairs (``img_a``/``img_a_warp`` and
    ``img_b``/``img_b_warp``) with their displacements. Evaluation records
    carry ``img_a`` and the deformed ``img_b`` plus ``d_ab_gt`` only.
    """

    img_a: torch.Tensor
    img_b: torch.Tensor
    img_a_warp: Optional[torch.Tensor] = None
    img_b_warp: Optional[torch.Tensor] = None
    d_a_gt: Optional[torch.Tensor] = None
    d_b_gt: Optional[torch.Tensor] = None
    d_ab_gt: Optional[torch.Tensor] = None


@dataclass
class Record:
    path_a: str
    path_b: str
    split: str


@dataclass
class DatasetManifest:
    records: list
    split: str
    seed: int = 0

    def __len__(self):
        return len(self.records)

    def to_json(self, path):
        payload = {"split": self.split, "seed": self.seed, "records": [asdict(r) for r in self.records]}
        Path(path).write_text(json.dumps(payload, indent=1))

    @classmethod
    def from_json(cls, path):
        payload = json.loads(Path(path).read_text())
        return cls([Record(**r) for r in payload["records"]], payload["split"], payload["seed"])


def _image_files(folder):
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def load_paired_dataset(root, split, seed=0):
    """Scan ``root/<split>/{modality_a,modality_b}`` into a manifest."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} not found")
    base = root / split
    dir_a, dir_b = base / "modality_a", base / "modality_b"
    for d in (dir_a, dir_b):
        if not d.is_dir():
            raise MissingPair(f"missing directory {d}")
    files_a, files_b = _image_files(dir_a), _image_files(dir_b)
    for name in sorted(set(files_a) ^ set(files_b)):
        where = files_a.get(name) or files_b.get(name)
        raise MissingPair(f"{where} has no counterpart in the other modality")
    records = []
    for name in sorted(files_a):
        for p in (files_a[name], files_b[name]):
            try:
                with Image.open(p) as im:
                    im.verify()
            except (UnidentifiedImageError, OSError) as exc:
                raise UnreadableImage(f"cannot read {p}: {exc}") from exc
        records.append(Record(str(files_a[name]), str(files_b[name]), split))
    return DatasetManifest(records, split, seed)


def read_image(path):
    """Read an image as a float (3, H, W) tensor in [0, 1]; gray is replicated."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise UnreadableImage(f"cannot read {path}: {exc}") from exc
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def write_image(path, img):
    arr = (img.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy() * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


def crop_pair(img_a, img_b, size=PATCH_SIZE, rng=None):
    """Random crop when ``rng`` is given, centre crop otherwise; upsizes small images."""
    h, w = img_a.shape[-2:]
    if h < size or w < size:
        scale = size / min(h, w)
        new = (max(size, round(h * scale)), max(size, round(w * scale)))
        img_a = F.interpolate(img_a[None], size=new, mode="bilinear", align_corners=False)[0]
        img_b = F.interpolate(img_b[None], size=new, mode="bilinear", align_corners=False)[0]
        h, w = new
    if rng is None:
        top, left = (h - size) // 2, (w - size) // 2
    else:
        top, left = int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))
    return img_a[:, top:top + size, left:left + size], img_b[:, top:top + size, left:left + size]


def draw_displacement(rng, rho, batch=None):
    shape = (4, 2) if batch is None else (batch, 4, 2)
    return torch.from_numpy(rng.uniform(-rho, rho, size=shape).astype(np.float32))


def _draw_homography(rng, rho, size, batch=None):
    corners = image_corners(size, size)
    for _ in range(MAX_REDRAWS):
        d = draw_displacement(rng, rho, batch)
        try:
            return d, solve_dlt(corners, d)
        except SingularSystem:
            continue
    raise DegenerateWarp(f"{MAX_REDRAWS} consecutive displacement draws gave a singular DLT system")


def make_training_sample(img_a, img_b, rho, rng, shared=False):
    """Warp each modality by its own random corner perturbation.

    With ``shared=True`` both modalities use the same draw.
    """
    size = img_a.shape[-1]
    d_a, h_a = _draw_homography(rng, rho, size)
    d_b, h_b = (d_a, h_a) if shared else _draw_homography(rng, rho, size)
    return SamplePair(
        img_a=img_a,
        img_b=img_b,
        img_a_warp=warp_image(img_a, h_a),
        img_b_warp=warp_image(img_b, h_b),
        d_a_gt=d_a,
        d_b_gt=d_b,
    )


def make_training_batch(imgs_a, imgs_b, rho, rng, shared=False):
    """Batched ``make_training_sample``; inputs are (B, 3, H, W)."""
    B, size = imgs_a.shape[0], imgs_a.shape[-1]
    d_a, h_a = _draw_homography(rng, rho, size, B)
    d_b, h_b = (d_a, h_a) if shared else _draw_homography(rng, rho, size, B)
    return SamplePair(imgs_a, imgs_b, warp_image(imgs_a, h_a), warp_image(imgs_b, h_b), d_a, d_b)


def make_eval_sample(img_a, img_b, rho, rng):
    """Deform ``img_b`` only; ``d_ab_gt`` maps ``img_a`` onto the deformed ``img_b``."""
    d, h = _draw_homography(rng, rho, img_a.shape[-1])
    return SamplePair(img_a=img_a, img_b=warp_image(img_b, h), d_ab_gt=d)


def _box_blur(img, k):
    x = img[None] if img.dim() == 3 else img
    c = x.shape[1]
    x = F.pad(x, (k // 2,) * 4, mode="replicate")
    weight = torch.full((c, 1, k, k), 1.0 / (k * k), dtype=x.dtype)
    out = F.conv2d(x, weight, groups=c)
    return out[0] if img.dim() == 3 else out


# rows are output channels; negative weights invert intensity ordering
_MIX = torch.tensor([[-0.6, 0.2, 0.4], [0.3, -0.8, 0.5], [0.5, 0.4, -0.9]])


def synth_toy_modality(img, preset):
    """Turn a (3, H, W) or (B, 3, H, W) image into a pseudo second modality.

    ``invert-gamma``: ``1 - x ** (1 / 2.2)`` per channel, then a 3x3 box blur
    with replicated borders.
    ``channel-mix-blur``: ``clip(0.5 + M x, 0, 1)`` with a fixed 3x3 mixing
    matrix carrying negative weights, then a 5x5 box blur.
    ``edge-like``: Sobel gradient magnitude of the luminance scaled by its
    per-image maximum, replicated to 3 channels.
    """
    if preset == "invert-gamma":
        return _box_blur(1.0 - img.clamp(0, 1) ** (1.0 / GAMMA), 3)
    if preset == "channel-mix-blur":
        mixed = torch.einsum("oc,...chw->...ohw", _MIX.to(img.dtype), img)
        return _box_blur((0.5 + mixed).clamp(0, 1), 5)
    if preset == "edge-like":
        x = img[None] if img.dim() == 3 else img
        lum = (0.299 * x[:, 0] + 0.587 * x[:, 1] + 0.114 * x[:, 2])[:, None]
        kx = torch.tensor([[-1.0, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=x.dtype)[None, None]
        lum = F.pad(lum, (1, 1, 1, 1), mode="replicate")
        gx, gy = F.conv2d(lum, kx), F.conv2d(lum, kx.transpose(-1, -2))
        mag = torch.sqrt(gx**2 + gy**2)
        mag = mag / mag.amax(dim=(-1, -2), keepdim=True).clamp_min(1e-8)
        out = mag.expand(-1, 3, -1, -1).contiguous()
        return out[0] if img.dim() == 3 else out
    raise UnknownPreset(f"unknown preset {preset!r}; expected one of {PRESETS}")


def procedural_texture(rng, size=PATCH_SIZE):
    """Random colour texture: multi-octave smoothed noise plus random shapes."""
    from PIL import ImageDraw

    img = np.zeros((size, size, 3), dtype=np.float32)
    for octave, amp in ((4, 0.5), (8, 0.3), (16, 0.15), (32, 0.08)):
        coarse = rng.random((octave, octave, 3)).astype(np.float32)
        up = np.asarray(
            torch.nn.functional.interpolate(
                torch.from_numpy(coarse).permute(2, 0, 1)[None], size=(size, size), mode="bicubic", align_corners=False
            )[0].permute(1, 2, 0)
        )
        img += amp * up
    img = (img - img.min()) / max(float(img.max() - img.min()), 1e-6)
    canvas = Image.fromarray((img * 255).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    for _ in range(int(rng.integers(6, 14))):
        color = tuple(int(c) for c in rng.integers(0, 256, 3))
        x0, y0 = rng.integers(-size // 4, size, 2)
        w, h = rng.integers(6, size // 2, 2)
        kind = rng.integers(0, 3)
        box = [int(x0), int(y0), int(x0 + w), int(y0 + h)]
        if kind == 0:
            draw.ellipse(box, fill=color)
        elif kind == 1:
            draw.rectangle(box, fill=color)
        else:
            draw.line(box, fill=color, width=int(rng.integers(2, 6)))
    arr = np.asarray(canvas, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def texture_corpus(n, seed=0, size=PATCH_SIZE):
    rng = np.random.default_rng(seed)
    return torch.stack([procedural_texture(rng, size) for _ in range(n)])


class PairedImages:
    """In-memory aligned (A, B) image pairs at patch resolution."""

    def __init__(self, imgs_a, imgs_b, name="pairs"):
        if imgs_a.shape != imgs_b.shape:
            raise MissingPair(f"modality shapes differ: {tuple(imgs_a.shape)} vs {tuple(imgs_b.shape)}")
        self.imgs_a = imgs_a
        self.imgs_b = imgs_b
        self.name = name

    def __len__(self):
        return self.imgs_a.shape[0]

    @classmethod
    def from_manifest(cls, manifest, size=PATCH_SIZE):
        rng = np.random.default_rng(manifest.seed)
        pairs = []
        for rec in manifest.records:
            a, b = read_image(rec.path_a), read_image(rec.path_b)
            if a.shape != b.shape:
                raise MissingPair(f"{rec.path_a} and {rec.path_b} differ in size")
            pairs.append(crop_pair(a, b, size, rng if manifest.split == "train" else None))
        a = torch.stack([p[0] for p in pairs])
        b = torch.stack([p[1] for p in pairs])
        return cls(a, b, name=Path(manifest.records[0].path_a).parents[2].name if pairs else "empty")

    @classmethod
    def toy(cls, n, preset="invert-gamma", seed=0, size=PATCH_SIZE):
        a = texture_corpus(n, seed, size)
        b = a.clone() if preset is None else synth_toy_modality(a, preset)
        return cls(a, b, name=f"toy-{preset or 'mono'}-{seed}")

    def batch(self, idx):
        return self.imgs_a[idx], self.imgs_b[idx]


def write_pair_dataset(root, split, pairs, prefix="img"):
    root = Path(root)
    for sub in ("modality_a", "modality_b"):
        (root / split / sub).mkdir(parents=True, exist_ok=True)
    for i in range(len(pairs)):
        write_image(root / split / "modality_a" / f"{prefix}{i:05d}.png", pairs.imgs_a[i])
        write_image(root / split / "modality_b" / f"{prefix}{i:05d}.png", pairs.imgs_b[i])
