"""Corner-error metrics, dataset evaluation and polygon overlays."""
import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .checkpoint import Checkpoint, load_checkpoint
from .data import DatasetManifest, PairedImages, make_eval_sample
from .geometry import image_corners

logger = logging.getLogger(__name__)

ACE_THRESHOLD = 5.0
GREEN = (0, 255, 0)
RED = (255, 0, 0)


def corner_error(d_pred, d_gt):
    """Average corner error: mean Euclidean distance of the 4 displaced corners.

    Works on (4, 2) or (B, 4, 2); the shared reference corners cancel.
    """
    d_pred = torch.as_tensor(d_pred, dtype=torch.float64)
    d_gt = torch.as_tensor(d_gt, dtype=torch.float64)
    return torch.linalg.norm(d_pred - d_gt, dim=-1).mean(dim=-1)


def ace_ratio(aces, threshold=ACE_THRESHOLD):
    aces = np.asarray(aces, dtype=np.float64)
    return float((aces < threshold).mean()) if aces.size else 0.0


@dataclass
class EvalReport:
    ace: list
    mace: float
    ace_under_threshold: float
    dataset: str = ""
    checkpoint: str = ""
    threshold: float = ACE_THRESHOLD
    pipeline: str = "internet"
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_aces(cls, aces, threshold=ACE_THRESHOLD, **kw):
        aces = [float(a) for a in aces]
        mace = float(np.mean(aces)) if aces else float("nan")
        return cls(aces, mace, ace_ratio(aces, threshold), threshold=threshold, **kw)

    def save(self, path):
        """Write ``<path>`` as JSON and the per-sample list as ``<path stem>.csv``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=1))
        with open(path.with_suffix(".csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["index", "ace"])
            for i, a in enumerate(self.ace):
                w.writerow([i, repr(a)])
        return path

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def eval_samples(pairs, rho, seed, limit=None):
    """Deterministic evaluation records; sample ``i`` depends on (seed, i) only."""
    n = len(pairs) if limit is None else min(limit, len(pairs))
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        yield make_eval_sample(pairs.imgs_a[i], pairs.imgs_b[i], rho, rng)


def predict_displacements(model, imgs_a, imgs_b, batch_size=16):
    was_training = model.training
    model.eval()
    outs = []
    with torch.no_grad():
        for s in range(0, imgs_a.shape[0], batch_size):
            outs.append(model.predict(imgs_a[s:s + batch_size], imgs_b[s:s + batch_size]))
    model.train(was_training)
    return torch.cat(outs)


def evaluate_model(model, pairs, rho=32.0, seed=0, threshold=ACE_THRESHOLD, batch_size=16, limit=None, **kw):
    samples = list(eval_samples(pairs, rho, seed, limit))
    if not samples:
        return EvalReport.from_aces([], threshold, **kw)
    a = torch.stack([s.img_a for s in samples])
    b = torch.stack([s.img_b for s in samples])
    gt = torch.stack([s.d_ab_gt for s in samples])
    pred = predict_displacements(model, a, b, batch_size)
    return EvalReport.from_aces(corner_error(pred, gt).tolist(), threshold, **kw)


def evaluate(ckpt, data, rho=32.0, seed=0, threshold=ACE_THRESHOLD, batch_size=16, limit=None):
    """Evaluate a checkpoint (object or path) on a test manifest or in-memory pairs.

    Checkpoints holding a ``modality_transfer`` group run transfer then
    estimation; student checkpoints estimate on the raw pair.
    """
    from .model import InterNet

    name = ""
    if not isinstance(ckpt, Checkpoint):
        name = str(ckpt)
        ckpt = load_checkpoint(ckpt)
    model, cfg = InterNet.from_checkpoint(ckpt)
    if isinstance(data, DatasetManifest):
        if data.split != "test":
            logger.warning("evaluating on a %r split", data.split)
        data = PairedImages.from_manifest(data, size=cfg.image_size)
    pipeline = "internet" if model.transfer is not None else "estimator-only"
    if model.transfer is None:
        logger.info("checkpoint has no modality_transfer group: skipping the transfer stage")
    return evaluate_model(
        model, data, rho, seed, threshold, batch_size, limit,
        dataset=getattr(data, "name", ""), checkpoint=name, pipeline=pipeline,
    )


def polygon_vertices(d, height, width):
    """Displaced corner positions in drawing order TL, TR, BR, BL."""
    pts = image_corners(height, width, dtype=torch.float64) + torch.as_tensor(d, dtype=torch.float64)
    return pts[[0, 1, 3, 2]].numpy()


def render_overlay(img_b, d_gt, d_pred, width=1):
    """Draw the ground-truth polygon in green, then the prediction in red."""
    arr = img_b.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy() if torch.is_tensor(img_b) else np.asarray(img_b)
    if arr.dtype != np.uint8:
        arr = (arr * 255.0 + 0.5).astype(np.uint8)
    h, w = arr.shape[:2]
    canvas = Image.fromarray(arr.copy())
    draw = ImageDraw.Draw(canvas)
    for d, color in ((d_gt, GREEN), (d_pred, RED)):
        v = [tuple(p) for p in np.rint(polygon_vertices(d, h, w)).astype(int).tolist()]
        draw.line(v + [v[0]], fill=color, width=width)
    return np.asarray(canvas)
