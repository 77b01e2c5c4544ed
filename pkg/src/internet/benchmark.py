"""Toy-scale benchmark: procedural textures, a synthetic second modality and
reduced-width models small enough to train on a CPU.
"""
import logging
import os
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import PairedImages
from .evaluation import evaluate
from .trainer import run_distillation, run_interleaved

logger = logging.getLogger(__name__)

TOY_MODEL = dict(
    widths=(16, 24), feature_dim=32, head_hidden=32, head_groups=4,
    gen_channels=8, window_size=4, gen_heads=(1, 1, 2, 2, 4), mlp_ratio=2.0,
    backbone="standin",
)

N_TRAIN = 200
N_TEST = 64
TRAIN_SEED = 0
TEST_SEED = 10_000


def toy_config(**overrides):
    # no grad clipping and a small correlation weight: with clipping, or with
    # fghomo_weight >= 1e-4, the feature scale runs away (see README)
    kw = dict(TOY_MODEL, batch_size=8, rho=16.0, image_size=64, total_iters=5000,
              grad_clip=0.0, fghomo_weight=1e-5, eval_samples=N_TEST, eval_seed=4321)
    kw.update(overrides)
    return TrainConfig(**kw)


def toy_data(preset="invert-gamma", size=64, n_train=N_TRAIN, n_test=N_TEST):
    """Disjoint train and held-out pair sets (different texture seeds)."""
    return (PairedImages.toy(n_train, preset, TRAIN_SEED, size),
            PairedImages.toy(n_test, preset, TEST_SEED, size))


# (config overrides, preset) per named toy run
RUNS = {
    "mono": (dict(use_transfer=False, supervision_source="real_only", image_size=128), None),
    "internet": ({}, "invert-gamma"),
    "no-transfer": (dict(use_transfer=False), "invert-gamma"),
    "pseudo-only": (dict(supervision_source="pseudo_only"), "invert-gamma"),
    "pcp-only": (dict(fghomo_type="none"), "invert-gamma"),
}


def cache_dir():
    d = os.environ.get("INTERNET_TOY_CACHE")
    return Path(d) if d else None


def run_toy(name, out_dir=None, progress_every=0, **overrides):
    """Train (or reuse a cached) toy run; returns (checkpoint, held-out EvalReport)."""
    cfg_kw, preset = RUNS[name]
    cfg = toy_config(**{**cfg_kw, **overrides})
    train, test = toy_data(preset, cfg.image_size)
    cached = _cached(name, cfg)
    if cached is not None:
        ckpt = cached
    else:
        ckpt, _ = run_interleaved(cfg, train, out_dir=out_dir, progress_every=progress_every)
        _store(name, ckpt)
    report = evaluate(ckpt, test, rho=cfg.rho, seed=cfg.eval_seed)
    logger.info("toy run %s: MACE %.3f", name, report.mace)
    return ckpt, report


def run_toy_distill(teacher, out_dir=None, progress_every=0, **overrides):
    cfg = toy_config(**{"total_iters": 2000, **overrides})
    train, test = toy_data("invert-gamma", cfg.image_size)
    cached = _cached(f"student-{teacher.config_hash}", cfg)
    if cached is None:
        cached, _ = run_distillation(teacher, cfg, train, out_dir=out_dir, progress_every=progress_every)
        _store(f"student-{teacher.config_hash}", cached)
    return cached, evaluate(cached, test, rho=cfg.rho, seed=cfg.eval_seed)


def _cached(name, cfg):
    d = cache_dir()
    path = d / f"{name}-{cfg.config_hash()}.ckpt" if d else None
    if path is not None and path.is_file():
        logger.info("reusing cached toy run %s", path)
        return load_checkpoint(path)
    return None


def _store(name, ckpt):
    d = cache_dir()
    if d:
        save_checkpoint(d / f"{name}-{ckpt.config_hash}.ckpt", ckpt)
