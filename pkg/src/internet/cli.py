"""Command line entry point: ``internet <subcommand> [options]``.

Exit codes: 0 success, 1 unexpected library error, 2 configuration or
shape error, 3 data error, 4 geometry error, 5 training error (non-finite
loss, resume mismatch), 6 checkpoint error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import dump_config, load_config
from .errors import ConfigError, InterNetError
from .geometry import image_corners, solve_dlt

logger = logging.getLogger("internet")


def _common(p, config=True):
    if config:
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="config override, repeatable; wins over --config")
    p.add_argument("--out", help="output directory or file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--device", default="cpu", help="torch device (default cpu)")


def build_parser():
    parser = argparse.ArgumentParser(prog="internet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a toy cross-modal dataset")
    p.add_argument("--preset", default="invert-gamma")
    p.add_argument("--n", type=int, default=100, help="training pairs")
    p.add_argument("--n-test", type=int, default=0, help="held-out pairs")
    p.add_argument("--size", type=int, default=128)
    _common(p, config=False)

    p = sub.add_parser("train", help="interleaved training of the full model")
    p.add_argument("--data", required=True, help="dataset root with train/ (and optionally test/)")
    p.add_argument("--resume", help="checkpoint to resume from")
    _common(p)

    p = sub.add_parser("distill", help="train the estimator-only student")
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", required=True, help="full-model checkpoint")
    _common(p)

    p = sub.add_parser("eval", help="MACE / ACE report on a test split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--limit", type=int, default=None)
    _common(p, config=False)

    p = sub.add_parser("infer", help="estimate the homography of one image pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image-a", required=True)
    p.add_argument("--image-b", required=True)
    _common(p, config=False)

    p = sub.add_parser("overlay", help="draw ground-truth and predicted polygons")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--rho", type=float, default=None)
    _common(p, config=False)
    return parser


def _config(args):
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _out(args, default):
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pairs(root, split, seed=0, size=128):
    from .data import PairedImages, load_paired_dataset

    return PairedImages.from_manifest(load_paired_dataset(root, split, seed), size=size)


def _maybe_pairs(root, split, size):
    if (Path(root) / split).is_dir():
        return _pairs(root, split, size=size)
    return None


def cmd_synth(args):
    from .data import PairedImages, write_pair_dataset

    out = _out(args, "toy_data")
    seed = 0 if args.seed is None else args.seed
    write_pair_dataset(out, "train", PairedImages.toy(args.n, args.preset, seed, args.size))
    if args.n_test:
        write_pair_dataset(out, "test", PairedImages.toy(args.n_test, args.preset, seed + 10_000, args.size))
    print(f"wrote {args.n} train / {args.n_test} test {args.preset} pairs to {out}")
    return 0


def cmd_train(args):
    from .trainer import run_interleaved

    cfg = _config(args)
    train = _pairs(args.data, "train", cfg.seed, cfg.image_size)
    out = _out(args, "runs/train")
    (out / "config.txt").write_text(dump_config(cfg))
    ckpt, trainer = run_interleaved(cfg, train, _maybe_pairs(args.data, "test", cfg.image_size), out, resume=args.resume,
                                    progress_every=max(1, cfg.total_iters // 20))
    print(f"trained {ckpt.iteration} steps; checkpoint {out / 'final.ckpt'}"
          + ("; run diverged" if trainer.diverged else ""))
    return 0


def cmd_distill(args):
    from .checkpoint import load_checkpoint
    from .config import TrainConfig
    from .trainer import run_distillation

    teacher = load_checkpoint(args.teacher)
    base = TrainConfig.from_dict(teacher.config).to_dict()
    overrides = [f"{k}={v if not isinstance(v, list) else ','.join(map(str, v))}" for k, v in base.items()]
    args.override = overrides + list(args.override)
    cfg = _config(args)
    out = _out(args, "runs/distill")
    (out / "config.txt").write_text(dump_config(cfg))
    ckpt, _ = run_distillation(teacher, cfg, _pairs(args.data, "train", cfg.seed, cfg.image_size),
                               _maybe_pairs(args.data, "test", cfg.image_size),
                               out, progress_every=max(1, cfg.total_iters // 20))
    print(f"distilled {ckpt.iteration} steps; checkpoint {out / 'student.ckpt'}")
    return 0


def cmd_eval(args):
    from .checkpoint import load_checkpoint
    from .data import load_paired_dataset
    from .evaluation import evaluate

    ckpt = load_checkpoint(args.checkpoint)
    rho = args.rho if args.rho is not None else ckpt.config.get("rho", 32.0)
    seed = 0 if args.seed is None else args.seed
    manifest = load_paired_dataset(args.data, args.split, seed)
    report = evaluate(ckpt, manifest, rho=rho, seed=seed, limit=args.limit)
    report.checkpoint = str(args.checkpoint)
    out = _out(args, "runs/eval")
    report.save(out / "report.json")
    print(json.dumps({"mace": report.mace, "ace_under_threshold": report.ace_under_threshold,
                      "n": len(report.ace), "pipeline": report.pipeline}))
    return 0


def cmd_infer(args):
    from .data import read_image
    from .model import InterNet
    from .checkpoint import load_checkpoint

    model, cfg = InterNet.from_checkpoint(load_checkpoint(args.checkpoint))
    a, b = read_image(args.image_a), read_image(args.image_b)
    if a.shape != b.shape or a.shape[-1] != cfg.image_size or a.shape[-2] != cfg.image_size:
        raise ConfigError(f"inputs must both be {cfg.image_size}x{cfg.image_size}, got {tuple(a.shape)} and {tuple(b.shape)}")
    d = model.predict(a[None], b[None])[0].double()
    h = solve_dlt(image_corners(cfg.image_size, cfg.image_size, dtype=torch.float64), d)
    print("displacement (u, v) per corner TL TR BL BR:")
    print(" ".join(f"{x:.4f}" for x in d.reshape(-1).tolist()))
    print("homography:")
    for row in h.tolist():
        print(" ".join(f"{x: .8e}" for x in row))
    return 0


def cmd_overlay(args):
    from PIL import Image

    from .checkpoint import load_checkpoint
    from .data import make_eval_sample
    from .evaluation import render_overlay
    from .model import InterNet

    ckpt = load_checkpoint(args.checkpoint)
    model, cfg = InterNet.from_checkpoint(ckpt)
    pairs = _pairs(args.data, args.split, size=cfg.image_size)
    if not 0 <= args.index < len(pairs):
        raise ConfigError(f"index {args.index} out of range for {len(pairs)} pairs")
    seed = 0 if args.seed is None else args.seed
    rho = args.rho if args.rho is not None else cfg.rho
    s = make_eval_sample(pairs.imgs_a[args.index], pairs.imgs_b[args.index], rho,
                         np.random.default_rng([seed, args.index]))
    pred = model.predict(s.img_a[None], s.img_b[None])[0]
    img = render_overlay(s.img_b, s.d_ab_gt, pred)
    out = Path(args.out or "overlay.png")
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(out)
    print(f"wrote {out}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "distill": cmd_distill,
            "eval": cmd_eval, "infer": cmd_infer, "overlay": cmd_overlay}


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    logger.setLevel(level)
    try:
        if args.device != "cpu":
            torch.set_default_device(args.device)
        return COMMANDS[args.command](args)
    except InterNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except RuntimeError as exc:
        if "device" not in str(exc).lower() and "cuda" not in str(exc).lower():
            raise
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
