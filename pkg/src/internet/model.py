"""Full model (transfer + estimator) and the estimator-only student."""
import torch
import torch.nn as nn

from .checkpoint import Checkpoint, load_group
from .config import TrainConfig
from .errors import CheckpointError
from .estimator import EstimatorConfig, HomographyEstimator
from .transfer import GeneratorConfig, ModalityTransfer


def estimator_config(cfg):
    return EstimatorConfig(
        image_size=cfg.image_size,
        widths=tuple(cfg.widths),
        feature_dim=cfg.feature_dim,
        head_hidden=cfg.head_hidden,
        head_groups=cfg.head_groups,
        radius=cfg.radius,
        n_iters=cfg.n_iters,
        detach_iterations=cfg.detach_iterations,
    )


def generator_config(cfg):
    return GeneratorConfig(
        base_channels=cfg.gen_channels,
        window_size=cfg.window_size,
        depths=tuple(cfg.gen_depths),
        bottleneck_depth=cfg.bottleneck_depth,
        heads=tuple(cfg.gen_heads),
        mlp_ratio=cfg.mlp_ratio,
    )


class InterNet(nn.Module):
    """Modality transfer followed by homography estimation.

    With ``transfer=None`` the model is the distilled student (or the
    no-transfer ablation) and estimates directly on the raw pair.
    """

    def __init__(self, estimator, transfer=None):
        super().__init__()
        self.estimator = estimator
        self.transfer = transfer

    @classmethod
    def from_config(cls, cfg, with_transfer=True):
        est = HomographyEstimator(estimator_config(cfg))
        gen = ModalityTransfer(generator_config(cfg)) if with_transfer and cfg.use_transfer else None
        return cls(est, gen)

    def translate(self, img_a):
        return img_a if self.transfer is None else self.transfer(img_a)

    def forward(self, img_a, img_b, n_iters=None):
        return self.estimator(self.translate(img_a), img_b, n_iters=n_iters)

    @torch.no_grad()
    def predict(self, img_a, img_b):
        """Final corner displacement (B, 4, 2) mapping ``img_a`` onto ``img_b``."""
        return self(img_a, img_b)[-1]

    def parameter_groups(self, student=False):
        if student:
            return {"student": self.estimator.state_dict()}
        groups = {
            "feature_extractor": self.estimator.feature_extractor.state_dict(),
            "motion_head": self.estimator.motion_head.state_dict(),
        }
        if self.transfer is not None:
            groups["modality_transfer"] = self.transfer.state_dict()
        return groups

    def to_checkpoint(self, cfg, iteration=0, student=False, meta=None, extra_groups=None):
        groups = {g: dict(sd) for g, sd in self.parameter_groups(student).items()}
        groups.update(extra_groups or {})
        return Checkpoint(groups, cfg.to_dict(), cfg.config_hash(), iteration, dict(meta or {}))

    @classmethod
    def from_checkpoint(cls, ckpt):
        cfg = TrainConfig.from_dict(ckpt.config)
        if ckpt.is_student:
            model = cls(HomographyEstimator(estimator_config(cfg)))
            load_group(model.estimator, ckpt.groups["student"], "student")
            return model, cfg
        for g in ("feature_extractor", "motion_head"):
            if g not in ckpt.groups:
                raise CheckpointError(f"checkpoint lacks the {g} group")
        model = cls.from_config(cfg, with_transfer=ckpt.has_transfer)
        load_group(model.estimator.feature_extractor, ckpt.groups["feature_extractor"], "feature_extractor")
        load_group(model.estimator.motion_head, ckpt.groups["motion_head"], "motion_head")
        if ckpt.has_transfer:
            if model.transfer is None:
                model.transfer = ModalityTransfer(generator_config(cfg))
            load_group(model.transfer, ckpt.groups["modality_transfer"], "modality_transfer")
        return model, cfg
