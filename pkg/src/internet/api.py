"""scikit-learn style wrappers around training, distillation and inference.

``X`` is an array of aligned image pairs with shape (n, 2, C, H, W) in
[0, 1]; ``predict`` returns corner displacements flattened to (n, 8).
"""
import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .config import TrainConfig
from .data import PairedImages
from .errors import ShapeMismatch
from .evaluation import corner_error, evaluate_model
from .model import InterNet
from .trainer import Distiller, Trainer


def check_pairs(X, image_size=None):
    """Validate a batch of image pairs and return it as float32 (n, 2, C, H, W)."""
    X = torch.as_tensor(np.asarray(X), dtype=torch.float32)
    if X.ndim == 4:
        X = X.unsqueeze(0)
    if X.ndim != 5 or X.shape[1] != 2:
        raise ShapeMismatch(f"expected pairs of shape (n, 2, C, H, W), got {tuple(X.shape)}")
    if X.shape[2] == 1:
        X = X.expand(-1, -1, 3, -1, -1)
    if X.shape[2] != 3:
        raise ShapeMismatch(f"expected 1 or 3 channels, got {X.shape[2]}")
    if image_size is not None and tuple(X.shape[-2:]) != (image_size, image_size):
        raise ShapeMismatch(f"expected {image_size}x{image_size} images, got {tuple(X.shape[-2:])}")
    if not torch.isfinite(X).all():
        raise ValueError("image pairs contain non-finite values")
    return X.contiguous()


def check_displacements(y, n=None):
    y = torch.as_tensor(np.asarray(y), dtype=torch.float64).reshape(-1, 4, 2)
    if n is not None and y.shape[0] != n:
        raise ShapeMismatch(f"{y.shape[0]} displacement rows for {n} pairs")
    return y


class _Base(BaseEstimator, RegressorMixin):
    def _config(self):
        params = {k: v for k, v in self.get_params(deep=False).items() if k in TrainConfig.__dataclass_fields__}
        return TrainConfig(**params)

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_pairs(X, self.config_.image_size)
        self.model_.eval()
        with torch.no_grad():
            d = torch.cat([self.model_.predict(X[s:s + 16, 0], X[s:s + 16, 1]) for s in range(0, len(X), 16)])
        return d.reshape(-1, 8).numpy()

    def score(self, X, y, sample_weight=None):
        """Negative mean average corner error (higher is better)."""
        y = check_displacements(y, len(X))
        ace = corner_error(torch.as_tensor(self.predict(X)).reshape(-1, 4, 2), y).numpy()
        return -float(np.average(ace, weights=sample_weight))

    def mace(self, pairs, rho=None, seed=0):
        check_is_fitted(self, "model_")
        return evaluate_model(self.model_, pairs, self.config_.rho if rho is None else rho, seed).mace


class InterNetRegressor(_Base):
    """Unsupervised cross-modal homography estimator (transfer + estimation).

    ``fit`` needs only aligned pairs; every supervision signal is synthesised.
    """

    def __init__(self, total_iters=1000, batch_size=8, max_lr=3e-4, rho=16.0, image_size=64,
                 alternation_period=1, use_transfer=True, supervision_source="both",
                 trans_type="perceptual", fghomo_type="correlation", fghomo_weight=1e-5,
                 grad_clip=0.0, backbone="standin",
                 n_iters=6, widths=(16, 24), feature_dim=32, head_hidden=32, head_groups=4,
                 gen_channels=8, window_size=4, gen_heads=(1, 1, 2, 2, 4), mlp_ratio=2.0, seed=0):
        self.total_iters = total_iters
        self.batch_size = batch_size
        self.max_lr = max_lr
        self.rho = rho
        self.image_size = image_size
        self.alternation_period = alternation_period
        self.use_transfer = use_transfer
        self.supervision_source = supervision_source
        self.trans_type = trans_type
        self.fghomo_type = fghomo_type
        self.fghomo_weight = fghomo_weight
        self.grad_clip = grad_clip
        self.backbone = backbone
        self.n_iters = n_iters
        self.widths = widths
        self.feature_dim = feature_dim
        self.head_hidden = head_hidden
        self.head_groups = head_groups
        self.gen_channels = gen_channels
        self.window_size = window_size
        self.gen_heads = gen_heads
        self.mlp_ratio = mlp_ratio
        self.seed = seed

    def fit(self, X, y=None):
        cfg = self._config()
        X = check_pairs(X, cfg.image_size)
        trainer = Trainer(cfg, PairedImages(X[:, 0], X[:, 1], name="fit"))
        trainer.run()
        self.config_ = cfg
        self.model_ = trainer.model
        self.loss_curve_ = [r["loss"] for r in trainer.history]
        return self

    def checkpoint(self):
        check_is_fitted(self, "model_")
        return self.model_.to_checkpoint(self.config_, self.config_.total_iters)


class DistilledRegressor(_Base):
    """Estimator-only student trained on a fitted teacher's predictions."""

    def __init__(self, teacher=None, total_iters=1000, batch_size=8, max_lr=3e-4, rho=16.0,
                 distill_perturb=True, distill_init="scratch", seed=0):
        self.teacher = teacher
        self.total_iters = total_iters
        self.batch_size = batch_size
        self.max_lr = max_lr
        self.rho = rho
        self.distill_perturb = distill_perturb
        self.distill_init = distill_init
        self.seed = seed

    def fit(self, X, y=None):
        teacher = self.teacher
        if isinstance(teacher, InterNetRegressor):
            teacher = teacher.checkpoint()
        if teacher is None:
            raise ValueError("a teacher (fitted InterNetRegressor or checkpoint) is required")
        if isinstance(teacher, (str,)) or hasattr(teacher, "__fspath__"):
            from .checkpoint import load_checkpoint
            teacher = load_checkpoint(teacher)
        base = TrainConfig.from_dict(teacher.config)
        own = {k: v for k, v in self.get_params(deep=False).items() if k != "teacher"}
        cfg = base.replace(**own)
        X = check_pairs(X, cfg.image_size)
        d = Distiller(teacher, cfg, PairedImages(X[:, 0], X[:, 1], name="fit"))
        d.run()
        self.config_ = cfg
        self.model_ = d.student
        self.loss_curve_ = [r["loss"] for r in d.history]
        return self
