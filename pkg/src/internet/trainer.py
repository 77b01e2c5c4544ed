"""Interleaved training of the transfer and estimation modules, and
distillation of the estimator-only student.

Phase H (homography): the transfer module is frozen; the estimator learns
from synthetic intra-modal pairs of transferred A images and/or real B
images. Phase T (transfer): the motion head is frozen; the transfer module
and the feature extractor learn to make the warped pseudo image match I_B
under the detached cross-modal estimate.
"""
import json
import logging
import time
from functools import partial
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, optimizer_groups, restore_optimizer, save_checkpoint
from .data import draw_displacement, make_training_batch
from .errors import NonFiniteLoss, SingularSystem, TeacherIncomplete
from .evaluation import evaluate_model
from .geometry import image_corners, solve_dlt, valid_mask, warp_image
from .losses import fghomo_loss, homography_loss, load_backbone, transfer_loss
from .model import InterNet

logger = logging.getLogger(__name__)


def phase_schedule(total, period=1, interleaved=True, use_transfer=True):
    """Phase label per step: 'H', 'T' or 'J' (joint update)."""
    if not use_transfer:
        return ["H"] * total
    if not interleaved:
        return ["J"] * total
    return ["H" if (k // period) % 2 == 0 else "T" for k in range(total)]


def one_cycle_factor(step, total, pct_start=0.05, div_factor=25.0, final_div_factor=1e4):
    """LR multiplier of a linear one-cycle schedule; 1.0 at the peak."""
    warm = max(1, int(round(pct_start * total)))
    lo, end = 1.0 / div_factor, 1.0 / (div_factor * final_div_factor)
    if step < warm:
        return lo + (1.0 - lo) * step / warm
    frac = min(1.0, (step - warm) / max(1, total - warm))
    return 1.0 + (end - 1.0) * frac


def make_optimizer(params, cfg, steps):
    params = list(params)
    opt = torch.optim.AdamW(params, lr=cfg.max_lr, weight_decay=cfg.weight_decay)
    if cfg.schedule == "one-cycle":
        fn = partial(one_cycle_factor, total=steps, pct_start=cfg.pct_start)
    else:
        fn = _constant
    return opt, torch.optim.lr_scheduler.LambdaLR(opt, fn)


def _constant(step):
    return 1.0


def snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _finite(loss, step, phase):
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"non-finite {phase} loss {loss.item()} at step {step}")


class Trainer:
    """Owns the model, optimisers and the step loop of one training run."""

    def __init__(self, cfg, train_pairs, eval_pairs=None, out_dir=None, backbone=None):
        self.cfg = cfg
        self.train_pairs = train_pairs
        self.eval_pairs = eval_pairs
        self.out_dir = Path(out_dir) if out_dir else None
        torch.manual_seed(cfg.seed)
        self.model = InterNet.from_config(cfg)
        self.backbone = backbone
        if self.backbone is None and cfg.use_transfer and cfg.trans_type == "perceptual":
            self.backbone = load_backbone(cfg.backbone, seed=cfg.seed)
        self.phases = phase_schedule(cfg.total_iters, cfg.alternation_period, cfg.interleaved, cfg.use_transfer)
        # one optimiser per module: the feature extractor keeps a single Adam
        # state across both phases, so its phase-T step is scaled against the
        # phase-H gradient history instead of being renormalised on its own
        est = self.model.estimator
        self.optimizers = {}
        n_h = self.phases.count("H")
        n_t = self.phases.count("T")
        n_j = self.phases.count("J")
        if n_h or n_t:
            self.optimizers["estimator"] = make_optimizer(est.parameters(), cfg, n_h + n_t)
        if n_t:
            self.optimizers["transfer"] = make_optimizer(self.model.transfer.parameters(), cfg, n_t)
        if n_j:
            self.optimizers["joint"] = make_optimizer(self.model.parameters(), cfg, n_j)
        self.corners = image_corners(cfg.image_size, cfg.image_size)
        self.step = 0
        self.history = []
        self.diverged = False

    # ------------------------------------------------------------------ data
    def batch(self, step):
        """Training batch for ``step``; depends only on (seed, step)."""
        rng = np.random.default_rng([self.cfg.seed, step])
        idx = rng.choice(len(self.train_pairs), size=self.cfg.batch_size, replace=len(self.train_pairs) < self.cfg.batch_size)
        a, b = self.train_pairs.batch(torch.as_tensor(idx))
        return make_training_batch(a, b, self.cfg.rho, rng, shared=self.cfg.share_displacement)

    # ---------------------------------------------------------------- phases
    def homography_loss_terms(self, batch, transfer_grad=False):
        cfg, model = self.cfg, self.model
        terms = {}
        if cfg.supervision_source in ("pseudo_only", "both"):
            with torch.set_grad_enabled(transfer_grad and torch.is_grad_enabled()):
                pa = model.translate(batch.img_a)
                pa_w = model.translate(batch.img_a_warp)
            terms["pseudo"] = homography_loss(model.estimator(pa, pa_w), batch.d_a_gt, cfg.alpha)
        if cfg.supervision_source in ("real_only", "both"):
            terms["real"] = homography_loss(model.estimator(batch.img_b, batch.img_b_warp), batch.d_b_gt, cfg.alpha)
        return terms

    def estimate_ab(self, pseudo, img_b, detach=True):
        """Cross-modal estimate used to warp the pseudo image."""
        with torch.set_grad_enabled(not detach and torch.is_grad_enabled()):
            src = pseudo.detach() if detach else pseudo
            d_ab = self.model.estimator(src, img_b)[-1]
            h_ab = solve_dlt(self.corners.to(d_ab.dtype), d_ab)
        return h_ab.detach() if detach else h_ab

    def transfer_loss_terms(self, batch, detach_estimate=True, h_ab=None):
        cfg, model = self.cfg, self.model
        pseudo = model.transfer(batch.img_a)
        if h_ab is None:
            h_ab = self.estimate_ab(pseudo, batch.img_b, detach_estimate)
        warped = warp_image(pseudo, h_ab)
        mask = valid_mask(cfg.image_size, cfg.image_size, h_ab, dtype=pseudo.dtype).detach()
        target = batch.img_b * mask
        terms = {"trans": transfer_loss(warped, target, cfg.trans_type, self.backbone, cfg.perceptual_layers or None)}
        if cfg.fghomo_type != "none":
            f_w, f_b = model.estimator.features(warped, target)
            terms["fghomo"] = cfg.fghomo_weight * fghomo_loss(f_w, f_b, cfg.fghomo_type)
        return terms

    def _apply(self, names, loss):
        """Backward once, then clip and step each named optimiser; returns the
        learning rate of the first one."""
        opts = [self.optimizers[n] for n in names]
        for opt, _ in opts:
            opt.zero_grad(set_to_none=True)
        loss.backward()
        lr = opts[0][0].param_groups[0]["lr"]
        for opt, sched in opts:
            if self.cfg.grad_clip > 0:
                params = [p for g in opt.param_groups for p in g["params"] if p.grad is not None]
                torch.nn.utils.clip_grad_norm_(params, self.cfg.grad_clip)
            opt.step()
            sched.step()
        return lr

    def phase_homography_step(self, batch):
        model = self.model
        if model.transfer is not None:
            model.transfer.requires_grad_(False)
        try:
            terms = self.homography_loss_terms(batch)
            loss = sum(terms.values())
            _finite(loss, self.step, "homography")
            lr = self._apply(["estimator"], loss)
        finally:
            if model.transfer is not None:
                model.transfer.requires_grad_(True)
        return loss.item(), terms, lr

    def phase_transfer_step(self, batch):
        head = self.model.estimator.motion_head
        head.requires_grad_(False)
        try:
            terms = self.transfer_loss_terms(batch)
            loss = sum(terms.values())
            _finite(loss, self.step, "transfer")
            # the frozen head has no gradient, so AdamW leaves it untouched
            lr = self._apply(["transfer", "estimator"], loss)
        finally:
            head.requires_grad_(True)
        return loss.item(), terms, lr

    def joint_step(self, batch):
        terms = self.homography_loss_terms(batch, transfer_grad=True)
        terms.update(self.transfer_loss_terms(batch, detach_estimate=False))
        loss = sum(terms.values())
        _finite(loss, self.step, "joint")
        lr = self._apply(["joint"], loss)
        return loss.item(), terms, lr

    # ------------------------------------------------------------------ loop
    def train_step(self):
        phase = self.phases[self.step]
        batch = self.batch(self.step)
        self.model.train()
        fn = {"H": self.phase_homography_step, "T": self.phase_transfer_step, "J": self.joint_step}[phase]
        try:
            loss, terms, lr = fn(batch)
        except SingularSystem as exc:
            if "non-finite" not in str(exc):
                raise
            raise NonFiniteLoss(f"non-finite {phase} prediction at step {self.step}: {exc}") from exc
        rec = {"step": self.step, "phase": phase, "loss": loss, "lr": lr}
        rec.update({k: v.item() for k, v in terms.items()})
        self.step += 1
        return rec

    def evaluate(self):
        if self.eval_pairs is None:
            return None
        rep = evaluate_model(self.model, self.eval_pairs, self.cfg.rho, self.cfg.eval_seed, limit=self.cfg.eval_samples)
        return rep.mace

    def run(self, log_path=None, progress_every=0):
        """Train until ``total_iters``; returns the final checkpoint."""
        cfg = self.cfg
        log = open(log_path, "a") if log_path else None
        t0 = time.time()
        try:
            while self.step < cfg.total_iters:
                try:
                    rec = self.train_step()
                except NonFiniteLoss as exc:
                    if cfg.interleaved and cfg.use_transfer or not cfg.use_transfer:
                        raise
                    # joint-update ablation: record divergence, stop training
                    logger.warning("%s; recording divergence", exc)
                    self.diverged = True
                    rec = {"step": self.step, "phase": self.phases[self.step], "loss": None, "diverged": True}
                    self.history.append(rec)
                    if log:
                        log.write(json.dumps(rec) + "\n")
                    break
                if cfg.eval_every and (self.step % cfg.eval_every == 0 or self.step == cfg.total_iters):
                    rec["mace"] = self.evaluate()
                self.history.append(rec)
                if log:
                    log.write(json.dumps(rec) + "\n")
                    log.flush()
                if progress_every and self.step % progress_every == 0:
                    logger.info("step %d/%d %s loss %.4f (%.1fs)", self.step, cfg.total_iters, rec["phase"],
                                rec["loss"], time.time() - t0)
                if cfg.ckpt_every and self.out_dir and self.step % cfg.ckpt_every == 0:
                    save_checkpoint(self.out_dir / f"step{self.step:07d}.ckpt", self.checkpoint())
        finally:
            if log:
                log.close()
        return self.checkpoint()

    # ------------------------------------------------------------ checkpoint
    def checkpoint(self, with_optimizer=True):
        extra, meta = {}, {"diverged": self.diverged, "optimizers": {}, "schedulers": {}}
        if with_optimizer:
            for name, (opt, sched) in self.optimizers.items():
                tensors, scalars = optimizer_groups(name, opt)
                extra.update(tensors)
                meta["optimizers"][name] = scalars
                meta["schedulers"][name] = {k: v for k, v in sched.state_dict().items() if _jsonable(v)}
        return self.model.to_checkpoint(self.cfg, self.step, meta=meta, extra_groups=extra)

    def resume(self, ckpt):
        """Restore model, optimiser and schedule state; the config must match."""
        from .checkpoint import load_group

        if not hasattr(ckpt, "groups"):
            ckpt = load_checkpoint(ckpt)
        ckpt.check_resume(self.cfg.config_hash())
        m = self.model
        load_group(m.estimator.feature_extractor, ckpt.groups["feature_extractor"], "feature_extractor")
        load_group(m.estimator.motion_head, ckpt.groups["motion_head"], "motion_head")
        if m.transfer is not None:
            load_group(m.transfer, ckpt.groups["modality_transfer"], "modality_transfer")
        for name, (opt, sched) in self.optimizers.items():
            scalars = ckpt.meta.get("optimizers", {}).get(name)
            if scalars is not None:
                restore_optimizer(opt, ckpt.groups.get(f"optimizer.{name}", {}), scalars)
                sched.load_state_dict({**sched.state_dict(), **ckpt.meta["schedulers"][name]})
        self.step = ckpt.iteration


def _jsonable(v):
    try:
        json.dumps(v)
        return True
    except TypeError:
        return False


def run_interleaved(cfg, train_pairs, eval_pairs=None, out_dir=None, backbone=None, resume=None, progress_every=0):
    """Train a full model; writes ``final.ckpt`` and ``train_log.jsonl`` under ``out_dir``."""
    trainer = Trainer(cfg, train_pairs, eval_pairs, out_dir, backbone)
    if resume is not None:
        trainer.resume(resume)
    log_path = None
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        log_path = Path(out_dir) / "train_log.jsonl"
    ckpt = trainer.run(log_path, progress_every)
    if out_dir:
        save_checkpoint(Path(out_dir) / "final.ckpt", ckpt)
    return ckpt, trainer


class Distiller:
    """Train an estimator-only student on the teacher's predictions."""

    def __init__(self, teacher_ckpt, cfg, train_pairs, eval_pairs=None):
        if not hasattr(teacher_ckpt, "groups"):
            teacher_ckpt = load_checkpoint(teacher_ckpt)
        need = ("modality_transfer", "feature_extractor", "motion_head")
        missing = [g for g in need if g not in teacher_ckpt.groups]
        if missing:
            raise TeacherIncomplete(f"teacher checkpoint lacks groups {missing}")
        self.teacher, _ = InterNet.from_checkpoint(teacher_ckpt)
        self.teacher.eval()
        self.teacher.requires_grad_(False)
        self.cfg = cfg
        self.train_pairs = train_pairs
        self.eval_pairs = eval_pairs
        torch.manual_seed(cfg.seed)
        self.student = InterNet.from_config(cfg, with_transfer=False)
        if cfg.distill_init == "teacher":
            self.student.estimator.load_state_dict(self.teacher.estimator.state_dict())
        self.optimizer, self.scheduler = make_optimizer(self.student.parameters(), cfg, cfg.total_iters)
        self.corners = image_corners(cfg.image_size, cfg.image_size)
        self.step = 0
        self.history = []

    def batch(self, step):
        rng = np.random.default_rng([self.cfg.seed, step])
        idx = rng.choice(len(self.train_pairs), size=self.cfg.batch_size, replace=len(self.train_pairs) < self.cfg.batch_size)
        a, b = self.train_pairs.batch(torch.as_tensor(idx))
        if self.cfg.distill_perturb and self.cfg.rho > 0:
            d = draw_displacement(rng, self.cfg.rho, len(idx))
            b = warp_image(b, solve_dlt(self.corners, d))
        return a, b

    def train_step(self):
        a, b = self.batch(self.step)
        with torch.no_grad():
            target = self.teacher.predict(a, b)
        self.student.train()
        loss = homography_loss(self.student(a, b), target, self.cfg.alpha)
        _finite(loss, self.step, "distillation")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.student.parameters(), self.cfg.grad_clip)
        lr = self.optimizer.param_groups[0]["lr"]
        self.optimizer.step()
        self.scheduler.step()
        rec = {"step": self.step, "phase": "D", "loss": loss.item(), "lr": lr}
        self.step += 1
        return rec

    def run(self, log_path=None, progress_every=0):
        cfg = self.cfg
        log = open(log_path, "a") if log_path else None
        try:
            while self.step < cfg.total_iters:
                rec = self.train_step()
                if cfg.eval_every and self.eval_pairs is not None and (
                    self.step % cfg.eval_every == 0 or self.step == cfg.total_iters
                ):
                    rec["mace"] = evaluate_model(self.student, self.eval_pairs, cfg.rho, cfg.eval_seed,
                                                 limit=cfg.eval_samples).mace
                self.history.append(rec)
                if log:
                    log.write(json.dumps(rec) + "\n")
                if progress_every and self.step % progress_every == 0:
                    logger.info("distill step %d/%d loss %.4f", self.step, cfg.total_iters, rec["loss"])
        finally:
            if log:
                log.close()
        return self.student.to_checkpoint(cfg, self.step, student=True, meta={"teacher_hash": None})


def run_distillation(teacher, cfg, train_pairs, eval_pairs=None, out_dir=None, progress_every=0):
    d = Distiller(teacher, cfg, train_pairs, eval_pairs)
    log_path = None
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        log_path = Path(out_dir) / "distill_log.jsonl"
    ckpt = d.run(log_path, progress_every)
    if out_dir:
        save_checkpoint(Path(out_dir) / "student.ckpt", ckpt)
    return ckpt, d
