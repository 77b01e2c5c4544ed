import json

import numpy as np
import pytest
import torch

from internet.checkpoint import load_checkpoint
from internet.config import TrainConfig
from internet.data import PairedImages, SamplePair
from internet.errors import NonFiniteLoss, ResumeMismatch, TeacherIncomplete
from internet.losses import homography_loss, sequence_weights
from internet.trainer import Distiller, Trainer, one_cycle_factor, phase_schedule, run_distillation, run_interleaved

TINY = dict(image_size=32, widths=(8, 8), feature_dim=8, head_hidden=8, head_groups=2, n_iters=3,
            gen_channels=4, window_size=2, gen_heads=(1, 1, 2, 2, 4), mlp_ratio=2.0, bottleneck_depth=2,
            batch_size=2, rho=4.0, backbone="standin", total_iters=6)


@pytest.fixture(scope="module")
def pairs():
    return PairedImages.toy(6, "invert-gamma", seed=0, size=32)


def cfg(**kw):
    return TrainConfig(**{**TINY, **kw})


def snap(module):
    return {k: v.clone() for k, v in module.state_dict().items()}


def same(a, b):
    return all(torch.equal(a[k], b[k]) for k in a)


def test_phase_schedule():
    assert "".join(phase_schedule(6)) == "HTHTHT"
    assert "".join(phase_schedule(8, period=2)) == "HHTTHHTT"
    assert "".join(phase_schedule(3, use_transfer=False)) == "HHH"
    assert "".join(phase_schedule(3, interleaved=False)) == "JJJ"


def test_one_cycle_shape():
    total = 1000
    lrs = [one_cycle_factor(k, total) for k in range(total + 1)]
    peak = int(np.argmax(lrs))
    assert lrs[peak] == 1.0 and 0 < peak < total // 10
    assert all(np.diff(lrs[:peak + 1]) > 0) and all(np.diff(lrs[peak:]) <= 0)
    assert lrs[-1] < 1e-4 and min(lrs) >= 0


def test_lr_log_peaks_at_max(pairs):
    t = Trainer(cfg(total_iters=60, max_lr=1e-3, use_transfer=False), pairs)
    lrs = [t.train_step()["lr"] for _ in range(60)]
    assert max(lrs) == pytest.approx(1e-3) and lrs[-1] < 1e-4


def test_homography_phase_freezes_transfer(pairs):
    t = Trainer(cfg(), pairs)
    before_g, before_e = snap(t.model.transfer), snap(t.model.estimator)
    rec = t.train_step()
    assert rec["phase"] == "H"
    assert same(before_g, snap(t.model.transfer))
    assert not same(before_e, snap(t.model.estimator))
    assert all(p.requires_grad for p in t.model.transfer.parameters())


def test_transfer_phase_freezes_motion_head(pairs):
    t = Trainer(cfg(), pairs)
    t.train_step()
    head, fx, gen = snap(t.model.estimator.motion_head), snap(t.model.estimator.feature_extractor), snap(t.model.transfer)
    rec = t.train_step()
    assert rec["phase"] == "T"
    assert same(head, snap(t.model.estimator.motion_head))
    assert not same(fx, snap(t.model.estimator.feature_extractor))
    assert not same(gen, snap(t.model.transfer))


def test_zero_head_loss_closed_form(pairs):
    t = Trainer(cfg(supervision_source="real_only"), pairs)
    batch = t.batch(0)
    terms = t.homography_loss_terms(batch)
    ref = sum(sequence_weights(3, 0.8)) * batch.d_b_gt.abs().sum(dim=(1, 2)).mean().item()
    assert terms["real"].item() == pytest.approx(ref, rel=1e-6)


def test_both_sources_sum(pairs):
    t = Trainer(cfg(), pairs)
    terms = t.homography_loss_terms(t.batch(0))
    assert set(terms) == {"pseudo", "real"}
    rec = t.train_step()
    assert rec["loss"] == pytest.approx(rec["pseudo"] + rec["real"], rel=1e-6)


def test_fghomo_none_is_transfer_loss_only(pairs):
    t = Trainer(cfg(fghomo_type="none"), pairs)
    terms = t.transfer_loss_terms(t.batch(1))
    assert set(terms) == {"trans"}


def _detach_setup():
    """16x16 double-precision model with a non-trivial motion head."""
    torch.manual_seed(0)
    c = TrainConfig(**{**TINY, "image_size": 16, "window_size": 1, "gen_heads": (1, 1, 1, 1, 1)})
    data = PairedImages.toy(2, "invert-gamma", seed=1, size=16)
    t = Trainer(c, data)
    t.model.double()
    t.backbone.double()
    torch.nn.init.normal_(t.model.estimator.motion_head.out.weight, std=0.5)
    b = t.batch(1)
    batch = SamplePair(b.img_a.double(), b.img_b.double())
    return t, batch


def test_transfer_gradient_ignores_estimate():
    t, batch = _detach_setup()
    theta = t.model.transfer.head.bias  # three scalars of theta

    def loss(h_ab=None):
        return sum(t.transfer_loss_terms(batch, h_ab=h_ab).values())

    with torch.no_grad():
        h0 = t.estimate_ab(t.model.transfer(batch.img_a), batch.img_b)
    t.model.zero_grad()
    loss().backward()
    grad = theta.grad.clone()

    def fd(fn, eps=1e-6):
        out = torch.zeros_like(theta)
        for i in range(theta.numel()):
            with torch.no_grad():
                theta[i] += eps
                up = fn().item()
                theta[i] -= 2 * eps
                down = fn().item()
                theta[i] += eps
            out[i] = (up - down) / (2 * eps)
        return out

    # matches finite differences with the estimate held fixed ...
    frozen = fd(lambda: loss(h0))
    assert ((grad - frozen).norm() / frozen.norm()).item() < 1e-3
    # ... and not the derivative through a re-estimated homography
    moving = fd(lambda: loss())
    assert ((grad - moving).norm() / moving.norm()).item() > 1e-3

    # perturbing the motion head leaves the theta-gradient at a fixed estimate unchanged
    t.model.zero_grad()
    loss(h0).backward()
    grad = theta.grad.clone()
    with torch.no_grad():
        for p in t.model.estimator.motion_head.parameters():
            p.add_(0.1 * torch.randn_like(p))
    t.model.zero_grad()
    loss(h0).backward()
    assert torch.equal(theta.grad, grad)


def test_reproducible_trajectory(pairs, tmp_path):
    c = cfg(total_iters=10, eval_every=5, eval_samples=3)
    _, t1 = run_interleaved(c, pairs, pairs, tmp_path / "a")
    _, t2 = run_interleaved(c, pairs, pairs, tmp_path / "b")
    assert [r["loss"] for r in t1.history] == [r["loss"] for r in t2.history]
    log = [json.loads(l) for l in (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()]
    assert len(log) == 10 and {"step", "phase", "loss", "lr"} <= set(log[0])
    assert "mace" in log[4] and "mace" in log[9]
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()


def test_resume_matches_uninterrupted(pairs, tmp_path):
    c = cfg(total_iters=6)
    full = Trainer(c, pairs)
    full.run()
    part = Trainer(c, pairs)
    for _ in range(3):
        part.train_step()
    ck = part.checkpoint()
    resumed = Trainer(c, pairs)
    resumed.resume(ck)
    assert resumed.step == 3
    resumed.run()
    assert [r["loss"] for r in resumed.history] == [r["loss"] for r in full.history[3:]]
    with pytest.raises(ResumeMismatch):
        Trainer(cfg(total_iters=6, seed=9), pairs).resume(ck)


def test_nonfinite_loss_aborts(pairs):
    t = Trainer(cfg(), pairs)
    with torch.no_grad():
        t.model.estimator.motion_head.out.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLoss, match="step 0"):
        t.run()


def test_joint_regime_records_divergence(pairs):
    t = Trainer(cfg(interleaved=False), pairs)
    with torch.no_grad():
        t.model.estimator.motion_head.out.bias.fill_(float("inf"))
    t.run()
    assert t.diverged and t.history[-1]["diverged"]
    assert t.checkpoint().meta["diverged"] is True


def test_joint_step_updates_everything(pairs):
    t = Trainer(cfg(interleaved=False), pairs)
    before = snap(t.model)
    rec = t.train_step()
    assert rec["phase"] == "J" and {"pseudo", "real", "trans", "fghomo"} <= set(rec)
    after = snap(t.model)
    assert not same({k: before[k] for k in before if k.startswith("transfer")},
                    {k: after[k] for k in after if k.startswith("transfer")})


def test_distillation(pairs, tmp_path):
    c = cfg(total_iters=4)
    teacher, tr = run_interleaved(c, pairs, out_dir=tmp_path / "t")
    before = snap(tr.model)
    student, d = run_distillation(tmp_path / "t" / "final.ckpt", c, pairs, pairs, tmp_path / "s")
    assert student.is_student and not student.has_transfer
    assert student.parameter_count() < teacher.parameter_count()
    assert same(before, snap(tr.model))
    assert same({k: v for k, v in d.teacher.state_dict().items()}, before)
    assert load_checkpoint(tmp_path / "s" / "student.ckpt").iteration == 4
    # the student's target is the teacher's own prediction on the same inputs
    a, b = d.batch(0)
    assert torch.equal(d.teacher.predict(a, b), d.teacher.predict(a, b))


def test_distillation_needs_complete_teacher(pairs):
    c = cfg()
    t = Trainer(c.replace(use_transfer=False), pairs)
    with pytest.raises(TeacherIncomplete):
        Distiller(t.checkpoint(), c, pairs)


def test_pseudo_only_has_no_real_term(pairs):
    t = Trainer(cfg(supervision_source="pseudo_only"), pairs)
    rec = t.train_step()
    assert "pseudo" in rec and "real" not in rec
