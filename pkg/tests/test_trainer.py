import math

import pytest
import torch

from taskobf.adversary import init_deobfuscator
from taskobf.checkpoint import param_hash
from taskobf.obfuscator import ArchConfig, init_obfuscator
from taskobf.trainer import (
    AttackConfig,
    AttackReport,
    ConstantTransform,
    IdentityTransform,
    NonFiniteLossError,
    TrainConfig,
    TrainHistory,
    adversarial_train,
    apply_transform,
    attack_evaluate,
    attacker_too_weak,
    mean_image_ssim,
)
from taskobf.utility import FrozenModelError, UtilityAdapter, UtilityConfig

TINY = ArchConfig(base_width=4, depth=1)


def _u():
    return UtilityAdapter(UtilityConfig(width=4), (64, 64)).freeze()


def _cfg(**kw):
    base = dict(lam=1.0, lr_o=1e-3, lr_d=1e-3, steps=6, batch_size=4, checkpoint_every=2, log_every=2)
    base.update(kw)
    return TrainConfig(**base)


def _run(ds, **kw):
    o, d = init_obfuscator(TINY, 0), init_deobfuscator(TINY, 1)
    return adversarial_train(o, _u(), d, ds, _cfg(**kw))


def test_config_validation():
    with pytest.raises(ValueError, match="lambda"):
        TrainConfig(lam=-1)
    with pytest.raises(ValueError, match="lr_o"):
        TrainConfig(lr_o=0)
    with pytest.raises(ValueError, match="steps"):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        AttackConfig(steps=0)
    assert AttackConfig(arch={"base_width": 8}).arch == ArchConfig(base_width=8)


def test_history_append_and_roundtrip(tmp_path):
    h = TrainHistory(config={"lam": 1.0})
    h.append(1, 2.0, 0.1, 1.9)
    h.append(5, 1.5, 0.2, 1.3)
    with pytest.raises(ValueError, match="increasing"):
        h.append(5, 1.0, 0.1, 0.9)
    h.wall_clock = 3.5
    h.save(tmp_path / "h")
    back = TrainHistory.load(tmp_path / "h")
    assert list(back.rows()) == list(h.rows())
    assert back.content_hash() == h.content_hash()
    back.wall_clock = 99.0
    assert back.content_hash() == h.content_hash()


def test_training_is_deterministic_and_leaves_utility_frozen(small_ds):
    u = _u()
    before = u.parameter_hash()
    o1, d1, h1 = adversarial_train(init_obfuscator(TINY, 0), u, init_deobfuscator(TINY, 1), small_ds, _cfg())
    assert u.parameter_hash() == before
    o2, d2, h2 = _run(small_ds)
    assert param_hash(o1) == param_hash(o2) and param_hash(d1) == param_hash(d2)
    assert h1.content_hash() == h2.content_hash()
    assert h1.steps == [2, 4, 6]
    assert o1.provenance["lambda"] == 1.0 and o1.provenance["utility_hash"] == before
    o3, _, _ = _run(small_ds, seed=1)
    assert param_hash(o3) != param_hash(o1)


def test_zero_lambda_drops_reconstruction_term(small_ds):
    _, _, h = _run(small_ds, lam=0.0)
    assert h.l_total == h.l_util
    _, _, h = _run(small_ds, lam=2.0)
    assert all(abs(t - (u - 2.0 * r)) < 1e-5 for u, r, t in zip(h.l_util, h.l_rec, h.l_total))


def test_unfrozen_utility_rejected(small_ds):
    raw = UtilityAdapter(UtilityConfig(width=4), (64, 64))
    with pytest.raises(FrozenModelError):
        adversarial_train(init_obfuscator(TINY, 0), raw, init_deobfuscator(TINY, 1), small_ds, _cfg())


class _NanAfter:
    """A frozen-utility stand-in whose loss turns NaN at a given call."""

    def __init__(self, u, nan_at):
        self.u, self.nan_at, self.calls = u, nan_at, 0
        self.task = u.task

    def check_frozen(self):
        self.u.check_frozen()

    def parameter_hash(self):
        return self.u.parameter_hash()

    def targets(self, *a, **kw):
        return self.u.targets(*a, **kw)

    def loss(self, x, t):
        self.calls += 1
        loss = self.u.loss(x, t)
        return loss * math.nan if self.calls >= self.nan_at else loss


def test_non_finite_loss_restores_last_checkpoint(small_ds):
    o, d = init_obfuscator(TINY, 0), init_deobfuscator(TINY, 1)
    ref_o, ref_d, _ = adversarial_train(init_obfuscator(TINY, 0), _u(), init_deobfuscator(TINY, 1), small_ds,
                                        _cfg(steps=4))
    with pytest.raises(NonFiniteLossError) as info:
        adversarial_train(o, _NanAfter(_u(), 5), d, small_ds, _cfg(steps=6))
    assert info.value.step == 5 and info.value.checkpoint["step"] == 4
    assert param_hash(o) == param_hash(ref_o)
    assert param_hash(d) == param_hash(ref_d)


def test_apply_transform_variants(small_ds):
    x = apply_transform(IdentityTransform(), small_ds)
    assert torch.equal(x, torch.from_numpy(small_ds.pixel_array()).permute(0, 3, 1, 2))
    c = apply_transform(ConstantTransform(0.25), small_ds)
    assert float(c.min()) == float(c.max()) == 0.25
    from taskobf.baselines import gaussian_blur_full

    b = apply_transform(lambda f: gaussian_blur_full(f, 1), small_ds)
    assert torch.equal(b, x)


def test_attack_separates_identity_from_constant(small_ds, small_test_ds):
    cfg = AttackConfig(steps=60, batch_size=8, lr=3e-3, arch=ArchConfig(base_width=8), eval_every=30)
    ident = attack_evaluate(IdentityTransform(), small_ds, small_test_ds, cfg)
    const = attack_evaluate(ConstantTransform(), small_ds, small_test_ds, cfg)
    assert ident.final_test_ssim > const.final_test_ssim + 0.1
    assert ident.final_test_recon_mse < const.final_test_recon_mse
    assert [c["step"] for c in ident.curves] == [30, 60]
    again = attack_evaluate(IdentityTransform(), small_ds, small_test_ds, cfg)
    assert again.attacker_hash == ident.attacker_hash
    assert const.final_test_ssim < mean_image_ssim(small_ds, small_test_ds) + 0.15


def test_attack_does_not_modify_obfuscator(small_ds, small_test_ds):
    o = init_obfuscator(TINY, 0)
    h = param_hash(o)
    attack_evaluate(o, small_ds, small_test_ds, AttackConfig(steps=3, batch_size=4, arch=TINY))
    assert param_hash(o) == h


def test_attacker_too_weak():
    assert attacker_too_weak(AttackReport(0.05, 0.5), 0.10)
    assert not attacker_too_weak(AttackReport(0.095, 0.5), 0.10)
    assert not attacker_too_weak(AttackReport(0.2, 0.5), 0.10)
