"""Analytic gradients against central finite differences in float64."""

import time

import pytest
import torch

from oracles import contiguous, fd_check, tiny_batch, tiny_utility
from taskobf.adversary import init_deobfuscator, recon_loss
from taskobf.obfuscator import ArchConfig, init_obfuscator
from taskobf.trainer import obfuscator_objective

TINY = ArchConfig(base_width=4, depth=1)


def test_obfuscator_probe_loss_gradient():
    t0 = time.perf_counter()
    x, _ = tiny_batch()
    o = contiguous(init_obfuscator(TINY, seed=0))
    target = torch.rand(x.shape, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    params = list(o.parameters())
    err = fd_check(lambda: ((o(x) - target) ** 2).mean(), params, seed=1)
    assert err < 1e-4
    assert time.perf_counter() - t0 < 60


@pytest.mark.parametrize("lam", [0.0, 1.0, 10.0])
def test_composite_obfuscator_objective_gradient(lam):
    x, anns = tiny_batch()
    u = tiny_utility()
    targets = u.targets(list(anns), 16, 16)
    o = contiguous(init_obfuscator(TINY, seed=0))
    d = contiguous(init_deobfuscator(TINY, seed=2))
    d.requires_grad_(False)

    def loss():
        xp = o(x)
        return obfuscator_objective(u.loss(xp, targets), recon_loss(d(xp), x), lam)

    assert fd_check(loss, list(o.parameters()), seed=3) < 1e-4


def test_deobfuscator_recon_gradient():
    x, _ = tiny_batch()
    o = contiguous(init_obfuscator(TINY, seed=0))
    d = contiguous(init_deobfuscator(TINY, seed=2))
    with torch.no_grad():
        xp = o(x)
    assert fd_check(lambda: recon_loss(d(xp), x), list(d.parameters()), seed=4) < 1e-4


def test_task_loss_input_gradient():
    x, anns = tiny_batch()
    u = tiny_utility()
    targets = u.targets(list(anns), 16, 16)
    xv = x.clone().requires_grad_(True)
    assert fd_check(lambda: u.loss(xv, targets), [xv], seed=5) < 1e-4


def test_obfuscator_objective_drops_rec_term_at_zero_lambda():
    l_util = torch.tensor(2.0, requires_grad=True)
    l_rec = torch.tensor(float("nan"))
    assert obfuscator_objective(l_util, l_rec, 0.0).item() == 2.0
    assert obfuscator_objective(l_util, torch.tensor(0.5), 2.0).item() == 1.0
