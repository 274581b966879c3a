"""Adversarial obfuscator training and the independent reconstruction attack."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import torch
import torch.nn as nn

from .adversary import DeobfuscatorModel, deobfuscator_config, init_deobfuscator, recon_loss
from .checkpoint import param_hash
from .core import Dataset
from .metrics import ssim_batch
from .obfuscator import ArchConfig, ObfuscatorModel, frames_to_tensor
from .utility import FrozenModelError, TaskTargets, UtilityAdapter

log = logging.getLogger(__name__)

HISTORY_VERSION = 1


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/inf loss; ``checkpoint`` holds the last good state."""

    def __init__(self, step: int, checkpoint: dict):
        super().__init__(f"non-finite loss at step {step}; restored checkpoint from step {checkpoint['step']}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    lam: float = 1.0
    lr_o: float = 1e-4
    lr_d: float = 1e-4
    steps: int = 1000
    d_steps_per_o_step: int = 1
    batch_size: int = 16
    seed: int = 0
    checkpoint_every: int = 100
    log_every: int = 10

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        for name in ("lr_o", "lr_d"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("steps", "d_steps_per_o_step", "batch_size", "checkpoint_every", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)
    l_util: list = field(default_factory=list)
    l_rec: list = field(default_factory=list)
    l_total: list = field(default_factory=list)
    wall_clock: float = 0.0
    hashes: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def append(self, step: int, l_util: float, l_rec: float, l_total: float) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ValueError("history steps must be strictly increasing")
        self.steps.append(step)
        self.l_util.append(l_util)
        self.l_rec.append(l_rec)
        self.l_total.append(l_total)

    def rows(self):
        return zip(self.steps, self.l_util, self.l_rec, self.l_total)

    def content_hash(self) -> str:
        """Hash of everything except wall-clock time."""
        doc = {"rows": [list(map(repr, r)) for r in self.rows()], "hashes": self.hashes, "config": self.config}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "history.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "l_util", "l_rec", "l_total"])
            for r in self.rows():
                w.writerow([r[0], repr(r[1]), repr(r[2]), repr(r[3])])
        manifest = {
            "format_version": HISTORY_VERSION,
            "config": self.config,
            "hashes": self.hashes,
            "wall_clock_s": self.wall_clock,
            "history_hash": self.content_hash(),
        }
        (directory / "history.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, directory) -> "TrainHistory":
        directory = Path(directory)
        manifest = json.loads((directory / "history.json").read_text())
        if manifest.get("format_version") != HISTORY_VERSION:
            raise ValueError(f"unsupported history version {manifest.get('format_version')!r}")
        h = cls(wall_clock=manifest["wall_clock_s"], hashes=manifest["hashes"], config=manifest["config"])
        with open(directory / "history.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                h.append(int(row["step"]), float(row["l_util"]), float(row["l_rec"]), float(row["l_total"]))
        return h


def obfuscator_objective(l_util: torch.Tensor, l_rec: torch.Tensor, lam: float) -> torch.Tensor:
    """L_O = L_util - lam * L_rec; the reconstruction term is dropped entirely at lam = 0."""
    if lam == 0:
        return l_util
    return l_util - lam * l_rec


def _snapshot(o, d, opt_o, opt_d, step) -> dict:
    return {
        "step": step,
        "o": copy.deepcopy(o.state_dict()),
        "d": copy.deepcopy(d.state_dict()),
        "opt_o": copy.deepcopy(opt_o.state_dict()),
        "opt_d": copy.deepcopy(opt_d.state_dict()),
    }


def _restore(ckpt, o, d, opt_o, opt_d) -> None:
    o.load_state_dict(ckpt["o"])
    d.load_state_dict(ckpt["d"])
    opt_o.load_state_dict(ckpt["opt_o"])
    opt_d.load_state_dict(ckpt["opt_d"])


def adversarial_train(
    o: ObfuscatorModel,
    u: UtilityAdapter,
    d: DeobfuscatorModel,
    train: Dataset,
    cfg: TrainConfig,
    targets: Optional[TaskTargets] = None,
) -> tuple:
    """Alternate deobfuscator and obfuscator updates against a frozen utility model.

    Each outer step runs ``d_steps_per_o_step`` updates of D on
    ``recon_loss(D(O(x)), x)`` with O fixed, then one update of O on
    ``task_loss(U, O(x)) - lam * recon_loss(D(O(x)), x)`` with D fixed.
    Returns ``(o, d, history)``; ``o`` and ``d`` are updated in place.
    """
    if len(train) == 0:
        raise ValueError("training dataset is empty")
    u.check_frozen()
    u_hash = u.parameter_hash()
    x_all = frames_to_tensor(train.frames)
    if targets is None:
        targets = u.targets([train.annotations[f.id] for f in train.frames], x_all.shape[-2], x_all.shape[-1])
    gen = torch.Generator().manual_seed(cfg.seed)
    opt_o = torch.optim.Adam(o.parameters(), lr=cfg.lr_o)
    opt_d = torch.optim.Adam(d.parameters(), lr=cfg.lr_d)
    history = TrainHistory(config=asdict(cfg))
    last_good = _snapshot(o, d, opt_o, opt_d, 0)
    o.train()
    d.train()
    start = time.perf_counter()
    n = len(x_all)

    for step in range(1, cfg.steps + 1):
        for _ in range(cfg.d_steps_per_o_step):
            idx = torch.randint(n, (cfg.batch_size,), generator=gen)
            x = x_all[idx]
            with torch.no_grad():
                xp = o(x)
            l_d = recon_loss(d(xp), x)
            opt_d.zero_grad()
            l_d.backward()
            opt_d.step()

        idx = torch.randint(n, (cfg.batch_size,), generator=gen)
        x = x_all[idx]
        d.requires_grad_(False)
        xp = o(x)
        l_util = u.loss(xp, targets[idx])
        l_rec = recon_loss(d(xp), x)
        l_o = obfuscator_objective(l_util, l_rec, cfg.lam)
        opt_o.zero_grad()
        l_o.backward()
        d.requires_grad_(True)

        vals = [v.item() for v in (l_d, l_util, l_rec, l_o)]
        if not all(math.isfinite(v) for v in vals):
            _restore(last_good, o, d, opt_o, opt_d)
            raise NonFiniteLossError(step, last_good)
        opt_o.step()

        if step % cfg.log_every == 0 or step == cfg.steps:
            history.append(step, *vals[1:])
            log.debug("step %d util %.4f rec %.4f total %.4f", step, *vals[1:])
        if step % cfg.checkpoint_every == 0:
            last_good = _snapshot(o, d, opt_o, opt_d, step)

    history.wall_clock = time.perf_counter() - start
    if u.parameter_hash() != u_hash:
        raise FrozenModelError("utility parameters changed during obfuscator training")
    o.eval()
    d.eval()
    history.hashes = {"obfuscator": param_hash(o), "deobfuscator": param_hash(d), "utility": u_hash}
    o.provenance = {
        "lambda": cfg.lam,
        "steps": cfg.steps,
        "seed": cfg.seed,
        "utility_hash": u_hash,
        "history_hash": history.content_hash(),
    }
    return o, d, history


# -- independent reconstruction attack -----------------------------------------


@dataclass
class AttackConfig:
    steps: int = 1000
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    width_ratio: float = 2.0
    arch: ArchConfig = field(default_factory=ArchConfig)
    eval_every: int = 250

    def __post_init__(self):
        if isinstance(self.arch, dict):
            self.arch = ArchConfig(**self.arch)
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("attack steps, batch_size and eval_every must be >= 1")
        if not self.lr > 0 or not self.width_ratio > 0:
            raise ValueError("attack lr and width_ratio must be positive")


@dataclass
class AttackReport:
    final_test_recon_mse: float
    final_test_ssim: float
    curves: list = field(default_factory=list)
    attacker_hash: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


class IdentityTransform(nn.Module):
    """O(x) = x; the no-privacy reference for the attack."""

    def forward(self, x):
        return x


class ConstantTransform(nn.Module):
    """O(x) = c everywhere; carries no information about x."""

    def __init__(self, value: float = 0.5):
        super().__init__()
        self.value = value

    def forward(self, x):
        return torch.full_like(x, self.value)


Transform = Union[nn.Module, Callable]


@torch.no_grad()
def apply_transform(o: Transform, ds: Dataset, batch_size: int = 64) -> torch.Tensor:
    """Transformed frames of ``ds`` as an NCHW tensor."""
    if isinstance(o, nn.Module):
        was_training = o.training
        o.eval()
        chunks = [o(frames_to_tensor(ds.frames[i : i + batch_size])) for i in range(0, len(ds.frames), batch_size)]
        o.train(was_training)
        return torch.cat(chunks).contiguous()
    return frames_to_tensor([o(f) for f in ds.frames])


@torch.no_grad()
def reconstruction_scores(d: nn.Module, xp: torch.Tensor, x: torch.Tensor, batch_size: int = 64) -> tuple:
    """Mean per-frame MSE and SSIM of ``d(xp)`` against ``x``."""
    d.eval()
    mses, ssims = [], []
    for i in range(0, len(x), batch_size):
        xh = d(xp[i : i + batch_size])
        xi = x[i : i + batch_size]
        mses.append(((xh.double() - xi.double()) ** 2).mean(dim=(1, 2, 3)))
        ssims.append(ssim_batch(xh, xi))
    return float(torch.cat(mses).mean()), float(torch.cat(ssims).mean())


def train_attacker(xp_train: torch.Tensor, x_train: torch.Tensor, cfg: AttackConfig, xp_test=None, x_test=None):
    """Fit a fresh deobfuscator on ``(O(x), x)`` pairs; returns ``(d, curves)``."""
    d = init_deobfuscator(deobfuscator_config(cfg.arch, cfg.width_ratio), cfg.seed)
    opt = torch.optim.Adam(d.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed + 7)
    curves = []
    d.train()
    for step in range(1, cfg.steps + 1):
        idx = torch.randint(len(x_train), (cfg.batch_size,), generator=gen)
        loss = recon_loss(d(xp_train[idx]), x_train[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        if not math.isfinite(loss.item()):
            raise NonFiniteLossError(step, {"step": step - 1})
        if xp_test is not None and (step % cfg.eval_every == 0 or step == cfg.steps):
            test_mse, test_ssim = reconstruction_scores(d, xp_test, x_test)
            curves.append({"step": step, "train_mse": loss.item(), "test_mse": test_mse, "test_ssim": test_ssim})
            d.train()
    d.eval()
    return d, curves


def attack_evaluate(o_frozen: Transform, train: Dataset, test: Dataset, cfg: Optional[AttackConfig] = None) -> AttackReport:
    """Train a fresh deobfuscator against a frozen transform and score it on the test split."""
    cfg = cfg or AttackConfig()
    if isinstance(o_frozen, nn.Module):
        before = param_hash(o_frozen)
    x_train, x_test = frames_to_tensor(train.frames), frames_to_tensor(test.frames)
    xp_train, xp_test = apply_transform(o_frozen, train), apply_transform(o_frozen, test)
    d, curves = train_attacker(xp_train, x_train, cfg, xp_test, x_test)
    mse, ssim_val = reconstruction_scores(d, xp_test, x_test)
    if isinstance(o_frozen, nn.Module) and param_hash(o_frozen) != before:
        raise FrozenModelError("obfuscator parameters changed during the attack")
    return AttackReport(mse, ssim_val, curves, param_hash(d))


def attacker_too_weak(fresh: AttackReport, cotrained_test_mse: float, tol: float = 0.10) -> bool:
    """True when the fresh attacker beats the co-trained adversary by more than ``tol``."""
    return fresh.final_test_recon_mse < (1.0 - tol) * cotrained_test_mse


def mean_image_ssim(train: Dataset, test: Dataset) -> float:
    """SSIM of the train-set mean image against each test frame: the no-information baseline."""
    mean = frames_to_tensor(train.frames).double().mean(dim=0, keepdim=True)
    x = frames_to_tensor(test.frames).double()
    return float(ssim_batch(mean.expand_as(x), x).mean())


def dataset_targets(u: UtilityAdapter, ds: Dataset) -> TaskTargets:
    h, w = ds.frames[0].height, ds.frames[0].width
    return u.targets([ds.annotations[f.id] for f in ds.frames], h, w)


__all__ = [
    "AttackConfig",
    "AttackReport",
    "ConstantTransform",
    "IdentityTransform",
    "NonFiniteLossError",
    "TrainConfig",
    "TrainHistory",
    "adversarial_train",
    "attack_evaluate",
    "attacker_too_weak",
    "mean_image_ssim",
    "obfuscator_objective",
]
