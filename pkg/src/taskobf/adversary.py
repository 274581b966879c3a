"""The reconstruction adversary (deobfuscator)."""

from __future__ import annotations

from dataclasses import asdict, replace

import torch

from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .core import Frame
from .obfuscator import ArchConfig, EncoderDecoder, _seeded, apply_image_model


class DeobfuscatorModel(EncoderDecoder):
    """Encoder-decoder mirroring the obfuscator, plus a full-resolution input path."""

    kind = "deobfuscator"

    def __init__(self, cfg: ArchConfig, seed: int = 0):
        super().__init__(cfg, input_skip=True)
        self.seed = seed
        self.provenance: dict = {}


def deobfuscator_config(obf_cfg: ArchConfig, width_ratio: float = 2.0) -> ArchConfig:
    return replace(obf_cfg, base_width=max(1, int(round(obf_cfg.base_width * width_ratio))))


def init_deobfuscator(arch_cfg: ArchConfig, seed: int = 0) -> DeobfuscatorModel:
    return _seeded(lambda: DeobfuscatorModel(arch_cfg, seed), seed)


def reconstruct(d: DeobfuscatorModel, xprime):
    return apply_image_model(d, xprime)


def recon_loss(xhat, x):
    """Mean squared error over pixels and channels; a tensor when given tensors."""
    if isinstance(xhat, Frame):
        xhat = torch.from_numpy(xhat.pixels.copy())
    if isinstance(x, Frame):
        x = torch.from_numpy(x.pixels.copy())
    if xhat.shape != x.shape:
        raise ValueError(f"shape mismatch {tuple(xhat.shape)} vs {tuple(x.shape)}")
    return ((xhat - x) ** 2).mean()


def export_deobfuscator(d: DeobfuscatorModel, path) -> None:
    save_checkpoint(path, d.kind, d.state_dict(), {"arch_cfg": asdict(d.cfg), "seed": d.seed, "provenance": d.provenance})


def import_deobfuscator(path) -> DeobfuscatorModel:
    manifest, tensors = load_checkpoint(path, DeobfuscatorModel.kind)
    d = init_deobfuscator(ArchConfig(**manifest["arch_cfg"]), manifest["seed"])
    load_into(d, tensors)
    d.provenance = dict(manifest.get("provenance", {}))
    return d
