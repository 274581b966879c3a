"""The lightweight learned obfuscator: an encoder-decoder image-to-image network."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .core import Dataset, Frame

PARAM_BUDGET = 2_000_000
BLOCK_TYPES = ("dsep", "conv")


class ParamBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    base_width: int = 16
    depth: int = 2
    block: str = "dsep"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1 (the network downsamples at least once)")
        if self.base_width < 1:
            raise ValueError("base_width must be positive")
        if self.block not in BLOCK_TYPES:
            raise ValueError(f"unknown block type {self.block!r}; expected one of {BLOCK_TYPES}")

    def widths(self) -> list:
        return [self.base_width * 2**i for i in range(self.depth + 1)]


def _block(kind: str, cin: int, cout: int, stride: int = 1) -> nn.Module:
    if kind == "dsep":
        return nn.Sequential(
            nn.Conv2d(cin, cin, 3, stride, 1, groups=cin),
            nn.Conv2d(cin, cout, 1),
            nn.SiLU(),
        )
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.SiLU())


class EncoderDecoder(nn.Module):
    """Strided encoder, nearest-neighbour decoder with skips at reduced resolutions.

    With ``input_skip=False`` nothing at full resolution bypasses the
    bottleneck. ``input_skip=True`` concatenates the raw input before the
    output head, which only the reconstruction adversary uses.
    """

    def __init__(self, cfg: ArchConfig, input_skip: bool = False):
        super().__init__()
        self.cfg = cfg
        self.input_skip = input_skip
        w = cfg.widths()
        self.stem = nn.Sequential(nn.Conv2d(3, w[0], 3, 1, 1), nn.SiLU())
        self.down = nn.ModuleList(
            nn.Sequential(_block(cfg.block, w[i - 1], w[i], 2), _block(cfg.block, w[i], w[i]))
            for i in range(1, cfg.depth + 1)
        )
        ups = []
        for i in range(cfg.depth, 0, -1):
            cin = w[i] + (w[i - 1] if i - 1 >= 1 else 0)
            ups.append(nn.Sequential(_block(cfg.block, cin, w[i - 1]), _block(cfg.block, w[i - 1], w[i - 1])))
        self.up = nn.ModuleList(ups)
        head_in = w[0] + (3 if input_skip else 0)
        if input_skip:
            self.head = nn.Sequential(_block(cfg.block, head_in, w[0]), nn.Conv2d(w[0], 3, 3, 1, 1))
        else:
            self.head = nn.Conv2d(head_in, 3, 3, 1, 1)

    @property
    def multiple(self) -> int:
        return 2**self.cfg.depth

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        m = self.multiple
        ph, pw = (-h) % m, (-w) % m
        top, left = ph // 2, pw // 2
        if ph or pw:
            mode = "reflect" if ph < h and pw < w else "replicate"
            x = F.pad(x, (left, pw - left, top, ph - top), mode=mode)
        x = x.contiguous(memory_format=torch.channels_last)
        feats = []
        z = self.stem(x)
        for stage in self.down:
            z = stage(z)
            feats.append(z)
        z = feats.pop()
        for stage in self.up:
            z = F.interpolate(z, scale_factor=2, mode="nearest")
            if feats:
                z = torch.cat([z, feats.pop()], dim=1)
            z = stage(z)
        if self.input_skip:
            z = torch.cat([z, x], dim=1)
        out = torch.sigmoid(self.head(z))
        if ph or pw:
            out = out[..., top : top + h, left : left + w]
        return out

    @property
    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


class ObfuscatorModel(EncoderDecoder):
    kind = "obfuscator"

    def __init__(self, cfg: ArchConfig, seed: int = 0):
        super().__init__(cfg, input_skip=False)
        self.seed = seed
        self.provenance: dict = {}


def _seeded(builder, seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = builder()
    return model.to(memory_format=torch.channels_last)


def init_obfuscator(arch_cfg: ArchConfig = ArchConfig(), seed: int = 0) -> ObfuscatorModel:
    model = _seeded(lambda: ObfuscatorModel(arch_cfg, seed), seed)
    if model.param_count >= PARAM_BUDGET:
        raise ParamBudgetError(f"obfuscator has {model.param_count} parameters; budget is < {PARAM_BUDGET}")
    return model


def frames_to_tensor(frames) -> torch.Tensor:
    arr = np.stack([f.pixels if isinstance(f, Frame) else f for f in frames])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def tensor_to_frames(t: torch.Tensor, ids) -> list:
    arr = t.detach().clamp(0, 1).permute(0, 2, 3, 1).contiguous().numpy()
    return [Frame(i, a) for i, a in zip(ids, arr)]


def apply_image_model(model: nn.Module, x):
    """Run an image-to-image model on a Frame (returns a Frame) or a tensor (differentiable)."""
    if isinstance(x, Frame):
        with torch.no_grad():
            out = model(frames_to_tensor([x]))
        return tensor_to_frames(out, [x.id])[0]
    squeeze = x.ndim == 3
    out = model(x[None] if squeeze else x)
    return out[0] if squeeze else out


def obfuscate(m: ObfuscatorModel, x):
    return apply_image_model(m, x)


@torch.no_grad()
def transform_dataset(model: nn.Module, ds: Dataset, batch_size: int = 64) -> Dataset:
    """Run ``model`` over every frame, keeping ids and annotations."""
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(ds.frames), batch_size):
        chunk = ds.frames[i : i + batch_size]
        y = model(frames_to_tensor(chunk))
        out.extend(tensor_to_frames(y, [f.id for f in chunk]))
    model.train(was_training)
    return Dataset(tuple(out), ds.annotations, ds.split, ds.n_identities)


def _manifest(m, extra=None) -> dict:
    return {"arch_cfg": asdict(m.cfg), "seed": m.seed, "provenance": dict(m.provenance), **(extra or {})}


def export_model(m: ObfuscatorModel, path) -> None:
    save_checkpoint(path, m.kind, m.state_dict(), _manifest(m))


def import_model(path) -> ObfuscatorModel:
    manifest, tensors = load_checkpoint(path, ObfuscatorModel.kind)
    m = init_obfuscator(ArchConfig(**manifest["arch_cfg"]), manifest["seed"])
    load_into(m, tensors)
    m.provenance = dict(manifest.get("provenance", {}))
    return m
