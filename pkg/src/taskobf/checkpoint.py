"""Versioned checkpoint container: named tensors plus a JSON-able manifest."""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Mapping

import torch

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def save_checkpoint(path, kind: str, state_dict: Mapping[str, torch.Tensor], manifest: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().cpu().contiguous().clone() for k, v in state_dict.items()}
    torch.save({"format_version": FORMAT_VERSION, "kind": kind, "manifest": manifest, "tensors": tensors}, path)


def load_checkpoint(path, kind: str) -> tuple:
    """Returns ``(manifest, tensors)``; rejects unknown versions and foreign kinds."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    version = blob.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint format version {version!r}, expected {FORMAT_VERSION}")
    if blob.get("kind") != kind:
        raise CheckpointError(f"{path}: checkpoint holds a {blob.get('kind')!r}, expected {kind!r}")
    return blob["manifest"], blob["tensors"]


def load_into(module: torch.nn.Module, tensors: Mapping[str, torch.Tensor]) -> None:
    expected = set(module.state_dict())
    got = set(tensors)
    missing = sorted(expected - got)
    unexpected = sorted(got - expected)
    if missing:
        raise CheckpointError(f"checkpoint is missing tensor(s): {', '.join(missing)}")
    if unexpected:
        raise CheckpointError(f"checkpoint has unexpected tensor(s): {', '.join(unexpected)}")
    for name, t in module.state_dict().items():
        if tuple(t.shape) != tuple(tensors[name].shape):
            raise CheckpointError(f"tensor {name!r} has shape {tuple(tensors[name].shape)}, expected {tuple(t.shape)}")
    module.load_state_dict(tensors)


def param_hash(module_or_state) -> str:
    """sha256 over sorted tensor names, dtypes, shapes and raw bytes."""
    state = module_or_state.state_dict() if isinstance(module_or_state, torch.nn.Module) else module_or_state
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()
