"""Frozen task models exposing predictions and a differentiable task loss.

Two toy adapters stand in for off-the-shelf industrial models:

* ``detect``: anchor-free centre-heatmap detector at stride 4 (class heatmap,
  box size and sub-cell offset heads), trained with a penalty-reduced focal
  loss plus L1 regression.
* ``pose``: stride-2 joint heatmaps trained with foreground-weighted heatmap
  MSE, plus a person-centre heatmap (focal loss) and box size used to group
  joints per instance.
"""

from __future__ import annotations

import copy
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, load_into, param_hash, save_checkpoint
from .core import DEFAULT_SIGMAS, Annotation, BBox, Dataset, Frame, KeypointSet, iou
from .obfuscator import frames_to_tensor
from .synthdata import CLASSES, PERSON_CLS

log = logging.getLogger(__name__)

TASKS = ("detect", "pose")
_SANITY_FLOOR = {"detect": 0.85, "pose": 0.80}
JOINT_FG_WEIGHT = 10.0


class TaskMismatchError(ValueError):
    pass


class FrozenModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class Detection:
    box: BBox
    cls: int

    def __post_init__(self):
        if self.box.score is None or not 0.0 <= self.box.score <= 1.0:
            raise ValueError("detections need a score in [0, 1]")

    @property
    def score(self) -> float:
        return self.box.score


@dataclass
class UtilityConfig:
    task: str = "detect"
    width: int = 24
    steps: int = 2500
    batch_size: int = 32
    lr: float = 2e-3
    seed: int = 0
    score_thresh: float = 0.30
    nms_thresh: float = 0.50
    max_dets: int = 32
    n_classes: int = len(CLASSES)
    n_joints: int = 5
    sigmas: tuple = DEFAULT_SIGMAS
    augment: bool = True
    loss_weights: dict = field(default_factory=dict)
    sanity_floor: Optional[float] = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        self.sigmas = tuple(float(s) for s in self.sigmas)
        defaults = {"detect": {"hm": 1.0, "wh": 0.1, "off": 1.0}, "pose": {"joints": 1.0, "center": 1.0, "wh": 0.1}}
        unknown = set(self.loss_weights) - set(defaults[self.task])
        if unknown:
            raise ValueError(f"unknown loss weight(s) for {self.task}: {sorted(unknown)}")
        self.loss_weights = {**defaults[self.task], **self.loss_weights}
        if self.sanity_floor is None:
            self.sanity_floor = _SANITY_FLOOR[self.task]

    @property
    def stride(self) -> int:
        return 4 if self.task == "detect" else 2

    @property
    def n_outputs(self) -> int:
        return self.n_classes + 4 if self.task == "detect" else 3 + self.n_joints


def _conv(cin, cout, stride=1, dilation=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, dilation, dilation=dilation), nn.SiLU())


class CenterNet(nn.Module):
    """Small fully-convolutional backbone with an output at stride 4 or 2."""

    def __init__(self, n_out: int, width: int = 24, stride: int = 4, hm_channels: int = 0):
        super().__init__()
        w = width
        self.stride = stride
        self.s1 = nn.Sequential(_conv(3, w), _conv(w, w, 2))
        self.s2 = nn.Sequential(_conv(w, 2 * w), _conv(2 * w, 2 * w, 2))
        self.ctx = nn.ModuleList(_conv(2 * w, 2 * w, dilation=d) for d in (1, 2, 4))
        if stride == 2:
            self.fuse = _conv(3 * w, 2 * w)
        self.head = nn.Sequential(_conv(2 * w, 2 * w), nn.Conv2d(2 * w, n_out, 1))
        if hm_channels:
            # heatmap prior of 0.1 keeps the focal loss stable early on
            with torch.no_grad():
                self.head[-1].bias[:hm_channels].fill_(-2.19)

    def forward(self, x):
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ValueError(f"input height and width must be multiples of 4, got {tuple(x.shape[-2:])}")
        x = x.contiguous(memory_format=torch.channels_last)
        f1 = self.s1(x)
        z = self.s2(f1)
        for layer in self.ctx:
            z = z + layer(z)
        if self.stride == 2:
            z = self.fuse(torch.cat([F.interpolate(z, scale_factor=2, mode="nearest"), f1], dim=1))
        return self.head(z)


# -- targets -------------------------------------------------------------------


@dataclass
class TaskTargets:
    task: str
    tensors: dict

    def __getitem__(self, idx) -> "TaskTargets":
        return TaskTargets(self.task, {k: v[idx] for k, v in self.tensors.items()})


def gaussian_radius(h: float, w: float, min_overlap: float = 0.7) -> float:
    """Largest centre displacement (in cells) that keeps IoU >= ``min_overlap``."""
    b1 = h + w
    c1 = w * h * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1**2 - 4 * c1)) / 2
    b2 = 2 * (h + w)
    c2 = (1 - min_overlap) * w * h
    r2 = (b2 + math.sqrt(b2**2 - 16 * c2)) / 2
    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (h + w)
    c3 = (min_overlap - 1) * w * h
    r3 = (b3 + math.sqrt(b3**2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def _splat_discrete(hm: np.ndarray, cx: int, cy: int, radius: int) -> None:
    sigma = (2 * radius + 1) / 6.0
    gh, gw = hm.shape
    ys, xs = np.ogrid[-radius : radius + 1, -radius : radius + 1]
    g = np.exp(-(xs * xs + ys * ys) / (2 * sigma * sigma))
    y0, y1 = max(0, cy - radius), min(gh, cy + radius + 1)
    x0, x1 = max(0, cx - radius), min(gw, cx + radius + 1)
    patch = g[y0 - cy + radius : y1 - cy + radius, x0 - cx + radius : x1 - cx + radius]
    np.maximum(hm[y0:y1, x0:x1], patch, out=hm[y0:y1, x0:x1])


def _splat_continuous(hm: np.ndarray, gx: float, gy: float, sigma: float = 1.0) -> None:
    gh, gw = hm.shape
    ys, xs = np.mgrid[0:gh, 0:gw]
    np.maximum(hm, np.exp(-((xs - gx) ** 2 + (ys - gy) ** 2) / (2 * sigma**2)), out=hm)


def detect_targets(ann: Annotation, h: int, w: int, stride: int = 4, n_classes: int = 2) -> dict:
    gh, gw = h // stride, w // stride
    hm = np.zeros((n_classes, gh, gw), np.float32)
    wh = np.zeros((2, gh, gw), np.float32)
    off = np.zeros((2, gh, gw), np.float32)
    mask = np.zeros((gh, gw), np.float32)
    for b in ann.boxes:
        if not 0 <= b.cls < n_classes:
            raise ValueError(f"box class {b.cls} outside [0, {n_classes})")
        cx = (b.x_min + b.x_max) / 2 / stride
        cy = (b.y_min + b.y_max) / 2 / stride
        ix, iy = min(int(cx), gw - 1), min(int(cy), gh - 1)
        bw, bh = b.width / stride, b.height / stride
        _splat_discrete(hm[b.cls], ix, iy, max(0, int(gaussian_radius(bh, bw))))
        wh[:, iy, ix] = (bw, bh)
        off[:, iy, ix] = (cx - ix, cy - iy)
        mask[iy, ix] = 1.0
    return {"hm": hm, "wh": wh, "off": off, "mask": mask}


def pose_targets(ann: Annotation, h: int, w: int, stride: int = 2, n_joints: int = 5) -> dict:
    gh, gw = h // stride, w // stride
    joints = np.zeros((n_joints, gh, gw), np.float32)
    center = np.zeros((1, gh, gw), np.float32)
    wh = np.zeros((2, gh, gw), np.float32)
    mask = np.zeros((gh, gw), np.float32)
    persons = [b for b in ann.boxes if b.cls == PERSON_CLS]
    if len(persons) != len(ann.keypoints):
        raise TaskMismatchError(
            f"frame {ann.frame_id!r}: {len(persons)} person boxes but {len(ann.keypoints)} keypoint sets"
        )
    for box, kps in zip(persons, ann.keypoints):
        if len(kps) != n_joints:
            raise TaskMismatchError(f"frame {ann.frame_id!r}: expected {n_joints} joints, got {len(kps)}")
        for j, (x, y, v) in enumerate(kps.joints):
            if v:
                _splat_continuous(joints[j], x / stride - 0.5, y / stride - 0.5)
        # a sparse MSE target collapses to zero, so the centre map is a focal-loss
        # heatmap like the detector's; joints are only argmaxed inside a person
        bw, bh = box.width / stride, box.height / stride
        ix = min(int((box.x_min + box.x_max) / 2 / stride), gw - 1)
        iy = min(int((box.y_min + box.y_max) / 2 / stride), gh - 1)
        _splat_discrete(center[0], ix, iy, max(0, int(gaussian_radius(bh, bw))))
        wh[:, iy, ix] = (bw, bh)
        mask[iy, ix] = 1.0
    return {"joints": joints, "center": center, "wh": wh, "mask": mask}


def build_targets(task: str, anns, h: int, w: int, cfg: UtilityConfig) -> TaskTargets:
    if task == "detect":
        per = [detect_targets(a, h, w, cfg.stride, cfg.n_classes) for a in anns]
    else:
        per = [pose_targets(a, h, w, cfg.stride, cfg.n_joints) for a in anns]
    keys = per[0].keys() if per else ()
    return TaskTargets(task, {k: torch.from_numpy(np.stack([p[k] for p in per])) for k in keys})


# -- losses --------------------------------------------------------------------


def focal_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    pos = (target >= 1.0).to(logits.dtype)
    p = torch.sigmoid(logits)
    pos_term = pos * (1 - p) ** 2 * F.logsigmoid(logits)
    neg_term = (1 - pos) * (1 - target) ** 4 * p**2 * F.logsigmoid(-logits)
    n_pos = pos.sum().clamp(min=1.0)
    return -(pos_term.sum() + neg_term.sum()) / n_pos


def _masked_l1(pred, target, mask):
    m = mask.unsqueeze(1).to(pred.dtype)
    return (m * (pred - target).abs()).sum() / m.sum().clamp(min=1.0)


def _loss_terms(task: str, out: torch.Tensor, t: dict, cfg: UtilityConfig) -> dict:
    dt = out.dtype
    t = {k: v.to(dt) for k, v in t.items()}
    if task == "detect":
        c = cfg.n_classes
        return {
            "hm": focal_loss(out[:, :c], t["hm"]),
            "wh": _masked_l1(out[:, c : c + 2], t["wh"], t["mask"]),
            "off": _masked_l1(out[:, c + 2 : c + 4], t["off"], t["mask"]),
        }
    b = out.shape[0]
    # foreground-weighted MSE: unweighted, the sparse peaks barely register
    weight = 1.0 + JOINT_FG_WEIGHT * t["joints"]
    return {
        "center": focal_loss(out[:, :1], t["center"]),
        "wh": _masked_l1(out[:, 1:3], t["wh"], t["mask"]),
        "joints": (weight * (out[:, 3:] - t["joints"]) ** 2).sum() / (b * cfg.n_joints),
    }


# -- decoding ------------------------------------------------------------------


def non_max_suppression(dets, iou_thresh: float = 0.5) -> list:
    """Greedy per-class suppression in descending score order."""
    order = sorted(dets, key=lambda d: -d.score)
    keep = []
    for d in order:
        if all(k.cls != d.cls or iou(k.box, d.box) < iou_thresh for k in keep):
            keep.append(d)
    return keep


def _peaks(hm: torch.Tensor, thresh: float, k: int):
    """Local 3x3 maxima of a (C, H, W) map at or above ``thresh``, best first."""
    pooled = F.max_pool2d(hm[None], 3, stride=1, padding=1)[0]
    keep = (hm == pooled) & (hm >= thresh)
    scores = hm[keep]
    idx = keep.nonzero()
    order = torch.argsort(-scores, stable=True)[:k]
    return [(float(scores[i]), *map(int, idx[i])) for i in order]


def _decode_detect(out: torch.Tensor, cfg: UtilityConfig, h: int, w: int) -> list:
    c, s = cfg.n_classes, cfg.stride
    hm = torch.sigmoid(out[:c])
    dets = []
    for score, cls, iy, ix in _peaks(hm, cfg.score_thresh, cfg.max_dets):
        bw, bh = (float(v) * s for v in out[c : c + 2, iy, ix])
        ox, oy = (float(v) for v in out[c + 2 : c + 4, iy, ix])
        cx, cy = (ix + ox) * s, (iy + oy) * s
        x1, y1 = max(cx - bw / 2, 0.0), max(cy - bh / 2, 0.0)
        x2, y2 = min(cx + bw / 2, float(w)), min(cy + bh / 2, float(h))
        if x2 - x1 < 1e-3 or y2 - y1 < 1e-3:
            continue
        dets.append(Detection(BBox(x1, y1, x2, y2, cls, min(max(score, 0.0), 1.0)), cls))
    return non_max_suppression(dets, cfg.nms_thresh)


def _refine(m: torch.Tensor, y: int, x: int) -> tuple:
    """Quadratic sub-cell refinement around an integer peak."""
    gh, gw = m.shape
    dx = dy = 0.0
    if 0 < x < gw - 1:
        l, c, r = float(m[y, x - 1]), float(m[y, x]), float(m[y, x + 1])
        den = l - 2 * c + r
        if den < 0:
            dx = float(np.clip(0.5 * (l - r) / den, -0.5, 0.5))
    if 0 < y < gh - 1:
        u, c, d = float(m[y - 1, x]), float(m[y, x]), float(m[y + 1, x])
        den = u - 2 * c + d
        if den < 0:
            dy = float(np.clip(0.5 * (u - d) / den, -0.5, 0.5))
    return x + dx, y + dy


def _decode_pose(out: torch.Tensor, cfg: UtilityConfig, h: int, w: int) -> list:
    s = cfg.stride
    center, joints = torch.sigmoid(out[0]), out[3:]
    gh, gw = center.shape
    people = []
    for score, _, iy, ix in _peaks(center[None], cfg.score_thresh, cfg.max_dets):
        # joint targets sit at pixel / stride - 0.5, so cell ix is the centre in that frame
        gx, gy = float(ix), float(iy)
        bw, bh = (max(float(v), 0.5) for v in out[1:3, iy, ix])
        x0, x1 = max(0, int(math.floor(gx - 0.6 * bw))), min(gw, int(math.ceil(gx + 0.6 * bw)) + 1)
        y0, y1 = max(0, int(math.floor(gy - 0.6 * bh))), min(gh, int(math.ceil(gy + 0.6 * bh)) + 1)
        pts = []
        for j in range(joints.shape[0]):
            region = joints[j, y0:y1, x0:x1]
            flat = int(torch.argmax(region))
            jy, jx = divmod(flat, region.shape[1])
            rx, ry = _refine(joints[j], y0 + jy, x0 + jx)
            pts.append(((rx + 0.5) * s, (ry + 0.5) * s, 1))
        area = max(bw * bh * s * s, 1.0)
        people.append(KeypointSet(tuple(pts), area, min(max(score, 0.0), 1.0)))
    return people


# -- adapter -------------------------------------------------------------------


class UtilityAdapter:
    """A task network plus decoding and loss contracts; immutable once frozen."""

    kind = "utility"

    def __init__(self, cfg: UtilityConfig, input_size: tuple):
        self.cfg = cfg
        self.task = cfg.task
        self.input_size = tuple(input_size)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            hm_channels = cfg.n_classes if cfg.task == "detect" else 1
            self.net = CenterNet(cfg.n_outputs, cfg.width, cfg.stride, hm_channels)
        self.net = self.net.to(memory_format=torch.channels_last)
        self.frozen = False
        self._hash: Optional[str] = None
        self.report: dict = {}

    def freeze(self) -> "UtilityAdapter":
        self.net.eval()
        self.net.requires_grad_(False)
        self.frozen = True
        self._hash = param_hash(self.net)
        return self

    def with_score_thresh(self, thresh: float) -> "UtilityAdapter":
        """Shallow copy sharing the frozen network but decoding at ``thresh``."""
        clone = copy.copy(self)
        clone.cfg = replace(self.cfg, score_thresh=thresh)
        return clone

    def parameter_hash(self) -> str:
        return param_hash(self.net)

    def check_frozen(self) -> None:
        if not self.frozen:
            raise FrozenModelError("utility adapter is not frozen")
        if self.parameter_hash() != self._hash:
            raise FrozenModelError("utility adapter parameters changed after freezing")

    def targets(self, anns, h: Optional[int] = None, w: Optional[int] = None) -> TaskTargets:
        h = h or self.input_size[0]
        w = w or self.input_size[1]
        return build_targets(self.task, anns, h, w, self.cfg)

    def loss_terms(self, x: torch.Tensor, targets: TaskTargets) -> dict:
        if targets.task != self.task:
            raise TaskMismatchError(f"{targets.task!r} targets passed to a {self.task!r} adapter")
        out = self.net(x)
        return _loss_terms(self.task, out, targets.tensors, self.cfg)

    def loss(self, x: torch.Tensor, targets: TaskTargets) -> torch.Tensor:
        terms = self.loss_terms(x, targets)
        return sum(self.cfg.loss_weights[k] * v for k, v in terms.items())

    @torch.no_grad()
    def predict_batch(self, x: torch.Tensor) -> list:
        was_training = self.net.training
        self.net.eval()
        out = self.net(x.float())
        self.net.train(was_training)
        h, w = x.shape[-2:]
        decode = _decode_detect if self.task == "detect" else _decode_pose
        return [decode(o, self.cfg, h, w) for o in out]

    def predict_dataset(self, ds: Dataset, batch_size: int = 64) -> list:
        preds = []
        for i in range(0, len(ds.frames), batch_size):
            preds.extend(self.predict_batch(frames_to_tensor(ds.frames[i : i + batch_size])))
        return preds


def predict(u: UtilityAdapter, x) -> list:
    if not u.frozen:
        raise FrozenModelError("predict requires a frozen adapter")
    if isinstance(x, Frame):
        return u.predict_batch(frames_to_tensor([x]))[0]
    return u.predict_batch(x[None] if x.ndim == 3 else x)[0]


def task_loss(u: UtilityAdapter, x, gt) -> torch.Tensor:
    """Task loss of ``u`` on a frame (or tensor) against ``gt``; differentiable in the pixels."""
    if isinstance(x, Frame):
        x = frames_to_tensor([x])
    elif x.ndim == 3:
        x = x[None]
    if isinstance(gt, Annotation):
        gt = u.targets([gt], x.shape[-2], x.shape[-1])
    elif not isinstance(gt, TaskTargets):
        raise TypeError("gt must be an Annotation or TaskTargets")
    return u.loss(x, gt)


# -- training ------------------------------------------------------------------


def photometric_augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Per-sample channel permutation, random greyscale, brightness and contrast jitter."""
    n = x.shape[0]
    perms = torch.stack([torch.randperm(3, generator=gen) for _ in range(n)])
    x = torch.gather(x, 1, perms[:, :, None, None].expand_as(x))
    grey = (torch.rand(n, generator=gen) < 0.2)[:, None, None, None]
    x = torch.where(grey, x.mean(dim=1, keepdim=True).expand_as(x), x)
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    contrast = 0.8 + 0.4 * torch.rand(n, 1, 1, 1, generator=gen)
    bright = 0.2 * torch.rand(n, 1, 1, 1, generator=gen) - 0.1
    return ((x - mean) * contrast + mean + bright).clamp(0, 1)


def _check_task_data(task: str, ds: Dataset) -> None:
    if task == "detect" and not any(a.boxes for a in ds.annotations.values()):
        raise ValueError("detector training needs a dataset with boxes")
    if task == "pose" and not any(a.keypoints for a in ds.annotations.values()):
        raise ValueError("pose training needs a dataset with keypoints")


def evaluate_adapter(u: UtilityAdapter, ds: Dataset) -> float:
    from .metrics import map50, oks_map50

    preds = u.predict_dataset(ds)
    if u.task == "detect":
        return map50(preds, [ds.annotations[f.id].boxes for f in ds.frames])
    return oks_map50(preds, [ds.annotations[f.id].keypoints for f in ds.frames], u.cfg.sigmas)


def _train_adapter(train: Dataset, val: Dataset, cfg: UtilityConfig) -> UtilityAdapter:
    _check_task_data(cfg.task, train)
    _check_task_data(cfg.task, val)
    h, w = train.frames[0].height, train.frames[0].width
    u = UtilityAdapter(cfg, (h, w))
    x_all = frames_to_tensor(train.frames)
    targets = u.targets([train.annotations[f.id] for f in train.frames], h, w)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    opt = torch.optim.Adam(u.net.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=cfg.lr, total_steps=cfg.steps, pct_start=0.1)
    u.net.train()
    for step in range(cfg.steps):
        idx = torch.randint(len(x_all), (cfg.batch_size,), generator=gen)
        x = x_all[idx]
        if cfg.augment:
            x = photometric_augment(x, gen)
        loss = u.loss(x, targets[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % 500 == 0 or step == cfg.steps - 1:
            log.info("utility[%s] step %d loss %.4f", cfg.task, step, loss.item())
    u.freeze()
    score = evaluate_adapter(u, val)
    metric = "map50" if cfg.task == "detect" else "oks_map50"
    u.report = {f"val_{metric}": score, "sanity_floor": cfg.sanity_floor, "passed_floor": score >= cfg.sanity_floor}
    if score < cfg.sanity_floor:
        warnings.warn(f"{cfg.task} adapter reached val {metric}={score:.3f} < sanity floor {cfg.sanity_floor}")
    return u


def train_toy_detector(train: Dataset, val: Dataset, cfg: Optional[UtilityConfig] = None) -> UtilityAdapter:
    cfg = cfg or UtilityConfig(task="detect")
    if cfg.task != "detect":
        raise TaskMismatchError("train_toy_detector needs a detect config")
    return _train_adapter(train, val, cfg)


def train_toy_pose(train: Dataset, val: Dataset, cfg: Optional[UtilityConfig] = None) -> UtilityAdapter:
    cfg = cfg or UtilityConfig(task="pose")
    if cfg.task != "pose":
        raise TaskMismatchError("train_toy_pose needs a pose config")
    return _train_adapter(train, val, cfg)


def export_adapter(u: UtilityAdapter, path) -> None:
    if not u.frozen:
        raise FrozenModelError("only frozen adapters can be exported")
    cfg = asdict(u.cfg)
    cfg["sigmas"] = list(cfg["sigmas"])
    manifest = {"task": u.task, "cfg": cfg, "input_size": list(u.input_size), "report": u.report,
                "param_hash": u.parameter_hash()}
    save_checkpoint(path, u.kind, u.net.state_dict(), manifest)


def import_adapter(path) -> UtilityAdapter:
    manifest, tensors = load_checkpoint(path, UtilityAdapter.kind)
    cfg = UtilityConfig(**manifest["cfg"])
    u = UtilityAdapter(cfg, tuple(manifest["input_size"]))
    load_into(u.net, tensors)
    u.freeze()
    if u.parameter_hash() != manifest["param_hash"]:
        raise FrozenModelError(f"{path}: parameter hash does not match manifest")
    u.report = dict(manifest.get("report", {}))
    return u
