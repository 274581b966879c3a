"""Deterministic synthetic scenes: textured planks plus identity-bearing stick figures.

Every scene is a pure function of ``(spec.seed, index)``. Task objects ("planks",
class 0) are drawn from three size bands so that size-stratified evaluation has
populated bins. Persons (class 1) are five-joint stick figures whose stroke
texture (hue, stripe orientation and stripe period) encodes the frame's
identity label, while their geometry carries no identity information.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from .core import Annotation, BBox, Dataset, Frame, KeypointSet

TASK_CLS = 0
PERSON_CLS = 1
CLASSES = (TASK_CLS, PERSON_CLS)
JOINT_NAMES = ("head", "neck", "pelvis", "left_foot", "right_foot")
N_BACKGROUNDS = 3
_MAX_RETRIES = 200


class SceneGenerationError(RuntimeError):
    """Objects could not be placed without overlap (spec too crowded)."""


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple = (64, 64)
    n_task_objects: tuple = (1, 4)
    n_persons: tuple = (0, 2)
    n_identities: int = 8
    background: int = 0
    noise_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "n_task_objects", tuple(int(v) for v in self.n_task_objects))
        object.__setattr__(self, "n_persons", tuple(int(v) for v in self.n_persons))
        h, w = self.image_size
        if h < 32 or w < 32:
            raise ValueError(f"image_size must be at least 32x32, got {self.image_size}")
        if self.n_identities < 2:
            raise ValueError("n_identities must be >= 2")
        for name in ("n_task_objects", "n_persons"):
            lo, hi = getattr(self, name)
            if lo < 0 or lo > hi:
                raise ValueError(f"{name} must be a non-empty range lo..hi with lo >= 0, got {(lo, hi)}")
        if not 0 <= self.background < N_BACKGROUNDS:
            raise ValueError(f"background family must be in [0, {N_BACKGROUNDS}), got {self.background}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @property
    def scale(self) -> float:
        """Linear scale factor relative to the 64x64 reference size."""
        h, w = self.image_size
        return math.sqrt(h * w / 4096.0)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class _Texture:
    color: tuple
    angle: float
    period: float


def identity_texture(identity: int, n_identities: int) -> _Texture:
    hue = identity / n_identities
    color = colorsys.hsv_to_rgb(hue, 0.8, 0.9)
    # co-prime stride so neighbouring hues get different stripe orientations
    angle = math.pi * ((identity * 3) % n_identities) / n_identities
    period = (3.0, 4.5, 6.0)[identity % 3]
    return _Texture(color, angle, period)


def _render_texture(tex: _Texture, h: int, w: int, phase: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    proj = xx * math.cos(tex.angle) + yy * math.sin(tex.angle)
    stripe = (np.sin(2 * math.pi * proj / tex.period + phase) > 0).astype(np.float64)
    return np.asarray(tex.color)[None, None, :] * (0.5 + 0.5 * stripe)[..., None]


def _background(rng: np.random.Generator, family: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    base = rng.uniform(0.3, 0.6, size=3)
    tint = rng.uniform(-0.08, 0.08, size=3)
    if family == 0:
        # smooth gradient plus low-frequency blotches
        theta = rng.uniform(0, 2 * math.pi)
        grad = (xx * math.cos(theta) + yy * math.sin(theta)) / max(h, w)
        blot = np.sin(2 * math.pi * (xx / w * rng.uniform(0.5, 2) + rng.uniform()))
        blot *= np.sin(2 * math.pi * (yy / h * rng.uniform(0.5, 2) + rng.uniform()))
        lum = 0.15 * grad + 0.06 * blot
    elif family == 1:
        # conveyor-like bands
        period = rng.uniform(6, 14) * h / 64
        lum = 0.07 * np.sign(np.sin(2 * math.pi * yy / period + rng.uniform(0, 2 * math.pi)))
        lum += 0.05 * xx / w
    else:
        coarse = rng.normal(size=(max(h // 8, 2), max(w // 8, 2)))
        t = torch.from_numpy(coarse)[None, None]
        lum = F.interpolate(t, size=(h, w), mode="bicubic", align_corners=False)[0, 0].numpy() * 0.06
    img = (base + tint)[None, None, :] + lum[..., None]
    return np.clip(img, 0.05, 0.95)


def _band_areas(spec: SceneSpec) -> list:
    s = spec.scale**2
    return [(30 * s, 63 * s), (64 * s, 256 * s), (257 * s, 600 * s)]


def _sample_plank_size(rng, spec: SceneSpec) -> tuple:
    bands = _band_areas(spec)
    lo, hi = bands[rng.integers(len(bands))]
    for _ in range(_MAX_RETRIES):
        area = rng.uniform(lo, hi)
        aspect = rng.uniform(1.0, 2.5)
        long_side = int(round(math.sqrt(area * aspect)))
        short_side = int(round(area / max(long_side, 1)))
        if short_side < 4:
            continue
        if lo <= long_side * short_side <= hi:
            return (long_side, short_side) if rng.random() < 0.5 else (short_side, long_side)
    raise SceneGenerationError(f"could not sample a plank size in band {(lo, hi)}")


def _render_plank(rng, w: int, h: int) -> np.ndarray:
    wood = np.array([rng.uniform(0.6, 0.8), rng.uniform(0.38, 0.5), rng.uniform(0.12, 0.22)])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    along = yy if w >= h else xx
    grain = 0.85 + 0.15 * np.sin(2 * math.pi * along / rng.uniform(2.5, 4.0) + rng.uniform(0, 6.3))
    img = wood[None, None, :] * grain[..., None]
    edge = np.zeros((h, w), dtype=bool)
    edge[0, :] = edge[-1, :] = edge[:, 0] = edge[:, -1] = True
    img[edge] *= 0.6
    return img


def _segment_dist(px, py, a, b):
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    denom = dx * dx + dy * dy
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / max(denom, 1e-12), 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def _person_geometry(rng, spec: SceneSpec) -> dict:
    """Joints relative to an origin at (0, 0), plus stroke widths."""
    s = spec.scale
    height = rng.uniform(18, 28) * s
    head_r = 0.13 * height
    lean = math.radians(rng.uniform(-15, 15))
    torso_len = 0.36 * height
    leg_len = 0.42 * height
    spread_l = math.radians(rng.uniform(8, 32))
    spread_r = math.radians(rng.uniform(8, 32))
    head = np.array([0.0, head_r])
    neck = head + np.array([math.sin(lean), math.cos(lean)]) * (head_r + 1.0 * s)
    pelvis = neck + np.array([math.sin(lean), math.cos(lean)]) * torso_len
    lfoot = pelvis + np.array([-math.sin(spread_l), math.cos(spread_l)]) * leg_len
    rfoot = pelvis + np.array([math.sin(spread_r), math.cos(spread_r)]) * leg_len
    return {
        "joints": np.stack([head, neck, pelvis, lfoot, rfoot]),
        "head_r": head_r,
        "torso_w": max(0.17 * height, 3.0),
        "leg_w": max(0.12 * height, 2.0),
    }


def _person_mask(geom: dict, offset: np.ndarray, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    px, py = xx + 0.5, yy + 0.5
    j = geom["joints"] + offset
    head, neck, pelvis, lf, rf = j
    mask = np.hypot(px - head[0], py - head[1]) <= geom["head_r"]
    mask |= _segment_dist(px, py, neck, pelvis) <= geom["torso_w"] / 2
    mask |= _segment_dist(px, py, pelvis, lf) <= geom["leg_w"] / 2
    mask |= _segment_dist(px, py, pelvis, rf) <= geom["leg_w"] / 2
    return mask


def _mask_box(mask: np.ndarray):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def _overlaps(box, placed, margin) -> bool:
    x1, y1, x2, y2 = box
    for a1, b1, a2, b2 in placed:
        if x1 < a2 + margin and a1 < x2 + margin and y1 < b2 + margin and b1 < y2 + margin:
            return True
    return False


def scene_identity(spec: SceneSpec, index: int) -> int:
    """Balanced identity schedule: each block of n_identities frames is a permutation."""
    block_rng = np.random.default_rng([spec.seed, 0xB10C, index // spec.n_identities])
    return int(block_rng.permutation(spec.n_identities)[index % spec.n_identities])


def generate_scene(spec: SceneSpec, index: int) -> tuple:
    """Render scene ``index``; returns ``(Frame, Annotation)``."""
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.image_size
    img = _background(rng, spec.background, h, w)
    margin = max(2, int(round(2 * spec.scale)))
    placed = []
    boxes, keypoints = [], []

    n_persons = int(rng.integers(spec.n_persons[0], spec.n_persons[1] + 1))
    n_planks = int(rng.integers(spec.n_task_objects[0], spec.n_task_objects[1] + 1))
    identity = scene_identity(spec, index) if n_persons > 0 else None

    for _ in range(n_persons):
        geom = _person_geometry(rng, spec)
        # tight box of the glyph rendered at a provisional origin
        probe_off = np.array([w / 2.0, 2.0]) - geom["joints"][0] + np.array([0.0, geom["head_r"]])
        probe = _person_mask(geom, probe_off, h + 64, w + 64)
        if not probe.any():
            raise SceneGenerationError("person glyph rendered empty")
        bx1, by1, bx2, by2 = _mask_box(probe)
        bw, bh = bx2 - bx1, by2 - by1
        if bw + 2 > w or bh + 2 > h:
            raise SceneGenerationError("person glyph larger than the frame")
        for _ in range(_MAX_RETRIES):
            x0 = int(rng.integers(1, w - bw))
            y0 = int(rng.integers(1, h - bh))
            if not _overlaps((x0, y0, x0 + bw, y0 + bh), placed, margin):
                break
        else:
            raise SceneGenerationError(f"could not place person in scene {index} after {_MAX_RETRIES} tries")
        offset = probe_off + np.array([x0 - bx1, y0 - by1], dtype=np.float64)
        mask = _person_mask(geom, offset, h, w)
        box = _mask_box(mask)
        placed.append(box)
        tex = identity_texture(identity, spec.n_identities)
        img[mask] = _render_texture(tex, h, w, rng.uniform(0, 2 * math.pi))[mask]
        bw_, bh_ = box[2] - box[0], box[3] - box[1]
        boxes.append(BBox(*map(float, box), cls=PERSON_CLS))
        joints = tuple((float(x), float(y), 1) for x, y in geom["joints"] + offset)
        keypoints.append(KeypointSet(joints, float(bw_ * bh_)))

    for _ in range(n_planks):
        for _ in range(_MAX_RETRIES):
            pw, ph = _sample_plank_size(rng, spec)
            if pw + 2 > w or ph + 2 > h:
                continue
            x0 = int(rng.integers(1, w - pw))
            y0 = int(rng.integers(1, h - ph))
            if not _overlaps((x0, y0, x0 + pw, y0 + ph), placed, margin):
                break
        else:
            raise SceneGenerationError(f"could not place task object in scene {index} after {_MAX_RETRIES} tries")
        placed.append((x0, y0, x0 + pw, y0 + ph))
        img[y0 : y0 + ph, x0 : x0 + pw] = _render_plank(rng, pw, ph)
        boxes.append(BBox(float(x0), float(y0), float(x0 + pw), float(y0 + ph), cls=TASK_CLS))

    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
    fid = f"{index:06d}"
    frame = Frame(fid, np.clip(img, 0.0, 1.0).astype(np.float32))
    return frame, Annotation(fid, tuple(boxes), tuple(keypoints), identity)


def generate_dataset(spec: SceneSpec, n_frames: int, split: str = "train") -> Dataset:
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    frames, annotations = [], {}
    for i in range(n_frames):
        frame, ann = generate_scene(spec, i)
        fid = f"{split}_{frame.id}"
        frames.append(Frame(fid, frame.pixels))
        annotations[fid] = replace(ann, frame_id=fid)
    return Dataset(tuple(frames), annotations, split, spec.n_identities)


def crop_bounds(box: BBox, pad: float, width: int, height: int) -> tuple:
    """Integer crop window ``(x1, y1, x2, y2)`` around ``box``, clipped to the frame."""
    x1 = max(0, int(math.floor(box.x_min - pad)))
    y1 = max(0, int(math.floor(box.y_min - pad)))
    x2 = min(width, int(math.ceil(box.x_max + pad)))
    y2 = min(height, int(math.ceil(box.y_max + pad)))
    return x1, y1, x2, y2


def resample(pixels: np.ndarray, size: int) -> np.ndarray:
    t = torch.from_numpy(np.array(pixels, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    return out[0].permute(1, 2, 0).clamp(0, 1).numpy()


def person_crops(ds: Dataset, pad: float = 2.0, size: int = 32) -> list:
    """Fixed-size crops around every person box, paired with the frame identity."""
    if ds.n_identities is None or not any(a.identity is not None for a in ds.annotations.values()):
        raise ValueError("dataset carries no identity labels")
    crops = []
    for frame, ann in ds:
        persons = [b for b in ann.boxes if b.cls == PERSON_CLS]
        for k, box in enumerate(persons):
            x1, y1, x2, y2 = crop_bounds(box, pad, frame.width, frame.height)
            patch = resample(frame.pixels[y1:y2, x1:x2], size)
            crops.append((Frame(f"{frame.id}#p{k}", patch), ann.identity))
    return crops


def identity_counts(ds: Dataset) -> np.ndarray:
    """Number of person instances per identity label."""
    counts = np.zeros(ds.n_identities or 0, dtype=np.int64)
    for _, ann in ds:
        if ann.identity is not None:
            counts[ann.identity] += sum(b.cls == PERSON_CLS for b in ann.boxes)
    return counts
