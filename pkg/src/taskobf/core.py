"""Domain types, geometry primitives and dataset I/O."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from PIL import Image

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")
DEFAULT_JOINTS = 5
DEFAULT_SIGMAS = (0.05,) * DEFAULT_JOINTS


class DatasetError(ValueError):
    """Malformed dataset directory or record."""

    def __init__(self, message: str, frame_id: Optional[str] = None):
        if frame_id is not None:
            message = f"frame {frame_id!r}: {message}"
        super().__init__(message)
        self.frame_id = frame_id


class SchemaVersionError(DatasetError):
    pass


@dataclass(frozen=True, eq=False)
class Frame:
    """An RGB image with values in [0, 1], stored as float32 H x W x 3."""

    id: str
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"frame {self.id!r}: expected HxWx3 pixels, got {px.shape}")
        if px.shape[0] < 16 or px.shape[1] < 16:
            raise ValueError(f"frame {self.id!r}: frames must be at least 16x16, got {px.shape[:2]}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError(f"frame {self.id!r}: pixel values must lie in [0, 1]")
        if px is self.pixels:
            px = px.copy()
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def with_pixels(self, pixels: np.ndarray) -> "Frame":
        return Frame(self.id, np.clip(pixels, 0.0, 1.0))

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return self.id == other.id and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    cls: int = 0
    score: Optional[float] = None

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {coords}: need x_min < x_max and y_min < y_max")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"box score {self.score} outside [0, 1]")

    @classmethod
    def clipped(cls, x_min, y_min, x_max, y_max, width, height, cls_id=0, score=None) -> "BBox":
        """Build a box clipped to a ``width`` x ``height`` frame."""
        return cls(
            float(min(max(x_min, 0.0), width)),
            float(min(max(y_min, 0.0), height)),
            float(min(max(x_max, 0.0), width)),
            float(min(max(y_max, 0.0), height)),
            int(cls_id),
            None if score is None else float(score),
        )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def xyxy(self) -> tuple:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class KeypointSet:
    """Ordered joints ``(x, y, v)`` plus the object scale ``area`` (px^2)."""

    joints: tuple
    area: float
    score: Optional[float] = None

    def __post_init__(self):
        joints = tuple((float(x), float(y), int(v)) for x, y, v in self.joints)
        if not joints:
            raise ValueError("keypoint set needs at least one joint")
        if any(v not in (0, 1) for _, _, v in joints):
            raise ValueError("joint visibility must be 0 or 1")
        if not self.area > 0:
            raise ValueError(f"keypoint area must be positive, got {self.area}")
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "area", float(self.area))

    def __len__(self):
        return len(self.joints)

    def xy(self) -> np.ndarray:
        return np.array([(x, y) for x, y, _ in self.joints], dtype=np.float64)

    def visible(self) -> np.ndarray:
        return np.array([v for _, _, v in self.joints], dtype=bool)


@dataclass(frozen=True)
class Annotation:
    frame_id: str
    boxes: tuple = ()
    keypoints: tuple = ()
    identity: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "keypoints", tuple(self.keypoints))


@dataclass(frozen=True, eq=False)
class Dataset:
    frames: tuple
    annotations: Mapping[str, Annotation]
    split: str = "train"
    n_identities: Optional[int] = None

    def __post_init__(self):
        frames = tuple(self.frames)
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}; expected one of {SPLITS}")
        ids = [f.id for f in frames]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate frame ids")
        missing = [i for i in ids if i not in self.annotations]
        if missing:
            raise DatasetError("frame has no annotation record", missing[0])
        extra = set(self.annotations) - set(ids)
        if extra:
            raise DatasetError("annotation without frame", sorted(extra)[0])
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "annotations", dict(self.annotations))

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        for f in self.frames:
            yield f, self.annotations[f.id]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.split == other.split
            and self.n_identities == other.n_identities
            and self.frames == other.frames
            and self.annotations == other.annotations
        )

    __hash__ = None

    def subset(self, n: int) -> "Dataset":
        frames = self.frames[:n]
        return Dataset(frames, {f.id: self.annotations[f.id] for f in frames}, self.split, self.n_identities)

    def map_frames(self, fn) -> "Dataset":
        """Apply ``fn: Frame -> Frame`` to every frame, keeping annotations."""
        return Dataset(tuple(fn(f) for f in self.frames), self.annotations, self.split, self.n_identities)

    def pixel_array(self) -> np.ndarray:
        """All frames stacked as N x H x W x 3 float32."""
        if not self.frames:
            return np.zeros((0, 0, 0, 3), dtype=np.float32)
        return np.stack([f.pixels for f in self.frames])

    def content_hash(self) -> str:
        """sha256 over frame ids, 8-bit pixels and annotation JSON."""
        h = hashlib.sha256()
        h.update(json.dumps(_dataset_header(self), sort_keys=True).encode())
        for f, ann in self:
            h.update(f.id.encode())
            h.update(to_uint8(f.pixels).tobytes())
            h.update(json.dumps(_annotation_record(ann), sort_keys=True).encode())
        return h.hexdigest()


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def oks(pred: KeypointSet, gt: KeypointSet, per_joint_sigma: Sequence[float] = DEFAULT_SIGMAS) -> float:
    """Object keypoint similarity with scale ``s^2 = gt.area`` and ``k_i = 2 sigma_i``."""
    if len(pred) != len(gt):
        raise ValueError(f"joint count mismatch: {len(pred)} predicted vs {len(gt)} ground truth")
    if len(per_joint_sigma) != len(gt):
        raise ValueError(f"expected {len(gt)} per-joint sigmas, got {len(per_joint_sigma)}")
    vis = gt.visible()
    if not vis.any():
        return 0.0
    d2 = ((pred.xy() - gt.xy()) ** 2).sum(axis=1)
    k = 2.0 * np.asarray(per_joint_sigma, dtype=np.float64)
    e = np.exp(-d2 / (2.0 * gt.area * k**2))
    return float(e[vis].sum() / vis.sum())


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def _annotation_record(ann: Annotation) -> dict:
    return {
        "boxes": [{"cls": int(b.cls), "xyxy": [float(v) for v in b.xyxy]} for b in ann.boxes],
        "keypoints": [{"joints": [list(j) for j in k.joints], "area": k.area} for k in ann.keypoints],
        "identity": ann.identity,
    }


def _dataset_header(ds: Dataset) -> dict:
    return {"version": SCHEMA_VERSION, "n_identities": ds.n_identities, "split": ds.split}


def save_dataset(ds: Dataset, path) -> None:
    """Write ``images/<id>.png`` plus ``annotations.json``."""
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for f, ann in ds:
        file = f"images/{f.id}.png"
        Image.fromarray(to_uint8(f.pixels), mode="RGB").save(path / file)
        records.append({"id": f.id, "file": file, **_annotation_record(ann)})
    doc = {**_dataset_header(ds), "frames": records}
    (path / "annotations.json").write_text(json.dumps(doc, indent=1))


def _parse_record(rec: dict, width: int, height: int) -> Annotation:
    fid = rec["id"]
    boxes = []
    for b in rec.get("boxes", []):
        x1, y1, x2, y2 = b["xyxy"]
        if not (x1 < x2 and y1 < y2):
            raise DatasetError(f"invalid box {b['xyxy']}: need x_min < x_max and y_min < y_max", fid)
        box = BBox.clipped(x1, y1, x2, y2, width, height, b["cls"])
        boxes.append(box)
    kps = [KeypointSet(tuple(tuple(j) for j in k["joints"]), k["area"]) for k in rec.get("keypoints", [])]
    identity = rec.get("identity")
    return Annotation(fid, tuple(boxes), tuple(kps), None if identity is None else int(identity))


def load_dataset(path) -> Dataset:
    path = Path(path)
    ann_path = path / "annotations.json"
    if not ann_path.is_file():
        raise DatasetError(f"missing {ann_path}")
    doc = json.loads(ann_path.read_text())
    version = doc.get("version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"unsupported annotations version {version!r}; expected {SCHEMA_VERSION}")
    frames, annotations = [], {}
    for rec in doc.get("frames", []):
        fid = rec.get("id")
        if not isinstance(fid, str):
            raise DatasetError(f"record without string id: {rec!r}")
        img_path = path / rec.get("file", f"images/{fid}.png")
        if not img_path.is_file():
            raise DatasetError(f"missing image {img_path}", fid)
        with Image.open(img_path) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        try:
            frames.append(Frame(fid, pixels))
            annotations[fid] = _parse_record(rec, pixels.shape[1], pixels.shape[0])
        except DatasetError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"malformed record: {exc}", fid) from exc
    return Dataset(tuple(frames), annotations, doc.get("split", "train"), doc.get("n_identities"))


def frames_from_arrays(arrays: Iterable[np.ndarray], ids: Iterable[str]) -> list:
    return [Frame(i, np.clip(a, 0.0, 1.0)) for a, i in zip(arrays, ids)]


def stable_seed(*parts) -> int:
    """Deterministic 63-bit seed from arbitrary printable parts."""
    digest = hashlib.sha256("/".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class SizeBins:
    """Area thresholds separating small / medium / large objects."""

    small_max: float
    medium_max: float
    names: tuple = field(default=("small", "medium", "large"))

    def __post_init__(self):
        if not 0 < self.small_max < self.medium_max:
            raise ValueError("size bins must be ordered: 0 < small_max < medium_max")

    def bin_of(self, area: float) -> str:
        if area < self.small_max:
            return self.names[0]
        if area <= self.medium_max:
            return self.names[1]
        return self.names[2]

    @classmethod
    def scaled(cls, height: int, width: int) -> "SizeBins":
        """Bands of 8^2 and 16^2 at 64x64, scaled with image area."""
        s = (height * width) / (64.0 * 64.0)
        return cls(64.0 * s, 256.0 * s)


COCO_SIZE_BINS = SizeBins(32.0**2, 96.0**2)
