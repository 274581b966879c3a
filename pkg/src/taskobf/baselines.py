"""Comparison anonymisers: full-frame Gaussian blur and detect-then-blur."""

from __future__ import annotations

import math
import numpy as np
from scipy import ndimage

from .core import Dataset, Frame
from .obfuscator import frames_to_tensor
from .synthdata import PERSON_CLS

DEFAULT_KS = (1, 5, 9, 17, 33, 65)


def kernel_sigma(k: int) -> float:
    """Kernel-size-to-sigma convention used by common imaging libraries."""
    return 0.3 * ((k - 1) * 0.5 - 1) + 0.8


def gaussian_kernel_1d(k: int) -> np.ndarray:
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be an odd integer >= 1, got {k}")
    if k == 1:
        return np.ones(1)
    sigma = kernel_sigma(k)
    r = np.arange(k) - (k - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def blur_pixels(pixels: np.ndarray, k: int) -> np.ndarray:
    g = gaussian_kernel_1d(k)
    if k == 1:
        return pixels.copy()
    out = ndimage.correlate1d(pixels.astype(np.float64), g, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, g, axis=1, mode="reflect")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def gaussian_blur_full(x: Frame, k: int) -> Frame:
    """Separable per-channel Gaussian blur of the whole frame; ``k=1`` is the identity."""
    return Frame(x.id, blur_pixels(x.pixels, k))


def expanded_window(box, pad: float, width: int, height: int) -> tuple:
    """Integer pixel window covering ``box`` grown by ``pad`` of its size on each side."""
    dx, dy = pad * box.width, pad * box.height
    x1 = max(0, int(math.floor(box.x_min - dx)))
    y1 = max(0, int(math.floor(box.y_min - dy)))
    x2 = min(width, int(math.ceil(box.x_max + dx)))
    y2 = min(height, int(math.ceil(box.y_max + dy)))
    return x1, y1, x2, y2


def blur_regions(x: Frame, boxes, k: int, pad: float = 0.1) -> Frame:
    if not boxes:
        return x
    mask = np.zeros(x.pixels.shape[:2], dtype=bool)
    for b in boxes:
        x1, y1, x2, y2 = expanded_window(b, pad, x.width, x.height)
        mask[y1:y2, x1:x2] = True
    blurred = blur_pixels(x.pixels, k)
    return Frame(x.id, np.where(mask[..., None], blurred, x.pixels))


def _person_boxes(dets, score_thresh: float, person_cls: int):
    return [d.box for d in dets if d.cls == person_cls and d.score >= score_thresh]


def _decoder_for(person_detector, score_thresh: float):
    if person_detector.task != "detect":
        raise ValueError("detect_then_blur needs a detect-task adapter")
    # decode low enough that the caller's threshold is the binding one
    if score_thresh < person_detector.cfg.score_thresh:
        return person_detector.with_score_thresh(score_thresh)
    return person_detector


def detect_then_blur(
    x: Frame, person_detector, k: int, score_thresh: float = 0.3, pad: float = 0.1, person_cls: int = PERSON_CLS
) -> Frame:
    """Blur only detected persons; pixels outside the padded boxes are untouched."""
    gaussian_kernel_1d(k)
    u = _decoder_for(person_detector, score_thresh)
    dets = u.predict_batch(frames_to_tensor([x]))[0]
    return blur_regions(x, _person_boxes(dets, score_thresh, person_cls), k, pad)


def blur_dataset(ds: Dataset, k: int) -> Dataset:
    return ds.map_frames(lambda f: gaussian_blur_full(f, k))


def detect_then_blur_dataset(
    ds: Dataset, person_detector, k: int, score_thresh: float = 0.3, pad: float = 0.1, person_cls: int = PERSON_CLS
) -> Dataset:
    gaussian_kernel_1d(k)
    u = _decoder_for(person_detector, score_thresh)
    preds = u.predict_dataset(ds)
    frames = tuple(
        blur_regions(f, _person_boxes(p, score_thresh, person_cls), k, pad) for f, p in zip(ds.frames, preds)
    )
    return Dataset(frames, ds.annotations, ds.split, ds.n_identities)
