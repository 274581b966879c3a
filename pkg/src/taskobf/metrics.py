"""Utility and privacy measurements.

Average precision uses all-points interpolation over a greedy, score-ordered
match sequence: each prediction takes the highest-similarity *unmatched*
ground truth at or above the threshold.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import DEFAULT_SIGMAS, BBox, Frame, SizeBins, iou, oks

REPORT_VERSION = 1

TP, FP, IGNORED = 1, 0, None


@dataclass(frozen=True)
class PRPoint:
    recall: float
    precision: float


@dataclass
class TradeoffPoint:
    method: str
    knob: float
    map50: float
    attack_mse: float
    attack_ssim: float
    ssim_direct: float
    identity_acc: float
    map_by_size: dict = field(default_factory=dict)
    oks_map50: Optional[float] = None
    perceptanon_ha2: Optional[float] = None

    def to_report(self) -> dict:
        return {"format_version": REPORT_VERSION, **asdict(self)}

    @classmethod
    def from_report(cls, doc: dict) -> "TradeoffPoint":
        version = doc.get("format_version")
        if version != REPORT_VERSION:
            raise ValueError(f"unsupported metric report version {version!r}")
        return cls(**{k: v for k, v in doc.items() if k != "format_version"})


def _score(p) -> float:
    s = getattr(p, "score", None)
    return 0.0 if s is None else float(s)


def _box_of(p) -> BBox:
    return p.box if hasattr(p, "box") else p


def match_outcomes(
    preds: Sequence,
    gts: Sequence,
    similarity: Callable,
    thresh: float,
    gt_ignore: Optional[Sequence[bool]] = None,
    pred_ignore: Optional[Callable] = None,
) -> list:
    """Greedy matching of already score-sorted ``preds`` against ``gts``.

    Returns one outcome per prediction: ``TP``, ``FP`` or ``IGNORED``. A
    prediction that overlaps only an ignored ground truth is ignored; an
    unmatched prediction for which ``pred_ignore(p)`` holds is ignored too.
    """
    gt_ignore = list(gt_ignore) if gt_ignore is not None else [False] * len(gts)
    matched = [False] * len(gts)
    out = []
    for p in preds:
        sims = [similarity(p, g) for g in gts]
        best, best_sim = -1, -math.inf
        for j, s in enumerate(sims):
            if gt_ignore[j] or matched[j] or s < thresh:
                continue
            if s > best_sim:
                best, best_sim = j, s
        if best >= 0:
            matched[best] = True
            out.append(TP)
        elif any(gt_ignore[j] and s >= thresh for j, s in enumerate(sims)):
            out.append(IGNORED)
        elif pred_ignore is not None and pred_ignore(p):
            out.append(IGNORED)
        else:
            out.append(FP)
    return out


def ap_from_outcomes(outcomes: Sequence, n_gt: int) -> float:
    """All-points interpolated AP from a ranked TP/FP sequence."""
    flags = [o for o in outcomes if o is not IGNORED]
    if n_gt == 0:
        return 1.0 if not flags else 0.0
    if not flags:
        return 0.0
    # exact rationals: the result is the correctly rounded AP, independent of summation order
    tp = np.cumsum(flags).tolist()
    best, total = Fraction(0), Fraction(0)
    for k in range(len(flags) - 1, -1, -1):
        p = Fraction(tp[k], k + 1)
        if p > best:
            best = p
        if flags[k] == TP:
            total += best
    return float(total / n_gt)


def pr_curve(outcomes: Sequence, n_gt: int) -> list:
    flags = [o for o in outcomes if o is not IGNORED]
    points, tp = [], 0
    for k, f in enumerate(flags, start=1):
        tp += f
        points.append(PRPoint(tp / n_gt if n_gt else 0.0, tp / k))
    return points


def _sort_by_score(items: Sequence) -> list:
    return sorted(items, key=lambda p: -_score(p))


def _check_frames(per_frame_preds, per_frame_gts) -> None:
    if len(per_frame_preds) != len(per_frame_gts):
        raise ValueError(f"{len(per_frame_preds)} prediction frames vs {len(per_frame_gts)} ground-truth frames")


def _pooled_outcomes(per_frame_preds, per_frame_gts, similarity, thresh, gt_ignore_fn=None, pred_ignore=None):
    _check_frames(per_frame_preds, per_frame_gts)
    ranked, n_gt = [], 0
    for preds, gts in zip(per_frame_preds, per_frame_gts):
        preds = _sort_by_score(preds)
        ign = [gt_ignore_fn(g) for g in gts] if gt_ignore_fn else [False] * len(gts)
        n_gt += sum(not i for i in ign)
        outcomes = match_outcomes(preds, gts, similarity, thresh, ign, pred_ignore)
        ranked.extend((_score(p), o) for p, o in zip(preds, outcomes))
    # stable: equal scores keep frame order, then within-frame order
    ranked.sort(key=lambda t: -t[0])
    return [o for _, o in ranked], n_gt


def _box_iou(p, g) -> float:
    return iou(_box_of(p), g)


def average_precision(preds: Sequence, gts: Sequence[BBox], iou_thresh: float = 0.5) -> float:
    """AP for one class on one frame (or any flat list of predictions)."""
    outcomes = match_outcomes(_sort_by_score(preds), gts, _box_iou, iou_thresh)
    return ap_from_outcomes(outcomes, len(gts))


def _pred_cls(p) -> int:
    return p.cls if hasattr(p, "cls") else _box_of(p).cls


def map50(per_frame_preds, per_frame_gts, classes=None, iou_thresh: float = 0.5) -> float:
    """Frame-pooled AP per class, averaged over classes present in the ground truth."""
    _check_frames(per_frame_preds, per_frame_gts)
    present = sorted({g.cls for gts in per_frame_gts for g in gts})
    if classes is not None:
        present = [c for c in present if c in set(classes)]
    if not present:
        any_pred = any(
            classes is None or _pred_cls(p) in set(classes) for preds in per_frame_preds for p in preds
        )
        return 0.0 if any_pred else 1.0
    aps = []
    for c in present:
        preds_c = [[p for p in preds if _pred_cls(p) == c] for preds in per_frame_preds]
        gts_c = [[g for g in gts if g.cls == c] for gts in per_frame_gts]
        outcomes, n_gt = _pooled_outcomes(preds_c, gts_c, _box_iou, iou_thresh)
        aps.append(ap_from_outcomes(outcomes, n_gt))
    return float(np.mean(aps))


def oks_map50(per_frame_pred_kps, per_frame_gt_kps, sigmas: Sequence[float] = DEFAULT_SIGMAS, thresh=0.5) -> float:
    """Single-class AP with OKS replacing IoU."""
    outcomes, n_gt = _pooled_outcomes(
        per_frame_pred_kps, per_frame_gt_kps, lambda p, g: oks(p, g, sigmas), thresh
    )
    return ap_from_outcomes(outcomes, n_gt)


def map_by_size(per_frame_preds, per_frame_gts, bins: SizeBins, classes=None, iou_thresh: float = 0.5) -> dict:
    """Per-bin mAP; ``None`` for bins without ground truth.

    Out-of-bin ground truth is ignored rather than dropped: a prediction that
    matches it neither scores nor counts as a false positive, and unmatched
    predictions whose own area falls outside the bin are ignored as well.
    """
    out = {}
    for name in bins.names:
        in_bin = lambda g, name=name: bins.bin_of(g.area) == name
        present = sorted({g.cls for gts in per_frame_gts for g in gts if in_bin(g)})
        if classes is not None:
            present = [c for c in present if c in set(classes)]
        if not present:
            out[name] = None
            continue
        aps = []
        for c in present:
            preds_c = [[p for p in preds if _pred_cls(p) == c] for preds in per_frame_preds]
            gts_c = [[g for g in gts if g.cls == c] for gts in per_frame_gts]
            outcomes, n_gt = _pooled_outcomes(
                preds_c,
                gts_c,
                _box_iou,
                iou_thresh,
                gt_ignore_fn=lambda g, f=in_bin: not f(g),
                pred_ignore=lambda p, f=in_bin: not f(_box_of(p)),
            )
            aps.append(ap_from_outcomes(outcomes, n_gt))
        out[name] = float(np.mean(aps))
    return out


# -- image similarity ---------------------------------------------------------

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _as_nchw(x) -> torch.Tensor:
    if isinstance(x, Frame):
        x = x.pixels
    if isinstance(x, np.ndarray):
        t = torch.from_numpy(np.array(x))
        t = t[None] if t.ndim == 3 else t
        return t.permute(0, 3, 1, 2)
    if x.ndim == 3:
        x = x[None]
    return x


def _gauss_window(dtype) -> torch.Tensor:
    r = torch.arange(SSIM_WIN, dtype=dtype) - (SSIM_WIN - 1) / 2
    g = torch.exp(-(r**2) / (2 * SSIM_SIGMA**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_batch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-image SSIM for NCHW batches in [0, 1] (valid-window mean, channel mean)."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    a = a.double()
    b = b.double()
    n, c, h, w = a.shape
    if h < SSIM_WIN or w < SSIM_WIN:
        raise ValueError(f"images must be at least {SSIM_WIN}x{SSIM_WIN} for SSIM")
    win = _gauss_window(a.dtype).expand(c, 1, SSIM_WIN, SSIM_WIN)
    filt = lambda t: F.conv2d(t, win, groups=c)
    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a**2
    sbb = filt(b * b) - mu_b**2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * sab + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (saa + sbb + SSIM_C2)
    return (num / den).mean(dim=(1, 2, 3))


def ssim(a, b) -> float:
    return float(ssim_batch(_as_nchw(a), _as_nchw(b))[0])


def mse(a, b) -> float:
    a, b = _as_nchw(a).double(), _as_nchw(b).double()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return float(((a - b) ** 2).mean())


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for unit data range; ``inf`` for identical inputs."""
    m = mse(a, b)
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / m)


# -- identity re-identification attack ---------------------------------------


class IdentityClassifier(nn.Module):
    def __init__(self, n_identities: int, width: int = 16):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.SiLU(), nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1), nn.SiLU(), nn.MaxPool2d(2),
            nn.Conv2d(2 * width, 4 * width, 3, padding=1), nn.SiLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.head = nn.Linear(4 * width, n_identities)

    def forward(self, x):
        return self.head(self.features(x))


def _crop_tensors(crops) -> tuple:
    x = torch.from_numpy(np.stack([c.pixels for c, _ in crops])).permute(0, 3, 1, 2).contiguous()
    y = torch.tensor([int(i) for _, i in crops], dtype=torch.long)
    return x, y


def train_identity_classifier(
    crops, n_identities: int, steps: int = 400, batch_size: int = 64, lr: float = 2e-3, seed: int = 0
) -> IdentityClassifier:
    if not crops:
        raise ValueError("no training crops")
    x, y = _crop_tensors(crops)
    gen = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        clf = IdentityClassifier(n_identities)
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    clf.train()
    for _ in range(steps):
        idx = torch.randint(len(x), (min(batch_size, len(x)),), generator=gen)
        loss = F.cross_entropy(clf(x[idx]), y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    clf.eval()
    return clf


@torch.no_grad()
def identity_predictions(clf: IdentityClassifier, crops) -> np.ndarray:
    x, _ = _crop_tensors(crops)
    return clf(x).argmax(dim=1).numpy()


def identity_accuracy(clf: IdentityClassifier, crops) -> float:
    if not crops:
        raise ValueError("no evaluation crops")
    pred = identity_predictions(clf, crops)
    truth = np.array([int(i) for _, i in crops])
    return float((pred == truth).mean())


def identity_attack(obf_crops_train, obf_crops_test, n_identities: int, **train_kw) -> float:
    """Held-out re-identification accuracy of a classifier trained on obfuscated crops.

    Chance level is ``1 / n_identities``.
    """
    clf = train_identity_classifier(obf_crops_train, n_identities, **train_kw)
    return identity_accuracy(clf, obf_crops_test)
