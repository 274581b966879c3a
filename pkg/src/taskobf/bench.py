"""Sweeps, privacy-utility curves, size-stratified reports, plots and throughput.

A sweep evaluates every method on the same frozen detector. Each point is
written to ``points/`` as soon as it finishes, so an interrupted sweep resumes
where it stopped. ``RunManifest`` records everything needed to re-run.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import __version__
from .adversary import deobfuscator_config, init_deobfuscator
from .baselines import blur_dataset, detect_then_blur_dataset
from .checkpoint import param_hash
from .config import RunConfig, config_from_dict
from .core import Dataset, SizeBins
from .metrics import TradeoffPoint, identity_attack, map50, map_by_size, ssim_batch
from .obfuscator import ObfuscatorModel, export_model, frames_to_tensor, import_model, init_obfuscator, transform_dataset
from .synthdata import generate_dataset, person_crops
from .trainer import (
    AttackReport,
    adversarial_train,
    attacker_too_weak,
    reconstruction_scores,
    train_attacker,
)
from .utility import UtilityAdapter, export_adapter, import_adapter, train_toy_detector, train_toy_pose

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
CSV_FIELDS = ("method", "knob", "map50", "attack_ssim", "attack_mse", "ssim_direct", "identity_acc")


def _json_hash(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _write_json(path: Path, doc) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(doc, indent=2, sort_keys=True)
    path.write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class RunManifest:
    run_id: str
    config: dict
    seeds: dict
    dataset_hashes: dict
    model_hashes: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    command: str = ""
    environment: dict = field(default_factory=dict)
    format_version: int = MANIFEST_VERSION

    def save(self, path) -> None:
        _write_json(Path(path), asdict(self))

    @classmethod
    def load(cls, path) -> "RunManifest":
        doc = json.loads(Path(path).read_text())
        version = doc.get("format_version")
        if version != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {version!r}; expected {MANIFEST_VERSION}")
        return cls(**doc)

    def report_hashes(self) -> dict:
        return {k: v["sha256"] for k, v in sorted(self.reports.items())}


def _environment() -> dict:
    return {"taskobf": __version__, "torch": torch.__version__, "numpy": np.__version__, "python": platform.python_version()}


# -- data and the frozen utility model -------------------------------------------


@dataclass
class SweepData:
    utility_train: Dataset
    train: Dataset
    test: Dataset

    def hashes(self) -> dict:
        return {name: getattr(self, name).content_hash() for name in ("utility_train", "train", "test")}


def build_data(cfg: RunConfig) -> SweepData:
    d = cfg.data
    return SweepData(
        generate_dataset(d.scene(d.utility_seed), d.n_utility_train, "train"),
        generate_dataset(d.scene(d.train_seed), d.n_train, "train"),
        generate_dataset(d.scene(d.test_seed), d.n_test, "test"),
    )


def obtain_utility(cfg: RunConfig, data: SweepData, out: Path) -> UtilityAdapter:
    """Load the frozen adapter from the run directory, or train and persist it."""
    path = out / "utility.pt"
    if path.exists():
        return import_adapter(path)
    train = train_toy_detector if cfg.utility.task == "detect" else train_toy_pose
    u = train(data.utility_train, data.test, cfg.utility)
    export_adapter(u, path)
    return import_adapter(path)


def _gts(ds: Dataset) -> list:
    return [ds.annotations[f.id].boxes for f in ds.frames]


def size_bins(cfg: RunConfig) -> SizeBins:
    return SizeBins.scaled(*cfg.data.image_size)


# -- per-point evaluation --------------------------------------------------------


def evaluate_transformed(
    u: UtilityAdapter,
    data: SweepData,
    train_t: Dataset,
    test_t: Dataset,
    method: str,
    knob: float,
    cfg: RunConfig,
) -> tuple:
    """Score one transform: frozen-adapter utility plus every privacy proxy.

    Returns ``(TradeoffPoint, extras)``; extras carry the attack curves and
    attacker hash.
    """
    if u.task != "detect":
        raise ValueError("sweeps evaluate detection utility; use a detect-task adapter")
    preds = u.predict_dataset(test_t)
    gts = _gts(data.test)
    x_train, x_test = frames_to_tensor(data.train.frames), frames_to_tensor(data.test.frames)
    xp_train, xp_test = frames_to_tensor(train_t.frames), frames_to_tensor(test_t.frames)
    d, curves = train_attacker(xp_train, x_train, cfg.attack, xp_test, x_test)
    attack_mse, attack_ssim = reconstruction_scores(d, xp_test, x_test)
    ident = identity_attack(
        person_crops(train_t), person_crops(test_t), cfg.data.n_identities,
        steps=cfg.sweep.identity_steps, seed=cfg.seed,
    )
    point = TradeoffPoint(
        method=method,
        knob=float(knob),
        map50=map50(preds, gts),
        attack_mse=attack_mse,
        attack_ssim=attack_ssim,
        ssim_direct=float(ssim_batch(x_test, xp_test).mean()),
        identity_acc=ident,
        map_by_size=map_by_size(preds, gts, size_bins(cfg)),
    )
    return point, {"attack_curves": curves, "attacker_hash": param_hash(d)}


def _point_key(method: str, knob: float) -> str:
    return f"{method}_{knob:g}"


def train_obfuscator_point(cfg: RunConfig, u: UtilityAdapter, data: SweepData, lam: float) -> tuple:
    """Adversarially train an obfuscator at ``lam``; returns ``(o, history, cotrained_test_mse)``."""
    o = init_obfuscator(cfg.obfuscator, cfg.seed)
    d = init_deobfuscator(deobfuscator_config(cfg.obfuscator, cfg.deobfuscator_width_ratio), cfg.seed + 1)
    o, d, history = adversarial_train(o, u, d, data.train, replace(cfg.train, lam=lam, seed=cfg.seed))
    xp_test = frames_to_tensor(transform_dataset(o, data.test).frames)
    cotrained_mse, _ = reconstruction_scores(d, xp_test, frames_to_tensor(data.test.frames))
    return o, history, cotrained_mse


def _method_jobs(cfg: RunConfig) -> list:
    jobs = []
    for m in cfg.sweep.methods:
        if m == "obfuscator":
            jobs += [(m, lam) for lam in cfg.sweep.lambdas]
        elif m == "blur":
            jobs += [(m, k) for k in cfg.sweep.blur_ks]
        else:
            jobs += [(m, k) for k in cfg.sweep.detect_blur_ks]
    return jobs


def run_point(cfg: RunConfig, u: UtilityAdapter, data: SweepData, method: str, knob, out: Path) -> dict:
    """Compute one sweep point and persist it; returns the point record."""
    extras: dict = {}
    if method == "obfuscator":
        u_before = u.parameter_hash()
        o, history, cotrained_mse = train_obfuscator_point(cfg, u, data, knob)
        model_path = out / "models" / f"{_point_key(method, knob)}.pt"
        model_path.parent.mkdir(parents=True, exist_ok=True)
        export_model(o, model_path)
        train_t, test_t = transform_dataset(o, data.train), transform_dataset(o, data.test)
        extras = {"model": str(model_path.relative_to(out)), "model_hash": param_hash(o),
                  "history_hash": history.content_hash(), "cotrained_test_mse": cotrained_mse,
                  "utility_hash_before": u_before, "utility_hash_after": u.parameter_hash()}
    elif method == "blur":
        train_t, test_t = blur_dataset(data.train, int(knob)), blur_dataset(data.test, int(knob))
    elif method == "detect-blur":
        kw = {"score_thresh": cfg.sweep.detect_blur_thresh, "pad": cfg.sweep.detect_blur_pad}
        train_t = detect_then_blur_dataset(data.train, u, int(knob), **kw)
        test_t = detect_then_blur_dataset(data.test, u, int(knob), **kw)
    else:
        raise ValueError(f"unknown method {method!r}")
    point, attack_extras = evaluate_transformed(u, data, train_t, test_t, method, knob, cfg)
    extras.update(attack_extras)
    if method == "obfuscator":
        extras["attacker_too_weak"] = attacker_too_weak_flag(point.attack_mse, extras["cotrained_test_mse"])
    record = {"point": point.to_report(), "extras": extras}
    _write_json(out / "points" / f"{_point_key(method, knob)}.json", record)
    return record


def attacker_too_weak_flag(fresh_mse: float, cotrained_mse: float, tol: float = 0.10) -> bool:
    return attacker_too_weak(AttackReport(fresh_mse, float("nan")), cotrained_mse, tol)


def clean_reference(cfg: RunConfig, u: UtilityAdapter, data: SweepData) -> dict:
    """Untransformed frames through the same protocol: the no-privacy reference."""
    point, extras = evaluate_transformed(u, data, data.train, data.test, "identity", 0.0, cfg)
    return {"point": point.to_report(), "extras": extras}


# -- trend checks ----------------------------------------------------------------


@dataclass
class DominanceResult:
    pairs: list
    obfuscator_wins: int
    blur_wins: int
    tol: float

    @property
    def dominates(self) -> bool:
        """At least one strict win at matched privacy and never beaten there."""
        return self.obfuscator_wins >= 1 and self.blur_wins == 0

    def to_dict(self) -> dict:
        return {**asdict(self), "dominates": self.dominates}


def dominance(obf_points, blur_points, tol: float = 0.05) -> DominanceResult:
    """Compare the two curves at every pair whose attack SSIM differs by at most ``tol``."""
    pairs, wins, losses = [], 0, 0
    for o in obf_points:
        for b in blur_points:
            if abs(o.attack_ssim - b.attack_ssim) > tol:
                continue
            pairs.append({"obfuscator_knob": o.knob, "blur_knob": b.knob, "obfuscator_map50": o.map50,
                          "blur_map50": b.map50, "attack_ssim_gap": o.attack_ssim - b.attack_ssim})
            wins += o.map50 > b.map50
            losses += b.map50 > o.map50
    return DominanceResult(pairs, wins, losses, tol)


def count_inversions(values, increasing: bool = False) -> int:
    """Adjacent steps that go against the expected direction."""
    sign = 1 if increasing else -1
    return sum(1 for a, b in zip(values, values[1:]) if sign * (b - a) < 0)


def monotone_trend(points, max_inversions: int = 1) -> dict:
    """Utility and attack SSIM should both fall as lambda grows."""
    pts = sorted(points, key=lambda p: p.knob)
    util_inv = count_inversions([p.map50 for p in pts])
    ssim_inv = count_inversions([p.attack_ssim for p in pts])
    ends = len(pts) < 2 or (pts[0].map50 >= pts[-1].map50 and pts[0].attack_ssim >= pts[-1].attack_ssim)
    return {"utility_inversions": util_inv, "attack_ssim_inversions": ssim_inv, "endpoints_ordered": ends,
            "ok": ends and util_inv <= max_inversions and ssim_inv <= max_inversions}


def size_report(clean: TradeoffPoint, transformed: TradeoffPoint) -> dict:
    """Per-bin mAP before and after a transform with the relative drop."""
    out = {}
    for name, before in clean.map_by_size.items():
        after = transformed.map_by_size.get(name)
        if before is None or after is None:
            out[name] = {"clean": before, "transformed": after, "relative_drop": None}
            continue
        drop = (before - after) / before if before > 0 else None
        out[name] = {"clean": before, "transformed": after, "relative_drop": drop}
    return {"method": transformed.method, "knob": transformed.knob, "bins": out}


# -- persistence -------------------------------------------------------------------


def write_curves_csv(points, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for p in points:
            w.writerow([p.method, repr(float(p.knob))] + [repr(float(getattr(p, k))) for k in CSV_FIELDS[2:]])


def read_curves_csv(path) -> list:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        TradeoffPoint(r["method"], float(r["knob"]), float(r["map50"]), float(r["attack_mse"]), float(r["attack_ssim"]),
                      float(r["ssim_direct"]), float(r["identity_acc"]))
        for r in rows
    ]


# -- plots -----------------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "taskobf"
    return plt


def _save(fig, path: Path) -> list:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.with_suffix("")
    outs = [stem.with_suffix(".png"), stem.with_suffix(".svg")]
    fig.savefig(outs[0], dpi=100, metadata={"Software": None})
    fig.savefig(outs[1], metadata={"Date": None, "Creator": None})
    return outs


_MARKERS = {"obfuscator": "o", "blur": "s", "detect-blur": "^", "identity": "x"}


def emit_curve_plot(points, path, x: str = "attack_ssim") -> list:
    """Privacy proxy on x, mAP on y, one series per method; writes PNG and SVG."""
    points = list(points)
    if not points:
        raise ValueError("no points to plot")
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    methods = sorted({p.method for p in points})
    for m in methods:
        pts = sorted((p for p in points if p.method == m), key=lambda p: getattr(p, x))
        ax.plot([getattr(p, x) for p in pts], [p.map50 for p in pts], marker=_MARKERS.get(m, "."), label=m)
    ax.set_xlabel(f"{x} (lower = more private)")
    ax.set_ylabel("mAP@0.5 (frozen detector)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    outs = _save(fig, path)
    plt.close(fig)
    return outs


def emit_size_plot(report: dict, path) -> list:
    """Grouped bars of clean vs transformed mAP per object-size bin."""
    bins = report.get("bins") if report else None
    if not bins:
        raise ValueError("size report has no bins")
    plt = _pyplot()
    names = list(bins)
    clean = [bins[n]["clean"] or 0.0 for n in names]
    after = [bins[n]["transformed"] or 0.0 for n in names]
    xs = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar(xs - 0.2, clean, 0.4, label="clean")
    ax.bar(xs + 0.2, after, 0.4, label=f"{report['method']} ({report['knob']:g})")
    ax.set_xticks(xs)
    ax.set_xticklabels(names)
    ax.set_ylabel("mAP@0.5")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    outs = _save(fig, path)
    plt.close(fig)
    return outs


# -- the sweep ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    points: list
    clean: TradeoffPoint
    summary: dict
    manifest: RunManifest


def _load_point(path: Path):
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError):
        return None


def run_sweep(cfg: RunConfig, resume: bool = True, command: str = "", progress: Optional[Callable] = None) -> SweepResult:
    """Run every configured method and knob, then write curves, plots, reports and a manifest."""
    t0 = time.perf_counter()
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    cfg_hash = _json_hash(cfg.to_dict())
    stamp = out / "config.sha256"
    if resume and stamp.exists() and stamp.read_text() != cfg_hash:
        raise ValueError(f"{out} holds a run with a different config; use a new run_id or output_dir")
    stamp.write_text(cfg_hash)

    data = build_data(cfg)
    u = obtain_utility(cfg, data, out)
    u_hash = u.parameter_hash()
    model_hashes = {"utility": u_hash}

    clean_path = out / "points" / "identity_0.json"
    clean_rec = _load_point(clean_path) if resume and clean_path.exists() else None
    if clean_rec is None:
        clean_rec = clean_reference(cfg, u, data)
        _write_json(clean_path, clean_rec)
    clean = TradeoffPoint.from_report(clean_rec["point"])

    records = {}
    for method, knob in _method_jobs(cfg):
        key = _point_key(method, knob)
        path = out / "points" / f"{key}.json"
        rec = _load_point(path) if resume and path.exists() else None
        if rec is None:
            log.info("sweep point %s", key)
            rec = run_point(cfg, u, data, method, knob, out)
        if "model_hash" in rec["extras"]:
            model_hashes[key] = rec["extras"]["model_hash"]
        records[key] = rec
        if progress:
            progress(key, rec)
    if u.parameter_hash() != u_hash:
        raise RuntimeError("utility adapter changed during the sweep")

    points = [TradeoffPoint.from_report(r["point"]) for r in records.values()]
    obf = [p for p in points if p.method == "obfuscator"]
    blur = [p for p in points if p.method == "blur"]
    summary = {"clean": clean.to_report(), "identity_attack_ssim": clean.attack_ssim, "utility_hash": u_hash}
    if obf and blur:
        summary["dominance"] = dominance(obf, blur).to_dict()
    if obf:
        summary["lambda_trend"] = monotone_trend(obf, cfg.sweep.max_inversions)
        default = min(obf, key=lambda p: abs(p.knob - cfg.train.lam))
        summary["default_point"] = default.to_report()
        summary["size_report"] = size_report(clean, default)
        summary["attacker_too_weak"] = {k: r["extras"]["attacker_too_weak"] for k, r in records.items()
                                        if "attacker_too_weak" in r["extras"]}
    if blur:
        summary["blur_utility_inversions"] = count_inversions([p.map50 for p in sorted(blur, key=lambda p: p.knob)])

    reports = {}
    reports["summary"] = {"path": "summary.json", "sha256": _write_json(out / "summary.json", summary)}
    for key, rec in sorted(records.items()):
        doc = rec["point"]
        reports[key] = {"path": f"reports/{key}.json", "sha256": _write_json(out / "reports" / f"{key}.json", doc)}
    write_curves_csv([clean] + points, out / "curves.csv")
    reports["curves"] = {"path": "curves.csv", "sha256": hashlib.sha256((out / "curves.csv").read_bytes()).hexdigest()}
    emit_curve_plot([clean] + points, out / "curves")
    if "size_report" in summary:
        emit_size_plot(summary["size_report"], out / "sizes")

    manifest = RunManifest(
        run_id=cfg.run_id,
        config=cfg.to_dict(),
        seeds={"run": cfg.seed, "utility": cfg.utility.seed, "train": cfg.train.seed, "attack": cfg.attack.seed,
               "data": {"utility": cfg.data.utility_seed, "train": cfg.data.train_seed, "test": cfg.data.test_seed}},
        dataset_hashes=data.hashes(),
        model_hashes=model_hashes,
        reports=reports,
        wall_clock=time.perf_counter() - t0,
        command=command,
        environment=_environment(),
    )
    manifest.save(out / "manifest.json")
    return SweepResult(points, clean, summary, manifest)


def reproduce(manifest_path, output_dir=None, run_id=None) -> tuple:
    """Re-run the sweep recorded in a manifest from scratch.

    Returns ``(new_manifest, mismatches)`` where ``mismatches`` lists report
    names whose hashes differ from the original.
    """
    old = RunManifest.load(manifest_path)
    raw = dict(old.config)
    raw["output_dir"] = str(output_dir) if output_dir is not None else raw["output_dir"]
    raw["run_id"] = run_id or f"{old.run_id}-repro"
    cfg = config_from_dict(raw)
    if cfg.out.resolve() == Path(manifest_path).resolve().parent:
        raise ValueError("reproduction must write to a different directory than the original run")
    new = run_sweep(cfg, resume=False, command=f"reproduce {manifest_path}").manifest
    a, b = old.report_hashes(), new.report_hashes()
    mismatches = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    return new, mismatches


# -- throughput -------------------------------------------------------------------------


@dataclass
class ThroughputReport:
    resolution: tuple
    n_frames: int
    status: str
    median_ms: Optional[float] = None
    p95_ms: Optional[float] = None
    fps: Optional[float] = None
    error: Optional[str] = None
    threads: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        return d


def _is_oom(e: BaseException) -> bool:
    return isinstance(e, MemoryError) or "out of memory" in str(e).lower()


@torch.no_grad()
def bench_throughput(o: ObfuscatorModel, resolution: tuple, n_frames: int = 20, warmup: int = 2, seed: int = 0) -> ThroughputReport:
    """Per-frame latency of ``o`` at one resolution; memory exhaustion is reported, not raised."""
    h, w = resolution
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    o.eval()
    x = torch.rand(1, 3, h, w, generator=torch.Generator().manual_seed(seed))
    times = []
    try:
        for i in range(warmup + n_frames):
            t = time.perf_counter()
            y = o(x)
            dt = time.perf_counter() - t
            if i >= warmup:
                times.append(dt)
        if y.shape != x.shape:
            raise RuntimeError(f"output shape {tuple(y.shape)} != input shape {tuple(x.shape)}")
    except (RuntimeError, MemoryError) as e:
        if not _is_oom(e):
            raise
        return ThroughputReport((h, w), n_frames, "oom", error=str(e).splitlines()[0], threads=torch.get_num_threads())
    med = statistics.median(times)
    p95 = float(np.percentile(times, 95))
    return ThroughputReport((h, w), n_frames, "ok", med * 1e3, p95 * 1e3, 1.0 / med, threads=torch.get_num_threads())


def load_or_init_obfuscator(path=None, cfg: Optional[RunConfig] = None) -> ObfuscatorModel:
    if path is not None:
        return import_model(path)
    cfg = cfg or RunConfig()
    return init_obfuscator(cfg.obfuscator, cfg.seed)


__all__ = [
    "DominanceResult",
    "RunManifest",
    "SweepData",
    "SweepResult",
    "ThroughputReport",
    "bench_throughput",
    "build_data",
    "count_inversions",
    "dominance",
    "emit_curve_plot",
    "emit_size_plot",
    "monotone_trend",
    "obtain_utility",
    "read_curves_csv",
    "reproduce",
    "run_sweep",
    "size_report",
    "write_curves_csv",
]
