"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line (also repeated in the
terminal summary). Criteria 4-8 and 10 share the demo detector; 5-7 share one
demo sweep, which trains three obfuscators and dominates the runtime. Set
TASKOBF_DEMO_DIR to keep the sweep on disk and resume it across sessions.
"""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import seed_run_dir
from oracles import ap_oracle, contiguous, fd_check, rand_instance, rand_kps, tiny_batch, tiny_utility
from taskobf.adversary import init_deobfuscator, recon_loss
from taskobf.baselines import blur_dataset, detect_then_blur, expanded_window
from taskobf.bench import bench_throughput, reproduce, run_sweep
from taskobf.config import config_from_dict
from taskobf.core import BBox, Dataset, KeypointSet, iou, oks
from taskobf.metrics import identity_accuracy, map50, oks_map50, psnr, ssim, ssim_batch, train_identity_classifier
from taskobf.obfuscator import ArchConfig, frames_to_tensor, init_obfuscator
from taskobf.synthdata import PERSON_CLS, crop_bounds, generate_dataset, person_crops
from taskobf.trainer import obfuscator_objective
from taskobf.utility import import_adapter

pytestmark = pytest.mark.acceptance

TINY = ArchConfig(base_width=4, depth=1)
BLUR_KS = (1, 5, 9, 17, 33, 65)


@pytest.fixture(scope="module")
def demo_sweep(demo_cfg, demo_workdir, demo_detector_path):
    cfg = replace(demo_cfg, output_dir=str(demo_workdir), run_id="demo")
    seed_run_dir(cfg.out, demo_detector_path)
    t0 = time.perf_counter()
    res = run_sweep(cfg, resume=True, command="acceptance")
    print(f"demo sweep finished in {time.perf_counter() - t0:.0f}s at {cfg.out}")
    return cfg, res


# -- 1 ------------------------------------------------------------------------------


def test_c1_gradients_match_finite_differences(acceptance_record):
    t0 = time.perf_counter()
    x, anns = tiny_batch()
    o = contiguous(init_obfuscator(TINY, seed=0))
    d = contiguous(init_deobfuscator(TINY, seed=2))
    target = torch.rand(x.shape, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    errs = {"probe": fd_check(lambda: ((o(x) - target) ** 2).mean(), list(o.parameters()), seed=1)}

    u = tiny_utility()
    targets = u.targets(list(anns), 16, 16)
    d.requires_grad_(False)
    for lam in (0.0, 1.0, 10.0):
        errs[f"L_O@{lam:g}"] = fd_check(
            lambda: obfuscator_objective(u.loss(o(x), targets), recon_loss(d(o(x)), x), lam),
            list(o.parameters()), seed=3,
        )
    d.requires_grad_(True)
    with torch.no_grad():
        xp = o(x)
    errs["L_rec"] = fd_check(lambda: recon_loss(d(xp), x), list(d.parameters()), seed=4)
    dt = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst < 1e-4 and dt < 60
    acceptance_record(1, ok, f"max rel err {worst:.2e} ({', '.join(f'{k}={v:.1e}' for k, v in errs.items())}); {dt:.1f}s")
    assert ok


# -- 2 ------------------------------------------------------------------------------


def test_c2_metrics_equal_brute_force_oracles(acceptance_record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    ap_bad = 0
    for _ in range(1000):
        preds, gts = rand_instance(rng)
        if sum(map(len, preds)) > 5 or sum(map(len, gts)) > 3:
            preds, gts = [p[:2] for p in preds], [g[:1] for g in gts]
        if sum(map(len, gts)) == 0:
            got = 1.0 if not any(preds) else map50(preds, gts, classes=[0])
        else:
            got = map50(preds, gts)
        ap_bad += got != ap_oracle(preds, gts)

    rng = np.random.default_rng(99)
    oks_bad = 0
    for _ in range(200):
        gts = [[rand_kps(rng) for _ in range(rng.integers(0, 4))] for _ in range(rng.integers(1, 3))]
        preds = []
        for frame_gts in gts:
            ps = [KeypointSet(tuple((x + rng.normal(0, 2), y + rng.normal(0, 2), 1) for x, y, _ in g.joints),
                              g.area, float(rng.integers(1, 6)) / 5)
                  for g in frame_gts if rng.random() < 0.7]
            ps += [rand_kps(rng, float(rng.integers(1, 6)) / 5) for _ in range(rng.integers(0, 2))]
            preds.append(ps[:5])
        oks_bad += oks_map50(preds, gts) != ap_oracle(preds, gts, sim=oks, thresh=0.5)
    dt = time.perf_counter() - t0
    ok = ap_bad == 0 and oks_bad == 0 and dt < 60
    acceptance_record(2, ok, f"AP mismatches {ap_bad}/1000, OKS-AP mismatches {oks_bad}/200; {dt:.1f}s")
    assert ok


# -- 3 ------------------------------------------------------------------------------


def test_c3_metric_identities(acceptance_record):
    rng = np.random.default_rng(0)
    x = rng.random((32, 32, 3))
    zeros, ones = np.zeros((32, 32, 3)), np.ones((32, 32, 3))
    kp = KeypointSet(((10, 10, 1), (20, 20, 1), (30, 10, 1), (12, 40, 1), (28, 40, 1)), 400.0)
    moved = KeypointSet(((13, 14, 1),) + kp.joints[1:], 400.0)
    z, half = torch.zeros(2, 3, 16, 16, dtype=torch.float64), torch.full((2, 3, 16, 16), 0.5, dtype=torch.float64)
    checks = {
        "iou(a,a)=1": iou(BBox(0, 0, 4, 4), BBox(0, 0, 4, 4)) == 1.0,
        "iou half overlap=1/3": abs(iou(BBox(0, 0, 4, 4), BBox(2, 0, 6, 4)) - 1 / 3) < 1e-9,
        "iou disjoint=0": iou(BBox(0, 0, 1, 1), BBox(2, 2, 3, 3)) == 0.0,
        "oks(a,a)=1": oks(kp, kp) == 1.0,
        "oks one joint moved": abs(oks(moved, kp) - (4 + math.exp(-25 / 8)) / 5) < 1e-9,
        "ssim(x,x)=1": ssim(x, x) == 1.0,
        "ssim(0,1)=C1/(1+C1)": abs(ssim(zeros, ones) - 1e-4 / (1 + 1e-4)) < 1e-9,
        "psnr(x,x)=inf": psnr(x, x) == math.inf,
        "psnr(0,1)=0": psnr(zeros, ones) == 0.0,
        "psnr(0,0.1)=20": abs(psnr(zeros, np.full_like(zeros, 0.1)) - 20.0) < 1e-9,
        "recon(z,z)=0": recon_loss(z, z).item() == 0.0,
        "recon(z,0.5)=0.25": abs(recon_loss(z, half).item() - 0.25) < 1e-9,
    }
    failed = [k for k, v in checks.items() if not v]
    ok = not failed
    acceptance_record(3, ok, f"{len(checks) - len(failed)}/{len(checks)} fixtures" + (f"; failed {failed}" if failed else ""))
    assert ok


# -- 4 ------------------------------------------------------------------------------


def test_c4_blur_baseline_monotone(acceptance_record, demo_cfg, demo_detector_path):
    u = import_adapter(demo_detector_path)
    ds = generate_dataset(demo_cfg.data.scene(demo_cfg.data.test_seed), 50, "test")
    gts = [ds.annotations[f.id].boxes for f in ds.frames]
    x = frames_to_tensor(ds.frames)
    t0 = time.perf_counter()
    ssims, maps = [], []
    for k in BLUR_KS:
        b = blur_dataset(ds, k)
        if k == 1:
            bitwise = all(np.array_equal(f.pixels, g.pixels) for f, g in zip(ds.frames, b.frames))
        ssims.append(float(ssim_batch(x, frames_to_tensor(b.frames)).mean()))
        maps.append(map50(u.predict_dataset(b), gts))
    dt = time.perf_counter() - t0
    rises = [b - a for a, b in zip(maps, maps[1:]) if b > a]
    ssim_ok = all(b < a for a, b in zip(ssims, ssims[1:]))
    map_ok = len(rises) <= 1 and all(r <= 0.02 for r in rises)
    ok = bitwise and ssim_ok and map_ok and dt < 300
    acceptance_record(4, ok, f"ssim {[round(s, 3) for s in ssims]}, mAP {[round(m, 3) for m in maps]}, "
                             f"k=1 bitwise {bitwise}; {dt:.0f}s")
    assert ok


# -- 5, 6, 7: the demo sweep -------------------------------------------------------


def test_c5_end_to_end_adversarial_run(acceptance_record, demo_sweep):
    cfg, res = demo_sweep
    s = res.summary
    key = f"obfuscator_{s['default_point']['knob']:g}"
    extras = _extras(cfg, key)
    p, clean = s["default_point"], s["clean"]
    a = extras["utility_hash_before"] == extras["utility_hash_after"] == s["utility_hash"]
    util_ratio = p["map50"] / clean["map50"]
    b = util_ratio >= 0.70
    c = p["attack_ssim"] <= 0.80 and p["attack_ssim"] <= s["identity_attack_ssim"] - 0.10
    id_ratio = p["identity_acc"] / clean["identity_acc"]
    d = id_ratio <= 0.5
    ok = a and b and c and d
    acceptance_record(5, ok, f"lambda={p['knob']:g}: (a) U frozen {a}; (b) mAP {p['map50']:.3f}/{clean['map50']:.3f}"
                             f"={util_ratio:.2f} {b}; (c) attack SSIM {p['attack_ssim']:.3f} vs identity "
                             f"{s['identity_attack_ssim']:.3f} {c}; (d) id acc {p['identity_acc']:.3f}/"
                             f"{clean['identity_acc']:.3f}={id_ratio:.2f} {d}")
    assert ok


def test_c6_obfuscator_dominates_blur(acceptance_record, demo_sweep):
    _, res = demo_sweep
    dom = res.summary["dominance"]
    ok = dom["dominates"]
    acceptance_record(6, ok, f"{len(dom['pairs'])} matched pairs within +-{dom['tol']}: obfuscator wins "
                             f"{dom['obfuscator_wins']}, blur wins {dom['blur_wins']}")
    assert ok


def test_c7_small_objects_lose_more(acceptance_record, demo_sweep):
    _, res = demo_sweep
    bins = res.summary["size_report"]["bins"]
    small, large = bins["small"]["relative_drop"], bins["large"]["relative_drop"]
    ok = small is not None and large is not None and small > 0 and small > large and small >= 2 * large
    acceptance_record(7, ok, f"relative drop small {_fmt(small)}, medium {_fmt(bins['medium']['relative_drop'])}, "
                             f"large {_fmt(large)}")
    assert ok


# -- 8 ------------------------------------------------------------------------------


def _windows_disjoint(a, b):
    return a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1]


def test_c8_missed_detection_leaks_identity(acceptance_record, demo_cfg, demo_data, demo_detector_path):
    """Two persons per frame; the threshold sits between their scores so exactly one is blurred."""
    u = import_adapter(demo_detector_path)
    low = u.with_score_thresh(0.05)
    spec = replace(demo_cfg.data.scene(808), n_persons=(2, 2))
    ds = generate_dataset(spec, 40, "test")
    k, pad = 33, demo_cfg.sweep.detect_blur_pad
    frames, anns, missed_ids, hit_ids = [], {}, [], []
    for frame, ann in ds:
        persons = [b for b in ann.boxes if b.cls == PERSON_CLS]
        dets = [d for d in low.predict_batch(frames_to_tensor([frame]))[0] if d.cls == PERSON_CLS]
        scores = [max((d.score for d in dets if iou(d.box, g) >= 0.5), default=None) for g in persons]
        if None in scores or scores[0] == scores[1]:
            continue
        hi, lo = (0, 1) if scores[0] > scores[1] else (1, 0)
        thresh = (scores[0] + scores[1]) / 2
        kept = [d for d in dets if d.score >= thresh]
        crop_lo = crop_bounds(persons[lo], 2.0, frame.width, frame.height)
        if not all(_windows_disjoint(crop_lo, expanded_window(d.box, pad, frame.width, frame.height)) for d in kept):
            continue
        frames.append(detect_then_blur(frame, u, k, score_thresh=thresh, pad=pad))
        anns[frame.id] = ann
        missed_ids.append(f"{frame.id}#p{lo}")
        hit_ids.append(f"{frame.id}#p{hi}")
    assert len(frames) >= 5, f"only {len(frames)} usable two-person frames"

    blurred = Dataset(tuple(frames), anns, "test", ds.n_identities)
    clean = Dataset(tuple(f for f in ds.frames if f.id in anns), anns, "test", ds.n_identities)
    crops_b = dict((c.id, (c, y)) for c, y in person_crops(blurred))
    crops_c = dict((c.id, (c, y)) for c, y in person_crops(clean))
    unchanged = all(np.array_equal(crops_b[i][0].pixels, crops_c[i][0].pixels) for i in missed_ids)
    hit_changed = sum(not np.array_equal(crops_b[i][0].pixels, crops_c[i][0].pixels) for i in hit_ids)

    clf = train_identity_classifier(person_crops(demo_data.train), demo_cfg.data.n_identities,
                                    steps=demo_cfg.sweep.identity_steps, seed=demo_cfg.seed)
    acc_leaked = identity_accuracy(clf, [crops_b[i] for i in missed_ids])
    acc_clean = identity_accuracy(clf, [crops_c[i] for i in missed_ids])
    acc_blurred = identity_accuracy(clf, [crops_b[i] for i in hit_ids])
    ok = unchanged and acc_leaked == acc_clean and hit_changed == len(hit_ids)
    acceptance_record(8, ok, f"{len(missed_ids)} missed persons: crops bitwise unchanged {unchanged}, identity acc "
                             f"{acc_leaked:.3f} vs clean {acc_clean:.3f} (blurred persons {acc_blurred:.3f})")
    assert ok


# -- 9 ------------------------------------------------------------------------------

MINI = {
    "run_id": "mini",
    "seed": 3,
    "data": {"n_utility_train": 48, "n_train": 24, "n_test": 12},
    "utility": {"width": 8, "steps": 30, "batch_size": 8},
    "obfuscator": {"base_width": 4, "depth": 1},
    "train": {"lam": 5.0, "steps": 6, "batch_size": 4, "checkpoint_every": 3, "log_every": 2},
    "attack": {"steps": 6, "batch_size": 4, "eval_every": 3, "arch": {"base_width": 4, "depth": 1}},
    "sweep": {"lambdas": [0.0, 5.0], "blur_ks": [1, 9], "detect_blur_ks": [9], "identity_steps": 10},
}


def test_c9_reproduce_from_manifest(acceptance_record, tmp_path):
    cfg = config_from_dict({**MINI, "output_dir": str(tmp_path)})
    with pytest.warns(UserWarning, match="sanity floor"):
        first = run_sweep(cfg, resume=False)
        new, mismatches = reproduce(cfg.out / "manifest.json", tmp_path, "mini-again")
    n = len(first.manifest.reports)
    same_models = new.model_hashes == first.manifest.model_hashes and new.dataset_hashes == first.manifest.dataset_hashes
    ok = not mismatches and n > 0 and same_models
    acceptance_record(9, ok, f"{n - len(mismatches)}/{n} report hashes identical, model and data hashes "
                             f"identical {same_models}" + (f"; differ: {mismatches}" if mismatches else ""))
    assert ok


# -- 10 -----------------------------------------------------------------------------


def test_c10_throughput_report(acceptance_record, demo_cfg):
    o = init_obfuscator(demo_cfg.obfuscator, demo_cfg.seed)
    reps = {r: bench_throughput(o, r, n_frames=demo_cfg.bench.n_frames, warmup=demo_cfg.bench.warmup)
            for r in ((64, 64), (640, 640), (1280, 1280), (1281, 721))}
    core_ok = all(reps[r].status == "ok" and reps[r].fps > 0 for r in ((64, 64), (640, 640)))
    large_ok = all(reps[r].status in ("ok", "oom") for r in ((1280, 1280), (1281, 721)))
    ok = core_ok and large_ok
    desc = ", ".join(f"{h}x{w}: " + (f"{r.fps:.1f} fps" if r.status == "ok" else r.status) for (h, w), r in reps.items())
    acceptance_record(10, ok, f"{desc} ({reps[(64, 64)].threads} thread)")
    assert ok


def _extras(cfg, key):
    return json.loads((cfg.out / "points" / f"{key}.json").read_text())["extras"]


def _fmt(v):
    return "n/a" if v is None else f"{v:.3f}"
