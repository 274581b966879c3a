"""Command-line entry point: ``taskobf <subcommand> ...``.

Every subcommand writes a ``manifest.json`` into its ``--out`` directory.
Exit status is 0 on success, 1 on a reported error (a JSON object on stderr)
and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from .baselines import blur_dataset, detect_then_blur_dataset
from .bench import (
    RunManifest,
    SweepData,
    _environment,
    _write_json,
    bench_throughput,
    build_data,
    clean_reference,
    emit_curve_plot,
    emit_size_plot,
    evaluate_transformed,
    read_curves_csv,
    reproduce,
    run_sweep,
    train_obfuscator_point,
)
from .checkpoint import param_hash
from .config import ConfigError, RunConfig, bundled_config, load_config
from .core import load_dataset, save_dataset
from .obfuscator import export_model, import_model, transform_dataset
from .trainer import IdentityTransform, attack_evaluate
from .utility import export_adapter, import_adapter, train_toy_detector, train_toy_pose

log = logging.getLogger("taskobf")


class CliError(Exception):
    pass


def _resolution(text: str) -> tuple:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _odd_k(text: str) -> int:
    k = int(text)
    if k < 1 or k % 2 == 0:
        raise argparse.ArgumentTypeError(f"kernel size must be an odd integer >= 1, got {k}")
    return k


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else load_config(bundled_config())
    if getattr(args, "task", None):
        cfg = replace(cfg, utility=replace(cfg.utility, task=args.task))
    return cfg


def _data(args, cfg: RunConfig) -> SweepData:
    if getattr(args, "data", None):
        root = Path(args.data)
        return SweepData(*(load_dataset(root / name) for name in ("utility_train", "train", "test")))
    return build_data(cfg)


def _manifest(args, cfg: RunConfig, out: Path, t0: float, data=None, models=None, reports=None) -> RunManifest:
    m = RunManifest(
        run_id=f"{cfg.run_id}-{args.command}",
        config=cfg.to_dict(),
        seeds={"run": cfg.seed, "utility": cfg.utility.seed, "train": cfg.train.seed, "attack": cfg.attack.seed},
        dataset_hashes=data.hashes() if data is not None else {},
        model_hashes=models or {},
        reports=reports or {},
        wall_clock=time.perf_counter() - t0,
        command=" ".join(["taskobf"] + args.argv),
        environment=_environment(),
    )
    m.save(out / "manifest.json")
    return m


def _report(out: Path, name: str, doc) -> dict:
    return {name: {"path": f"{name}.json", "sha256": _write_json(out / f"{name}.json", doc)}}


# -- subcommands ------------------------------------------------------------------


def cmd_generate(args, cfg, out, t0):
    data = build_data(cfg)
    for name in ("utility_train", "train", "test"):
        save_dataset(getattr(data, name), out / name)
    _manifest(args, cfg, out, t0, data)
    print(json.dumps(data.hashes()))


def cmd_train_utility(args, cfg, out, t0):
    data = _data(args, cfg)
    train = train_toy_detector if cfg.utility.task == "detect" else train_toy_pose
    u = train(data.utility_train, data.test, cfg.utility)
    export_adapter(u, out / "utility.pt")
    reports = _report(out, "utility_report", u.report)
    _manifest(args, cfg, out, t0, data, {"utility": u.parameter_hash()}, reports)
    print(json.dumps(u.report))


def cmd_train_obfuscator(args, cfg, out, t0):
    data = _data(args, cfg)
    u = import_adapter(args.utility)
    lam = cfg.train.lam if args.lam is None else args.lam
    o, history, cotrained_mse = train_obfuscator_point(cfg, u, data, lam)
    export_model(o, out / "obfuscator.pt")
    history.save(out / "history")
    reports = _report(out, "train_report", {"lam": lam, "cotrained_test_mse": cotrained_mse,
                                            "history_hash": history.content_hash()})
    _manifest(args, cfg, out, t0, data, {"utility": u.parameter_hash(), "obfuscator": param_hash(o)}, reports)
    print(json.dumps({"obfuscator": str(out / "obfuscator.pt"), "cotrained_test_mse": cotrained_mse}))


def cmd_attack(args, cfg, out, t0):
    data = _data(args, cfg)
    o = import_model(args.obfuscator) if args.obfuscator else IdentityTransform()
    rep = attack_evaluate(o, data.train, data.test, cfg.attack)
    models = {"obfuscator": param_hash(o)} if args.obfuscator else {}
    _manifest(args, cfg, out, t0, data, models, _report(out, "attack_report", rep.to_dict()))
    print(json.dumps({"attack_mse": rep.final_test_recon_mse, "attack_ssim": rep.final_test_ssim}))


def cmd_baseline(args, cfg, out, t0):
    data = _data(args, cfg)
    u = import_adapter(args.utility)
    if args.method == "blur":
        train_t, test_t = blur_dataset(data.train, args.k), blur_dataset(data.test, args.k)
    else:
        kw = {"score_thresh": args.score_thresh, "pad": cfg.sweep.detect_blur_pad}
        train_t = detect_then_blur_dataset(data.train, u, args.k, **kw)
        test_t = detect_then_blur_dataset(data.test, u, args.k, **kw)
    if args.save_frames:
        save_dataset(test_t, out / "test_transformed")
    point, _ = evaluate_transformed(u, data, train_t, test_t, args.method, args.k, cfg)
    _manifest(args, cfg, out, t0, data, {"utility": u.parameter_hash()}, _report(out, "point", point.to_report()))
    print(json.dumps(point.to_report()))


def cmd_evaluate(args, cfg, out, t0):
    data = _data(args, cfg)
    u = import_adapter(args.utility)
    models = {"utility": u.parameter_hash()}
    if args.obfuscator:
        o = import_model(args.obfuscator)
        models["obfuscator"] = param_hash(o)
        lam = float(o.provenance.get("lambda", float("nan")))
        point, _ = evaluate_transformed(u, data, transform_dataset(o, data.train), transform_dataset(o, data.test),
                                        "obfuscator", lam, cfg)
        doc = point.to_report()
    else:
        doc = clean_reference(cfg, u, data)["point"]
    _manifest(args, cfg, out, t0, data, models, _report(out, "point", doc))
    print(json.dumps(doc))


def cmd_sweep(args, cfg, out, t0):
    if args.output_dir:
        cfg = replace(cfg, output_dir=args.output_dir)
    if args.run_id:
        cfg = replace(cfg, run_id=args.run_id)
    res = run_sweep(cfg, resume=not args.no_resume, command=" ".join(["taskobf"] + args.argv),
                    progress=lambda key, rec: log.info("done %s", key))
    print(json.dumps({"run_dir": str(cfg.out), "dominance": res.summary.get("dominance", {}).get("dominates"),
                      "points": len(res.points)}))


def cmd_reproduce(args, cfg, out, t0):
    new, mismatches = reproduce(args.manifest, args.output_dir, args.run_id)
    print(json.dumps({"run_id": new.run_id, "mismatches": mismatches}))
    if mismatches:
        raise CliError(f"reports differ from the original run: {mismatches}")


def cmd_plot(args, cfg, out, t0):
    points = read_curves_csv(args.curves)
    files = emit_curve_plot(points, out / "curves")
    if args.summary:
        summary = json.loads(Path(args.summary).read_text())
        if "size_report" not in summary:
            raise CliError(f"{args.summary} has no size_report")
        files += emit_size_plot(summary["size_report"], out / "sizes")
    _manifest(args, cfg, out, t0)
    print(json.dumps([str(f) for f in files]))


def cmd_bench(args, cfg, out, t0):
    o = import_model(args.obfuscator) if args.obfuscator else None
    if o is None:
        from .obfuscator import init_obfuscator

        o = init_obfuscator(cfg.obfuscator, cfg.seed)
    resolutions = args.resolution or list(cfg.bench.resolutions)
    n = args.n_frames or cfg.bench.n_frames
    reports = [bench_throughput(o, r, n, cfg.bench.warmup).to_dict() for r in resolutions]
    _manifest(args, cfg, out, t0, models={"obfuscator": param_hash(o)},
              reports=_report(out, "throughput", reports))
    print(json.dumps(reports))


COMMANDS = {
    "generate": cmd_generate,
    "train-utility": cmd_train_utility,
    "train-obfuscator": cmd_train_obfuscator,
    "attack": cmd_attack,
    "baseline": cmd_baseline,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "reproduce": cmd_reproduce,
    "plot": cmd_plot,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="taskobf", description="Adversarial obfuscation experiments on synthetic scenes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text, data=True):
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", help="YAML run config (default: bundled demo config)")
        s.add_argument("--out", help="output directory (default: <output_dir>/<run_id>/<command>)")
        if data:
            s.add_argument("--data", help="directory written by `generate`; default regenerates from the config")
        return s

    add("generate", "write the utility-train, train and test datasets", data=False)
    s = add("train-utility", "train and freeze the toy utility model")
    s.add_argument("--task", choices=("detect", "pose"))
    s = add("train-obfuscator", "adversarially train an obfuscator against a frozen utility model")
    s.add_argument("--utility", required=True)
    s.add_argument("--lam", type=float)
    s = add("attack", "train a fresh deobfuscator against a frozen obfuscator (identity if omitted)")
    s.add_argument("--obfuscator")
    s = add("baseline", "evaluate a blur baseline at one kernel size")
    s.add_argument("--utility", required=True)
    s.add_argument("--method", choices=("blur", "detect-blur"), default="blur")
    s.add_argument("--k", type=_odd_k, required=True)
    s.add_argument("--score-thresh", type=float, default=0.3)
    s.add_argument("--save-frames", action="store_true")
    s = add("evaluate", "utility and privacy proxies for an obfuscator (clean frames if omitted)")
    s.add_argument("--utility", required=True)
    s.add_argument("--obfuscator")
    s = add("sweep", "run the full lambda and kernel sweeps", data=False)
    s.add_argument("--output-dir")
    s.add_argument("--run-id")
    s.add_argument("--no-resume", action="store_true")
    s = add("reproduce", "re-run a sweep from its manifest and compare report hashes", data=False)
    s.add_argument("--manifest", required=True)
    s.add_argument("--output-dir")
    s.add_argument("--run-id")
    s = add("plot", "draw curve (and size) plots from a sweep's outputs", data=False)
    s.add_argument("--curves", required=True)
    s.add_argument("--summary")
    s = add("bench", "measure obfuscator throughput", data=False)
    s.add_argument("--obfuscator")
    s.add_argument("--resolution", type=_resolution, action="append")
    s.add_argument("--n-frames", type=int)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        cfg = _load_cfg(args)
        out = Path(args.out) if args.out else cfg.out / args.command
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, out, t0)
    except (CliError, ConfigError, ValueError, OSError, RuntimeError, KeyError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e), "command": args.command}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
