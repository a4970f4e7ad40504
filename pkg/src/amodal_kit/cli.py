"""Command-line surface: evaluate, track, augment, stats, validate, train-expander.

Every run writes a RunManifest JSON beside its output (command, config
snapshot, input content digests, seed, version, duration). Exit codes:
0 ok, 2 input error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from . import dataset as ds_mod
from . import expander as exp_mod
from . import metrics as metrics_mod
from . import pno as pno_mod
from . import tracker as tracker_mod

EXIT_OK = 0
EXIT_INPUT_ERROR = 2
EXIT_INTERNAL_ERROR = 3

# column order of the printed stratified table
TABLE_COLUMNS = [
    ("AP^[0,0.1]", "ap_vis_0_01"),
    ("AP^[0.1,0.8]", "ap_vis_01_08"),
    ("AP^[0.8,1]", "ap_vis_08_1"),
    ("AP^OoF", "ap_oof"),
    ("AP", "ap_all"),
    ("Track-AP", "track_ap_all"),
    ("Track-AP^[0,0.8]", "track_ap_occ_0_08"),
]


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_path, command, args_snapshot, inputs, seed, started):
    snapshot = {
        k: v
        for k, v in args_snapshot.items()
        if isinstance(v, (str, int, float, bool, type(None)))
    }
    manifest = {
        "command": command,
        "config": snapshot,
        "inputs": {os.path.basename(p): _digest(p) for p in inputs if p and os.path.exists(p)},
        "seed": seed,
        "version": __version__,
        "duration_seconds": round(time.time() - started, 3),
    }
    path = str(out_path) + ".manifest.json"
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def _error(msg, code):
    print(json.dumps({"error": msg}), file=sys.stderr)
    return code


def _fmt_ap(v):
    return "  n/a" if v is None else f"{100.0 * v:5.1f}"


def print_ap_table(report: metrics_mod.EvalReport):
    header = " | ".join(f"{c:>16}" for c, _ in TABLE_COLUMNS)
    values = " | ".join(
        f"{_fmt_ap(report.strata[key].ap) if key in report.strata else '  n/a':>16}"
        for _, key in TABLE_COLUMNS
    )
    print(header)
    print("-" * len(header))
    print(values)


def cmd_evaluate(args) -> int:
    started = time.time()
    ds = ds_mod.load_dataset(args.annotations)
    results = metrics_mod.load_results(args.results)
    thresholds = metrics_mod.sweep_thresholds() if args.iou == "sweep" else [float(args.iou)]
    config = metrics_mod.EvalConfig(iou_thresholds=thresholds)
    report = metrics_mod.evaluate_all(ds, results, config)
    with open(args.out, "w") as f:
        json.dump(report.as_dict(), f, indent=2, sort_keys=True)
    print_ap_table(report)
    write_manifest(args.out, "evaluate", vars(args), [args.annotations, args.results], None, started)
    return EXIT_OK


def cmd_track(args) -> int:
    started = time.time()
    ds = ds_mod.load_dataset(args.annotations)
    detections = metrics_mod.load_results(args.detections)
    config = tracker_mod.TrackerConfig(
        iou_gate=args.iou_gate,
        max_coast=args.max_coast,
        min_hits=args.min_hits,
        emit_coasted=not args.no_coast,
    )
    out = tracker_mod.run_all_sequences(ds, detections, config)
    with open(args.out, "w") as f:
        json.dump([r.as_dict() for r in out], f)
    print(f"tracked {len(out)} boxes across {len(ds.videos)} videos -> {args.out}")
    write_manifest(args.out, "track", vars(args), [args.annotations, args.detections], None, started)
    return EXIT_OK


def cmd_augment(args) -> int:
    started = time.time()
    ds = ds_mod.load_dataset(args.annotations)
    bank = pno_mod.load_segment_bank(args.bank)
    config = pno_mod.PnOConfig(
        n_segments_range=(args.min_segments, args.max_segments),
        size_range=(args.min_size, args.max_size),
        mask_fill_min=args.mask_fill_min,
        seed=args.seed,
        allow_out_of_frame=not args.no_out_of_frame,
    )
    pno_mod.augment_dataset(ds, bank, config)
    ds.save(args.out)
    print(f"augmented dataset: {len(ds.annotations)} annotations -> {args.out}")
    write_manifest(args.out, "augment", vars(args), [args.annotations, args.bank], args.seed, started)
    return EXIT_OK


def cmd_stats(args) -> int:
    started = time.time()
    ds = ds_mod.load_dataset(args.annotations)
    if args.derive_visibility:
        ds_mod.derive_visibility(ds)
    rep = ds_mod.stats(ds)
    out = args.out or (os.path.splitext(args.annotations)[0] + ".stats.json")
    with open(out, "w") as f:
        json.dump(rep.as_dict(), f, indent=2, sort_keys=True)
    for k, v in rep.as_dict().items():
        print(f"{k:>28}: {v}")
    write_manifest(out, "stats", vars(args), [args.annotations], None, started)
    return EXIT_OK


def cmd_validate(args) -> int:
    started = time.time()
    ds = ds_mod.load_dataset(args.annotations)
    issues = ds_mod.validate(ds)
    out = args.out or (os.path.splitext(args.annotations)[0] + ".validation.json")
    with open(out, "w") as f:
        json.dump([i.as_dict() for i in issues], f, indent=2)
    print(f"{len(issues)} violation(s) -> {out}")
    for issue in issues[:20]:
        print(f"  [{issue.code}] {issue.message}")
    write_manifest(out, "validate", vars(args), [args.annotations], None, started)
    return EXIT_OK


def cmd_train_expander(args) -> int:
    started = time.time()
    rng = np.random.default_rng(args.seed)
    if args.task != "scale":
        return _error(f"unknown synthetic task {args.task!r}", EXIT_INPUT_ERROR)
    samples = exp_mod.make_scaling_task(
        args.n_samples, rng, feature_dim=args.feature_dim, scale=args.scale
    )
    config = exp_mod.TrainConfig(
        base_lr=args.lr,
        iterations=args.iterations,
        batch_size=args.batch_size,
        dropout_prob=args.dropout,
        seed=args.seed,
    )
    params, curve = exp_mod.train(samples, config)
    params.save(args.out)
    curve_path = os.path.splitext(args.out)[0] + ".loss.csv"
    with open(curve_path, "w") as f:
        f.write("iteration,loss\n")
        for step, loss in curve:
            f.write(f"{step},{loss}\n")
    holdout = exp_mod.make_scaling_task(200, rng, feature_dim=args.feature_dim, scale=args.scale)
    preds = exp_mod.expand(params, holdout)
    from .geometry import iou as box_iou

    mean_iou = sum(box_iou(p, s.amodal_gt) for p, s in zip(preds, holdout)) / len(holdout)
    print(f"final loss {curve[-1][1]:.6f}, holdout mean IoU {mean_iou:.4f} -> {args.out}")
    write_manifest(args.out, "train-expander", vars(args), [], args.seed, started)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="amodal-kit",
        description="Amodal tracking toolkit: stratified evaluation, Kalman "
        "coasting tracker, synthetic occlusion augmentation, amodal expander.",
    )
    p.add_argument("--workers", type=int, default=int(os.environ.get("AMODAL_KIT_WORKERS", "1")),
                   help="parallel worker count (default 1; env AMODAL_KIT_WORKERS)")
    sub = p.add_subparsers(dest="command", required=True)

    pe = sub.add_parser("evaluate", help="stratified detection AP and Track-AP")
    pe.add_argument("--annotations", required=True)
    pe.add_argument("--results", required=True)
    pe.add_argument("--iou", default="0.5", help="IoU threshold or 'sweep' for 0.5:0.95")
    pe.add_argument("--out", default="report.json")
    pe.set_defaults(func=cmd_evaluate)

    pt = sub.add_parser("track", help="run the Kalman coasting tracker over detections")
    pt.add_argument("--annotations", required=True)
    pt.add_argument("--detections", required=True)
    pt.add_argument("--out", default="tracks.json")
    pt.add_argument("--iou-gate", type=float, default=0.3)
    pt.add_argument("--max-coast", type=int, default=10)
    pt.add_argument("--min-hits", type=int, default=2)
    pt.add_argument("--no-coast", action="store_true", help="disable coasted-box emission")
    pt.set_defaults(func=cmd_track)

    pa = sub.add_parser("augment", help="PasteNOcclude synthetic occlusion")
    pa.add_argument("--annotations", required=True)
    pa.add_argument("--bank", required=True, help="segment bank manifest JSON")
    pa.add_argument("--out", default="augmented.json")
    pa.add_argument("--seed", type=int, default=0)
    pa.add_argument("--min-segments", type=int, default=1)
    pa.add_argument("--max-segments", type=int, default=7)
    pa.add_argument("--min-size", type=float, default=12.0)
    pa.add_argument("--max-size", type=float, default=192.0)
    pa.add_argument("--mask-fill-min", type=float, default=0.7)
    pa.add_argument("--no-out-of-frame", action="store_true",
                    help="keep pasted segments fully inside the image")
    pa.set_defaults(func=cmd_augment)

    ps = sub.add_parser("stats", help="occlusion statistics of an annotation file")
    ps.add_argument("--annotations", required=True)
    ps.add_argument("--out", default=None)
    ps.add_argument("--derive-visibility", action="store_true",
                    help="recompute visibility from box geometry before counting")
    ps.set_defaults(func=cmd_stats)

    pv = sub.add_parser("validate", help="annotation invariant checks")
    pv.add_argument("--annotations", required=True)
    pv.add_argument("--out", default=None)
    pv.set_defaults(func=cmd_validate)

    px = sub.add_parser("train-expander", help="train the amodal expander on a synthetic task")
    px.add_argument("--task", default="scale")
    px.add_argument("--scale", type=float, default=1.5)
    px.add_argument("--n-samples", type=int, default=2000)
    px.add_argument("--feature-dim", type=int, default=8)
    px.add_argument("--lr", type=float, default=0.01)
    px.add_argument("--iterations", type=int, default=2000)
    px.add_argument("--batch-size", type=int, default=4)
    px.add_argument("--dropout", type=float, default=0.2)
    px.add_argument("--seed", type=int, default=0)
    px.add_argument("--out", default="expander_params.json")
    px.set_defaults(func=cmd_train_expander)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ds_mod.DatasetError, metrics_mod.ResultsError, pno_mod.SegmentBankError, FileNotFoundError) as e:
        return _error(str(e), EXIT_INPUT_ERROR)
    except (ValueError, FloatingPointError) as e:
        return _error(str(e), EXIT_INTERNAL_ERROR)


if __name__ == "__main__":
    sys.exit(main())
