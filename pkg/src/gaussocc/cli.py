"""Command line surface: scene synthesis, splatting, the forward pipeline,
evaluation, temporal-consistency reporting, gradient checking, and a splat
benchmark. Every command is deterministic given its flags and seed.
"""

from __future__ import annotations

import argparse
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import formats, metrics, synth
from .core import EMPTY_LABEL, GaussianPrimitive, GridSpec, Quaternion, Rng, SceneConfig, init_parameters
from .nnprims import run_gradcheck
from .splat import resolve_threads, splat_bounded, splat_dense
from .temporal import run_pipeline

BENCH_CUTOFF = 5.0
BENCH_LOGIT_RTOL = 1e-3
BENCH_LABEL_MISMATCH = 1e-3


def _config_from_args(args) -> SceneConfig:
    dims = tuple(args.grid)
    half = tuple(d * args.voxel_size / 2.0 for d in dims)
    return SceneConfig.desk(
        grid_dims=dims,
        voxel_size=args.voxel_size,
        range_min=tuple(-h for h in half),
        range_max=half,
        n_gaussians=args.gaussians,
        n_frames=args.tau,
        n_classes=args.classes,
        seed=args.seed,
        fusion_mode=args.mode,
    )


def cmd_synth(args) -> int:
    cfg = _config_from_args(args)
    synth.write_scene(args.out, cfg, args.recipe)
    print(f"wrote scene '{args.recipe}' seed={cfg.seed} frames={cfg.n_frames} to {args.out}")
    return 0


def cmd_splat(args) -> int:
    gaussians, n_classes = formats.read_gaussian_set(args.gaussians_file)
    half = tuple(d * args.voxel_size / 2.0 for d in args.grid)
    spec = GridSpec(tuple(args.grid), np.array([-h for h in half]), args.voxel_size, n_classes)
    threads = resolve_threads(args.threads)
    if args.dense:
        out = splat_dense(gaussians, spec, threads=threads)
    else:
        out = splat_bounded(gaussians, spec, args.cutoff, threads=threads)
    formats.write_voxel_grid(args.out, out.labels)
    occupied = int(np.count_nonzero(out.labels.payload != EMPTY_LABEL))
    print(f"splatted {len(gaussians)} gaussians onto {spec.dims}: {occupied} occupied voxels -> {args.out}")
    return 0


def cmd_pipeline(args) -> int:
    scene = synth.load_scene(args.scene)
    cfg = formats.read_config(args.config) if args.config else scene.cfg
    overrides = {}
    if args.mode:
        overrides["fusion_mode"] = args.mode
    if args.tau:
        overrides["n_frames"] = args.tau
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = replace(cfg, **overrides)
    params = init_parameters(cfg, Rng(cfg.seed, stream=4))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    threads = resolve_threads(args.threads)
    timings = []
    for f in range(scene.cfg.n_frames):
        seq = synth.frame_window(scene, cfg, f)
        t0 = time.perf_counter()
        gaussians, occupancy = run_pipeline(seq, cfg, params, cutoff_sigma=args.cutoff,
                                            threads=threads)
        timings.append(time.perf_counter() - t0)
        formats.write_voxel_grid(out / f"pred_{f:03d}.occv", occupancy.labels)
        formats.write_gaussian_set(out / f"gaussians_{f:03d}.gset", gaussians, cfg.n_classes)
    shutil.copyfile(Path(args.scene) / "poses.txt", out / "poses.txt")
    print(f"mode={cfg.fusion_mode} tau={cfg.n_frames} frames={scene.cfg.n_frames}")
    for f, dt in enumerate(timings):
        print(f"frame {f}: {dt:.3f}s")
    print(f"total {sum(timings):.3f}s -> {out}")
    return 0


def _load_frames(directory, prefix):
    d = Path(directory)
    paths = sorted(d.glob(f"{prefix}_*.occv"))
    if not paths:
        raise FileNotFoundError(f"no {prefix}_*.occv files in {directory}")
    return [formats.read_voxel_grid(p) for p in paths], paths


def cmd_eval(args) -> int:
    preds, pred_paths = _load_frames(args.pred, "pred")
    gts, gt_paths = _load_frames(args.gt, "gt")
    if len(preds) != len(gts):
        print(f"error: {args.pred} has {len(preds)} frames, {args.gt} has {len(gts)}", file=sys.stderr)
        return 1
    for p, g, pp, gp in zip(preds, gts, pred_paths, gt_paths):
        if p.dims != g.dims:
            print(f"error: dims {p.dims} in {pp.name} vs {g.dims} in {gp.name}", file=sys.stderr)
            return 1
    n_classes = gts[0].spec.n_classes
    counts = metrics.ConfusionCounts(n_classes)
    iou_num = 0
    iou_den = 0
    for p, g in zip(preds, gts):
        counts = counts + metrics.confusion(p, g, n_classes)
        occ_p = p.payload != EMPTY_LABEL
        occ_g = g.payload != EMPTY_LABEL
        iou_num += int(np.count_nonzero(occ_p & occ_g))
        iou_den += int(np.count_nonzero(occ_p | occ_g))
    sc_iou = 1.0 if iou_den == 0 else iou_num / iou_den
    per_class = metrics.per_class_iou(counts)
    miou = metrics.mean_iou(counts)
    stcv_res = metrics.stcv(preds) if len(preds) >= 2 else None
    lines = ["EVAL1", f"frames {len(preds)}", f"sc_iou {sc_iou!r}", f"miou {miou!r}",
             f"classes {n_classes}"]
    for c in sorted(per_class):
        lines.append(f"class {c} iou {per_class[c]!r}")
    if stcv_res is not None:
        agg = metrics.stcv_aggregate([stcv_res])
        lines.append(f"stcv {stcv_res.value!r}")
        lines.append(f"mstcv {agg.mean!r} minstcv {agg.min!r} maxstcv {agg.max!r}")
        lines.append(f"stcv_degenerate_pairs {len(stcv_res.degenerate_pairs)}")
    report = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(report)
    print(report, end="")
    return 0


def cmd_stcv(args) -> int:
    preds, _ = _load_frames(args.pred, "pred")
    poses = None
    if args.align:
        pose_file = Path(args.pred) / "poses.txt"
        poses = formats.poses_as_transforms(formats.read_pose_log(pose_file))[: len(preds)]
    res = metrics.stcv(preds, poses)
    agg = metrics.stcv_aggregate([res])
    print("STCV1")
    print(f"aligned {bool(args.align)}")
    for i, frac in enumerate(res.pair_fractions):
        flag = " degenerate" if i in res.degenerate_pairs else ""
        print(f"pair {i} {frac!r}{flag}")
    print(f"stcv {res.value!r}")
    print(f"mstcv {agg.mean!r} minstcv {agg.min!r} maxstcv {agg.max!r}")
    return 0


def cmd_gradcheck(args) -> int:
    reports = run_gradcheck(seed=args.seed, inject_fault=args.inject_fault)
    print(f"{'primitive':<18} {'max rel':>12} {'mean rel':>12} {'worst probe':<22} {'probes':>6} status")
    ok = True
    for r in reports:
        print(r.row())
        ok = ok and r.passed
    print("all gradients ok" if ok else "gradient check FAILED")
    return 0 if ok else 1


def _bench_gaussians(k: int, spec: GridSpec, seed: int) -> list[GaussianPrimitive]:
    rng = Rng(seed, stream=7)
    lo = spec.origin + 0.05 * (np.array(spec.dims) * spec.voxel_size)
    hi = spec.origin + 0.95 * (np.array(spec.dims) * spec.voxel_size)
    out = []
    for _ in range(k):
        mean = rng.uniform(0.0, 1.0, 3) * (hi - lo) + lo
        scale = rng.uniform(0.15, 0.35, 3)
        q = Quaternion(*rng.normal(0.0, 1.0, 4))
        opacity = float(rng.uniform(0.5, 1.0))
        logits = rng.normal(0.0, 1.0, spec.n_classes)
        out.append(GaussianPrimitive(mean, scale, q, opacity, logits))
    return out


def cmd_bench(args) -> int:
    half = tuple(d * args.voxel_size / 2.0 for d in args.grid)
    spec = GridSpec(tuple(args.grid), np.array([-h for h in half]), args.voxel_size, 4)
    gaussians = _bench_gaussians(args.gaussians, spec, args.seed)
    threads = resolve_threads(args.threads)
    t0 = time.perf_counter()
    bounded = splat_bounded(gaussians, spec, args.cutoff, threads=threads)
    t_bounded = time.perf_counter() - t0
    t0 = time.perf_counter()
    dense = splat_dense(gaussians, spec, threads=threads)
    t_dense = time.perf_counter() - t0

    diff = np.abs(bounded.logits.payload - dense.logits.payload)
    rel = float(diff.max() / max(np.abs(dense.logits.payload).max(), 1e-300))
    mismatch = float(np.count_nonzero(bounded.labels.payload != dense.labels.payload) / spec.n_voxels)
    if rel > BENCH_LOGIT_RTOL or mismatch > BENCH_LABEL_MISMATCH:
        print(f"EQUALITY FAILED: logit rel {rel:.3e}, label mismatch {mismatch:.3e}", file=sys.stderr)
        return 1
    speedup = t_dense / t_bounded if t_bounded > 0 else float("inf")
    print(f"{'path':<10} {'seconds':>10}")
    print(f"{'bounded':<10} {t_bounded:>10.3f}")
    print(f"{'dense':<10} {t_dense:>10.3f}")
    print(f"gaussians {args.gaussians} grid {spec.dims} threads {threads} cutoff {args.cutoff}")
    print(f"equality ok: logit rel {rel:.3e}, label mismatch {mismatch:.3e}")
    print(f"speedup {speedup:.1f}x (soft target >= 5x)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gaussocc",
                                     description="Gaussian semantic occupancy toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene directory")
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=int, default=3, help="frame count")
    p.add_argument("--recipe", choices=synth.RECIPES, default="mixed")
    p.add_argument("--grid", type=int, nargs=3, default=[32, 32, 8], metavar=("X", "Y", "Z"))
    p.add_argument("--voxel-size", type=float, default=0.5)
    p.add_argument("--gaussians", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--mode", choices=("loose", "tight", "coupled"), default="coupled")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("splat", help="render a gaussian set file into a label grid")
    p.add_argument("gaussians_file")
    p.add_argument("out")
    p.add_argument("--grid", type=int, nargs=3, default=[32, 32, 8], metavar=("X", "Y", "Z"))
    p.add_argument("--voxel-size", type=float, default=0.5)
    p.add_argument("--cutoff", type=float, default=3.0)
    p.add_argument("--dense", action="store_true", help="force the exact reference path")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_splat)

    p = sub.add_parser("pipeline", help="run the forward pipeline over a scene")
    p.add_argument("scene")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="config file overriding the scene's")
    p.add_argument("--mode", choices=("loose", "tight", "coupled"), default=None)
    p.add_argument("--tau", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--cutoff", type=float, default=3.0)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--out", default=None, help="also write the report to a file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stcv", help="temporal consistency of a prediction directory")
    p.add_argument("pred")
    p.add_argument("--align", action="store_true", help="ego-align frames before comparing")
    p.set_defaults(func=cmd_stcv)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="time bounded vs dense splatting")
    p.add_argument("--gaussians", type=int, default=25600)
    p.add_argument("--grid", type=int, nargs=3, default=[200, 200, 16], metavar=("X", "Y", "Z"))
    p.add_argument("--voxel-size", type=float, default=0.5)
    p.add_argument("--cutoff", type=float, default=BENCH_CUTOFF)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (formats.FormatError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
