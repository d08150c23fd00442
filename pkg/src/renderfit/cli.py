"""Command-line entry point.

Subcommands wire configuration, frame I/O, scene synthesis, refinement,
evaluation and gradient checking into reproducible runs:

* ``render``    render the configured pose, write color/depth/mask PNGs
* ``synth``     synthesize a sensor frame + pseudo labels to disk
* ``refine``    run pose refinement, write trace.csv / summary.json / pose
* ``evaluate``  score predicted against ground-truth poses
* ``gradcheck`` finite-difference audit of every enabled loss gradient

Every command is deterministic for a fixed config and seed; all state
lives in the config file (no environment variables are consulted).
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time

import numpy as np

from . import frameio, plots
from .config import RunConfig
from .errors import MissingDepth, RenderfitError
from .features import FeaturePyramid
from .gradcheck import run_gradcheck
from .geometry import Pose
from .losses import PseudoLabels, SensorFrame
from .metrics import (
    PoseEstimate,
    add_recall,
    auc,
    e_add,
    e_add_s,
    rotation_angle_error,
    translation_error,
)
from .optim import refine
from .render import render
from .scenes import synthesize
from .geometry import SymmetrySet


def _apply_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    if seed is None:
        return cfg
    cfg = dataclasses.replace(cfg, seed=seed)
    if cfg.scene is not None:
        cfg.scene = dataclasses.replace(cfg.scene, seed=seed)
    return cfg


def _resolve_pose(cfg: RunConfig) -> Pose:
    if cfg.init_pose is not None:
        return cfg.init_pose
    if cfg.scene is not None:
        return cfg.scene.gt_pose
    raise RenderfitError("config needs init_pose or a scene with gt_pose")


def cmd_render(cfg: RunConfig, args) -> int:
    mesh = cfg.build_mesh()
    pose = _resolve_pose(cfg)
    out = render(mesh, pose, cfg.camera, cfg.render, with_tape=False)
    os.makedirs(args.out, exist_ok=True)
    frameio.save_color_png(os.path.join(args.out, "color.png"), out.color)
    frameio.save_depth_png(os.path.join(args.out, "depth.png"), out.depth)
    frameio.save_mask_png(os.path.join(args.out, "mask.png"), out.mask)
    frameio.write_json(
        os.path.join(args.out, "render.json"),
        {
            "dropped_faces": out.dropped_faces,
            "depth_unit_m": frameio.DEPTH_UNIT_M,
            "pose": frameio.pose_to_dict(pose),
        },
    )
    print(f"wrote color/depth/mask PNGs to {args.out}")
    return 0


def cmd_synth(cfg: RunConfig, args) -> int:
    if cfg.scene is None:
        raise RenderfitError("synth requires a 'scene' section in the config")
    sensor, pseudo, gt = synthesize(cfg.scene, cfg.render)
    frameio.write_frame(args.out, sensor, pseudo, gt)
    print(f"wrote synthetic frame to {args.out}")
    return 0


def _load_or_synthesize(cfg: RunConfig) -> list[tuple[SensorFrame, PseudoLabels, Pose | None]]:
    if cfg.frames:
        return [frameio.read_frame(d) for d in cfg.frames]
    if cfg.scene is None:
        raise RenderfitError("refine needs 'frames' or a 'scene' section")
    return [synthesize(cfg.scene, cfg.render)]


def _refine_one(job):
    cfg, sensor, pseudo, gt, out_dir, debug, plot_fmt = job
    mesh = cfg.build_mesh()
    init = cfg.init_pose or pseudo.pose
    extractor = FeaturePyramid(cfg.loss_opts.get("perceptual_seed", 0))
    os.makedirs(out_dir, exist_ok=True)

    callback = None
    if debug:
        stride = max(cfg.optim.log_every, 1)

        def callback(it, pose, render_out):
            if it % stride == 0:
                frameio.save_color_png(
                    os.path.join(out_dir, f"debug_{it:05d}.png"), render_out.color
                )
                frameio.save_depth_png(
                    os.path.join(out_dir, f"debug_{it:05d}_depth.png"),
                    render_out.depth,
                )
                frameio.save_mask_png(
                    os.path.join(out_dir, f"debug_{it:05d}_mask.png"),
                    render_out.mask,
                )

    t0 = time.time()
    best, trace = refine(
        init,
        mesh,
        sensor,
        pseudo,
        cfg.weights,
        cfg.render,
        cfg.optim,
        rgb_only=cfg.rgb_only,
        gt=gt,
        sym=cfg.symmetries,
        extractor=extractor,
        ms_scales=cfg.loss_opts.get("ms_scales", "auto"),
        pm_disentangled=cfg.loss_opts.get("pm_disentangled", True),
        pm_max_points=cfg.loss_opts.get("pm_max_points", 1024),
        lambda1_source=cfg.loss_opts.get("lambda1_source", "amodal"),
        iteration_callback=callback,
    )
    wall = time.time() - t0

    frameio.write_trace_csv(os.path.join(out_dir, "trace.csv"), trace)
    frameio.save_pose_json(os.path.join(out_dir, "pose.json"), best)
    summary = {
        "status": trace.status,
        "iterations": len(trace.records),
        "wall_time_s": wall,
        "initial_total": trace.records[0].total if trace.records else None,
        "best_total": min(r.total for r in trace.records) if trace.records else None,
        "final_total": trace.records[-1].total if trace.records else None,
        "terms_final": trace.records[-1].terms if trace.records else {},
        "rgb_only": cfg.rgb_only,
        "depth_unit_m": frameio.DEPTH_UNIT_M,
    }
    if gt is not None and trace.records:
        summary.update(
            init_rot_err_deg=rotation_angle_error(init, gt),
            init_trans_err_m=translation_error(init, gt),
            final_rot_err_deg=rotation_angle_error(best, gt),
            final_trans_err_m=translation_error(best, gt),
        )
    frameio.write_json(os.path.join(out_dir, "summary.json"), summary)
    if plot_fmt:
        plots.plot_trace(trace, os.path.join(out_dir, f"trace.{plot_fmt}"))
    return trace.status


def cmd_refine(cfg: RunConfig, args) -> int:
    frames = _load_or_synthesize(cfg)
    jobs = []
    for i, (sensor, pseudo, gt) in enumerate(frames):
        out_dir = args.out if len(frames) == 1 else os.path.join(args.out, f"frame_{i:03d}")
        plot_fmt = None if args.no_plots else args.plot_format
        jobs.append((cfg, sensor, pseudo, gt, out_dir, args.debug_renders, plot_fmt))

    if args.jobs > 1 and len(jobs) > 1:
        import concurrent.futures as cf

        with cf.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            statuses = list(pool.map(_refine_one, jobs))
    else:
        statuses = [_refine_one(j) for j in jobs]

    for i, status in enumerate(statuses):
        print(f"frame {i}: {status}")
    return 2 if any(s == "nonfinite" for s in statuses) else 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    pred = frameio.load_poses_json(args.pred)
    gt = frameio.load_poses_json(args.gt)
    if len(pred) != len(gt):
        raise RenderfitError(
            f"entry count mismatch: {len(pred)} predictions vs {len(gt)} ground truths"
        )
    mesh = cfg.build_mesh()
    sym = cfg.symmetries or SymmetrySet.trivial()
    ests = [PoseEstimate(p, g, mesh, sym) for p, g in zip(pred, gt)]

    adds = [e_add(e) for e in ests]
    adds_s = [e_add_s(e) for e in ests]
    angles = [rotation_angle_error(p, g) for p, g in zip(pred, gt)]
    add_s_mix = [s if not sym.is_trivial else a for a, s in zip(adds, adds_s)]

    os.makedirs(args.out, exist_ok=True)
    rows = [
        [i, f"{adds[i]:.9g}", f"{adds_s[i]:.9g}", f"{angles[i]:.9g}"]
        for i in range(len(ests))
    ]
    frameio.write_csv(
        os.path.join(args.out, "evaluation.csv"),
        ["index", "e_add_m", "e_add_s_m", "angle_err_deg"],
        rows,
    )
    summary = {
        "n": len(ests),
        "recall_add_0.1d": add_recall(ests, 0.1, use_adds_for_sym=True),
        "auc_add_s": auc(adds_s, 0.10),
        "auc_add_sym_aware": auc(add_s_mix, 0.10),
        "mean_angle_err_deg": float(np.mean(angles)),
        "mean_e_add_m": float(np.mean(adds)),
        "mean_e_add_s_m": float(np.mean(adds_s)),
        "diameter_m": mesh.diameter,
    }
    frameio.write_json(os.path.join(args.out, "evaluation.json"), summary)
    if not args.no_plots:
        plots.plot_evaluation(
            adds, adds_s, os.path.join(args.out, f"evaluation.{args.plot_format}")
        )
    for key in ("recall_add_0.1d", "auc_add_s", "auc_add_sym_aware", "mean_angle_err_deg"):
        print(f"{key}: {summary[key]:.4f}")
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    report = run_gradcheck(
        n_configs=args.configs,
        seed=cfg.seed,
        weights=cfg.weights,
        rgb_only=cfg.rgb_only,
        sigma=cfg.render.sigma,
        perceptual_seed=cfg.loss_opts.get("perceptual_seed", 0),
        progress=(lambda msg: print(f"  {msg}")) if args.verbose else None,
    )
    os.makedirs(args.out, exist_ok=True)
    payload = {
        "elapsed_s": report.elapsed_s,
        "passed": report.passed,
        "terms": {
            t.name: {
                "median_rel": t.median_rel,
                "max_rel": t.max_rel,
                "n_components": t.n_components,
                "passed": t.passed,
            }
            for t in report.terms
        },
    }
    frameio.write_json(os.path.join(args.out, "gradcheck.json"), payload)
    if not args.no_plots:
        plots.plot_gradcheck(report, os.path.join(args.out, f"gradcheck.{args.plot_format}"))
    for t in report.terms:
        flag = "PASS" if t.passed else "FAIL"
        print(
            f"{flag} {t.name}: median {100 * t.median_rel:.3f}% "
            f"max {100 * t.max_rel:.3f}% over {t.n_components} components"
        )
    print(f"gradcheck {'passed' if report.passed else 'FAILED'} "
          f"in {report.elapsed_s:.1f}s")
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="renderfit",
        description="Render-and-compare 6D pose refinement toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--rgb-only", action="store_true", help="drop the depth objective")
        p.add_argument("--jobs", type=int, default=1, help="parallel frames in batch runs")
        p.add_argument("--debug-renders", action="store_true",
                       help="dump per-iteration renders (refine)")
        p.add_argument("--plot-format", choices=("png", "svg"), default="png")
        p.add_argument("--no-plots", action="store_true", help="skip figure output")

    common(sub.add_parser("render", help="render the configured pose to PNGs"))
    common(sub.add_parser("synth", help="synthesize a frame bundle"))
    common(sub.add_parser("refine", help="refine poses against frames"))

    p_eval = sub.add_parser("evaluate", help="score predicted poses")
    common(p_eval)
    p_eval.add_argument("--pred", required=True, help="predicted poses JSON")
    p_eval.add_argument("--gt", required=True, help="ground-truth poses JSON")

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    common(p_gc)
    p_gc.add_argument("--configs", type=int, default=10, help="number of seeded configs")
    p_gc.add_argument("--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config)
        cfg = _apply_seed(cfg, args.seed)
        if args.rgb_only:
            cfg = dataclasses.replace(cfg, rgb_only=True)
        handler = {
            "render": cmd_render,
            "synth": cmd_synth,
            "refine": cmd_refine,
            "evaluate": cmd_evaluate,
            "gradcheck": cmd_gradcheck,
        }[args.command]
        return handler(cfg, args)
    except MissingDepth as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except RenderfitError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
