"""Command-line pipeline driver.

Subcommands: gen, train, render, baseline, eval, compare. Flags override
config-file values; the PLINK_SEED environment variable overrides the seed
last. Exit codes: 0 success, 2 invalid configuration, 3 training
divergence. All outputs are deterministic given the seed.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import metrics, net as nets, pipeline, sampler
from .config import RunConfig, apply_overrides, load_config
from .errors import ConfigError, DivergenceError, PlinkError
from .sensor import ScanFrame, read_poses
from .simscene import load_scene

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plink",
        description="probabilistic LiDAR field pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", dest="out_dir")
        p.add_argument("--threads", type=int)

    p = sub.add_parser("gen", help="simulate a scan dataset from a scene")
    common(p)
    p.add_argument("--scene", help="scene description file")
    p.add_argument("--path", help="pose path file")
    p.add_argument("--frames", dest="n_frames", type=int)

    p = sub.add_parser("train", help="train the probabilistic model")
    common(p)
    p.add_argument("--data", dest="data_dir")
    p.add_argument("--scene")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("baseline", help="train the deterministic-depth baseline")
    common(p)
    p.add_argument("--data", dest="data_dir")
    p.add_argument("--scene")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("render", help="render point clouds from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--poses", required=True, help="pose file, one cloud per frame")
    p.add_argument("--scene")
    p.add_argument("--mode", dest="render_mode")
    p.add_argument("--level", dest="confidence_level", type=float)
    p.add_argument("--draws", dest="render_draws", type=int)
    p.add_argument("--baseline-depth", action="store_true",
                   help="composited weighted depth instead of distribution modes")

    p = sub.add_parser("eval", help="compare a synthetic cloud against ground truth")
    common(p)
    p.add_argument("--gt", required=True)
    p.add_argument("--synth", required=True)
    p.add_argument("--threshold", dest="threshold_cm", type=float)

    p = sub.add_parser("compare", help="train + baseline + render + eval, side by side")
    common(p)
    p.add_argument("--scene")
    p.add_argument("--path")
    p.add_argument("--epochs", type=int)

    return parser


def resolve_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    overrides = {k: v for k, v in vars(args).items()
                 if k not in ("command", "config", "checkpoint", "poses", "gt",
                              "synth", "baseline_depth")}
    return apply_overrides(config, overrides).validate()


def _require(value, name: str):
    if not value:
        raise ConfigError(f"{name} must be set (flag or config key)")
    return value


def cmd_gen(args) -> int:
    config = resolve_config(args)
    scene = _require(config.scene, "scene")
    path = _require(config.path, "path")
    frames = pipeline.generate_to_disk(scene, path, config.out_dir, config)
    n_rays = frames[0].intrinsics.n_beams * frames[0].intrinsics.azimuth_count
    print(f"wrote {len(frames)} frames x {n_rays} rays to {config.out_dir}")
    return EXIT_OK


def _run_training(args, depth_l2: bool, stem: str) -> int:
    config = resolve_config(args)
    scene = load_scene(_require(config.scene, "scene"))
    frames = pipeline.read_dataset(_require(config.data_dir, "data_dir"))
    train_set = pipeline.train_set_from_frames(frames, scene)
    os.makedirs(config.out_dir, exist_ok=True)
    curve_path = os.path.join(config.out_dir, f"{stem}_loss_curve.csv")
    ckpt_path = os.path.join(config.out_dir, f"{stem}.ckpt")

    state = pipeline.models_from_config(config)

    def on_epoch(epoch, row):
        if (epoch + 1) % config.checkpoint_every == 0:
            nets.save_checkpoint(
                os.path.join(config.out_dir, f"{stem}_epoch_{epoch + 1:04d}.ckpt"),
                state.coarse, state.fine)

    try:
        state, history = pipeline.train(train_set, config, depth_l2,
                                        on_epoch, state=state)
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        nets.save_checkpoint(os.path.join(config.out_dir, f"{stem}_diverged.ckpt"),
                             state.coarse, state.fine)
        return EXIT_DIVERGED

    with open(curve_path, "w") as fh:
        fh.write("epoch,l_c,l_drop,l_coarse,l_fine\n")
        for row in history:
            fh.write(",".join([str(int(row[0]))] + [repr(float(v)) for v in row[1:]]) + "\n")
    nets.save_checkpoint(ckpt_path, state.coarse, state.fine)
    print(f"checkpoint: {ckpt_path}")
    print(f"loss curve: {curve_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    return _run_training(args, depth_l2=False, stem="model")


def cmd_baseline(args) -> int:
    return _run_training(args, depth_l2=True, stem="baseline")


def cmd_render(args) -> int:
    config = resolve_config(args)
    scene = load_scene(_require(config.scene, "scene"))
    coarse, fine = nets.load_checkpoint(args.checkpoint)
    state = sampler.TrainState.fresh(coarse, fine)
    poses = read_poses(args.poses)
    if len(poses) < 2:
        raise ConfigError("pose file needs at least two poses (frame boundaries)")
    intr = pipeline.intrinsics_from_config(config)
    _, scale = pipeline.to_unit_cube(np.zeros((1, 3)), scene.bounds)
    os.makedirs(config.out_dir, exist_ok=True)
    for i in range(len(poses) - 1):
        grid_shape = (intr.n_beams, intr.azimuth_count)
        frame = ScanFrame(intr, poses[i], poses[i + 1],
                          np.zeros(grid_shape), np.zeros(grid_shape, dtype=bool))
        cloud = pipeline.render_frame_cloud(
            state, frame, scale, config, config.render_mode,
            baseline=args.baseline_depth)
        out = os.path.join(config.out_dir, f"cloud_{i:04d}.ply")
        metrics.write_ply(out, cloud)
        print(f"{out}: {len(cloud)} points")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = resolve_config(args)
    gt = metrics.read_cloud(args.gt)
    synth = metrics.read_cloud(args.synth)
    report = metrics.evaluate(gt, synth, config.threshold_cm)
    _print_reports([("synth", report)])
    return EXIT_OK


def _print_reports(named_reports) -> None:
    header = f"{'method':<14}{'completion':>12}{'accuracy':>12}{'chamfer-l1':>12}{'f-score':>10}"
    print(header)
    for name, report in named_reports:
        print(f"{name:<14}{report.completion_cm:>12.3f}{report.accuracy_cm:>12.3f}"
              f"{report.chamfer_l1_cm:>12.3f}{report.f_score_pct:>10.2f}")


def cmd_compare(args) -> int:
    config = resolve_config(args)
    scene_path = _require(config.scene, "scene")
    path_path = _require(config.path, "path")
    scene = load_scene(scene_path)
    out = config.out_dir
    os.makedirs(out, exist_ok=True)

    # Training data, then a fresh stochastic realization as ground truth.
    train_dir = os.path.join(out, "data")
    pipeline.generate_to_disk(scene_path, path_path, train_dir, config)
    test_config = _with(config, seed=config.seed + 1000, out_dir=out)
    test_dir = os.path.join(out, "testdata")
    pipeline.generate_to_disk(scene_path, path_path, test_dir, test_config)

    frames = pipeline.read_dataset(train_dir)
    train_set = pipeline.train_set_from_frames(frames, scene)

    try:
        prob_state, prob_history = pipeline.train(train_set, config, depth_l2=False)
        base_state, base_history = pipeline.train(train_set, config, depth_l2=True)
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED

    _write_history(os.path.join(out, "model_loss_curve.csv"), prob_history)
    _write_history(os.path.join(out, "baseline_loss_curve.csv"), base_history)
    nets.save_checkpoint(os.path.join(out, "model.ckpt"),
                         prob_state.coarse, prob_state.fine)
    nets.save_checkpoint(os.path.join(out, "baseline.ckpt"),
                         base_state.coarse, base_state.fine)

    test_frames = pipeline.read_dataset(test_dir)
    gt_clouds, prob_clouds, base_clouds = [], [], []
    for i, frame in enumerate(test_frames):
        gt = pipeline.ground_truth_cloud(frame)
        prob = pipeline.render_frame_cloud(prob_state, frame, train_set.scale,
                                           config, "stochastic")
        base = pipeline.render_frame_cloud(base_state, frame, train_set.scale,
                                           config, "stochastic", baseline=True)
        gt_clouds.append(gt)
        prob_clouds.append(prob)
        base_clouds.append(base)
        metrics.write_ply(os.path.join(out, f"gt_{i:04d}.ply"), gt)
        metrics.write_ply(os.path.join(out, f"model_{i:04d}.ply"), prob)
        metrics.write_ply(os.path.join(out, f"baseline_{i:04d}.ply"), base)

    rows = []
    named = []
    for name, clouds in (("model", prob_clouds), ("baseline", base_clouds)):
        merged = metrics.PointCloud(np.concatenate([c.points for c in clouds]))
        gt_merged = metrics.PointCloud(np.concatenate([c.points for c in gt_clouds]))
        aggregate = metrics.evaluate(gt_merged, merged, config.threshold_cm)
        per_scan = [metrics.evaluate(g, c, config.threshold_cm)
                    for g, c in zip(gt_clouds, clouds) if len(g) and len(c)]
        mean_row = (np.mean([r.as_row() for r in per_scan], axis=0)
                    if per_scan else np.full(5, np.nan))
        rows.append([name, "aggregate"] + [repr(float(v)) for v in aggregate.as_row()])
        rows.append([name, "per_scan_mean"] + [repr(float(v)) for v in mean_row])
        named.append((name, aggregate))

    report_path = os.path.join(out, "report.csv")
    with open(report_path, "w") as fh:
        fh.write("method,scope,completion_cm,accuracy_cm,chamfer_l1_cm,f_score_pct,threshold_cm\n")
        for row in rows:
            fh.write(",".join(row) + "\n")
    _print_reports(named)
    print(f"report: {report_path}")
    return EXIT_OK


def _with(config: RunConfig, **kwargs) -> RunConfig:
    import copy

    out = copy.deepcopy(config)
    for key, value in kwargs.items():
        setattr(out, key, value)
    return out


def _write_history(path, history) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,l_c,l_drop,l_coarse,l_fine\n")
        for row in history:
            fh.write(",".join([str(int(row[0]))] + [repr(float(v)) for v in row[1:]]) + "\n")


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "baseline": cmd_baseline,
    "render": cmd_render,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except PlinkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
