"""Dataset assembly, the epoch loop, and novel-view rendering.

Ray grouping rule: measurements aggregate per exact emitted-ray identity.
For a static-path dataset every frame repeats the same rays, so samples
pool across frames per (beam, azimuth); for a moving path each
(frame, beam, azimuth) is its own ray with at most one measurement.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import net as nets
from . import sampler
from .config import RunConfig
from .errors import InvalidInputError
from .field import (DROP, CdfTrace, Ray, SampleGrid, cdf_from_sigma_values,
                    bin_masses, inverse_transform_sample, is_drop,
                    render_confidence, trapezoid_deltas)
from .losses import LossBreakdown
from .metrics import PointCloud
from .sensor import (Pose, ScanFrame, SensorIntrinsics, UnitCubeScale,
                     motion_compensate, read_poses, read_scan,
                     sensor_frame_directions, to_unit_cube, write_poses,
                     write_scan)
from .simscene import SceneSpec, generate_dataset, load_scene


@dataclass
class TrainSet:
    """Grouped rays plus the world-to-unit-cube transform they live in."""

    rays: list
    scale: UnitCubeScale
    s_max: float


def frames_static(frames: list) -> bool:
    first = frames[0]
    return all(
        np.array_equal(f.start_pose.rotation, first.start_pose.rotation)
        and np.array_equal(f.start_pose.translation, first.start_pose.translation)
        and np.array_equal(f.end_pose.rotation, first.end_pose.rotation)
        and np.array_equal(f.end_pose.translation, first.end_pose.translation)
        for f in frames
    )


def build_rays(frames: list) -> list:
    """Group frame measurements into training rays (see module docstring)."""
    if not frames:
        raise InvalidInputError("need at least one frame")
    intr = frames[0].intrinsics
    rays = []
    if frames_static(frames):
        frame0 = frames[0]
        poses = motion_compensate(frame0)
        local = sensor_frame_directions(intr)
        for b in range(intr.n_beams):
            for a in range(intr.azimuth_count):
                pose = poses[a]
                direction = local[b, a, :] @ pose.rotation.T
                values = [f.ranges[b, a] for f in frames if f.returned[b, a]]
                rays.append(Ray(
                    origin=pose.translation,
                    direction=direction,
                    s_max=intr.s_max,
                    measurements=np.sort(np.asarray(values)),
                    drop_flag=1 if values else 0,
                    ray_id=b * intr.azimuth_count + a,
                ))
        return rays
    ray_id = 0
    for frame in frames:
        poses = motion_compensate(frame)
        local = sensor_frame_directions(intr)
        for b in range(intr.n_beams):
            for a in range(intr.azimuth_count):
                pose = poses[a]
                direction = local[b, a, :] @ pose.rotation.T
                returned = bool(frame.returned[b, a])
                rays.append(Ray(
                    origin=pose.translation,
                    direction=direction,
                    s_max=intr.s_max,
                    measurements=np.array([frame.ranges[b, a]]) if returned else np.empty(0),
                    drop_flag=1 if returned else 0,
                    ray_id=ray_id,
                ))
                ray_id += 1
    return rays


def train_set_from_frames(frames: list, scene: SceneSpec) -> TrainSet:
    _, scale = to_unit_cube(np.zeros((1, 3)), scene.bounds)
    rays = build_rays(frames)
    return TrainSet(rays, scale, frames[0].intrinsics.s_max)


def intrinsics_from_config(config: RunConfig) -> SensorIntrinsics:
    return SensorIntrinsics(
        elevation_angles=np.asarray(config.elevations, dtype=float),
        azimuth_count=config.azimuth_count,
        s_max=config.s_max,
        scan_period=config.scan_period,
    )


def models_from_config(config: RunConfig):
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0xC0A23E)))
    coarse = nets.init_model(
        config.encoding_levels, config.dir_levels, config.use_direction,
        [config.hidden_width] * config.hidden_layers, has_phi_head=False,
        rng=rng, sigma_bias=config.sigma_bias)
    fine = nets.init_model(
        config.encoding_levels, config.dir_levels, config.use_direction,
        [config.hidden_width] * config.hidden_layers, has_phi_head=True,
        rng=rng, sigma_bias=config.sigma_bias)
    return sampler.TrainState.fresh(coarse, fine)


def train(train_set: TrainSet, config: RunConfig, depth_l2: bool = False,
          on_epoch=None, state: sampler.TrainState | None = None) -> tuple:
    """Run the epoch loop; returns (state, per-epoch loss rows).

    Pass a pre-built state to keep a handle on it across a divergence
    abort (the caller can then dump a diagnostic checkpoint).
    """
    if state is None:
        state = models_from_config(config)
    step_config = sampler.StepConfig(
        n_bins=config.n_bins, n_fine=config.n_fine, lr=config.lr,
        alpha=config.alpha, seed=config.seed, depth_l2=depth_l2)
    order_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x0BDE4)))
    history = []
    rays = train_set.rays
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(rays))
        totals = np.zeros(4)
        n_steps = 0
        for start in range(0, len(rays), config.batch_rays):
            batch = [rays[i] for i in order[start:start + config.batch_rays]]
            losses = sampler.train_step(state, batch, step_config,
                                        train_set.scale, epoch=epoch)
            totals += [losses.l_c, losses.l_drop, losses.l_coarse, losses.l_fine]
            n_steps += 1
        row = totals / n_steps
        history.append([epoch] + row.tolist())
        if on_epoch is not None:
            on_epoch(epoch, row)
    return state, history


# -- rendering --------------------------------------------------------------------


@dataclass
class RayRender:
    """Field evaluations along one render ray."""

    trace: CdfTrace
    phi: np.ndarray
    q_hat: float


def evaluate_ray(state: sampler.TrainState, ray: Ray, scale: UnitCubeScale,
                 n_bins: int, n_fine: int) -> RayRender:
    """Coarse-to-fine evaluation of the trained fields along a single ray."""
    grid = sampler.coarse_bins(ray, n_bins)
    hist = sampler.histogram_from_coarse(state.coarse, ray, grid, scale)
    points = sampler.quantile_points(hist, n_fine)
    edges = sampler.uniform_bin_edges(ray.s_max, n_bins)
    gammas = sampler.strictify(np.sort(np.concatenate([points.points, edges])))
    deltas = trapezoid_deltas(gammas)
    world = ray.point_at(gammas)
    feats = nets.encode(
        scale.apply(world),
        np.broadcast_to(ray.direction, world.shape) if state.fine.use_direction else None,
        state.fine.encoding_levels, state.fine.dir_levels)
    sigma, phi = nets.forward(state.fine, feats)
    cdf, survival = cdf_from_sigma_values(sigma, deltas)
    trace = CdfTrace(SampleGrid(gammas, deltas), cdf, survival)
    masses = bin_masses(cdf)
    q_hat = float(expit(np.dot(masses, phi)))
    return RayRender(trace, phi, q_hat)


def render_ray(render: RayRender, mode: str, *, draws: int = 3, level: float = 0.5,
               peak_threshold: float = 0.05, rng=None, drop_gate: bool = True) -> list:
    """Ranges (possibly several, possibly none) for one evaluated ray."""
    if drop_gate and render.q_hat < 0.5:
        return []
    trace = render.trace
    if mode == "stochastic":
        out = []
        for _ in range(draws):
            sample = inverse_transform_sample(trace, float(rng.uniform(1e-12, 1.0)))
            if not is_drop(sample):
                out.append(sample)
        return out
    if mode == "confidence":
        sample = render_confidence(trace, level)
        return [] if is_drop(sample) else [sample]
    masses = bin_masses(trace.cdf)
    if mode == "strongest-return":
        if masses.size == 0 or masses.max() < peak_threshold:
            return []
        return [float(trace.grid.gammas[int(np.argmax(masses))])]
    if mode == "first-return":
        above = np.flatnonzero(masses >= peak_threshold)
        if above.size == 0:
            return []
        return [float(trace.grid.gammas[int(above[0])])]
    raise InvalidInputError(f"unknown render mode {mode!r}")


def render_baseline_ray(render: RayRender, drop_gate: bool = True) -> list:
    """Deterministic weighted-depth rendering used by the baseline model."""
    if drop_gate and render.q_hat < 0.5:
        return []
    masses = bin_masses(render.trace.cdf)
    total = masses.sum()
    if total <= 1e-6:
        return []
    return [float(np.dot(masses / total, render.trace.grid.gammas))]


def render_frame_cloud(state: sampler.TrainState, frame: ScanFrame,
                       scale: UnitCubeScale, config: RunConfig, mode: str,
                       baseline: bool = False) -> PointCloud:
    """Point cloud for one sensor pose, all beams and azimuth steps.

    Rays are evaluated in parallel chunks (``threads`` config key); the
    result order is fixed, so output bytes do not depend on scheduling.
    Stochastic draws come from per-ray streams keyed on the config seed.
    """
    intr = frame.intrinsics
    poses = motion_compensate(frame)
    local = sensor_frame_directions(intr)
    n_fine = config.render_fine or config.n_fine
    jobs = []
    for b in range(intr.n_beams):
        for a in range(intr.azimuth_count):
            pose = poses[a]
            direction = local[b, a, :] @ pose.rotation.T
            jobs.append((b * intr.azimuth_count + a, pose.translation, direction))

    def run(job):
        ray_id, origin, direction = job
        ray = Ray(origin, direction, intr.s_max, ray_id=ray_id)
        render = evaluate_ray(state, ray, scale, config.n_bins, n_fine)
        rng = sampler.ray_rng(config.seed, ray_id, epoch=-1)
        if baseline:
            ranges = render_baseline_ray(render)
        else:
            ranges = render_ray(render, mode, draws=config.render_draws,
                                level=config.confidence_level,
                                peak_threshold=config.peak_threshold, rng=rng)
        return [origin + s * direction for s in ranges]

    workers = config.threads if config.threads > 0 else (os.cpu_count() or 1)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]
    points = [p for chunk in results for p in chunk]
    return PointCloud(np.asarray(points) if points else np.empty((0, 3)))


def ground_truth_cloud(frame: ScanFrame) -> PointCloud:
    """World-frame points of a frame's returned measurements (drops excluded)."""
    intr = frame.intrinsics
    poses = motion_compensate(frame)
    local = sensor_frame_directions(intr)
    points = []
    for b in range(intr.n_beams):
        for a in range(intr.azimuth_count):
            if frame.returned[b, a]:
                pose = poses[a]
                direction = local[b, a, :] @ pose.rotation.T
                points.append(pose.translation + frame.ranges[b, a] * direction)
    return PointCloud(np.asarray(points) if points else np.empty((0, 3)))


# -- dataset directory layout -------------------------------------------------------


def write_dataset(out_dir, frames: list, path_poses: list) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_poses(os.path.join(out_dir, "poses.csv"), path_poses)
    intr = frames[0].intrinsics
    with open(os.path.join(out_dir, "intrinsics.txt"), "w") as fh:
        fh.write("elevations = " + " ".join(repr(float(e)) for e in intr.elevation_angles) + "\n")
        fh.write(f"azimuth_count = {intr.azimuth_count}\n")
        fh.write(f"s_max = {intr.s_max!r}\n")
        fh.write(f"scan_period = {intr.scan_period!r}\n")
    for i, frame in enumerate(frames):
        write_scan(os.path.join(out_dir, f"scan_{i:04d}.csv"), frame)


def read_dataset(data_dir) -> list:
    intr = _read_intrinsics(os.path.join(data_dir, "intrinsics.txt"))
    poses = read_poses(os.path.join(data_dir, "poses.csv"))
    frames = []
    i = 0
    while True:
        path = os.path.join(data_dir, f"scan_{i:04d}.csv")
        if not os.path.exists(path):
            break
        if i + 1 >= len(poses):
            raise InvalidInputError("pose sidecar is shorter than the scan list")
        frames.append(read_scan(path, intr, poses[i], poses[i + 1]))
        i += 1
    if not frames:
        raise InvalidInputError(f"no scan files found in {data_dir}")
    return frames


def _read_intrinsics(path) -> SensorIntrinsics:
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, raw = (part.strip() for part in line.split("=", 1))
            values[key] = raw
    return SensorIntrinsics(
        elevation_angles=np.array([float(v) for v in values["elevations"].split()]),
        azimuth_count=int(values["azimuth_count"]),
        s_max=float(values["s_max"]),
        scan_period=float(values["scan_period"]),
    )


def resample_path(poses: list, n_frames: int) -> list:
    """Expand a two-pose path into n_frames + 1 interpolated poses.

    Paths with more than two poses are taken verbatim (one frame per
    consecutive pair) and n_frames is ignored.
    """
    if len(poses) != 2 or n_frames == 1:
        return poses
    from .sensor import matrix_from_quat, quat_from_matrix, quat_slerp

    start, end = poses
    static = (np.array_equal(start.rotation, end.rotation)
              and np.array_equal(start.translation, end.translation))
    q0, q1 = quat_from_matrix(start.rotation), quat_from_matrix(end.rotation)
    out = []
    for k in range(n_frames + 1):
        f = k / n_frames
        t = (1.0 - f) * start.timestamp + f * end.timestamp
        if static:
            out.append(Pose(start.rotation, start.translation, t))
        else:
            rot = matrix_from_quat(quat_slerp(q0, q1, f))
            trans = (1.0 - f) * start.translation + f * end.translation
            out.append(Pose(rot, trans, t))
    return out


def generate_to_disk(scene_path, pose_path, out_dir, config: RunConfig) -> list:
    """cmd-gen workhorse: simulate frames along the path and write them out."""
    scene = load_scene(scene_path)
    path_poses = resample_path(read_poses(pose_path), config.n_frames)
    intr = intrinsics_from_config(config)
    frames = generate_dataset(scene, path_poses, intr, config.seed)
    write_dataset(out_dir, frames, path_poses)
    return frames
