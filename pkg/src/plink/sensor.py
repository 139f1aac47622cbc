"""LiDAR geometry: spherical ray generation, motion compensation, scaling.

A mechanically spinning sensor samples a spherical projection surface: one
elevation angle per beam, azimuth advancing with the rotor. Because the
projection model is natively spherical, scan patching exists purely as a
batching convenience; no planar reprojection is ever performed.

On-disk formats:
  scan file   CSV with columns beam_idx, azimuth_idx, range_m, drop_flag,
              t_offset_s (range_m is meaningless where drop_flag == 0)
  pose file   CSV with columns t_s, tx, ty, tz, qw, qx, qy, qz
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InvalidFrameError, InvalidInputError
from .field import DROP, Drop

ORTHONORMAL_TOL = 1e-9


@dataclass
class SensorIntrinsics:
    """Beam layout and timing of one spinning LiDAR unit."""

    elevation_angles: np.ndarray
    azimuth_count: int
    s_max: float
    scan_period: float

    def __post_init__(self):
        self.elevation_angles = np.asarray(self.elevation_angles, dtype=float)
        if self.elevation_angles.ndim != 1 or self.elevation_angles.size == 0:
            raise InvalidInputError("need at least one beam elevation")
        if np.any(np.diff(self.elevation_angles) <= 0.0):
            raise InvalidInputError("elevation angles must be strictly increasing")
        if np.any(np.abs(self.elevation_angles) >= np.pi / 2):
            raise InvalidInputError("elevations must lie inside (-pi/2, pi/2)")
        if self.azimuth_count < 1:
            raise InvalidInputError("azimuth_count must be at least 1")

    @property
    def n_beams(self) -> int:
        return self.elevation_angles.size


@dataclass
class Pose:
    """Rigid transform (sensor to world) at a timestamp."""

    rotation: np.ndarray
    translation: np.ndarray
    timestamp: float

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise InvalidInputError("pose needs a 3x3 rotation and a 3-vector")
        if np.max(np.abs(self.rotation.T @ self.rotation - np.eye(3))) > ORTHONORMAL_TOL:
            raise InvalidInputError("rotation must be orthonormal")
        if np.linalg.det(self.rotation) < 0.0:
            raise InvalidInputError("rotation must be proper (det +1)")


@dataclass
class ScanFrame:
    """One full revolution of measurements between two boundary poses."""

    intrinsics: SensorIntrinsics
    start_pose: Pose
    end_pose: Pose
    ranges: np.ndarray      # (n_beams, azimuth_count), value where returned
    returned: np.ndarray    # bool mask, False marks ray drop

    def __post_init__(self):
        shape = (self.intrinsics.n_beams, self.intrinsics.azimuth_count)
        self.ranges = np.asarray(self.ranges, dtype=float)
        self.returned = np.asarray(self.returned, dtype=bool)
        if self.ranges.shape != shape or self.returned.shape != shape:
            raise InvalidInputError("measurement grid must match the intrinsics")

    def measurement(self, beam: int, azimuth: int):
        if self.returned[beam, azimuth]:
            return float(self.ranges[beam, azimuth])
        return DROP

    def sample_times(self) -> np.ndarray:
        """Per-azimuth-step sample times, offset from the frame start."""
        az = np.arange(self.intrinsics.azimuth_count)
        return self.start_pose.timestamp + (az / self.intrinsics.azimuth_count) \
            * self.intrinsics.scan_period


def sensor_frame_directions(intrinsics: SensorIntrinsics) -> np.ndarray:
    """Unit beam directions in the sensor frame, shape (n_beams, n_az, 3)."""
    theta = 2.0 * np.pi * np.arange(intrinsics.azimuth_count) / intrinsics.azimuth_count
    elev = intrinsics.elevation_angles[:, None]
    return np.stack([
        np.cos(elev) * np.cos(theta),
        np.cos(elev) * np.sin(theta),
        np.broadcast_to(np.sin(elev), (intrinsics.n_beams, theta.size)),
    ], axis=-1)


def motion_compensate(frame: ScanFrame) -> list:
    """Pose for every azimuth step via linear/spherical-linear interpolation."""
    start, end = frame.start_pose, frame.end_pose
    if end.timestamp <= start.timestamp:
        raise InvalidFrameError("end pose must be later than the start pose")
    times = frame.sample_times()
    static = (np.array_equal(start.rotation, end.rotation)
              and np.array_equal(start.translation, end.translation))
    if static:
        # Bitwise no-op for identity motion; skips quaternion round-trips.
        return [Pose(start.rotation, start.translation, float(t)) for t in times]
    fractions = (times - start.timestamp) / (end.timestamp - start.timestamp)
    q0 = quat_from_matrix(start.rotation)
    q1 = quat_from_matrix(end.rotation)
    poses = []
    for t, f in zip(times, fractions):
        rot = matrix_from_quat(quat_slerp(q0, q1, float(f)))
        trans = (1.0 - f) * start.translation + f * end.translation
        poses.append(Pose(rot, trans, float(t)))
    return poses


def ray_directions(intrinsics: SensorIntrinsics, frame: ScanFrame):
    """World-frame origins and directions for every (beam, azimuth) sample.

    Returns (origins, directions), each (n_beams, azimuth_count, 3), with
    the pose interpolated at each sample's time.
    """
    local = sensor_frame_directions(intrinsics)
    poses = motion_compensate(frame)
    origins = np.empty((intrinsics.n_beams, intrinsics.azimuth_count, 3))
    directions = np.empty_like(origins)
    for a, pose in enumerate(poses):
        directions[:, a, :] = local[:, a, :] @ pose.rotation.T
        origins[:, a, :] = pose.translation
    return origins, directions


def patch_scan(frame: ScanFrame, azimuth_patches: int) -> list:
    """Azimuth-interval batches of (beam, azimuth) index pairs.

    Batching only; the spherical model is exact, so no reprojection happens.
    The final patch is ragged when the patch count does not divide the
    azimuth count.
    """
    if azimuth_patches < 1:
        raise InvalidInputError("need at least one patch")
    n_az = frame.intrinsics.azimuth_count
    per = int(np.ceil(n_az / azimuth_patches))
    batches = []
    for start in range(0, n_az, per):
        az = np.arange(start, min(start + per, n_az))
        beams = np.arange(frame.intrinsics.n_beams)
        bb, aa = np.meshgrid(beams, az, indexing="ij")
        batches.append(np.stack([bb.ravel(), aa.ravel()], axis=1))
    return batches


# -- unit-cube scaling ---------------------------------------------------------


@dataclass
class UnitCubeScale:
    """Invertible uniform scale + translation taking world bounds to [-1, 1]^3."""

    center: np.ndarray
    scale: float

    def apply(self, points):
        return (np.asarray(points, dtype=float) - self.center) * self.scale

    def invert(self, points):
        return np.asarray(points, dtype=float) / self.scale + self.center


def to_unit_cube(points, bounds):
    """Scale points into the unit cube defined by axis-aligned world bounds.

    Returns (scaled_points, UnitCubeScale); the scale is uniform (largest
    bound extent wins) so geometry is preserved.
    """
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    extent = hi - lo
    if np.any(extent <= 0.0):
        raise InvalidInputError("bounds must have positive extent")
    scale = 2.0 / float(extent.max())
    transform = UnitCubeScale(center=0.5 * (lo + hi), scale=scale)
    return transform.apply(points), transform


# -- quaternion helpers (w, x, y, z convention, scalar first) -------------------


def quat_from_matrix(rot: np.ndarray) -> np.ndarray:
    m = np.asarray(rot, dtype=float)
    trace = np.trace(m)
    if trace > 0.0:
        s = 0.5 / np.sqrt(trace + 1.0)
        w = 0.25 / s
        x = (m[2, 1] - m[1, 2]) * s
        y = (m[0, 2] - m[2, 0]) * s
        z = (m[1, 0] - m[0, 1]) * s
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        w = (m[2, 1] - m[1, 2]) / s
        x = 0.25 * s
        y = (m[0, 1] + m[1, 0]) / s
        z = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        w = (m[0, 2] - m[2, 0]) / s
        x = (m[0, 1] + m[1, 0]) / s
        y = 0.25 * s
        z = (m[1, 2] + m[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        w = (m[1, 0] - m[0, 1]) / s
        x = (m[0, 2] + m[2, 0]) / s
        y = (m[1, 2] + m[2, 1]) / s
        z = 0.25 * s
    q = np.array([w, x, y, z])
    return q / np.linalg.norm(q)


def matrix_from_quat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def quat_slerp(q0: np.ndarray, q1: np.ndarray, fraction: float) -> np.ndarray:
    """Shortest-path spherical interpolation between unit quaternions."""
    q0 = q0 / np.linalg.norm(q0)
    q1 = q1 / np.linalg.norm(q1)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1, dot = -q1, -dot
    if dot > 1.0 - 1e-12:
        out = (1.0 - fraction) * q0 + fraction * q1
        return out / np.linalg.norm(out)
    angle = np.arccos(np.clip(dot, -1.0, 1.0))
    return (np.sin((1.0 - fraction) * angle) * q0
            + np.sin(fraction * angle) * q1) / np.sin(angle)


# -- file IO ---------------------------------------------------------------------

SCAN_HEADER = ["beam_idx", "azimuth_idx", "range_m", "drop_flag", "t_offset_s"]
POSE_HEADER = ["t_s", "tx", "ty", "tz", "qw", "qx", "qy", "qz"]


def write_scan(path, frame: ScanFrame) -> None:
    times = frame.sample_times() - frame.start_pose.timestamp
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCAN_HEADER)
        for b in range(frame.intrinsics.n_beams):
            for a in range(frame.intrinsics.azimuth_count):
                returned = bool(frame.returned[b, a])
                writer.writerow([
                    b, a,
                    repr(float(frame.ranges[b, a])) if returned else "0.0",
                    int(returned),
                    repr(float(times[a])),
                ])


def read_scan(path, intrinsics: SensorIntrinsics, start_pose: Pose, end_pose: Pose) -> ScanFrame:
    shape = (intrinsics.n_beams, intrinsics.azimuth_count)
    ranges = np.zeros(shape)
    returned = np.zeros(shape, dtype=bool)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != SCAN_HEADER:
            raise InvalidInputError(f"unexpected scan header in {path}")
        for row in reader:
            b, a = int(row[0]), int(row[1])
            returned[b, a] = bool(int(row[3]))
            ranges[b, a] = float(row[2])
    return ScanFrame(intrinsics, start_pose, end_pose, ranges, returned)


def write_poses(path, poses: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(POSE_HEADER)
        for pose in poses:
            q = quat_from_matrix(pose.rotation)
            writer.writerow([repr(float(pose.timestamp))]
                            + [repr(float(v)) for v in pose.translation]
                            + [repr(float(v)) for v in q])


def read_poses(path) -> list:
    poses = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != POSE_HEADER:
            raise InvalidInputError(f"unexpected pose header in {path}")
        for row in reader:
            t = float(row[0])
            trans = np.array([float(v) for v in row[1:4]])
            quat = np.array([float(v) for v in row[4:8]])
            poses.append(Pose(matrix_from_quat(quat), trans, t))
    return poses
