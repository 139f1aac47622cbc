"""Analytic scenes and the stochastic return generator.

Surfaces are infinitesimally thin rectangles (or axis-aligned boxes, which
expand to their six faces). Each carries a return probability p: a pulse
reaching the surface reflects with probability p and is transmitted
otherwise, so the exact cumulative return distribution along any ray is a
jump list - the discrete analogue of the exponential field integral. A
surface also carries an incidence-angle limit beyond which a reflection is
recorded as a ray drop instead of a return.

Scene file grammar (flat key-value, '#' comments, one [surface] section per
surface; vectors are whitespace-separated):

    bounds = xmin ymin zmin xmax ymax zmax
    [surface]
    kind = rect | box
    origin = x y z          # rect center, or box min corner
    normal = x y z          # rect only
    extent = hu hv          # rect half-widths, or box full sizes (3 values)
    return_prob = 0.5
    oblique_drop_deg = 90
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .field import DROP, CdfTrace, Ray, SampleGrid, is_drop
from .sensor import (Pose, ScanFrame, SensorIntrinsics, motion_compensate,
                     sensor_frame_directions)


def _tangent_frame(normal: np.ndarray):
    """Deterministic in-plane axes for a unit normal."""
    helper = np.array([0.0, 0.0, 1.0])
    if abs(normal[2]) > 0.9:
        helper = np.array([1.0, 0.0, 0.0])
    u = np.cross(normal, helper)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    return u, v


@dataclass
class SceneSurface:
    """A thin rectangle with a reflection probability and an oblique limit."""

    origin: np.ndarray
    normal: np.ndarray
    extent: np.ndarray          # half-widths along the two in-plane axes
    return_prob: float = 1.0
    oblique_drop_angle: float = np.pi / 2

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.normal = np.asarray(self.normal, dtype=float)
        self.extent = np.asarray(self.extent, dtype=float)
        norm = np.linalg.norm(self.normal)
        if norm == 0.0:
            raise InvalidInputError("surface normal must be nonzero")
        self.normal = self.normal / norm
        if not (0.0 < self.return_prob <= 1.0):
            raise InvalidInputError("return probability must lie in (0, 1]")
        if np.any(self.extent <= 0.0):
            raise InvalidInputError("extent must be positive")

    def intersect(self, origin: np.ndarray, direction: np.ndarray):
        """Path distance to the rectangle, or None when the ray misses it."""
        denom = float(np.dot(direction, self.normal))
        if abs(denom) < 1e-12:
            return None
        s = float(np.dot(self.origin - origin, self.normal)) / denom
        if s <= 1e-9:
            return None
        hit = origin + s * direction
        u, v = _tangent_frame(self.normal)
        local = hit - self.origin
        if abs(float(np.dot(local, u))) > self.extent[0] + 1e-12:
            return None
        if abs(float(np.dot(local, v))) > self.extent[1] + 1e-12:
            return None
        return s

    def incidence_angle(self, direction: np.ndarray) -> float:
        """Angle from the surface normal, in [0, pi/2]."""
        cos_i = abs(float(np.dot(direction, self.normal)))
        return float(np.arccos(np.clip(cos_i, 0.0, 1.0)))


def box_faces(min_corner, size, return_prob=1.0, oblique_drop_angle=np.pi / 2) -> list:
    """Six rectangle faces of an axis-aligned box."""
    lo = np.asarray(min_corner, dtype=float)
    size = np.asarray(size, dtype=float)
    hi = lo + size
    center = 0.5 * (lo + hi)
    half = 0.5 * size
    faces = []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            normal = np.zeros(3)
            normal[axis] = sign
            others = [i for i in range(3) if i != axis]
            # extent order must match the deterministic tangent frame of `normal`
            u, v = _tangent_frame(normal)
            ext = np.array([
                sum(abs(u[i]) * half[i] for i in others),
                sum(abs(v[i]) * half[i] for i in others),
            ])
            origin = center.copy()
            origin[axis] = lo[axis] if sign < 0 else hi[axis]
            faces.append(SceneSurface(origin, normal, ext,
                                      return_prob, oblique_drop_angle))
    return faces


@dataclass
class SceneSpec:
    """Surface list plus the axis-aligned bounds of the sensing volume."""

    surfaces: list
    bounds: tuple

    def __post_init__(self):
        lo, hi = (np.asarray(b, dtype=float) for b in self.bounds)
        self.bounds = (lo, hi)
        if np.any(hi <= lo):
            raise InvalidInputError("bounds must have positive extent")
        for surface in self.surfaces:
            if np.any(surface.origin < lo - 1e-9) or np.any(surface.origin > hi + 1e-9):
                raise InvalidInputError("all surfaces must lie inside the bounds")


def ray_hits(scene: SceneSpec, origin, direction, s_max: float) -> list:
    """(distance, surface) pairs within range, sorted by distance."""
    hits = []
    for surface in scene.surfaces:
        s = surface.intersect(np.asarray(origin, float), np.asarray(direction, float))
        if s is not None and s <= s_max:
            hits.append((s, surface))
    hits.sort(key=lambda pair: pair[0])
    return hits


def trace_true_cdf(scene: SceneSpec, ray: Ray) -> CdfTrace:
    """Exact cumulative return distribution along a ray, as a jump list.

    Walking the surfaces in distance order, surface m contributes a jump of
    height P_reach * p_m (zero when its incidence exceeds the oblique limit,
    since such reflections drop) and multiplies P_reach by (1 - p_m) either
    way. The returned trace holds the jump locations and post-jump values;
    total mass plus drop probability is exactly 1.
    """
    hits = ray_hits(scene, ray.origin, ray.direction, ray.s_max)
    distances, values = [], []
    reach = 1.0
    total = 0.0
    for s, surface in hits:
        returns = surface.incidence_angle(ray.direction) <= surface.oblique_drop_angle
        if returns:
            total += reach * surface.return_prob
            if distances and s - distances[-1] <= 1e-9:
                values[-1] = total  # coincident surfaces merge into one jump
            else:
                distances.append(s)
                values.append(total)
        reach *= 1.0 - surface.return_prob
    if not distances:
        empty = np.empty(0)
        grid = SampleGrid(empty, empty)
        return CdfTrace(grid, empty.copy(), empty.copy())
    gammas = np.asarray(distances)
    if gammas.size == 1:
        grid = SampleGrid(gammas, np.array([gammas[0]]))
    else:
        grid = SampleGrid.from_gammas(gammas)
    cdf = np.asarray(values)
    return CdfTrace(grid, cdf, 1.0 - cdf)


def sample_return(scene: SceneSpec, ray: Ray, rng):
    """One stochastic pulse outcome: a range in meters or DROP."""
    for s, surface in ray_hits(scene, ray.origin, ray.direction, ray.s_max):
        if rng.random() < surface.return_prob:
            if surface.incidence_angle(ray.direction) > surface.oblique_drop_angle:
                return DROP
            return float(s)
    return DROP


def generate_dataset(scene: SceneSpec, sensor_path: list, intrinsics: SensorIntrinsics,
                     seed: int) -> list:
    """Simulated scan frames along a pose path, reproducible from the seed.

    ``sensor_path`` needs n_frames + 1 timestamped poses; frame i spans
    poses i and i + 1. Every (frame, beam, azimuth) sample has its own
    substream so frame order never changes the outcome.
    """
    if len(sensor_path) < 2:
        raise InvalidInputError("need at least two path poses")
    frames = []
    for f in range(len(sensor_path) - 1):
        start, end = sensor_path[f], sensor_path[f + 1]
        shape = (intrinsics.n_beams, intrinsics.azimuth_count)
        ranges = np.zeros(shape)
        returned = np.zeros(shape, dtype=bool)
        frame = ScanFrame(intrinsics, start, end, ranges, returned)
        poses = motion_compensate(frame)
        local = sensor_frame_directions(intrinsics)
        for a, pose in enumerate(poses):
            dirs = local[:, a, :] @ pose.rotation.T
            for b in range(intrinsics.n_beams):
                ray = Ray(pose.translation, dirs[b], intrinsics.s_max)
                rng = np.random.default_rng(np.random.SeedSequence((seed, f, b, a)))
                outcome = sample_return(scene, ray, rng)
                if not is_drop(outcome):
                    ranges[b, a] = outcome
                    returned[b, a] = True
        frames.append(frame)
    return frames


# -- scene file IO ---------------------------------------------------------------


def parse_scene(text: str) -> SceneSpec:
    bounds = None
    surfaces = []
    current = None

    def flush(section):
        if section is None:
            return
        kind = section.get("kind", "rect")
        prob = float(section.get("return_prob", 1.0))
        oblique = np.deg2rad(float(section.get("oblique_drop_deg", 90.0)))
        origin = _vector(section, "origin", 3)
        if kind == "rect":
            surfaces.append(SceneSurface(origin, _vector(section, "normal", 3),
                                         _vector(section, "extent", 2), prob, oblique))
        elif kind == "box":
            surfaces.extend(box_faces(origin, _vector(section, "extent", 3),
                                      prob, oblique))
        else:
            raise InvalidInputError(f"unknown surface kind {kind!r}")

    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line == "[surface]":
            flush(current)
            current = {}
            continue
        if "=" not in line:
            raise InvalidInputError(f"expected key = value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if current is None:
            if key != "bounds":
                raise InvalidInputError(f"unexpected top-level key {key!r}")
            numbers = [float(v) for v in value.split()]
            if len(numbers) != 6:
                raise InvalidInputError("bounds needs six numbers")
            bounds = (numbers[:3], numbers[3:])
        else:
            current[key] = value
    flush(current)
    if bounds is None:
        raise InvalidInputError("scene file must declare bounds")
    return SceneSpec(surfaces, bounds)


def _vector(section: dict, key: str, length: int) -> np.ndarray:
    if key not in section:
        raise InvalidInputError(f"surface is missing {key!r}")
    values = np.array([float(v) for v in section[key].split()])
    if values.size != length:
        raise InvalidInputError(f"{key!r} needs {length} numbers")
    return values


def load_scene(path) -> SceneSpec:
    with open(path) as fh:
        return parse_scene(fh.read())


def builtin_scene_path(name: str):
    """Path of a scene (or pose path) file shipped with the package."""
    from importlib.resources import files

    resource = files("plink").joinpath("scenes", name)
    if not resource.is_file():
        raise InvalidInputError(f"no builtin scene file named {name!r}")
    return resource
