"""Coarse-to-fine sampling and the joint training step.

A proposal network is evaluated on uniform bin centers along each ray; its
normalized output is a histogram whose masses drive stratified importance
sampling of the fine test points. The fine network is trained on the
distribution and drop objectives, the proposal on the underestimation hinge
against the (detached) fine field, one optimizer step each per batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import net as nets
from .errors import DivergenceError, InvalidInputError
from .field import Ray, SampleGrid, cdf_from_sigma_values, bin_masses, trapezoid_deltas
from .losses import (DEFAULT_ALPHA, LossBreakdown, bce_values, hinge_values,
                     measurement_counts, step_mismatch_values)

MIN_GAP = 1e-9


@dataclass
class ProposalHistogram:
    """Normalized per-ray bin heights driving importance sampling."""

    bin_edges: np.ndarray
    heights: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=float)
        self.heights = np.asarray(self.heights, dtype=float)
        if self.bin_edges.size != self.heights.size + 1:
            raise InvalidInputError("need one more edge than heights")
        if np.any(np.diff(self.bin_edges) <= 0.0):
            raise InvalidInputError("bin edges must be strictly increasing")
        if np.any(self.heights < 0.0):
            raise InvalidInputError("heights must be nonnegative")

    @property
    def masses(self) -> np.ndarray:
        return self.heights * np.diff(self.bin_edges)


@dataclass
class FinePointSet:
    """Importance-sampled path distances plus their source bin indices."""

    points: np.ndarray
    provenance: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.provenance = np.asarray(self.provenance, dtype=int)
        if self.points.shape != self.provenance.shape:
            raise InvalidInputError("points and provenance must be congruent")


def coarse_bins(ray: Ray, n_bins: int) -> SampleGrid:
    """Uniform bin centers over [0, s_max]; edges sit midway between them."""
    if n_bins < 2:
        raise InvalidInputError("need at least two coarse bins")
    centers = uniform_bin_centers(ray.s_max, n_bins)
    return SampleGrid.from_gammas(centers)


def uniform_bin_centers(s_max: float, n_bins: int) -> np.ndarray:
    width = s_max / n_bins
    return (np.arange(n_bins) + 0.5) * width


def uniform_bin_edges(s_max: float, n_bins: int) -> np.ndarray:
    return np.linspace(0.0, s_max, n_bins + 1)


def histogram_from_coarse(model_coarse, ray: Ray, grid: SampleGrid, scale) -> ProposalHistogram:
    """Proposal histogram from the coarse field at the bin centers.

    An all-zero response falls back to a uniform histogram, flagged via
    ``degenerate`` so callers can monitor early-training behavior.
    """
    points = scale.apply(ray.point_at(grid.gammas))
    directions = np.broadcast_to(ray.direction, points.shape) if model_coarse.use_direction else None
    feats = nets.encode(points, directions, model_coarse.encoding_levels,
                        model_coarse.dir_levels)
    sigmas, _ = nets.forward(model_coarse, feats)
    edges = uniform_bin_edges(ray.s_max, grid.gammas.size)
    return histogram_from_heights(edges, sigmas)


def histogram_from_heights(edges: np.ndarray, raw_heights: np.ndarray) -> ProposalHistogram:
    widths = np.diff(edges)
    total = float(np.sum(raw_heights * widths))
    if total <= 0.0:
        uniform = np.full(widths.size, 1.0 / (edges[-1] - edges[0]))
        return ProposalHistogram(edges, uniform, degenerate=True)
    return ProposalHistogram(edges, raw_heights / total)


def importance_sample(histogram: ProposalHistogram, n_fine: int, rng) -> FinePointSet:
    """Stratified draws from the histogram, sorted ascending.

    Bin selection inverts the mass CDF on stratified uniforms; placement
    within the chosen bin is uniform.
    """
    if n_fine < 1:
        raise InvalidInputError("need at least one fine point")
    masses = histogram.masses
    cdf = np.cumsum(masses)
    cdf[-1] = max(cdf[-1], 1.0)  # guard against round-off shortfall at the top
    u = (np.arange(n_fine) + rng.random(n_fine)) / n_fine
    bins = np.searchsorted(cdf, u, side="left")
    left = histogram.bin_edges[bins]
    width = np.diff(histogram.bin_edges)[bins]
    points = left + rng.random(n_fine) * width
    order = np.argsort(points, kind="stable")
    return FinePointSet(points[order], bins[order])


def quantile_points(histogram: ProposalHistogram, n_fine: int) -> FinePointSet:
    """Deterministic variant used at render time: mass quantile midpoints."""
    masses = histogram.masses
    cdf = np.cumsum(masses)
    cdf[-1] = max(cdf[-1], 1.0)
    u = (np.arange(n_fine) + 0.5) / n_fine
    bins = np.searchsorted(cdf, u, side="left")
    left = histogram.bin_edges[bins]
    width = np.diff(histogram.bin_edges)[bins]
    points = left + 0.5 * width
    order = np.argsort(points, kind="stable")
    return FinePointSet(points[order], bins[order])


def strictify(gammas: np.ndarray, min_gap: float = MIN_GAP) -> np.ndarray:
    """Force strictly increasing rows by nudging duplicate values forward."""
    gammas = np.array(gammas, dtype=float, copy=True)
    flat = np.atleast_2d(gammas)
    stalled = np.diff(flat, axis=1) <= 0.0
    for r in np.flatnonzero(stalled.any(axis=1)):
        row = flat[r]
        for j in range(1, row.size):
            if row[j] <= row[j - 1]:
                row[j] = row[j - 1] + min_gap
    return flat.reshape(gammas.shape)


def fine_grid_rows(fine_points: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Sorted union of sampled points and bin edges, per ray row.

    Including the edges guarantees every proposal bin has integration
    support, so the per-bin hinge integral is never empty.
    """
    fine_points = np.atleast_2d(fine_points)
    tiled = np.broadcast_to(edges, (fine_points.shape[0], edges.size))
    merged = np.sort(np.concatenate([fine_points, tiled], axis=1), axis=1)
    return strictify(merged)


def ray_rng(seed: int, ray_id: int, epoch: int) -> np.random.Generator:
    """Dedicated stream per (seed, ray, epoch); reproducible batch order free."""
    return np.random.default_rng(np.random.SeedSequence((seed, ray_id, epoch)))


@dataclass
class TrainState:
    """Both networks with their optimizer accumulators."""

    coarse: nets.FieldModel
    fine: nets.FieldModel
    opt_coarse: nets.AdamState
    opt_fine: nets.AdamState

    @classmethod
    def fresh(cls, coarse: nets.FieldModel, fine: nets.FieldModel) -> "TrainState":
        return cls(coarse, fine, nets.AdamState.for_model(coarse),
                   nets.AdamState.for_model(fine))


@dataclass
class StepConfig:
    """Hyperparameters consumed by one training step."""

    n_bins: int = 64
    n_fine: int = 64
    lr: float = 5e-4
    alpha: float = DEFAULT_ALPHA
    seed: int = 0
    depth_l2: bool = False  # deterministic weighted-depth baseline objective


def train_step(state: TrainState, rays: list, config: StepConfig, scale,
               epoch: int = 0):
    """One joint optimization step over a ray batch.

    Per ray: coarse bins -> proposal histogram -> stratified fine points
    (union with bin edges) -> fine forward -> cumulative trace -> fine loss;
    then the proposal hinge against the detached fine field. Fine and coarse
    parameters each receive one optimizer step, fine first.
    """
    if not rays:
        raise InvalidInputError("ray batch must be nonempty")
    if not state.fine.has_phi_head:
        raise InvalidInputError("the fine model must carry the drop channel head")
    n_rays = len(rays)
    s_max = rays[0].s_max
    if any(r.s_max != s_max for r in rays):
        raise InvalidInputError("all rays in a batch must share s_max")
    n_bins, n_fine = config.n_bins, config.n_fine
    edges = uniform_bin_edges(s_max, n_bins)
    centers = uniform_bin_centers(s_max, n_bins)
    widths = np.diff(edges)

    origins = np.stack([r.origin for r in rays])
    dirs = np.stack([r.direction for r in rays])

    # Coarse forward over all bin centers, graph recorded for the hinge.
    coarse_pts = origins[:, None, :] + centers[None, :, None] * dirs[:, None, :]
    coarse_feats = _encode_batch(state.coarse, coarse_pts, dirs, scale)
    coarse_graph = nets.ModelGraph(state.coarse)
    sigma_c, _ = coarse_graph.forward(coarse_feats)
    sigma_c = sigma_c.reshape(n_rays, n_bins)
    hist_masses = sigma_c * widths
    hist_masses = hist_masses / (hist_masses.sum(axis=-1, keepdims=True) + 1e-12)

    # Importance sampling happens outside the graph: sample placement is a
    # constant with respect to both parameter vectors.
    masses_np = ad.value_of(hist_masses)
    fine_points = np.empty((n_rays, n_fine))
    for i, ray in enumerate(rays):
        rng = ray_rng(config.seed, ray.ray_id, epoch)
        hist = histogram_from_heights(edges, masses_np[i] / widths)
        fine_points[i] = importance_sample(hist, n_fine, rng).points

    grid = fine_grid_rows(fine_points, edges)          # (B, J)
    deltas = trapezoid_deltas(grid)
    n_points = grid.shape[1]

    fine_pts_world = origins[:, None, :] + grid[:, :, None] * dirs[:, None, :]
    fine_feats = _encode_batch(state.fine, fine_pts_world, dirs, scale)
    fine_graph = nets.ModelGraph(state.fine)
    sigma_f, phi_f = fine_graph.forward(fine_feats)
    sigma_f = sigma_f.reshape(n_rays, n_points)
    cdf, _ = cdf_from_sigma_values(sigma_f, deltas)

    if config.depth_l2:
        l_c = _depth_l2_term(cdf, grid, rays)
    else:
        l_c = _cdf_term(cdf, deltas, grid, rays)

    masses_f = bin_masses(cdf)
    q_true = np.array([float(r.drop_flag) for r in rays])
    q_hat = ad.sigmoid(ad.reduce_sum(masses_f * phi_f.reshape(n_rays, n_points), axis=-1))
    l_drop = bce_values(q_true, q_hat)
    l_fine = config.alpha * l_c + (1.0 - config.alpha) * l_drop

    fine_tape = nets.backward(fine_graph, l_fine)
    if not np.isfinite(fine_tape.loss):
        raise DivergenceError("fine loss is non-finite")

    # Proposal hinge: fine masses are detached constants (stop gradient).
    sigma_f_const = ad.value_of(sigma_f)
    fine_bin_mass = _bin_accumulate(sigma_f_const * deltas, grid, edges)
    totals = fine_bin_mass.sum(axis=-1, keepdims=True)
    fine_bin_mass = np.where(totals > 1e-12, fine_bin_mass / np.maximum(totals, 1e-300),
                             1.0 / n_bins)
    l_coarse = hinge_values(fine_bin_mass, hist_masses).mean()
    coarse_tape = nets.backward(coarse_graph, l_coarse)
    if not np.isfinite(coarse_tape.loss):
        raise DivergenceError("coarse loss is non-finite")

    nets.opt_step(state.fine, fine_tape, config.lr, state.opt_fine)
    nets.opt_step(state.coarse, coarse_tape, config.lr, state.opt_coarse)

    return LossBreakdown(
        l_c=float(ad.value_of(l_c)),
        l_drop=float(ad.value_of(l_drop)),
        l_coarse=coarse_tape.loss,
        l_fine=fine_tape.loss,
        alpha=config.alpha,
    )


def _encode_batch(model, points_world, dirs, scale) -> np.ndarray:
    """Flatten (B, J, 3) world points into encoded features (B*J, D)."""
    n_rays, n_points, _ = points_world.shape
    flat = scale.apply(points_world.reshape(-1, 3))
    if model.use_direction:
        dirs_flat = np.repeat(dirs, n_points, axis=0)
        return nets.encode(flat, dirs_flat, model.encoding_levels, model.dir_levels)
    return nets.encode(flat, None, model.encoding_levels, model.dir_levels)


def _cdf_term(cdf, deltas, grid, rays):
    """Batch-mean step-mismatch over the rays that carry measurements."""
    n_rays, n_points = grid.shape
    counts = np.zeros((n_rays, n_points))
    k = np.zeros(n_rays)
    for i, ray in enumerate(rays):
        if ray.measurements.size:
            counts[i] = measurement_counts(np.sort(ray.measurements), grid[i])
            k[i] = ray.measurements.size
    per_ray = step_mismatch_values(cdf, deltas, counts, k)
    contributing = float(np.count_nonzero(k))
    if contributing == 0.0:
        return per_ray.sum() * 0.0
    weights = (k > 0).astype(float) / contributing
    return ad.reduce_sum(per_ray * weights)


def _depth_l2_term(cdf, grid, rays):
    """Deterministic baseline: squared error of the composited expected depth.

    Weights follow the standard opacity-compositing rule (per-bin mass of
    the cumulative trace), normalized per ray before the depth dot product.
    """
    masses = bin_masses(cdf)
    totals = ad.reduce_sum(masses, axis=-1, keepdims=True) + 1e-12
    depth = ad.reduce_sum(masses * grid, axis=-1) / totals.reshape(len(rays))
    d_mean = np.zeros(len(rays))
    d_var = np.zeros(len(rays))
    k = np.zeros(len(rays))
    for i, ray in enumerate(rays):
        if ray.measurements.size:
            d_mean[i] = ray.measurements.mean()
            d_var[i] = max(0.0, float(np.mean(ray.measurements ** 2)) - d_mean[i] ** 2)
            k[i] = ray.measurements.size
    # mean_k (d_k - D)^2 expands to (D - dbar)^2 + var(d).
    per_ray = (depth - d_mean) ** 2 + d_var
    contributing = float(np.count_nonzero(k))
    if contributing == 0.0:
        return per_ray.sum() * 0.0
    weights = (k > 0).astype(float) / contributing
    return ad.reduce_sum(per_ray * weights)


def _bin_accumulate(per_sample: np.ndarray, grid: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Sum per-sample mass rows into proposal bins by sample location."""
    n_rays, _ = grid.shape
    n_bins = edges.size - 1
    idx = np.clip(np.searchsorted(edges, grid, side="right") - 1, 0, n_bins - 1)
    out = np.zeros((n_rays, n_bins))
    rows = np.repeat(np.arange(n_rays), grid.shape[1])
    np.add.at(out, (rows, idx.ravel()), per_sample.ravel())
    return out
