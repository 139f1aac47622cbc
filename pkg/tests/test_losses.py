"""Training-objective values against hand-rolled oracles, plus gradients."""

import numpy as np
import pytest

from plink import autodiff as ad
from plink.errors import DegenerateInputError, InvalidInputError
from plink.field import SampleGrid, SigmaTrace, cumulative_from_sigma
from plink.losses import (bce_values, cdf_loss, coarse_loss, drop_bce,
                          fine_loss, hinge_values, normalize_for_coarse,
                          pool_ray_drop, pooled_drop_values,
                          step_mismatch_values)
from plink.sampler import ProposalHistogram
from tests.test_field import near_step_trace, uniform_grid


def brute_force_cdf_loss(trace, measurements):
    """Literal sum over measurements of the discretized step mismatch."""
    total = 0.0
    for d in measurements:
        step = (trace.grid.gammas >= d).astype(float)
        total += float(np.sum((step - trace.cdf) ** 2 * trace.grid.deltas))
    return total


class TestCdfLoss:
    def test_exact_step_has_zero_loss(self):
        trace = near_step_trace([(5.0, 1.0)], 20.0)
        assert cdf_loss(trace, [5.0]) == pytest.approx(0.0, abs=1e-9)

    def test_zero_cdf_integrates_tail(self):
        n = 4000
        grid = uniform_grid(20.0, n)
        from plink.field import CdfTrace
        trace = CdfTrace(grid, np.zeros(n), np.ones(n))
        # closed form: integral of 1 over [5, 20] = 15
        assert cdf_loss(trace, [5.0]) == pytest.approx(15.0, abs=0.02)

    def test_matches_brute_force_on_random_inputs(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            n = rng.integers(5, 60)
            grid = uniform_grid(20.0, int(n))
            sigma = rng.exponential(0.2, size=int(n))
            trace = cumulative_from_sigma(SigmaTrace(grid, sigma))
            measurements = rng.uniform(0.5, 20.0, size=rng.integers(1, 8))
            assert cdf_loss(trace, measurements) == pytest.approx(
                brute_force_cdf_loss(trace, measurements), rel=1e-12)

    def test_two_step_beats_single_full_step(self):
        # conflicting measurements: the half/half staircase wins over any
        # single step, including one at the phantom midpoint
        grid = uniform_grid(20.0, 2000)
        measurements = [5.0, 10.0]
        two_step = near_step_trace([(5.0, 0.5), (10.0, 0.5)], 20.0)
        loss_two = brute_force_cdf_loss_on_grid(two_step, grid, measurements)
        single = near_step_trace([(7.5, 1.0)], 20.0)
        loss_single = brute_force_cdf_loss_on_grid(single, grid, measurements)
        assert loss_two < loss_single
        # sweep single-step locations: none reaches the two-step loss
        for c in np.linspace(1.0, 19.0, 37):
            candidate = near_step_trace([(float(c), 1.0)], 20.0)
            assert loss_two < brute_force_cdf_loss_on_grid(candidate, grid, measurements)

    def test_single_measurement_minimized_at_measurement(self):
        grid = uniform_grid(20.0, 2000)
        d = 7.0
        locations = np.linspace(1.0, 19.0, 91)
        losses = [brute_force_cdf_loss_on_grid(near_step_trace([(float(c), 1.0)], 20.0),
                                               grid, [d]) for c in locations]
        assert locations[int(np.argmin(losses))] == pytest.approx(d, abs=0.25)

    def test_empty_measurements_contribute_nothing(self):
        trace = near_step_trace([(5.0, 1.0)], 20.0)
        assert cdf_loss(trace, []) == 0.0

    def test_rejects_out_of_range_measurements(self):
        trace = near_step_trace([(5.0, 1.0)], 20.0)
        with pytest.raises(InvalidInputError):
            cdf_loss(trace, [25.0])


def brute_force_cdf_loss_on_grid(step_trace, grid, measurements):
    """Evaluate a candidate cdf (given as a trace) on a reference grid."""
    knots_s = np.concatenate([[0.0], step_trace.grid.gammas])
    knots_c = np.concatenate([[0.0], step_trace.cdf])
    cdf = np.interp(grid.gammas, knots_s, knots_c)
    total = 0.0
    for d in measurements:
        step = (grid.gammas >= d).astype(float)
        total += float(np.sum((step - cdf) ** 2 * grid.deltas))
    return total


class TestCoarseLoss:
    def make_pair(self, hist_masses, fine_masses, s_max=8.0):
        n = len(hist_masses)
        edges = np.linspace(0.0, s_max, n + 1)
        widths = np.diff(edges)
        hist = ProposalHistogram(edges, np.asarray(hist_masses) / widths)
        # one fine sample at each bin center carrying exactly that bin's mass
        centers = 0.5 * (edges[:-1] + edges[1:])
        grid = SampleGrid.from_gammas(centers)
        sigmas = np.asarray(fine_masses) / grid.deltas
        return hist, SigmaTrace(grid, sigmas)

    def test_matched_masses_give_zero(self):
        hist, trace = self.make_pair([0.25, 0.25, 0.5], [0.25, 0.25, 0.5])
        assert coarse_loss(hist, trace) == pytest.approx(0.0, abs=1e-12)

    def test_only_underestimation_contributes(self):
        m = 0.15
        hist, trace = self.make_pair([0.5, 0.5], [0.5 - m, 0.5 + m])
        assert coarse_loss(hist, trace) == pytest.approx(m)

    def test_uniform_vs_concentrated(self):
        n = 8
        hist, trace = self.make_pair([1.0 / n] * n, [0.0] * (n - 1) + [1.0])
        # hand oracle: only the loaded bin underestimates, by 1 - 1/n
        assert coarse_loss(hist, trace) == pytest.approx(1.0 - 1.0 / n)

    def test_rejects_unnormalized(self):
        hist, trace = self.make_pair([0.5, 0.6], [0.5, 0.5])
        with pytest.raises(InvalidInputError):
            coarse_loss(hist, trace)

    def test_scale_invariance_via_normalization(self):
        rng = np.random.default_rng(11)
        raw_hist = rng.uniform(0.1, 2.0, size=6)
        raw_sigma = rng.uniform(0.1, 2.0, size=30)
        edges = np.linspace(0.0, 12.0, 7)
        gammas = np.sort(rng.uniform(0.1, 12.0, size=30))
        grid = SampleGrid.from_gammas(gammas)
        values = []
        for scale_h, scale_s in ((1.0, 1.0), (10.0, 1.0), (1.0, 250.0), (3.0, 0.01)):
            hist = ProposalHistogram(edges, raw_hist * scale_h)
            trace = SigmaTrace(grid, raw_sigma * scale_s)
            n_hist, n_trace = normalize_for_coarse(hist, trace)
            values.append(coarse_loss(n_hist, n_trace))
        np.testing.assert_allclose(values, values[0], rtol=1e-9)


class TestNormalizeForCoarse:
    def test_already_normalized_unchanged(self):
        edges = np.linspace(0.0, 4.0, 5)
        hist = ProposalHistogram(edges, np.full(4, 0.25))
        gammas = np.linspace(0.5, 3.5, 4)
        grid = SampleGrid.from_gammas(gammas)
        trace = SigmaTrace(grid, 1.0 / (grid.deltas * 4))
        n_hist, n_trace = normalize_for_coarse(hist, trace)
        np.testing.assert_allclose(n_hist.heights, hist.heights)
        np.testing.assert_allclose(n_trace.sigmas, trace.sigmas)

    def test_example_masses(self):
        edges = np.array([0.0, 1.0, 2.0, 3.0])
        hist = ProposalHistogram(edges, np.array([2.0, 2.0, 4.0]))
        grid = SampleGrid.from_gammas(np.array([0.5, 1.5, 2.5]))
        trace = SigmaTrace(grid, np.ones(3))
        n_hist, _ = normalize_for_coarse(hist, trace)
        np.testing.assert_allclose(n_hist.masses, [0.25, 0.25, 0.5])

    def test_degenerate_raises_without_fallback(self):
        edges = np.array([0.0, 1.0, 2.0])
        hist = ProposalHistogram(edges, np.zeros(2))
        grid = SampleGrid.from_gammas(np.array([0.5, 1.5]))
        trace = SigmaTrace(grid, np.ones(2))
        with pytest.raises(DegenerateInputError):
            normalize_for_coarse(hist, trace)

    def test_degenerate_fallback_is_uniform(self):
        edges = np.array([0.0, 1.0, 2.0])
        hist = ProposalHistogram(edges, np.zeros(2))
        grid = SampleGrid.from_gammas(np.array([0.5, 1.5]))
        trace = SigmaTrace(grid, np.zeros(2))
        n_hist, n_trace = normalize_for_coarse(hist, trace, fallback_uniform=True)
        assert n_hist.masses.sum() == pytest.approx(1.0)
        assert np.sum(n_trace.sigmas * grid.deltas) == pytest.approx(1.0)


class TestPoolRayDrop:
    def test_zero_phi_gives_half(self):
        trace = near_step_trace([(5.0, 0.8)], 10.0)
        assert pool_ray_drop(np.zeros(len(trace.grid)), trace) == pytest.approx(0.5)

    def test_constant_phi_scales_with_total_mass(self):
        trace = near_step_trace([(5.0, 0.8)], 10.0)
        c = 1.7
        expected = 1.0 / (1.0 + np.exp(-c * trace.total_mass))
        got = pool_ray_drop(np.full(len(trace.grid), c), trace)
        assert got == pytest.approx(expected)

    def test_concentrated_mass_dominates(self):
        # 0.999 of the mass in one bin: pooled output tracks that bin's phi
        gammas = np.array([2.0, 5.0, 8.0])
        grid = SampleGrid.from_gammas(gammas)
        cdf = np.array([0.0005, 0.9995, 1.0])
        from plink.field import CdfTrace
        trace = CdfTrace(grid, cdf, 1.0 - cdf)
        phi = np.array([-0.8, 1.0, 0.9])
        got = pool_ray_drop(phi, trace)
        expected = 1.0 / (1.0 + np.exp(-phi[1]))
        assert abs(got - expected) < 0.01

    def test_grid_mismatch_rejected(self):
        trace = near_step_trace([(5.0, 0.8)], 10.0)
        with pytest.raises(InvalidInputError):
            pool_ray_drop(np.zeros(len(trace.grid) + 1), trace)


class TestDropBce:
    def test_perfect_prediction_near_zero(self):
        assert drop_bce([1, 1, 0], [1.0, 1.0, 0.0]) == pytest.approx(0.0, abs=1e-5)

    def test_half_everywhere_is_ln2(self):
        for q in ([1, 0, 1], [0, 0, 0], [1, 1, 1]):
            assert drop_bce(q, [0.5] * 3) == pytest.approx(np.log(2.0))

    def test_direct_evaluation_oracle(self):
        expected = -0.5 * (np.log(0.9) + np.log(0.8))
        assert drop_bce([1, 0], [0.9, 0.2]) == pytest.approx(expected, rel=1e-12)

    def test_length_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            drop_bce([1, 0], [0.5])


class TestFineLoss:
    def test_alpha_extremes(self):
        assert fine_loss(2.0, 1.0, alpha=1.0) == 2.0
        assert fine_loss(2.0, 1.0, alpha=0.0) == 1.0

    def test_default_combination(self):
        assert fine_loss(2.0, 1.0) == pytest.approx(1.999, abs=1e-12)

    def test_alpha_out_of_range_rejected(self):
        with pytest.raises(InvalidInputError):
            fine_loss(1.0, 1.0, alpha=1.5)


class TestLossGradients:
    """Analytic gradients of each loss kernel vs central finite differences."""

    def fd(self, fn, x, eps=1e-6):
        grad = np.zeros_like(x)
        for i in range(x.size):
            orig = x.ravel()[i]
            x.ravel()[i] = orig + eps
            hi = fn(x)
            x.ravel()[i] = orig - eps
            lo = fn(x)
            x.ravel()[i] = orig
            grad.ravel()[i] = (hi - lo) / (2 * eps)
        return grad

    def assert_close(self, analytic, numeric, rtol=1e-4):
        scale = np.maximum(np.abs(numeric), 1e-6)
        assert np.max(np.abs(analytic - numeric) / scale) < rtol

    def test_step_mismatch_gradient(self):
        rng = np.random.default_rng(3)
        n = 20
        deltas = rng.uniform(0.1, 0.5, size=n)
        counts = rng.integers(0, 5, size=n).astype(float)
        counts = np.sort(counts)
        k = counts[-1]
        cdf0 = np.sort(rng.uniform(0.0, 1.0, size=n))

        def value(c):
            return float(ad.value_of(step_mismatch_values(c, deltas, counts, k)))

        t = ad.Tensor(cdf0.copy())
        out = step_mismatch_values(t, deltas, counts, k)
        out.backward()
        self.assert_close(t.grad, self.fd(value, cdf0.copy()))

    def test_bce_gradient(self):
        rng = np.random.default_rng(4)
        q_true = rng.integers(0, 2, size=8).astype(float)
        q0 = rng.uniform(0.05, 0.95, size=8)

        def value(q):
            return float(ad.value_of(bce_values(q_true, q)))

        t = ad.Tensor(q0.copy())
        out = bce_values(q_true, t)
        out.backward()
        self.assert_close(t.grad, self.fd(value, q0.copy()))

    def test_pooled_drop_gradient(self):
        rng = np.random.default_rng(6)
        masses = rng.dirichlet(np.ones(10))
        phi0 = rng.normal(size=10)

        def value(phi):
            return float(ad.value_of(pooled_drop_values(phi, masses)))

        t = ad.Tensor(phi0.copy())
        out = pooled_drop_values(t, masses)
        out.backward()
        self.assert_close(t.grad, self.fd(value, phi0.copy()))

    def test_hinge_gradient_off_kink(self):
        rng = np.random.default_rng(8)
        fine = rng.dirichlet(np.ones(12))
        hist0 = rng.dirichlet(np.ones(12))
        # keep probes away from the hinge kink
        assert np.min(np.abs(fine - hist0)) > 1e-5

        def value(h):
            return float(ad.value_of(hinge_values(fine, h)))

        t = ad.Tensor(hist0.copy())
        out = hinge_values(fine, t)
        out.backward()
        self.assert_close(t.grad, self.fd(value, hist0.copy()))
