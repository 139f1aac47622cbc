"""Cumulative-distribution math: examples, invariants, and convergence."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plink.errors import InvalidInputError, UndefinedDepthError
from plink.field import (DROP, CdfTrace, Ray, SampleGrid, SigmaTrace,
                         baseline_weighted_depth, cumulative_from_sigma,
                         inverse_transform_sample, is_drop, pdf_from_cdf,
                         render_confidence, trapezoid_deltas)


def uniform_grid(s_max, n):
    return SampleGrid.from_gammas(np.linspace(0.0, s_max, n + 1)[1:])


def near_step_trace(jumps, s_max, eps=1e-6):
    """CdfTrace approximating a pure jump function (knee just before each jump)."""
    gammas, cdf = [], []
    level = 0.0
    for d, height in jumps:
        gammas.extend([d - eps, d])
        cdf.extend([level, level + height])
        level += height
    if gammas[-1] < s_max:
        gammas.append(s_max)
        cdf.append(level)
    gammas = np.asarray(gammas)
    grid = SampleGrid(gammas, trapezoid_deltas(gammas))
    cdf = np.asarray(cdf)
    return CdfTrace(grid, cdf, 1.0 - cdf)


class TestSampleGrid:
    def test_trapezoid_deltas_cover_full_path(self):
        gammas = np.array([1.0, 2.0, 4.0, 7.0])
        grid = SampleGrid.from_gammas(gammas)
        # interior: half the straddling span; first adds the sensor gap
        np.testing.assert_allclose(grid.deltas, [1.5, 1.5, 2.5, 1.5])
        assert grid.deltas.sum() == pytest.approx(gammas[-1])

    def test_rejects_non_ascending(self):
        with pytest.raises(InvalidInputError):
            SampleGrid(np.array([1.0, 1.0]), np.array([0.5, 0.5]))

    def test_rejects_negative_delta(self):
        with pytest.raises(InvalidInputError):
            SampleGrid(np.array([1.0, 2.0]), np.array([1.0, -0.5]))


class TestRay:
    def test_rejects_non_unit_direction(self):
        with pytest.raises(InvalidInputError):
            Ray(np.zeros(3), np.array([1.0, 1.0, 0.0]), 10.0)

    def test_rejects_out_of_range_measurement(self):
        with pytest.raises(InvalidInputError):
            Ray(np.zeros(3), np.array([1.0, 0, 0]), 10.0, measurements=[12.0])

    def test_drop_flag_requires_empty_measurements(self):
        with pytest.raises(InvalidInputError):
            Ray(np.zeros(3), np.array([1.0, 0, 0]), 10.0,
                measurements=[5.0], drop_flag=0)


class TestCumulativeFromSigma:
    def test_zero_sigma_gives_empty_distribution(self):
        grid = uniform_grid(10.0, 8)
        trace = cumulative_from_sigma(SigmaTrace(grid, np.zeros(8)))
        np.testing.assert_array_equal(trace.cdf, np.zeros(8))
        np.testing.assert_array_equal(trace.survival, np.ones(8))

    def test_single_bin_ln2_gives_half(self):
        grid = SampleGrid(np.array([1.0, 2.0]), np.array([1.0, 1.0]))
        trace = cumulative_from_sigma(SigmaTrace(grid, np.array([np.log(2.0), 0.0])))
        assert trace.cdf[0] == pytest.approx(0.5)
        assert trace.cdf[1] == pytest.approx(0.5)

    def test_two_ln2_bins_match_product_oracle(self):
        grid = SampleGrid(np.array([1.0, 2.0]), np.array([1.0, 1.0]))
        sigma = np.array([np.log(2.0), np.log(2.0)])
        trace = cumulative_from_sigma(SigmaTrace(grid, sigma))
        # independent oracle: direct running product of per-bin transmissions
        survival = np.cumprod(np.exp(-sigma * grid.deltas))
        np.testing.assert_allclose(trace.cdf, 1.0 - survival)
        assert trace.cdf[-1] == pytest.approx(0.75)

    def test_rejects_negative_sigma(self):
        grid = uniform_grid(10.0, 4)
        with pytest.raises(InvalidInputError):
            SigmaTrace(grid, np.array([0.1, -0.1, 0.1, 0.1]))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(min_value=2, max_value=40), st.integers(min_value=0, max_value=2 ** 31))
    def test_monotone_bounded_complementary(self, n, seed):
        rng = np.random.default_rng(seed)
        gammas = np.sort(rng.uniform(0.01, 30.0, size=n))
        gammas += np.arange(n) * 1e-6  # enforce strict ascent
        grid = SampleGrid.from_gammas(gammas)
        sigma = rng.exponential(scale=rng.uniform(0.01, 3.0), size=n)
        trace = cumulative_from_sigma(SigmaTrace(grid, sigma))
        assert np.all(np.diff(trace.cdf) >= -1e-15)
        assert np.all(trace.cdf >= 0.0) and np.all(trace.cdf <= 1.0)
        np.testing.assert_allclose(trace.cdf + trace.survival, 1.0, atol=1e-9)

    def test_trapezoid_convergence_is_second_order(self):
        # smooth analytic field: sigma(s) = 0.3 * (1 + sin s); exact integral known
        s_max = 10.0
        exact = 0.3 * (s_max + 1.0 - np.cos(s_max))
        errors = []
        for n in (64, 128, 256, 512):
            gammas = np.linspace(0.0, s_max, n + 1)[1:]
            grid = SampleGrid.from_gammas(gammas)
            sigma = 0.3 * (1.0 + np.sin(gammas))
            # the sensor-gap element uses a one-sided rectangle; keep the
            # first sample at the origin-adjacent position so the composite
            # rule stays trapezoid throughout
            trace = cumulative_from_sigma(SigmaTrace(grid, sigma))
            approx = -np.log(trace.survival[-1])
            errors.append(abs(approx - exact))
        rates = [np.log2(errors[i] / errors[i + 1]) for i in range(len(errors) - 1)]
        assert all(rate > 1.7 for rate in rates), rates


class TestPdfFromCdf:
    def test_flat_cdf_gives_zero_masses(self):
        grid = uniform_grid(10.0, 5)
        trace = CdfTrace(grid, np.full(5, 0.4), np.full(5, 0.6))
        np.testing.assert_allclose(pdf_from_cdf(trace), [0.4, 0, 0, 0, 0])

    def test_two_step_masses(self):
        trace = near_step_trace([(5.0, 0.5), (10.0, 0.5)], 12.0)
        masses = pdf_from_cdf(trace)
        jump_bins = np.isin(trace.grid.gammas, [5.0, 10.0])
        np.testing.assert_allclose(masses[jump_bins], [0.5, 0.5])
        np.testing.assert_allclose(masses[~jump_bins], 0.0, atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(min_value=2, max_value=30), st.integers(min_value=0, max_value=2 ** 31))
    def test_masses_telescope_to_total(self, n, seed):
        rng = np.random.default_rng(seed)
        grid = uniform_grid(20.0, n)
        sigma = rng.exponential(scale=0.2, size=n)
        trace = cumulative_from_sigma(SigmaTrace(grid, sigma))
        masses = pdf_from_cdf(trace)
        assert np.all(masses >= -1e-15)
        assert masses.sum() == pytest.approx(trace.cdf[-1], abs=1e-12)


class TestInverseTransform:
    def test_two_step_structure_forces_bins(self):
        trace = near_step_trace([(5.0, 0.5), (10.0, 0.5)], 12.0)
        assert inverse_transform_sample(trace, 0.25) == pytest.approx(5.0, abs=1e-3)
        assert inverse_transform_sample(trace, 0.75) == pytest.approx(10.0, abs=1e-3)

    def test_linear_cdf_midpoint(self):
        gammas = np.linspace(0.5, 20.0, 40)
        grid = SampleGrid.from_gammas(gammas)
        cdf = gammas / 20.0
        trace = CdfTrace(grid, cdf, 1.0 - cdf)
        assert inverse_transform_sample(trace, 0.5) == pytest.approx(10.0, abs=0.5)

    def test_exceeding_total_mass_is_drop(self):
        gammas = np.linspace(1.0, 10.0, 10)
        grid = SampleGrid.from_gammas(gammas)
        cdf = np.linspace(0.05, 0.4, 10)
        trace = CdfTrace(grid, cdf, 1.0 - cdf)
        assert is_drop(inverse_transform_sample(trace, 0.9))

    def test_rejects_levels_outside_unit_interval(self):
        trace = near_step_trace([(5.0, 1.0)], 10.0)
        for bad in (0.0, 1.0, -0.2, 1.7):
            with pytest.raises(InvalidInputError):
                inverse_transform_sample(trace, bad)

    def test_flat_segments_resolve_left(self):
        gammas = np.array([2.0, 4.0, 6.0, 8.0])
        cdf = np.array([0.5, 0.5, 0.5, 1.0])
        grid = SampleGrid.from_gammas(gammas)
        trace = CdfTrace(grid, cdf, 1.0 - cdf)
        # smallest s attaining 0.5 is the first knot of the plateau
        assert inverse_transform_sample(trace, 0.5) == pytest.approx(2.0)


class TestRenderConfidence:
    def test_two_step_near_and_far(self):
        trace = near_step_trace([(5.0, 0.5), (10.0, 0.5)], 12.0)
        assert render_confidence(trace, 0.10) == pytest.approx(5.0, abs=1e-3)
        assert render_confidence(trace, 0.90) == pytest.approx(10.0, abs=1e-3)

    def test_opaque_wall_identical_at_any_level(self):
        trace = near_step_trace([(8.0, 1.0)], 12.0)
        values = [render_confidence(trace, lvl) for lvl in (0.05, 0.5, 0.95)]
        assert all(v == pytest.approx(8.0, abs=1e-3) for v in values)

    def test_low_mass_is_drop(self):
        gammas = np.linspace(1.0, 10.0, 10)
        cdf = np.linspace(0.03, 0.3, 10)
        trace = CdfTrace(SampleGrid.from_gammas(gammas), cdf, 1.0 - cdf)
        assert is_drop(render_confidence(trace, 0.5))


class TestBaselineWeightedDepth:
    def test_single_unit_weight(self):
        grid = SampleGrid.from_gammas(np.array([3.0, 7.0, 11.0]))
        assert baseline_weighted_depth([0.0, 1.0, 0.0], grid) == pytest.approx(7.0)

    def test_equal_weights_phantom_midpoint(self):
        grid = SampleGrid.from_gammas(np.array([5.0, 10.0]))
        assert baseline_weighted_depth([1.0, 1.0], grid) == pytest.approx(7.5)

    def test_weighted_example(self):
        grid = SampleGrid.from_gammas(np.array([4.0, 8.0]))
        assert baseline_weighted_depth([0.25, 0.75], grid) == pytest.approx(7.0)

    def test_all_zero_weights_error(self):
        grid = SampleGrid.from_gammas(np.array([4.0, 8.0]))
        with pytest.raises(UndefinedDepthError):
            baseline_weighted_depth([0.0, 0.0], grid)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(min_value=1, max_value=50), st.integers(min_value=0, max_value=2 ** 31))
    def test_matches_brute_force(self, n, seed):
        rng = np.random.default_rng(seed)
        gammas = np.sort(rng.uniform(0.1, 30.0, size=n)) + np.arange(n) * 1e-5
        grid = SampleGrid(gammas, trapezoid_deltas(gammas)) if n > 1 \
            else SampleGrid(gammas, np.array([gammas[0]]))
        weights = rng.uniform(0.0, 2.0, size=n) + 1e-9
        expected = sum(w * g for w, g in zip(weights, gammas)) / weights.sum()
        got = baseline_weighted_depth(weights, grid)
        assert abs(got - expected) <= 1e-12 * max(1.0, abs(expected))


class TestSamplingCorrectness:
    def test_inverse_draws_match_target_distribution(self):
        # fixed cdf from a smooth field; 1e4 draws; KS < 0.05 conditioned on returns
        rng = np.random.default_rng(123)
        gammas = np.linspace(0.0, 20.0, 400)[1:]
        grid = SampleGrid.from_gammas(gammas)
        sigma = 0.25 * np.exp(-0.5 * ((gammas - 8.0) / 1.5) ** 2) \
            + 0.1 * np.exp(-0.5 * ((gammas - 15.0) / 1.0) ** 2)
        trace = cumulative_from_sigma(SigmaTrace(grid, sigma))
        draws = [inverse_transform_sample(trace, rng.uniform(1e-12, 1.0))
                 for _ in range(10_000)]
        returns = np.sort([d for d in draws if not is_drop(d)])
        drop_rate = 1.0 - len(returns) / len(draws)
        assert abs(drop_rate - (1.0 - trace.total_mass)) <= 0.02

        # conditional target cdf evaluated at the sampled points
        target = np.interp(returns, np.concatenate([[0.0], grid.gammas]),
                           np.concatenate([[0.0], trace.cdf])) / trace.total_mass
        empirical_hi = np.arange(1, len(returns) + 1) / len(returns)
        empirical_lo = np.arange(0, len(returns)) / len(returns)
        ks = max(np.max(np.abs(empirical_hi - target)),
                 np.max(np.abs(empirical_lo - target)))
        assert ks < 0.05
