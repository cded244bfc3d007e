"""Tests for the wide-network correlation map and the predictions built on it."""
import math

import numpy as np
import pytest
from pydantic import ValidationError

from varprop.errors import ConfigurationError, DomainError
from varprop.meanfield import (
    QuadratureConfig,
    arccos_kernel,
    bn_predictions,
    iterate_k,
    k_derivative,
    k_map,
    k_map_monte_carlo,
    theoretical_ratio,
    trajectory,
)


class TestKMap:
    def test_fixed_point_at_one(self):
        assert k_map(1.0) == pytest.approx(1.0, abs=1e-10)

    def test_anticorrelated_inputs_vanish(self):
        assert k_map(-1.0) == pytest.approx(0.0, abs=1e-10)

    def test_uncorrelated_value(self):
        assert k_map(0.0) == pytest.approx(1.0 / math.pi, abs=1e-12)

    def test_uncorrelated_value_matches_monte_carlo(self):
        estimate, stderr = k_map_monte_carlo(0.0, draws=10_000_000, seed=1)
        assert stderr < 1e-3
        assert abs(k_map(0.0) - estimate) <= 4.0 * stderr

    @pytest.mark.parametrize("c", [-0.9, -0.4, 0.3, 0.8, 0.99])
    def test_matches_monte_carlo(self, c):
        estimate, stderr = k_map_monte_carlo(c, draws=2_000_000, seed=3)
        assert abs(k_map(c) - estimate) <= 4.0 * stderr

    @pytest.mark.parametrize("c", [-0.7, 0.0, 0.5, 0.95])
    def test_closed_form_oracle_agrees_with_monte_carlo(self, c):
        estimate, stderr = k_map_monte_carlo(c, draws=2_000_000, seed=5)
        assert abs(arccos_kernel(c) - estimate) <= 4.0 * stderr

    def test_quadrature_matches_closed_form(self):
        grid = np.linspace(-1.0, 1.0, 201)
        values = np.array([k_map(c) for c in grid])
        expected = np.array([arccos_kernel(c) for c in grid])
        np.testing.assert_allclose(values, expected, atol=1e-10)

    def test_node_doubling_is_converged(self):
        coarse = QuadratureConfig(node_count=64)
        fine = QuadratureConfig(node_count=128)
        for c in (-0.95, -0.3, 0.0, 0.4, 0.9, 0.9999):
            assert abs(k_map(c, coarse) - k_map(c, fine)) < 1e-9

    def test_increases_correlation_below_one(self):
        grid = np.arange(-1.0, 1.0, 1e-3)
        values = np.array([k_map(c) for c in grid])
        assert np.all(values > grid)

    def test_result_in_unit_interval(self):
        values = [k_map(c) for c in np.linspace(-1.0, 1.0, 41)]
        assert min(values) >= 0.0
        assert max(values) <= 1.0

    def test_deterministic(self):
        assert k_map(0.37) == k_map(0.37)

    def test_input_within_tolerance_is_clamped(self):
        assert k_map(1.0 + 1e-10) == pytest.approx(1.0, abs=1e-10)
        assert k_map(-1.0 - 1e-10) == pytest.approx(0.0, abs=1e-10)

    @pytest.mark.parametrize("c", [1.1, -1.01, float("nan"), float("inf")])
    def test_out_of_domain(self, c):
        with pytest.raises(DomainError):
            k_map(c)

    def test_too_few_nodes(self):
        with pytest.raises(ConfigurationError):
            k_map(0.0, QuadratureConfig(node_count=8))

    def test_clamp_tolerance_bounded(self):
        with pytest.raises(ValidationError):
            QuadratureConfig(clamp_tolerance=1e-5)


class TestIterateK:
    def test_fixed_point_sequence(self):
        np.testing.assert_allclose(iterate_k(1.0, 5), np.ones(6), atol=1e-10)

    def test_one_step_from_zero(self):
        np.testing.assert_allclose(iterate_k(0.0, 1), [0.0, 1.0 / math.pi], atol=1e-12)

    def test_depth_fifty(self):
        c = iterate_k(0.0, 50)
        assert len(c) == 51
        assert 0.9 < c[-1] < 1.0
        assert np.all(np.diff(c) > 0)

    def test_negative_start_is_nondecreasing(self):
        c = iterate_k(-0.8, 10)
        assert np.all(np.diff(c) >= 0)

    def test_subexponential_convergence(self):
        c = iterate_k(0.0, 201)
        eps = 1.0 - c
        ratios = eps[21:202] / eps[20:201]
        assert np.all(np.diff(ratios) > 0)
        assert ratios[-1] > 0.98
        assert np.all(ratios < 1.0)
        assert np.all(ratios > 0.9)

    def test_long_iteration_stays_below_one(self):
        c = iterate_k(0.0, 10_000)
        assert np.all(np.diff(c) > 0)
        assert c[-1] < 1.0

    def test_depth_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            iterate_k(0.0, 0)


class TestTrajectory:
    def test_single_layer(self):
        traj = trajectory(1)
        assert traj.m_sq[0] == pytest.approx(2.0 / math.pi, abs=1e-12)
        assert traj.v_sq[0] == pytest.approx(2.0 * (1.0 - 1.0 / math.pi), abs=1e-12)
        assert traj.c[0] == 0.0

    def test_decomposition_identity(self):
        traj = trajectory(200)
        np.testing.assert_allclose(traj.m_sq + traj.v_sq, 2.0, atol=1e-12)
        assert traj.sigma_sq == 2.0

    def test_monotone_and_bounded(self):
        traj = trajectory(50)
        assert np.all(np.diff(traj.v_sq) < 0)
        assert np.all(np.diff(traj.m_sq) > 0)
        assert np.all((traj.v_sq > 0) & (traj.v_sq < 2))
        assert np.all((traj.m_sq > 0) & (traj.m_sq < 2))

    def test_variance_not_yet_zero_at_fifty(self):
        traj = trajectory(50)
        assert 0.0 < traj.v[-1] < 0.5 * traj.v[0]
        assert traj.m[-1] < math.sqrt(2.0)

    def test_ratio(self):
        traj = trajectory(10)
        for l in range(10):
            assert theoretical_ratio(traj, l) == pytest.approx(math.sqrt(traj.m_sq[l] / traj.v_sq[l]))
        with pytest.raises(ConfigurationError):
            theoretical_ratio(traj, 10)


class TestDerivative:
    def test_value_at_zero(self):
        # dK/dc = 1 - arccos(c) / pi
        assert k_derivative(0.0) == pytest.approx(0.5, abs=1e-6)

    def test_increasing_toward_one(self):
        grid = np.linspace(0.0, 0.999, 60)
        values = np.array([k_derivative(c) for c in grid])
        assert np.all(np.diff(values) > 0)
        assert 0.95 < k_derivative(0.999) < 1.0

    def test_near_boundary_uses_one_sided_differences(self):
        assert 0.95 < k_derivative(1.0 - 1e-7) < 1.05
        assert -0.05 < k_derivative(-1.0 + 1e-7) < 0.05

    @pytest.mark.parametrize("c", [1.0, -1.0, 1.5])
    def test_boundary_is_out_of_domain(self, c):
        with pytest.raises(DomainError):
            k_derivative(c)


class TestBatchNormPredictions:
    def test_stated_constants(self):
        bn = bn_predictions()
        assert bn.sigma_s == pytest.approx(0.826, abs=1e-3)
        assert bn.slope == pytest.approx(-0.383, abs=1e-3)
        assert bn.amplification == pytest.approx(1.211, abs=1e-3)

    def test_slope_is_log_of_sigma_sq(self):
        bn = bn_predictions()
        assert bn.slope == pytest.approx(2.0 * math.log(bn.sigma_s), abs=1e-12)
