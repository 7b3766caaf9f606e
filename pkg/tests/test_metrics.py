"""Metric unit tests; every expected number is hand-derived."""

import numpy as np
import pytest

from nlflow.metrics import (
    estimation_error,
    fd_rmse,
    fd_scatter_width,
    kernel_l1,
    kernel_mass_within,
    kernel_mean,
)


class TestEstimationError:
    def test_exact_prediction_is_zero(self):
        rho = np.full((4, 5), 0.07)
        assert estimation_error(rho, rho.copy()) == 0.0

    def test_uniform_ten_percent_overshoot(self):
        rho = np.linspace(0.01, 0.2, 12).reshape(3, 4)
        assert estimation_error(rho, 1.1 * rho) == pytest.approx(10.0, abs=1e-9)

    def test_two_cell_hand_case(self):
        # relative errors 0.1 and 0.3 -> 100*sqrt((0.01+0.09)/2) = 22.3606...
        rho = np.array([[1.0], [1.0]])
        rho_hat = np.array([[1.1], [1.3]])
        assert estimation_error(rho, rho_hat) == pytest.approx(
            22.360679774997898, abs=1e-9
        )

    def test_scale_invariance(self, rng):
        rho = rng.uniform(0.01, 0.2, size=(6, 7))
        rho_hat = rho * rng.uniform(0.8, 1.2, size=(6, 7))
        base = estimation_error(rho, rho_hat)
        for c in (1e-3, 7.0, 1e4):
            assert estimation_error(c * rho, c * rho_hat) == pytest.approx(
                base, rel=1e-12
            )

    def test_rejects_mismatched_shapes_and_nonpositive_truth(self):
        with pytest.raises(ValueError):
            estimation_error(np.ones((2, 2)), np.ones((2, 3)))
        with pytest.raises(ValueError):
            estimation_error(np.array([[0.0, 1.0]]), np.ones((1, 2)))


class TestKernelMass:
    def test_unit_spike_at_origin(self):
        w = np.zeros(30)
        w[0] = 1.0
        assert kernel_mass_within(w, 5.0) == 1.0
        assert kernel_mean(w) == 0.0

    def test_uniform_thirty_cells(self):
        w = np.full(30, 1.0 / 30.0)
        # offsets 0..29 m; strictly inside 5 m -> k in {0..4}
        assert kernel_mass_within(w, 5.0) == pytest.approx(5.0 / 30.0)

    def test_three_cell_mean(self):
        # mean = 0*0.5 + 1*0.3 + 2*0.2 = 0.7 m
        assert kernel_mean(np.array([0.5, 0.3, 0.2])) == pytest.approx(0.7)

    def test_look_behind_cells_count_into_mass(self):
        # weights: ahead offsets 0,1 then behind offsets -1,-2
        w = np.array([0.4, 0.2, 0.3, 0.1])
        assert kernel_mass_within(w, 1.5, n_b=2) == pytest.approx(0.4 + 0.2 + 0.3)


class TestKernelL1:
    def test_identical_kernels(self):
        w = np.array([0.6, 0.4])
        assert kernel_l1(w, w.copy()) == 0.0

    def test_hand_case(self):
        # |1-0.5| + |0-0.5| = 1.0
        assert kernel_l1(np.array([1.0, 0.0]), np.array([0.5, 0.5])) == pytest.approx(1.0)

    def test_different_lengths_zero_padded(self):
        a = np.array([1.0])
        b = np.array([0.5, 0.25, 0.25])
        assert kernel_l1(a, b) == pytest.approx(0.5 + 0.25 + 0.25)

    def test_behind_offsets_aligned(self):
        # a: spike at offset 0; b: spike at offset -1 -> disjoint, L1 = 2
        a = np.array([1.0])
        b = np.array([0.0, 1.0])
        assert kernel_l1(a, b, n_b_a=0, n_b_b=1) == pytest.approx(2.0)


class TestScatterWidth:
    def test_exact_monotone_curve_has_zero_width(self):
        rho = np.linspace(0.01, 0.2, 50)
        v = 15.0 * (1.0 - rho / 0.2)
        assert fd_scatter_width(rho, v) == pytest.approx(0.0, abs=1e-12)

    def test_symmetric_noise_width_matches_mean_abs(self, rng):
        rho = np.linspace(0.01, 0.2, 4000)
        noise = rng.uniform(-0.5, 0.5, size=rho.size)
        v = 15.0 * (1.0 - rho / 0.2) + noise
        width = fd_scatter_width(rho, v)
        assert width == pytest.approx(np.mean(np.abs(noise)), rel=0.15)

    def test_degenerate_constant_density_warns_zero(self):
        rho = np.full(20, 0.1)
        v = np.linspace(0.0, 10.0, 20)
        with pytest.warns(UserWarning):
            assert fd_scatter_width(rho, v) == 0.0

    def test_requires_ten_pairs(self):
        with pytest.raises(ValueError):
            fd_scatter_width(np.linspace(0, 1, 9), np.zeros(9))


class TestFdRmse:
    def test_hand_case(self):
        grid = np.array([0.0, 0.1, 0.2])
        v_hat = np.array([10.0, 5.0, 0.0])
        v_true = np.array([10.0, 6.0, 2.0])
        assert fd_rmse(grid, v_hat, v_true) == pytest.approx(
            np.sqrt((0.0 + 1.0 + 4.0) / 3.0)
        )
