"""Finite-volume ring solver: kernels, conservation, convergence."""

import numpy as np
import pytest

from nlflow.accel import use_numba
from nlflow.fvsolve import (
    FVSolution,
    GreenshieldsFD,
    discretize_kernel,
    linear_decay_kernel,
    solve_ring,
    stencil_index_matrix,
)


def smooth_bump(n_x, L, base=0.05, amp=0.03):
    """Single smooth density hump on the ring, strictly positive."""
    x = np.arange(n_x) * (L / n_x)
    return base + amp * np.exp(-((x - 0.5 * L) ** 2) / (2 * (L / 12) ** 2))


class TestGreenshieldsFD:
    def test_endpoints(self):
        fd = GreenshieldsFD(v_max=30.0, rho_max=0.2)
        assert fd.speed(0.0) == pytest.approx(30.0)
        assert fd.speed(0.2) == pytest.approx(0.0)
        assert fd.speed(0.1) == pytest.approx(15.0)

    def test_clamped_above_jam_density(self):
        fd = GreenshieldsFD(v_max=30.0, rho_max=0.2)
        assert fd.speed(0.5) == 0.0
        assert fd(np.array([0.3, 1.0])).tolist() == [0.0, 0.0]

    def test_invalid_parameters_rejected(self):
        with pytest.raises(ValueError):
            GreenshieldsFD(v_max=0.0, rho_max=0.2)
        with pytest.raises(ValueError):
            GreenshieldsFD(v_max=10.0, rho_max=-0.1)


class TestLinearDecayKernel:
    def test_triangular_shape(self):
        w = linear_decay_kernel(2.0)
        assert w(0.0) == pytest.approx(1.0)
        assert w(1.0) == pytest.approx(0.5)
        assert w(2.0) == 0.0  # support is [0, eta)
        assert w(-0.5) == 0.0

    def test_unit_mass(self):
        w = linear_decay_kernel(7.0)
        u = np.linspace(0.0, 7.0, 20001)
        assert np.trapezoid(w(u), u) == pytest.approx(1.0, abs=1e-6)

    def test_positive_length_required(self):
        with pytest.raises(ValueError):
            linear_decay_kernel(0.0)


class TestDiscretizeKernel:
    def test_two_cell_linear_decay(self):
        # integral of (1 - u/2) over [0,1) is 3/4, over [1,2) is 1/4
        w = discretize_kernel(linear_decay_kernel(2.0), eta_a=2.0,
                              eta_b=0.0, dx=1.0)
        np.testing.assert_allclose(w, [0.75, 0.25], rtol=1e-12)

    def test_matches_antiderivative(self):
        # the integrand is linear, so each cell mass is exactly
        # F(k+1) - F(k) with F(u) = (2/eta)(u - u^2/(2 eta))
        eta = 12.0
        w = discretize_kernel(linear_decay_kernel(eta), eta_a=eta,
                              eta_b=0.0, dx=1.0)

        def F(u):
            return (2.0 / eta) * (u - u * u / (2.0 * eta))

        exact = np.array([F(k + 1.0) - F(k) for k in range(12)])
        np.testing.assert_allclose(w, exact / exact.sum(), rtol=1e-12)
        assert np.all(np.diff(w) < 0)

    def test_symmetric_window(self):
        # symmetric triangle, continuous on the stencil so the quadrature
        # is exact: ahead cells carry (0.375, 0.125), behind cells mirror
        def tri(u):
            u = np.asarray(u, float)
            return np.where(np.abs(u) < 2.0, 0.5 * (1.0 - np.abs(u) / 2.0),
                            0.0)

        w = discretize_kernel(tri, eta_a=2.0, eta_b=2.0, dx=1.0)
        np.testing.assert_allclose(w, [0.375, 0.125, 0.375, 0.125],
                                   rtol=1e-12)

    def test_normalized(self):
        w = discretize_kernel(linear_decay_kernel(5.0), eta_a=10.0,
                              eta_b=0.0, dx=1.0)
        assert w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_empty_or_massless_stencil_rejected(self):
        with pytest.raises(ValueError):
            discretize_kernel(linear_decay_kernel(2.0), eta_a=0.0,
                              eta_b=0.0, dx=1.0)
        with pytest.raises(ValueError):
            discretize_kernel(lambda u: np.zeros_like(np.asarray(u, float)),
                              eta_a=3.0, eta_b=0.0, dx=1.0)


class TestStencilIndexMatrix:
    def test_hand_case_matches_learner_convention(self):
        idx = stencil_index_matrix(5, 2, 1)
        expected = [[0, 1, 4], [1, 2, 0], [2, 3, 1], [3, 4, 2], [4, 0, 3]]
        np.testing.assert_array_equal(idx, expected)

    def test_longer_than_ring_rejected(self):
        with pytest.raises(ValueError):
            stencil_index_matrix(4, 3, 2)


class TestSolveRing:
    FD = GreenshieldsFD(v_max=20.0, rho_max=0.2)

    def _weights(self, eta=6.0, dx=1.0):
        return discretize_kernel(linear_decay_kernel(eta), eta_a=eta,
                                 eta_b=0.0, dx=dx)

    def test_constant_state_is_steady(self):
        rho0 = np.full(40, 0.07)
        sol = solve_ring(rho0, L=40.0, T=20.0, fd=self.FD,
                         weights=self._weights())
        np.testing.assert_allclose(sol.rho, 0.07, rtol=1e-14)

    def test_mass_conserved_every_snapshot(self):
        rho0 = smooth_bump(80, 80.0)
        sol = solve_ring(rho0, L=80.0, T=40.0, fd=self.FD,
                         weights=self._weights())
        mass = sol.rho.sum(axis=0) * sol.dx
        np.testing.assert_allclose(mass, mass[0], rtol=1e-12)

    def test_density_stays_nonnegative(self):
        rho0 = np.full(80, 0.01)
        rho0[35:45] = 0.19  # near-jam block against near-empty road
        sol = solve_ring(rho0, L=80.0, T=30.0, fd=self.FD,
                         weights=self._weights())
        assert sol.rho.min() >= 0.0

    def test_output_grid_convention(self):
        rho0 = np.full(20, 0.05)
        sol = solve_ring(rho0, L=20.0, T=40.0, fd=self.FD,
                         weights=self._weights(eta=3.0))
        assert sol.rho.shape == (20, 40)
        np.testing.assert_allclose(sol.t, np.arange(40.0))
        np.testing.assert_allclose(sol.x, np.arange(20.0))
        sol300 = solve_ring(np.full(20, 0.05), L=20.0, T=300.0, fd=self.FD,
                            weights=self._weights(eta=3.0), dt_out=1.0)
        assert sol300.n_out == 300

    def test_initial_snapshot_is_input(self):
        rho0 = smooth_bump(50, 100.0)
        sol = solve_ring(rho0, L=100.0, T=10.0, fd=self.FD,
                         weights=self._weights())
        np.testing.assert_array_equal(sol.rho[:, 0], rho0)

    def test_wave_moves_with_the_flow(self):
        # in free-ish traffic the hump's crest must advect downstream
        rho0 = smooth_bump(100, 100.0, base=0.02, amp=0.02)
        sol = solve_ring(rho0, L=100.0, T=3.0, fd=self.FD,
                         weights=self._weights(eta=2.0))
        assert sol.rho[:, -1].argmax() > sol.rho[:, 0].argmax()

    def test_kernel_width_changes_the_solution(self):
        rho0 = smooth_bump(80, 80.0)
        narrow = solve_ring(rho0, L=80.0, T=20.0, fd=self.FD,
                            weights=np.array([1.0]))
        wide = solve_ring(rho0, L=80.0, T=20.0, fd=self.FD,
                          weights=self._weights(eta=12.0))
        diff = np.abs(narrow.rho[:, -1] - wide.rho[:, -1]).max()
        assert diff > 1e-3

    def test_numba_and_numpy_paths_agree(self):
        if not use_numba():
            pytest.skip("numba path disabled in this environment")
        rho0 = smooth_bump(60, 60.0)
        w = self._weights()
        fast = solve_ring(rho0, L=60.0, T=20.0, fd=self.FD, weights=w)
        slow = solve_ring(rho0, L=60.0, T=20.0, fd=self.FD, weights=w,
                          force_numpy=True)
        np.testing.assert_allclose(fast.rho, slow.rho, rtol=0, atol=1e-13)

    def test_first_order_self_convergence(self):
        # upwind with a smooth solution: halving dx should cut the error
        # roughly in half; compare both resolutions against a finer run
        L, T = 40.0, 4.0

        def run(n_x):
            x = np.arange(n_x) * (L / n_x)
            rho0 = 0.06 + 0.02 * np.sin(2 * np.pi * x / L)
            w = discretize_kernel(linear_decay_kernel(4.0), eta_a=4.0,
                                  eta_b=0.0, dx=L / n_x)
            return solve_ring(rho0, L=L, T=T, fd=self.FD, weights=w,
                              dt_out=1.0)

        coarse, mid, fine = run(40), run(80), run(160)
        err_coarse = np.abs(coarse.rho[:, -1] - fine.rho[::4, -1]).mean()
        err_mid = np.abs(mid.rho[:, -1] - fine.rho[::2, -1]).mean()
        assert err_mid < 0.7 * err_coarse

    def test_bad_inputs_rejected(self):
        w = self._weights()
        with pytest.raises(ValueError):
            solve_ring(np.ones((4, 4)) * 0.05, L=4.0, T=2.0, fd=self.FD,
                       weights=w)
        with pytest.raises(ValueError):
            solve_ring(np.full(10, 0.05), L=10.0, T=2.0, fd=self.FD,
                       weights=np.array([0.5, 0.4]))
        with pytest.raises(ValueError):
            solve_ring(np.full(10, 0.05), L=10.0, T=2.0,
                       fd=lambda rho: np.zeros_like(np.asarray(rho, float)),
                       weights=np.array([1.0]))

    def test_lookbehind_weights_supported(self):
        def box(u):
            u = np.asarray(u, float)
            return np.where((u >= -2.0) & (u < 2.0), 0.25, 0.0)

        w = discretize_kernel(box, eta_a=2.0, eta_b=2.0, dx=1.0)
        rho0 = smooth_bump(40, 40.0)
        sol = solve_ring(rho0, L=40.0, T=10.0, fd=self.FD, weights=w,
                         n_b=2)
        mass = sol.rho.sum(axis=0) * sol.dx
        np.testing.assert_allclose(mass, mass[0], rtol=1e-12)
        assert sol.rho.min() >= 0.0
