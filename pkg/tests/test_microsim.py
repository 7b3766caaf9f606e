"""Ring-road simulation tests.

Expected numbers are hand evaluations of the controller and equilibrium
formulas, frozen before comparison against the implementation.
"""

import numpy as np
import pytest

from nlflow.baselines import car_following_params, nudging_params
from nlflow.microsim import (
    ControllerParams,
    FleetSpec,
    Perturbation,
    RingConfig,
    TrajectorySet,
    VOptParams,
    cav_indices,
    controller_accel,
    equilibrium,
    simulate,
    simulate_open_chain,
    trajectories_from_csv,
    trajectories_to_csv,
    v_opt,
)

CF_VOPT = VOptParams(v_max=17.08, s_st=1.53, s_go=24.96)


class TestVOpt:
    def test_lower_breakpoint(self):
        assert v_opt(1.53, CF_VOPT) == 0.0

    def test_upper_breakpoint(self):
        assert v_opt(24.96, CF_VOPT) == pytest.approx(17.08)

    def test_midpoint_gives_half_vmax(self):
        assert v_opt(13.245, CF_VOPT) == pytest.approx(8.54)

    def test_saturation_outside_breakpoints(self):
        assert v_opt(0.2, CF_VOPT) == 0.0
        assert v_opt(500.0, CF_VOPT) == pytest.approx(17.08)

    def test_continuous_and_nondecreasing(self, rng):
        s = np.sort(rng.uniform(0.0, 40.0, size=500))
        v = v_opt(s, CF_VOPT)
        assert np.all(np.diff(v) >= -1e-12)
        # continuity across the breakpoints at fine resolution
        for b in (1.53, 24.96):
            eps = 1e-9
            assert abs(v_opt(b + eps, CF_VOPT) - v_opt(b - eps, CF_VOPT)) < 1e-6

    def test_invalid_params_rejected_at_construction(self):
        with pytest.raises(ValueError):
            VOptParams(v_max=-1.0, s_st=1.0, s_go=10.0)
        with pytest.raises(ValueError):
            VOptParams(v_max=1.0, s_st=10.0, s_go=10.0)


class TestEquilibrium:
    def test_desk_scale_hand_case(self):
        cfg = RingConfig(L=260.0, N=10, dt=0.05, T=1.0)
        s_star, v_star = equilibrium(cfg, CF_VOPT)
        assert s_star == pytest.approx(21.0)
        # 17.08 * (21 - 1.53) / (24.96 - 1.53), evaluated by hand
        assert v_star == pytest.approx(14.193239436619715, rel=1e-12)

    def test_saturated_branch(self):
        cfg = RingConfig(L=260.0, N=8, dt=0.05, T=1.0)  # s* = 27.5 > s_go
        _, v_star = equilibrium(cfg, CF_VOPT)
        assert v_star == pytest.approx(17.08)

    def test_stopped_branch(self):
        cfg = RingConfig(L=260.0, N=40, dt=0.05, T=1.0)  # s* = 1.5 < s_st
        _, v_star = equilibrium(cfg, CF_VOPT)
        assert v_star == 0.0

    def test_nonpositive_gap_rejected(self):
        with pytest.raises(ValueError):
            RingConfig(L=100.0, N=20, dt=0.05, T=1.0)  # 20 * 5 = 100 = L


def _seven_term_params():
    vopt = VOptParams(v_max=10.0, s_st=2.0, s_go=12.0)
    return ControllerParams(
        alpha={0: 0.5, -1: 0.2, -2: 0.05},
        beta={0: 0.7, -1: 0.1, -2: 0.02, 1: 0.3},
        vopt=vopt,
        lookahead_count=2,
        lookbehind_count=1,
    )


class TestControllerAccel:
    def test_equilibrium_is_fixed_point(self):
        cfg = RingConfig(L=260.0, N=10, dt=0.05, T=1.0)
        s_star, v_star = equilibrium(cfg, CF_VOPT)
        params = car_following_params()
        gaps = np.full(10, s_star)
        speeds = np.full(10, v_star)
        for i in range(10):
            assert controller_accel(i, gaps, speeds, params) == pytest.approx(
                0.0, abs=1e-12
            )

    def test_acc_only_leader_speed_term(self):
        cfg = RingConfig(L=260.0, N=10, dt=0.05, T=1.0)
        s_star, v_star = equilibrium(cfg, CF_VOPT)
        params = car_following_params()
        gaps = np.full(10, s_star)
        speeds = np.full(10, v_star)
        dv = 1.7
        speeds[9] = v_star + dv  # vehicle 9 is the leader of vehicle 0
        beta0 = params.beta[0]
        assert controller_accel(0, gaps, speeds, params) == pytest.approx(
            beta0 * dv, rel=1e-12
        )

    def test_seven_term_hand_sum(self):
        # Hand spreadsheet evaluation (frozen): gaps and speeds below with
        # gains (a0=.5, b0=.7, a-1=.2, b-1=.1, a-2=.05, b-2=.02, b1=.3)
        # give u_0 = 2.12; with the nudging indicator active and the
        # follower slower than ego, the look-behind term drops -> 2.27.
        params = _seven_term_params()
        gaps = np.array([7.0, 6.0, 8.0, 5.0, 9.0])
        speeds = np.array([4.0, 3.5, 5.0, 2.0, 6.0])
        assert controller_accel(0, gaps, speeds, params) == pytest.approx(
            2.12, rel=1e-12
        )
        nudged = ControllerParams(
            alpha=params.alpha, beta=params.beta, vopt=params.vopt,
            lookahead_count=2, lookbehind_count=1, nudging_indicator=True,
        )
        assert controller_accel(0, gaps, speeds, nudged) == pytest.approx(
            2.27, rel=1e-12
        )

    def test_translation_invariance_depends_only_on_gaps_speeds(self):
        # the API takes gaps and speeds only; ring index shifts relabel
        params = _seven_term_params()
        gaps = np.array([7.0, 6.0, 8.0, 5.0, 9.0])
        speeds = np.array([4.0, 3.5, 5.0, 2.0, 6.0])
        base = controller_accel(0, gaps, speeds, params)
        rolled = controller_accel(2, np.roll(gaps, 2), np.roll(speeds, 2), params)
        assert rolled == pytest.approx(base, rel=1e-14)

    def test_gain_indices_must_match_counts(self):
        vopt = VOptParams(v_max=10.0, s_st=2.0, s_go=12.0)
        with pytest.raises(ValueError):
            ControllerParams(alpha={0: 0.5, -1: 0.1}, beta={0: 0.7},
                             vopt=vopt)  # lookahead_count defaults to 0


class TestSimulate:
    def test_unperturbed_equilibrium_holds(self, cf_params):
        cfg = RingConfig(L=260.0, N=10, dt=0.05, T=50.0,
                         perturbation=Perturbation(magnitude=0.0))
        traj = simulate(cfg, FleetSpec.homogeneous(cf_params))
        _, v_star = equilibrium(cfg, cf_params.vopt)
        assert np.max(np.abs(traj.speeds - v_star)) < 1e-9

    def test_ring_closure_every_step(self, small_ring):
        cfg, traj = small_ring
        total = traj.gaps().sum(axis=1) + cfg.N * traj.vehicle_length
        assert np.max(np.abs(total - cfg.L)) < 1e-6 * cfg.L

    def test_reproducible(self, cf_params):
        cfg = RingConfig(L=130.0, N=8, dt=0.05, T=10.0,
                         perturbation=Perturbation(magnitude=0.3))
        a = simulate(cfg, FleetSpec.homogeneous(cf_params))
        b = simulate(cfg, FleetSpec.homogeneous(cf_params))
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.speeds, b.speeds)

    def test_zero_extra_gains_reduce_to_plain_acc_bitwise(self, cf_params):
        cfg = RingConfig(L=130.0, N=8, dt=0.05, T=10.0,
                         perturbation=Perturbation(magnitude=0.3))
        padded = ControllerParams(
            alpha={0: cf_params.alpha[0], -1: 0.0, -2: 0.0},
            beta={0: cf_params.beta[0], -1: 0.0, -2: 0.0, 1: 0.0},
            vopt=cf_params.vopt,
            lookahead_count=2,
            lookbehind_count=1,
        )
        plain = simulate(cfg, FleetSpec.homogeneous(cf_params))
        extra = simulate(cfg, FleetSpec.homogeneous(padded))
        assert np.array_equal(plain.positions, extra.positions)
        assert np.array_equal(plain.speeds, extra.speeds)

    def test_numba_and_numpy_paths_agree(self, cf_params):
        cfg = RingConfig(L=130.0, N=8, dt=0.05, T=10.0,
                         perturbation=Perturbation(magnitude=0.3))
        fleet = FleetSpec.homogeneous(cf_params)
        a = simulate(cfg, fleet, use_numba_kernel=False)
        b = simulate(cfg, fleet, use_numba_kernel=True)
        assert np.allclose(a.positions, b.positions, atol=1e-10)
        assert np.allclose(a.speeds, b.speeds, atol=1e-10)

    def test_speeds_clamped_nonnegative(self, cf_params):
        cfg = RingConfig(L=260.0, N=10, dt=0.05, T=60.0,
                         perturbation=Perturbation(magnitude=1.0, duration=8.0))
        traj = simulate(cfg, FleetSpec.homogeneous(cf_params))
        assert np.all(traj.speeds >= 0.0)

    def test_collision_flagged_with_truncation(self):
        # nearly inert followers run into a vehicle 0 braked to a stop
        vopt = VOptParams(v_max=15.0, s_st=1.0, s_go=10.0)
        weak = ControllerParams(alpha={0: 1e-4}, beta={0: 0.0}, vopt=vopt)
        cfg = RingConfig(
            L=120.0, N=8, dt=0.05, T=60.0,
            perturbation=Perturbation(magnitude=1.0, duration=60.0),
        )
        traj = simulate(cfg, FleetSpec.homogeneous(weak))
        assert traj.collided
        assert traj.collision_time is not None
        # arrays keep only the states before the offending step
        assert traj.times[-1] == pytest.approx(traj.collision_time - cfg.dt)
        assert traj.times[-1] < 60.0

    def test_sinusoidal_perturbation_supported(self, cf_params):
        cfg = RingConfig(
            L=130.0, N=8, dt=0.05, T=5.0,
            perturbation=Perturbation(kind="position_sine", amplitude=1.0,
                                      waves=2),
        )
        traj = simulate(cfg, FleetSpec.homogeneous(cf_params))
        assert not traj.collided
        assert traj.positions.shape[0] == traj.times.shape[0]


class TestStringStabilityCrossCheck:
    """Perturbation growth along the chain matches gain regimes."""

    def _chain_amplitudes(self, params, N=10):
        cfg = RingConfig(L=40.0 * N, N=N, dt=0.05, T=120.0,
                         perturbation=Perturbation(magnitude=0.3, duration=2.0))
        traj = simulate(cfg, FleetSpec.homogeneous(params))
        _, v_star = equilibrium(cfg, params.vopt)
        dev = np.abs(traj.speeds - v_star)
        return dev.max(axis=0)

    def test_string_stable_gains_decay_downstream(self):
        vopt = VOptParams(v_max=10.0, s_st=5.0, s_go=65.0)  # kappa = 1/6
        stable = ControllerParams(alpha={0: 1.0}, beta={0: 1.0}, vopt=vopt)
        amp = self._chain_amplitudes(stable)
        # vehicle 0 is perturbed; its immediate followers 1, 2, 3 see
        # strictly shrinking peaks
        assert amp[1] > amp[2] > amp[3]

    def test_string_unstable_gains_grow_downstream(self):
        # open chain: equilibrium spacing 35 m sits mid-branch, where
        # kappa = v_max/(s_go-s_st) = 0.5 and alpha0 + 2 beta0 = 0.1 falls
        # far short of 2 kappa -- disturbances must amplify rearward
        vopt = VOptParams(v_max=30.0, s_st=5.0, s_go=65.0)
        unstable = ControllerParams(alpha={0: 0.1}, beta={0: 0.0}, vopt=vopt)
        v_star = v_opt(35.0, vopt)

        def lead_speed(t):
            return v_star - 3.0 if t < 2.0 else v_star

        times, speeds = simulate_open_chain(
            unstable, n_followers=8, lead_speed=lead_speed,
            s0=35.0, v0=v_star, dt=0.05, T=120.0)
        amp = np.abs(speeds - v_star).max(axis=0)
        assert amp[6] > amp[3] > amp[1]


class TestFleetPlacement:
    def test_extremes(self):
        assert cav_indices(10, 0.0).size == 0
        assert np.array_equal(cav_indices(10, 1.0), np.arange(10))

    def test_even_placement_deterministic_and_strided(self):
        idx = cav_indices(10, 0.5)
        assert idx.size == 5
        assert np.array_equal(idx, cav_indices(10, 0.5))
        gaps = np.diff(np.sort(idx))
        assert set(gaps.tolist()) == {2}

    def test_mixed_fleet_simulates(self, cf_params):
        nudge = nudging_params()
        fleet = FleetSpec(hv_params=cf_params, cav_params=nudge,
                          penetration=0.5)
        cfg = RingConfig(L=130.0, N=8, dt=0.05, T=5.0,
                         perturbation=Perturbation(magnitude=0.2))
        traj = simulate(cfg, fleet)
        assert not traj.collided


class TestTrajectoryRoundTrip:
    def test_csv_roundtrip(self, small_ring, tmp_path):
        cfg, traj = small_ring
        path = tmp_path / "traj.csv"
        trajectories_to_csv(traj, path)
        header = path.read_text().splitlines()[0]
        assert header == "t,vehicle_id,x,v,s"
        back = trajectories_from_csv(path, L=cfg.L)
        assert np.allclose(back.times, traj.times)
        assert np.allclose(back.positions, traj.positions)
        assert np.allclose(back.speeds, traj.speeds)

    def test_invariants_enforced(self):
        with pytest.raises(ValueError):
            TrajectorySet(
                times=np.array([0.0]),
                positions=np.array([[5.0]]),
                speeds=np.array([[-1.0]]),
                L=100.0,
            )
        with pytest.raises(ValueError):
            TrajectorySet(
                times=np.array([0.0]),
                positions=np.array([[150.0]]),
                speeds=np.array([[1.0]]),
                L=100.0,
            )
