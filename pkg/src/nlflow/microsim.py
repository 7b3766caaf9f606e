"""Ring-road platoon simulation.

N vehicles drive on a ring of length L under a generic car-following
controller combining an optimal-velocity term, relative-speed feedback to
the direct leader, and optional look-ahead / look-behind terms:

    u_i = alpha_0 (V_opt(s_i) - v_i) + beta_0 (v_{i-1} - v_i)
        + sum_{j=-1..-n} [ alpha_j (V_opt(s_{i+j}) - v_i)
                           + beta_j (v_{i+j-1} - v_i) ]
        + sum_{j=1..m}   [ alpha_j (V_opt(s_{i+j}) - v_i)
                           + beta_j (v_{i+j} - v_i) ]

Negative offsets j point downstream (leaders), positive offsets upstream
(followers).  Look-ahead speed terms reference the vehicle in front of the
offset vehicle (v_{i+j-1}); look-behind terms reference the offset vehicle
itself.  With ``nudging_indicator`` set, a look-behind speed term is active
only while that follower is faster than the ego vehicle.

The desired speed V_opt is piecewise linear in the gap: zero below s_st,
v_max above s_go, linear in between.

Integration is explicit RK4 on the unwrapped positions and speeds; gaps are
always derived from positions, so ring closure (sum of gaps + N*l = L)
holds identically.  Speeds are clamped at zero after every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .accel import njit, use_numba

__all__ = [
    "VOptParams",
    "ControllerParams",
    "Perturbation",
    "RingConfig",
    "FleetSpec",
    "TrajectorySet",
    "v_opt",
    "equilibrium",
    "controller_accel",
    "simulate",
    "simulate_open_chain",
    "cav_indices",
    "trajectories_to_csv",
    "trajectories_from_csv",
]


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VOptParams:
    """Piecewise-linear desired speed function parameters."""

    v_max: float  # m/s
    s_st: float  # m, standstill gap (V_opt = 0 below)
    s_go: float  # m, free-flow gap (V_opt = v_max above)

    def __post_init__(self):
        if not (self.v_max > 0):
            raise ValueError(f"v_max must be positive, got {self.v_max}")
        if not (0 < self.s_st < self.s_go):
            raise ValueError(
                f"need 0 < s_st < s_go, got s_st={self.s_st}, s_go={self.s_go}"
            )


@dataclass(frozen=True)
class ControllerParams:
    """Gains of the generic controller.

    ``alpha`` and ``beta`` map a relative index j in {-n..m} to the gap gain
    alpha_j and speed gain beta_j (both 1/s).  Index 0 is the ACC part,
    negative indices are additional leaders, positive indices followers.
    """

    alpha: dict
    beta: dict
    vopt: VOptParams
    lookahead_count: int = 0  # n >= 0
    lookbehind_count: int = 0  # m >= 0
    nudging_indicator: bool = False

    def __post_init__(self):
        n, m = self.lookahead_count, self.lookbehind_count
        if n < 0 or m < 0:
            raise ValueError("lookahead/lookbehind counts must be >= 0")
        valid = set(range(-n, m + 1))
        for name, gains in (("alpha", self.alpha), ("beta", self.beta)):
            for j, g in gains.items():
                if j not in valid:
                    raise ValueError(f"{name}[{j}] outside {{-{n}..{m}}}")
                if not math.isfinite(g):
                    raise ValueError(f"{name}[{j}] not finite: {g}")
        if self.alpha.get(0, 0.0) < 0 or self.beta.get(0, 0.0) < 0:
            raise ValueError("alpha_0 and beta_0 must be >= 0")

    def gain_arrays(self):
        """Dense (offsets, alpha, beta) arrays over j = -n..m."""
        n, m = self.lookahead_count, self.lookbehind_count
        offsets = np.arange(-n, m + 1, dtype=np.int64)
        a = np.array([self.alpha.get(int(j), 0.0) for j in offsets])
        b = np.array([self.beta.get(int(j), 0.0) for j in offsets])
        return offsets, a, b


@dataclass(frozen=True)
class Perturbation:
    """Initial-condition disturbance applied to the equilibrium state.

    kind = "speed_pulse": vehicle ``vehicle`` drives at (1 - magnitude) * v*
    for the first ``duration`` seconds, then is released.
    kind = "position_sine": positions offset by amplitude * sin(2 pi w i / N).
    kind = "none": exact equilibrium start.
    """

    kind: str = "speed_pulse"
    magnitude: float = 0.2
    duration: float = 2.0
    vehicle: int = 0
    amplitude: float = 1.0
    waves: int = 1

    def __post_init__(self):
        if self.kind not in ("speed_pulse", "position_sine", "none"):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")


@dataclass(frozen=True)
class RingConfig:
    L: float  # m
    N: int
    l: float = 5.0  # vehicle length, m
    dt: float = 0.05  # s
    T: float = 300.0  # s
    seed: int = 0
    perturbation: Perturbation = field(default_factory=Perturbation)

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("need at least 2 vehicles")
        if not self.L > self.N * self.l:
            raise ValueError(
                f"ring too short: L={self.L} <= N*l={self.N * self.l}"
            )
        if self.dt <= 0 or self.T <= 0:
            raise ValueError("dt and T must be positive")


@dataclass(frozen=True)
class FleetSpec:
    """Mixed HV/CAV fleet with deterministic even CAV placement."""

    hv_params: ControllerParams
    cav_params: ControllerParams
    penetration: float = 0.0
    placement: str = "even"

    def __post_init__(self):
        if not (0.0 <= self.penetration <= 1.0):
            raise ValueError("penetration must lie in [0, 1]")
        if self.placement != "even":
            raise ValueError("only even placement is supported")

    @classmethod
    def homogeneous(cls, params: ControllerParams) -> "FleetSpec":
        return cls(hv_params=params, cav_params=params, penetration=0.0)


@dataclass
class TrajectorySet:
    """Simulation output on a fixed time grid.

    positions are wrapped to [0, L); a collision (some gap <= 0) truncates
    the arrays at the offending step and sets ``collision_time``.
    """

    times: np.ndarray  # (S,)
    positions: np.ndarray  # (S, N), wrapped
    speeds: np.ndarray  # (S, N)
    L: float
    vehicle_length: float = 5.0
    collided: bool = False
    collision_time: float | None = None

    def __post_init__(self):
        S, N = self.positions.shape
        if self.speeds.shape != (S, N) or self.times.shape != (S,):
            raise ValueError("inconsistent trajectory array shapes")
        if np.any(self.speeds < 0):
            raise ValueError("negative speed in trajectory")
        if np.any((self.positions < 0) | (self.positions >= self.L)):
            raise ValueError("position outside [0, L)")

    @property
    def n_vehicles(self) -> int:
        return self.positions.shape[1]

    def gaps(self) -> np.ndarray:
        """Bumper-to-bumper gaps s_i = (x_{i-1} - x_i - l) mod L, shape (S, N)."""
        lead = np.roll(self.positions, 1, axis=1)
        s = np.mod(lead - self.positions, self.L) - self.vehicle_length
        return s


# ---------------------------------------------------------------------------
# basic operations
# ---------------------------------------------------------------------------


def v_opt(s, p: VOptParams):
    """Piecewise-linear desired speed; accepts scalars or arrays."""
    s = np.asarray(s, dtype=float)
    frac = np.clip((s - p.s_st) / (p.s_go - p.s_st), 0.0, 1.0)
    out = p.v_max * frac
    if out.ndim == 0:
        return float(out)
    return out


def equilibrium(cfg: RingConfig, p: VOptParams):
    """Uniform-flow equilibrium (s*, v*) with s* = L/N - l."""
    s_star = cfg.L / cfg.N - cfg.l
    if s_star <= 0:
        raise ValueError(f"non-positive equilibrium gap {s_star}")
    return s_star, v_opt(s_star, p)


def controller_accel(i: int, gaps, speeds, params: ControllerParams) -> float:
    """Reference (readable) evaluation of the controller for vehicle i.

    ``gaps`` and ``speeds`` are length-N snapshots; indices i+j resolve
    modulo N on the ring.  The integration kernels reimplement this sum;
    they are tested against this function.
    """
    gaps = np.asarray(gaps, dtype=float)
    speeds = np.asarray(speeds, dtype=float)
    N = gaps.shape[0]
    v_i = speeds[i]
    u = 0.0
    for j in range(-params.lookahead_count, params.lookbehind_count + 1):
        a = params.alpha.get(j, 0.0)
        b = params.beta.get(j, 0.0)
        if a != 0.0:
            u += a * (v_opt(gaps[(i + j) % N], params.vopt) - v_i)
        if b != 0.0:
            if j <= 0:
                v_ref = speeds[(i + j - 1) % N]
                u += b * (v_ref - v_i)
            else:
                v_ref = speeds[(i + j) % N]
                dv = v_ref - v_i
                if params.nudging_indicator and dv <= 0.0:
                    continue
                u += b * dv
    return u


def cav_indices(N: int, penetration: float) -> np.ndarray:
    """Evenly strided CAV indices; ties broken toward the lower index."""
    n_cav = int(math.floor(penetration * N + 0.5))
    if n_cav <= 0:
        return np.empty(0, dtype=np.int64)
    if n_cav >= N:
        return np.arange(N, dtype=np.int64)
    stride = N / n_cav
    # round half down so ties pick the lower index
    idx = np.array(
        [int(math.ceil(k * stride - 0.5)) for k in range(n_cav)], dtype=np.int64
    )
    return np.unique(idx)


# ---------------------------------------------------------------------------
# integration kernels
# ---------------------------------------------------------------------------
# State is (x, v) with x unwrapped; gaps derive from positions, with the +L
# correction applied to vehicle 0 whose leader is vehicle N-1 one lap ahead.
# Both kernels implement identical math; the numba one loops over scalars,
# the numpy one vectorizes over vehicles with np.roll gathers.


def _rk4_ring_loop(x, v, A, B, off, vm, sst, sgo, nudge, l, L, dt, n_steps,
                   hold_steps, hold_veh, hold_speed, out_x, out_v):
    """Scalar RK4 loop (numba kernel). Returns steps completed before a
    collision, or n_steps if none occurred."""
    N = x.shape[0]
    K = off.shape[0]
    s = np.empty(N)
    u = np.empty(N)
    k1 = np.empty((2, N))
    k2 = np.empty((2, N))
    k3 = np.empty((2, N))
    k4 = np.empty((2, N))
    xs = np.empty(N)
    vs = np.empty(N)

    for step in range(n_steps):
        holding = step < hold_steps
        if holding:
            v[hold_veh] = hold_speed
        # collision check on the gaps at the step start
        for i in range(N):
            lead = i - 1 if i > 0 else N - 1
            si = x[lead] - x[i] - l
            if i == 0:
                si += L
            if si <= 0.0:
                return step
        out_x[step, :] = x
        out_v[step, :] = v

        for stage in range(4):
            if stage == 0:
                for i in range(N):
                    xs[i] = x[i]
                    vs[i] = v[i]
            elif stage == 1:
                for i in range(N):
                    xs[i] = x[i] + 0.5 * dt * k1[0, i]
                    vs[i] = v[i] + 0.5 * dt * k1[1, i]
            elif stage == 2:
                for i in range(N):
                    xs[i] = x[i] + 0.5 * dt * k2[0, i]
                    vs[i] = v[i] + 0.5 * dt * k2[1, i]
            else:
                for i in range(N):
                    xs[i] = x[i] + dt * k3[0, i]
                    vs[i] = v[i] + dt * k3[1, i]
            if holding:
                vs[hold_veh] = hold_speed

            for i in range(N):
                lead = i - 1 if i > 0 else N - 1
                si = xs[lead] - xs[i] - l
                if i == 0:
                    si += L
                s[i] = si
            for i in range(N):
                ui = 0.0
                for k in range(K):
                    a = A[i, k]
                    b = B[i, k]
                    if a == 0.0 and b == 0.0:
                        continue
                    j = off[k]
                    idx = (i + j) % N
                    if a != 0.0:
                        sg = s[idx]
                        if sg <= sst[i]:
                            vo = 0.0
                        elif sg >= sgo[i]:
                            vo = vm[i]
                        else:
                            vo = vm[i] * (sg - sst[i]) / (sgo[i] - sst[i])
                        ui += a * (vo - vs[i])
                    if b != 0.0:
                        if j <= 0:
                            pidx = (i + j - 1) % N
                            ui += b * (vs[pidx] - vs[i])
                        else:
                            dv = vs[idx] - vs[i]
                            if nudge[i] and dv <= 0.0:
                                pass
                            else:
                                ui += b * dv
                u[i] = ui
            if holding:
                u[hold_veh] = 0.0

            if stage == 0:
                for i in range(N):
                    k1[0, i] = vs[i]
                    k1[1, i] = u[i]
            elif stage == 1:
                for i in range(N):
                    k2[0, i] = vs[i]
                    k2[1, i] = u[i]
            elif stage == 2:
                for i in range(N):
                    k3[0, i] = vs[i]
                    k3[1, i] = u[i]
            else:
                for i in range(N):
                    k4[0, i] = vs[i]
                    k4[1, i] = u[i]

        for i in range(N):
            x[i] = x[i] + (dt / 6.0) * (
                k1[0, i] + 2.0 * k2[0, i] + 2.0 * k3[0, i] + k4[0, i]
            )
            vi = v[i] + (dt / 6.0) * (
                k1[1, i] + 2.0 * k2[1, i] + 2.0 * k3[1, i] + k4[1, i]
            )
            v[i] = vi if vi > 0.0 else 0.0
        if step + 1 < hold_steps:
            v[hold_veh] = hold_speed

    for i in range(N):
        lead = i - 1 if i > 0 else N - 1
        si = x[lead] - x[i] - l
        if i == 0:
            si += L
        if si <= 0.0:
            return n_steps
    out_x[n_steps, :] = x
    out_v[n_steps, :] = v
    return n_steps + 1


_rk4_ring_loop_jit = njit(cache=True)(_rk4_ring_loop)


def _vopt_vec(s, vm, sst, sgo):
    frac = np.clip((s - sst) / (sgo - sst), 0.0, 1.0)
    return vm * frac


def _deriv_numpy(xs, vs, A, B, off, vm, sst, sgo, nudge, l, L, holding,
                 hold_veh):
    """Vectorized controller evaluation; returns (dx, dv)."""
    lead = np.roll(xs, 1)
    lead[0] += L
    s = lead - xs - l
    u = np.zeros_like(vs)
    for k, j in enumerate(off):
        a_col = A[:, k]
        b_col = B[:, k]
        if np.any(a_col != 0.0):
            sj = np.roll(s, -j)
            vo = _vopt_vec(sj, vm, sst, sgo)
            u += a_col * (vo - vs)
        if np.any(b_col != 0.0):
            if j <= 0:
                v_ref = np.roll(vs, -(j - 1))
                u += b_col * (v_ref - vs)
            else:
                dv = np.roll(vs, -j) - vs
                dv = np.where(nudge & (dv <= 0.0), 0.0, dv)
                u += b_col * dv
    if holding:
        u[hold_veh] = 0.0
    return vs, u


def _rk4_ring_numpy(x, v, A, B, off, vm, sst, sgo, nudge, l, L, dt, n_steps,
                    hold_steps, hold_veh, hold_speed, out_x, out_v):
    """Vectorized fallback path; same contract as the loop kernel."""
    for step in range(n_steps):
        holding = step < hold_steps
        if holding:
            v[hold_veh] = hold_speed
        lead = np.roll(x, 1)
        lead[0] += L
        if np.any(lead - x - l <= 0.0):
            return step
        out_x[step, :] = x
        out_v[step, :] = v

        def deriv(xs, vs):
            if holding:
                vs = vs.copy()
                vs[hold_veh] = hold_speed
            return _deriv_numpy(xs, vs, A, B, off, vm, sst, sgo, nudge, l, L,
                                holding, hold_veh)

        k1x, k1v = deriv(x, v)
        k2x, k2v = deriv(x + 0.5 * dt * k1x, v + 0.5 * dt * k1v)
        k3x, k3v = deriv(x + 0.5 * dt * k2x, v + 0.5 * dt * k2v)
        k4x, k4v = deriv(x + dt * k3x, v + dt * k3v)
        x += (dt / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        v += (dt / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
        np.maximum(v, 0.0, out=v)
        if step + 1 < hold_steps:
            v[hold_veh] = hold_speed

    lead = np.roll(x, 1)
    lead[0] += L
    if np.any(lead - x - l <= 0.0):
        return n_steps
    out_x[n_steps, :] = x
    out_v[n_steps, :] = v
    return n_steps + 1


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _fleet_arrays(cfg: RingConfig, fleet: FleetSpec):
    """Per-vehicle dense gain/V_opt arrays covering both vehicle classes."""
    N = cfg.N
    cavs = cav_indices(N, fleet.penetration)
    is_cav = np.zeros(N, dtype=bool)
    is_cav[cavs] = True

    n_max = max(fleet.hv_params.lookahead_count, fleet.cav_params.lookahead_count)
    m_max = max(fleet.hv_params.lookbehind_count, fleet.cav_params.lookbehind_count)
    off = np.arange(-n_max, m_max + 1, dtype=np.int64)
    K = off.shape[0]

    A = np.zeros((N, K))
    B = np.zeros((N, K))
    vm = np.empty(N)
    sst = np.empty(N)
    sgo = np.empty(N)
    nudge = np.zeros(N, dtype=bool)
    for i in range(N):
        p = fleet.cav_params if is_cav[i] else fleet.hv_params
        for k, j in enumerate(off):
            A[i, k] = p.alpha.get(int(j), 0.0)
            B[i, k] = p.beta.get(int(j), 0.0)
        vm[i] = p.vopt.v_max
        sst[i] = p.vopt.s_st
        sgo[i] = p.vopt.s_go
        nudge[i] = p.nudging_indicator
    return A, B, off, vm, sst, sgo, nudge, is_cav


def simulate(cfg: RingConfig, fleet: FleetSpec, use_numba_kernel=None) -> TrajectorySet:
    """Integrate the ring platoon from the configured initial condition.

    Initial state is the uniform equilibrium of the HV desired-speed
    function plus the configured perturbation.  A collision (gap <= 0)
    truncates the output and flags the result.
    """
    N = cfg.N
    A, B, off, vm, sst, sgo, nudge, _ = _fleet_arrays(cfg, fleet)
    s_star, v_star = equilibrium(cfg, fleet.hv_params.vopt)

    spacing = cfg.L / N
    x = np.array([(N - 1 - i) * spacing for i in range(N)], dtype=float)
    v = np.full(N, v_star, dtype=float)

    pert = cfg.perturbation
    hold_steps = 0
    hold_veh = 0
    hold_speed = 0.0
    if pert.kind == "speed_pulse":
        hold_steps = int(round(pert.duration / cfg.dt))
        hold_veh = pert.vehicle % N
        hold_speed = (1.0 - pert.magnitude) * v_star
        v[hold_veh] = hold_speed
    elif pert.kind == "position_sine":
        x = x + pert.amplitude * np.sin(
            2.0 * np.pi * pert.waves * np.arange(N) / N
        )

    n_steps = int(round(cfg.T / cfg.dt))
    out_x = np.empty((n_steps + 1, N))
    out_v = np.empty((n_steps + 1, N))

    kernel = _rk4_ring_loop_jit if use_numba(use_numba_kernel) else _rk4_ring_numpy
    n_done = kernel(x, v, A, B, off, vm, sst, sgo, nudge, cfg.l, cfg.L,
                    cfg.dt, n_steps, hold_steps, hold_veh, hold_speed,
                    out_x, out_v)

    collided = n_done < n_steps + 1
    times = np.arange(n_done) * cfg.dt
    positions = np.mod(out_x[:n_done], cfg.L)
    speeds = out_v[:n_done]
    return TrajectorySet(
        times=times,
        positions=positions,
        speeds=speeds,
        L=cfg.L,
        vehicle_length=cfg.l,
        collided=collided,
        collision_time=float(n_done * cfg.dt) if collided else None,
    )


def simulate_open_chain(params: ControllerParams, n_followers: int,
                        lead_speed, s0: float, v0: float, dt: float, T: float,
                        vehicle_length: float = 5.0):
    """Open chain: a driven lead vehicle followed by ``n_followers`` copies
    of ``params``.

    ``lead_speed`` is a callable t -> speed.  Followers see only vehicles
    inside the chain: look-ahead speed terms pointing beyond the lead
    vehicle saturate at the lead vehicle, look-ahead gap terms pointing
    beyond it are dropped (no gap defined there), and look-behind terms
    beyond the tail are dropped.  Used by the stability oracle tests; the
    ring simulator is the primary entry point.

    Returns (times, speeds) with speeds of shape (S, n_followers + 1)
    including the lead vehicle in column 0.
    """
    n_steps = int(round(T / dt))
    Nv = n_followers + 1
    x = np.zeros(Nv)
    for i in range(1, Nv):
        x[i] = x[i - 1] - (s0 + vehicle_length)
    v = np.full(Nv, v0, dtype=float)
    v[0] = lead_speed(0.0)

    out_v = np.empty((n_steps + 1, Nv))
    out_v[0] = v
    n = params.lookahead_count
    m = params.lookbehind_count

    def deriv(t, xs, vs):
        dv = np.zeros(Nv)
        for i in range(1, Nv):
            for j in range(-n, m + 1):
                a = params.alpha.get(j, 0.0)
                b = params.beta.get(j, 0.0)
                idx = i + j
                if 1 <= idx < Nv and a != 0.0:
                    s = xs[idx - 1] - xs[idx] - vehicle_length
                    dv[i] += a * (v_opt(s, params.vopt) - vs[i])
                if b != 0.0:
                    if j <= 0:
                        ref = max(i + j - 1, 0)
                        dv[i] += b * (vs[ref] - vs[i])
                    else:
                        ref = i + j
                        if ref < Nv:
                            d = vs[ref] - vs[i]
                            if params.nudging_indicator and d <= 0.0:
                                continue
                            dv[i] += b * d
        return vs.copy(), dv

    for step in range(n_steps):
        t = step * dt
        v[0] = lead_speed(t)

        def stage(ts, xs, vs):
            vs = vs.copy()
            vs[0] = lead_speed(ts)
            return deriv(ts, xs, vs)

        k1x, k1v = stage(t, x, v)
        k2x, k2v = stage(t + dt / 2, x + dt / 2 * k1x, v + dt / 2 * k1v)
        k3x, k3v = stage(t + dt / 2, x + dt / 2 * k2x, v + dt / 2 * k2v)
        k4x, k4v = stage(t + dt, x + dt * k3x, v + dt * k3v)
        x += dt / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
        v += dt / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
        np.maximum(v, 0.0, out=v)
        v[0] = lead_speed((step + 1) * dt)
        out_v[step + 1] = v

    times = np.arange(n_steps + 1) * dt
    return times, out_v


# ---------------------------------------------------------------------------
# trajectory CSV round trip
# ---------------------------------------------------------------------------


def trajectories_to_csv(traj: TrajectorySet, path) -> None:
    """Long-format export: one row per (t, vehicle): t,vehicle_id,x,v,s."""
    S, N = traj.positions.shape
    gaps = traj.gaps()
    frame = pd.DataFrame(
        {
            "t": np.repeat(traj.times, N),
            "vehicle_id": np.tile(np.arange(N), S),
            "x": traj.positions.ravel(),
            "v": traj.speeds.ravel(),
            "s": gaps.ravel(),
        }
    )
    frame.to_csv(path, index=False)


def trajectories_from_csv(path, L: float, vehicle_length: float = 5.0) -> TrajectorySet:
    frame = pd.read_csv(path)
    expected = ["t", "vehicle_id", "x", "v", "s"]
    if list(frame.columns) != expected:
        raise ValueError(f"trajectory CSV must have columns {expected}")
    times = np.unique(frame["t"].to_numpy())
    N = frame["vehicle_id"].nunique()
    S = times.shape[0]
    positions = frame["x"].to_numpy().reshape(S, N)
    speeds = frame["v"].to_numpy().reshape(S, N)
    return TrajectorySet(
        times=times, positions=positions, speeds=speeds, L=L,
        vehicle_length=vehicle_length,
    )
