"""Macroscopic state reconstruction from trajectories.

Density, flow, and speed fields on a regular (x, t) grid are estimated by
summing Gaussian kernels centered on vehicle positions, with distance
measured around the ring:

    rho(x, t) = sum_i K(d(x, x_i(t)), h)
    q(x, t)   = sum_i v_i(t) K(d(x, x_i(t)), h)
    v(x, t)   = q(x, t) / rho(x, t)

where K(u, h) = exp(-u^2 / (2 h^2)) / (sqrt(2 pi) h) and d is the circular
distance min(|x - y|, L - |x - y|).

Kernels are evaluated over the full ring rather than truncated: at desk
scales the full sum costs microseconds per cell and keeps the density
strictly positive everywhere, which downstream relative-error metrics rely
on.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .accel import njit, use_numba
from .microsim import TrajectorySet

__all__ = [
    "MacroField",
    "ObservationSet",
    "ring_distance",
    "gaussian_kernel",
    "reconstruct",
    "select_observations",
    "field_to_csv",
    "field_from_csv",
]


@dataclass
class MacroField:
    """Density/flow/speed grids; rho[i, j] is the cell at (x_i, t_j)."""

    rho: np.ndarray  # (N_x, N_t), veh/m
    q: np.ndarray  # veh/s
    v: np.ndarray  # m/s
    dx: float
    dt_grid: float
    L: float
    T: float
    h: float | None = None
    n_vehicles: int | None = None

    def __post_init__(self):
        if self.rho.shape != self.q.shape or self.rho.shape != self.v.shape:
            raise ValueError("rho/q/v shapes differ")
        if np.any(self.rho <= 0):
            raise ValueError("density must be strictly positive")

    @property
    def n_x(self) -> int:
        return self.rho.shape[0]

    @property
    def n_t(self) -> int:
        return self.rho.shape[1]

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.n_x) * self.dx

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.n_t) * self.dt_grid


@dataclass
class ObservationSet:
    """Training observations: the initial row plus detector columns."""

    x_idx: np.ndarray  # (N_D,)
    t_idx: np.ndarray  # (N_D,)
    rho: np.ndarray  # (N_D,)
    loop_positions: np.ndarray  # (N_l,), meters

    def __post_init__(self):
        if not (self.x_idx.shape == self.t_idx.shape == self.rho.shape):
            raise ValueError("observation arrays must share a shape")
        pts = set(zip(self.x_idx.tolist(), self.t_idx.tolist()))
        if len(pts) != self.x_idx.shape[0]:
            raise ValueError("duplicate observation points")

    def __len__(self) -> int:
        return self.x_idx.shape[0]


def ring_distance(x, y, L: float):
    """Circular distance on a ring of length L; accepts arrays."""
    d = np.abs(np.asarray(x, dtype=float) - np.asarray(y, dtype=float))
    out = np.minimum(d, L - d)
    if out.ndim == 0:
        return float(out)
    return out


def gaussian_kernel(u, h: float):
    """Gaussian smoothing kernel with bandwidth h."""
    if h <= 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    u = np.asarray(u, dtype=float)
    out = np.exp(-(u * u) / (2.0 * h * h)) / (math.sqrt(2.0 * math.pi) * h)
    if out.ndim == 0:
        return float(out)
    return out


def _kde_loop(xs, pos, spd, h, L, rho, q):
    """Scalar KDE accumulation (numba kernel); fills rho/q in place.

    xs: (N_x,) grid positions; pos/spd: (N_t, N) vehicle rows per grid time.
    """
    n_x = xs.shape[0]
    n_t = pos.shape[0]
    n_veh = pos.shape[1]
    c = 1.0 / (math.sqrt(2.0 * math.pi) * h)
    inv2h2 = 1.0 / (2.0 * h * h)
    for j in range(n_t):
        for v in range(n_veh):
            xv = pos[j, v]
            sv = spd[j, v]
            for i in range(n_x):
                d = abs(xs[i] - xv)
                if L - d < d:
                    d = L - d
                w = c * math.exp(-d * d * inv2h2)
                rho[i, j] += w
                q[i, j] += w * sv


_kde_loop_jit = njit(cache=True)(_kde_loop)


def _kde_numpy(xs, pos, spd, h, L, rho, q):
    """Vectorized fallback: one (N_x, N) broadcast per grid time."""
    for j in range(pos.shape[0]):
        d = np.abs(xs[:, None] - pos[j][None, :])
        d = np.minimum(d, L - d)
        w = gaussian_kernel(d, h)
        rho[:, j] = w.sum(axis=1)
        q[:, j] = (w * spd[j][None, :]).sum(axis=1)


def reconstruct(traj: TrajectorySet, h: float = 6.0, dx: float = 1.0,
                dt_grid: float = 1.0, use_numba_kernel=None) -> MacroField:
    """KDE reconstruction of (rho, q, v) on a dx-by-dt_grid grid.

    The grid covers x_i = i*dx for i < L/dx and t_j = j*dt_grid for every
    grid time available in the trajectory (t_j <= last trajectory time).
    Grid times must land on trajectory samples.
    """
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    n_x = int(round(traj.L / dx))
    if abs(n_x * dx - traj.L) > 1e-9 * traj.L:
        raise ValueError(f"dx={dx} does not divide ring length L={traj.L}")
    t_end = traj.times[-1]
    n_t = int(math.floor(t_end / dt_grid - 1e-12)) + 1

    # map grid times onto trajectory samples
    dt_sim = traj.times[1] - traj.times[0] if traj.times.shape[0] > 1 else dt_grid
    idx = np.rint(np.arange(n_t) * dt_grid / dt_sim).astype(np.int64)
    if np.any(np.abs(traj.times[idx] - np.arange(n_t) * dt_grid) > 1e-9):
        raise ValueError("grid times do not align with trajectory samples")

    xs = np.arange(n_x) * dx
    pos = np.ascontiguousarray(traj.positions[idx])
    spd = np.ascontiguousarray(traj.speeds[idx])
    rho = np.zeros((n_x, n_t))
    q = np.zeros((n_x, n_t))
    kernel = _kde_loop_jit if use_numba(use_numba_kernel) else _kde_numpy
    kernel(xs, pos, spd, h, traj.L, rho, q)
    v = q / rho
    return MacroField(
        rho=rho, q=q, v=v, dx=dx, dt_grid=dt_grid, L=traj.L,
        T=n_t * dt_grid, h=h, n_vehicles=traj.n_vehicles,
    )


def select_observations(field: MacroField, n_detectors: int = 5) -> ObservationSet:
    """Initial row at t=0 plus evenly spaced loop-detector columns.

    Detectors sit at x = i*L/N_l and must land on grid cells.
    """
    if n_detectors < 1:
        raise ValueError("need at least one detector")
    loop_x = np.arange(n_detectors) * field.L / n_detectors
    det_idx = np.rint(loop_x / field.dx).astype(np.int64)
    if np.any(np.abs(det_idx * field.dx - loop_x) > 1e-9):
        raise ValueError("detector positions do not land on grid cells")

    x_parts = [np.arange(field.n_x, dtype=np.int64)]
    t_parts = [np.zeros(field.n_x, dtype=np.int64)]
    for d in det_idx:
        tj = np.arange(1, field.n_t, dtype=np.int64)  # t=0 already covered
        x_parts.append(np.full(tj.shape[0], d, dtype=np.int64))
        t_parts.append(tj)
    x_idx = np.concatenate(x_parts)
    t_idx = np.concatenate(t_parts)
    return ObservationSet(
        x_idx=x_idx,
        t_idx=t_idx,
        rho=field.rho[x_idx, t_idx],
        loop_positions=loop_x,
    )


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def field_to_csv(field: MacroField, csv_path, meta_path=None) -> None:
    """Long-format export `x,t,rho,q,v` plus a JSON metadata sidecar."""
    xg, tg = np.meshgrid(field.x, field.t, indexing="ij")
    frame = pd.DataFrame(
        {
            "x": xg.ravel(),
            "t": tg.ravel(),
            "rho": field.rho.ravel(),
            "q": field.q.ravel(),
            "v": field.v.ravel(),
        }
    )
    frame.to_csv(csv_path, index=False)
    if meta_path is not None:
        meta = {
            "L": field.L,
            "T": field.T,
            "dx": field.dx,
            "dt": field.dt_grid,
            "h": field.h,
            "N": field.n_vehicles,
        }
        with open(meta_path, "w") as fh:
            json.dump(meta, fh, indent=2)


def field_from_csv(csv_path, meta_path) -> MacroField:
    with open(meta_path) as fh:
        meta = json.load(fh)
    frame = pd.read_csv(csv_path)
    n_x = int(round(meta["L"] / meta["dx"]))
    n_t = frame.shape[0] // n_x
    shape = (n_x, n_t)
    return MacroField(
        rho=frame["rho"].to_numpy().reshape(shape),
        q=frame["q"].to_numpy().reshape(shape),
        v=frame["v"].to_numpy().reshape(shape),
        dx=float(meta["dx"]),
        dt_grid=float(meta["dt"]),
        L=float(meta["L"]),
        T=float(meta["T"]),
        h=meta.get("h"),
        n_vehicles=meta.get("N"),
    )
