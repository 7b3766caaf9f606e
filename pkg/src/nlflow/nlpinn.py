"""Physics-informed nonlocal flow model.

The learner has three parameter groups:

* per-case density networks ``theta_k``: (x, t) -> rho_hat, one per
  simulation case, inputs normalized by (L, T), output scaled by rho_max;
* a shared kernel parameter vector ``theta_omega`` whose normalization
  omega_hat = theta / sum(theta) gives discretized nonlocal weights over
  offsets [+0, +dx, ..., +(N_a-1) dx, -dx, ..., -N_b dx] (look-ahead block
  first, then look-behind);
* a shared fundamental-diagram network ``theta_v``: nonlocal density
  rho_bar -> speed V_hat.

The physics residual at a point is

    f = d_t rho_hat + d_x rho_hat * V_hat(rho_bar)
      + rho_hat * dV_hat/drho(rho_bar) * d_x rho_bar

where rho_bar applies omega_hat to rho_hat along the ring row and
d_x rho_bar applies the same stencil to d_x rho_hat.  Input derivatives
come from forward tangents (exact), so all parameter gradients of the
losses are exact as well.

Losses (weights c_d, p_omega, p_v):

    L_d = c_d  sum_k mean_D (rho_k - rho_hat_k)^2
    L_p =      sum_k mean_P f_k^2
    L_c = p_omega * L_{c,omega} + p_v * (L_{c,v,1} + L_{c,v,2})

with hinge penalties enforcing kernel nonnegativity and monotonicity away
from the origin on each side, first look-behind weight not above the first
look-ahead weight, V_hat >= 0, and dV_hat/drho <= 0 on a fixed density
grid.

The local-physics baseline freezes the kernel to a unit spike at offset 0,
so the only difference from the nonlocal model is the stencil.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .nets import (
    feature_init,
    forward,
    forward_with_tangents,
    init_mlp,
    layer_sizes,
    flatten_params,
)

__all__ = [
    "KernelGeometry",
    "CaseGeometry",
    "PinnState",
    "normalize_kernel",
    "nonlocal_density",
    "stencil_offsets",
    "stencil_indices",
    "density_with_derivs",
    "fd_with_slope",
    "case_data_loss",
    "case_physics_loss",
    "constraint_loss",
    "residual_points",
    "predict_density",
    "predict_fd",
    "save_model",
    "load_model",
]


# ---------------------------------------------------------------------------
# kernel geometry and primitives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelGeometry:
    """Discretized kernel window: N_a look-ahead cells, N_b look-behind."""

    eta_a: float
    eta_b: float
    dx: float

    def __post_init__(self):
        if self.eta_a < self.dx:
            raise ValueError("look-ahead window must cover at least one cell")
        for name, eta in (("eta_a", self.eta_a), ("eta_b", self.eta_b)):
            n = eta / self.dx
            if abs(n - round(n)) > 1e-9:
                raise ValueError(f"{name}={eta} is not a multiple of dx={self.dx}")

    @property
    def n_a(self) -> int:
        return int(round(self.eta_a / self.dx))

    @property
    def n_b(self) -> int:
        return int(round(self.eta_b / self.dx))

    @property
    def size(self) -> int:
        return self.n_a + self.n_b


def stencil_offsets(n_a: int, n_b: int) -> np.ndarray:
    """Signed cell offsets in kernel order: +0..+(n_a-1), -1..-n_b."""
    return np.concatenate(
        [np.arange(n_a, dtype=np.int64), -np.arange(1, n_b + 1, dtype=np.int64)]
    )


def stencil_indices(n_x: int, n_a: int, n_b: int) -> np.ndarray:
    """(n_x, n_a+n_b) ring-wrapped gather indices for one grid row."""
    if n_a + n_b > n_x:
        raise ValueError(
            f"kernel stencil ({n_a}+{n_b} cells) longer than ring ({n_x} cells)"
        )
    off = stencil_offsets(n_a, n_b)
    return np.mod(np.arange(n_x, dtype=np.int64)[:, None] + off[None, :], n_x)


def normalize_kernel(theta):
    """omega_hat = theta / sum(theta); tape tensors stay on the tape."""
    if isinstance(theta, ad.Tensor):
        total = ad.sum_all(theta)
        if abs(total.item()) < 1e-12:
            raise ValueError("degenerate kernel parameters: sum(theta) ~ 0")
        return ad.div(theta, total)
    theta = np.asarray(theta, dtype=np.float64)
    total = theta.sum()
    if abs(total) < 1e-12:
        raise ValueError("degenerate kernel parameters: sum(theta) ~ 0")
    return theta / total


def nonlocal_density(rho_row, omega_hat, n_a: int, n_b: int) -> np.ndarray:
    """Kernel-weighted density along one ring row (plain numpy).

    rho_bar(x_i) = sum_{k<n_a} rho(x_{i+k}) w_k
                 + sum_{k=1..n_b} rho(x_{i-k}) w_{k-1+n_a}
    """
    rho_row = np.asarray(rho_row, dtype=np.float64)
    omega_hat = np.asarray(omega_hat, dtype=np.float64)
    if omega_hat.shape[0] != n_a + n_b:
        raise ValueError("weight vector length must equal n_a + n_b")
    idx = stencil_indices(rho_row.shape[0], n_a, n_b)
    return rho_row[idx] @ omega_hat


# ---------------------------------------------------------------------------
# model state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CaseGeometry:
    L: float
    T: float
    n_x: int
    n_t: int
    dx: float
    dt: float


@dataclass
class PinnState:
    """Trained (or in-training) parameters plus normalization constants."""

    density_params: list  # one flat [W, b, ...] tensor list per case
    fd_params: list
    theta_omega: ad.Tensor  # raw kernel parameters (constant when local)
    kernel: KernelGeometry
    cases: list  # CaseGeometry per case
    rho_scale: float
    v_scale: float
    local_physics: bool = False
    # Per-case multiplier applied to the residual f before squaring.  The
    # raw residual carries units of density per second, so for realistic
    # road scales its magnitude (~1e-4) is a few orders below the density
    # mismatch driving the data loss and the physics term exerts almost no
    # force on the optimizer.  Scaling f by (L / v_scale) / rho_scale
    # re-expresses it as normalized density per advective time unit, which
    # puts the two gradients on a comparable footing without changing the
    # residual's algebraic form or where its zeros are.
    residual_scale: tuple | None = None

    @property
    def omega_hat(self) -> np.ndarray:
        return normalize_kernel(self.theta_omega.value)

    def trainable(self) -> list:
        params = []
        for p in self.density_params:
            params.extend(p)
        params.extend(self.fd_params)
        if not self.local_physics:
            params.append(self.theta_omega)
        return params


def init_state(n_cases: int, case_geoms, kernel: KernelGeometry,
               hidden=(64,) * 6, fd_hidden=(32, 32, 32), rho_scale=0.2,
               v_scale=20.0, local_physics=False, seed=0,
               feature_scales=None, nondim_residual=True) -> PinnState:
    rng = np.random.default_rng(seed)
    density_params = [
        init_mlp((2, *hidden, 1), rng) for _ in range(n_cases)
    ]
    if feature_scales is not None:
        for net in density_params:
            feature_init(net, feature_scales, rng)
    fd_params = init_mlp((1, *fd_hidden, 1), rng)
    # Start the speed closure at V == 0 with zero slope: both monotonicity
    # hinges are exactly inactive at the kink, so the huge hinge penalties
    # cannot blow up the first optimizer steps.
    fd_params[-2].value[:] = 0.0
    fd_params[-1].value[:] = 0.0
    if local_physics:
        kernel = KernelGeometry(eta_a=kernel.dx, eta_b=0.0, dx=kernel.dx)
        theta = ad.Tensor(np.ones(1))  # frozen unit spike
    else:
        theta = ad.param(np.full(kernel.size, 1.0 / kernel.size))
    if nondim_residual:
        residual_scale = tuple(
            (g.L / v_scale) / rho_scale for g in case_geoms
        )
    else:
        residual_scale = None
    return PinnState(
        density_params=density_params,
        fd_params=fd_params,
        theta_omega=theta,
        kernel=kernel,
        cases=list(case_geoms),
        rho_scale=rho_scale,
        v_scale=v_scale,
        local_physics=local_physics,
        residual_scale=residual_scale,
    )


# ---------------------------------------------------------------------------
# tape graph builders
# ---------------------------------------------------------------------------


def density_with_derivs(state: PinnState, k: int, x, t):
    """rho_hat and its physical-unit input derivatives at points (x, t).

    Returns tape tensors (rho, rho_x, rho_t), each of shape (n, 1).
    """
    geom = state.cases[k]
    x = np.asarray(x, dtype=np.float64).ravel()
    t = np.asarray(t, dtype=np.float64).ravel()
    X = np.stack([x / geom.L, t / geom.T], axis=1)
    n = X.shape[0]
    seed_x = np.tile(np.array([[1.0, 0.0]]), (n, 1))
    seed_t = np.tile(np.array([[0.0, 1.0]]), (n, 1))
    y, (gx, gt) = forward_with_tangents(state.density_params[k], X,
                                        [seed_x, seed_t])
    rho = ad.mul(y, state.rho_scale)
    rho_x = ad.mul(gx, state.rho_scale / geom.L)
    rho_t = ad.mul(gt, state.rho_scale / geom.T)
    return rho, rho_x, rho_t


def fd_with_slope(state: PinnState, rho_bar):
    """V_hat and dV_hat/drho at tape input rho_bar of shape (n, 1)."""
    inp = ad.mul(rho_bar, 1.0 / state.rho_scale)
    ones = np.ones((inp.value.shape[0], 1))
    y, (dy,) = forward_with_tangents(state.fd_params, inp, [ones])
    v = ad.mul(y, state.v_scale)
    dv = ad.mul(dy, state.v_scale / state.rho_scale)
    return v, dv


def case_data_loss(state: PinnState, k: int, obs_x, obs_t, obs_rho):
    """Mean squared density mismatch of case k at its observation points."""
    geom = state.cases[k]
    X = np.stack(
        [np.asarray(obs_x, float) / geom.L, np.asarray(obs_t, float) / geom.T],
        axis=1,
    )
    y = forward(state.density_params[k], X)
    rho_hat = ad.mul(y, state.rho_scale)
    target = np.asarray(obs_rho, float).reshape(-1, 1)
    return ad.mean_all(ad.square(ad.sub(rho_hat, target)))


def _row_grid(geom: CaseGeometry, t_rows):
    """Flattened (x, t) coordinates covering full rows at the given times."""
    xs = np.arange(geom.n_x) * geom.dx
    x = np.tile(xs, t_rows.shape[0])
    t = np.repeat(t_rows, geom.n_x)
    return x, t


def case_physics_loss(state: PinnState, k: int, t_rows):
    """Mean squared residual over full ring rows at times ``t_rows``.

    Rows share the density-net evaluation: the nonlocal stencil only mixes
    cells within a row, so rho_bar is a gather + matmul against omega_hat.
    """
    geom = state.cases[k]
    t_rows = np.asarray(t_rows, dtype=np.float64)
    x, t = _row_grid(geom, t_rows)
    rho, rho_x, rho_t = density_with_derivs(state, k, x, t)

    if state.local_physics:
        rho_bar, rho_bar_x = rho, rho_x
    else:
        n_a, n_b = state.kernel.n_a, state.kernel.n_b
        row_idx = stencil_indices(geom.n_x, n_a, n_b)  # (n_x, K)
        base = (np.arange(t_rows.shape[0], dtype=np.int64) * geom.n_x)
        idx = (base[:, None, None] + row_idx[None, :, :]).reshape(
            -1, row_idx.shape[1]
        )
        omega = normalize_kernel(state.theta_omega)
        omega_col = ad.reshape(omega, (state.kernel.size, 1))
        rho_bar = ad.matmul(ad.gather(ad.reshape(rho, (-1,)), idx), omega_col)
        rho_bar_x = ad.matmul(
            ad.gather(ad.reshape(rho_x, (-1,)), idx), omega_col
        )

    v, dv = fd_with_slope(state, rho_bar)
    f = ad.add(rho_t, ad.add(ad.mul(rho_x, v), ad.mul(rho, ad.mul(dv, rho_bar_x))))
    if state.residual_scale is not None:
        f = ad.mul(f, state.residual_scale[k])
    return ad.mean_all(ad.square(f))


def constraint_loss(state: PinnState, p_omega: float, p_v: float,
                    n_rho: int = 100):
    """Penalty terms for the kernel shape and fundamental-diagram shape.

    Returns (total, parts) with parts = dict of scalar component values.
    """
    terms = []
    parts = {}

    if not state.local_physics:
        omega = normalize_kernel(state.theta_omega)
        n_a, n_b = state.kernel.n_a, state.kernel.n_b
        komega = ad.sum_all(ad.square(ad.min0(omega)))
        if n_a >= 2:
            ahead_diff = ad.sub(
                ad.gather(omega, np.arange(1, n_a)),
                ad.gather(omega, np.arange(0, n_a - 1)),
            )
            komega = ad.add(komega, ad.sum_all(ad.square(ad.max0(ahead_diff))))
        if n_b >= 2:
            behind_diff = ad.sub(
                ad.gather(omega, np.arange(n_a + 1, n_a + n_b)),
                ad.gather(omega, np.arange(n_a, n_a + n_b - 1)),
            )
            komega = ad.add(komega, ad.sum_all(ad.square(ad.max0(behind_diff))))
        if n_b >= 1:
            head = ad.sub(
                ad.gather(omega, np.array([n_a])), ad.gather(omega, np.array([0]))
            )
            komega = ad.add(komega, ad.sum_all(ad.square(ad.max0(head))))
        parts["L_c_omega"] = komega.item()
        terms.append(ad.mul(komega, p_omega))
    else:
        parts["L_c_omega"] = 0.0

    drho = state.rho_scale / n_rho
    rho_grid = (np.arange(n_rho) * drho).reshape(-1, 1)
    v, dv = fd_with_slope(state, ad.const(rho_grid))
    lv1 = ad.sum_all(ad.square(ad.min0(v)))
    lv2 = ad.sum_all(ad.square(ad.max0(dv)))
    parts["L_c_v1"] = lv1.item()
    parts["L_c_v2"] = lv2.item()
    terms.append(ad.mul(ad.add(lv1, lv2), p_v))

    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total, parts


def max_constraint_violation(state: PinnState, n_rho: int = 100) -> float:
    """Largest hinge magnitude over all shape constraints (diagnostic)."""
    worst = 0.0
    if not state.local_physics:
        w = state.omega_hat
        n_a, n_b = state.kernel.n_a, state.kernel.n_b
        worst = max(worst, float(np.maximum(-w, 0.0).max(initial=0.0)))
        if n_a >= 2:
            worst = max(
                worst, float(np.maximum(np.diff(w[:n_a]), 0.0).max(initial=0.0))
            )
        if n_b >= 2:
            worst = max(
                worst, float(np.maximum(np.diff(w[n_a:]), 0.0).max(initial=0.0))
            )
        if n_b >= 1:
            worst = max(worst, float(max(w[n_a] - w[0], 0.0)))
    drho = state.rho_scale / n_rho
    rho_grid = np.arange(n_rho) * drho
    v, dv = predict_fd(state, rho_grid, with_slope=True)
    worst = max(worst, float(np.maximum(-v, 0.0).max(initial=0.0)))
    worst = max(worst, float(np.maximum(dv, 0.0).max(initial=0.0)))
    return worst


def residual_points(state: PinnState, k: int, x, t) -> np.ndarray:
    """Residual f at arbitrary points of case k (evaluation helper).

    The stencil is applied by evaluating the density net at every shifted
    position x + off (ring-wrapped); on grid rows this equals the training
    assembly.  Not used on the training hot path.
    """
    geom = state.cases[k]
    x = np.asarray(x, dtype=np.float64).ravel()
    t = np.asarray(t, dtype=np.float64).ravel()
    rho, rho_x, rho_t = density_with_derivs(state, k, x, t)
    if state.local_physics:
        rho_bar, rho_bar_x = rho, rho_x
    else:
        offsets = stencil_offsets(state.kernel.n_a, state.kernel.n_b)
        omega = state.omega_hat
        bar = None
        bar_x = None
        for w, off in zip(omega, offsets):
            xs = np.mod(x + off * state.kernel.dx, geom.L)
            r_s, rx_s, _ = density_with_derivs(state, k, xs, t)
            term = ad.mul(r_s, float(w))
            term_x = ad.mul(rx_s, float(w))
            bar = term if bar is None else ad.add(bar, term)
            bar_x = term_x if bar_x is None else ad.add(bar_x, term_x)
        rho_bar, rho_bar_x = bar, bar_x
    v, dv = fd_with_slope(state, rho_bar)
    f = ad.add(rho_t, ad.add(ad.mul(rho_x, v), ad.mul(rho, ad.mul(dv, rho_bar_x))))
    return f.value.ravel().copy()


# ---------------------------------------------------------------------------
# prediction and persistence
# ---------------------------------------------------------------------------


def predict_density(state: PinnState, k: int, x=None, t=None,
                    chunk: int = 16384) -> np.ndarray:
    """rho_hat of case k on a grid; defaults to the case's full grid.

    Returns an (n_x, n_t) array when called on grids, matching MacroField
    layout.
    """
    geom = state.cases[k]
    if x is None:
        x = np.arange(geom.n_x) * geom.dx
    if t is None:
        t = np.arange(geom.n_t) * geom.dt
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    xg, tg = np.meshgrid(x, t, indexing="ij")
    pts = np.stack([xg.ravel() / geom.L, tg.ravel() / geom.T], axis=1)
    out = np.empty(pts.shape[0])
    for start in range(0, pts.shape[0], chunk):
        block = pts[start:start + chunk]
        out[start:start + block.shape[0]] = forward(
            state.density_params[k], block
        ).value.ravel()
    return (out * state.rho_scale).reshape(xg.shape)


def predict_fd(state: PinnState, rho_grid, with_slope: bool = False):
    """V_hat (and optionally its slope) on a density grid."""
    rho_grid = np.asarray(rho_grid, dtype=np.float64).reshape(-1, 1)
    v, dv = fd_with_slope(state, ad.const(rho_grid))
    if with_slope:
        return v.value.ravel().copy(), dv.value.ravel().copy()
    return v.value.ravel().copy()


def _net_payload(params) -> dict:
    return {
        "sizes": layer_sizes(params),
        "weights": flatten_params(params).tolist(),
    }


def _net_restore(payload) -> list:
    sizes = payload["sizes"]
    flat = np.asarray(payload["weights"], dtype=np.float64)
    params = []
    offset = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = flat[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        params.append(ad.param(w))
        b = flat[offset:offset + fan_out]
        offset += fan_out
        params.append(ad.param(b))
    return params


def save_model(state: PinnState, path, fd_samples: int = 101) -> None:
    """JSON artifact: layer dims, flat weights, kernel, FD curve samples."""
    rho_grid = np.linspace(0.0, state.rho_scale, fd_samples)
    payload = {
        "schema_version": 1,
        "density_nets": [_net_payload(p) for p in state.density_params],
        "fd_net": _net_payload(state.fd_params),
        "theta_omega": state.theta_omega.value.tolist(),
        "omega_hat": state.omega_hat.tolist(),
        "eta_a": state.kernel.eta_a,
        "eta_b": state.kernel.eta_b,
        "dx": state.kernel.dx,
        "rho_scale": state.rho_scale,
        "v_scale": state.v_scale,
        "local_physics": state.local_physics,
        "residual_scale": (
            list(state.residual_scale)
            if state.residual_scale is not None else None
        ),
        "cases": [
            {"L": g.L, "T": g.T, "n_x": g.n_x, "n_t": g.n_t,
             "dx": g.dx, "dt": g.dt}
            for g in state.cases
        ],
        "fd_samples": {
            "rho": rho_grid.tolist(),
            "v": predict_fd(state, rho_grid).tolist(),
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_model(path) -> PinnState:
    with open(path) as fh:
        payload = json.load(fh)
    kernel = KernelGeometry(
        eta_a=payload["eta_a"], eta_b=payload["eta_b"], dx=payload["dx"]
    )
    theta = np.asarray(payload["theta_omega"], dtype=np.float64)
    local = payload["local_physics"]
    return PinnState(
        density_params=[_net_restore(p) for p in payload["density_nets"]],
        fd_params=_net_restore(payload["fd_net"]),
        theta_omega=ad.Tensor(theta) if local else ad.param(theta),
        kernel=kernel,
        cases=[
            CaseGeometry(
                L=c["L"], T=c["T"], n_x=c["n_x"], n_t=c["n_t"],
                dx=c["dx"], dt=c["dt"],
            )
            for c in payload["cases"]
        ],
        rho_scale=payload["rho_scale"],
        v_scale=payload["v_scale"],
        local_physics=local,
        residual_scale=(
            tuple(payload["residual_scale"])
            if payload.get("residual_scale") is not None else None
        ),
    )
