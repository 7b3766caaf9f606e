"""Plant and string stability of the linearized platoon.

Linearizing gap/speed perturbations (s~, v~) about the uniform equilibrium
(s*, v*) gives, per vehicle,

    ds~_i/dt = v~_{i-1} - v~_i
    dv~_i/dt = sum_j alpha_j (kappa s~_{i+j} - v~_i)
             + sum_{j<=0} beta_j (v~_{i+j-1} - v~_i)
             + sum_{j>=1} beta_j (v~_{i+j} - v~_i)

with kappa the V_opt slope at s*.  Plant stability is decided by the
eigenvalues of the 2N x 2N ring system (excluding the structural zero mode
from gap conservation).  String stability is decided in the frequency
domain: for the ACC-only controller the head-to-tail transfer function is

    G(s) = (beta_0 s + alpha_0 kappa) / (s^2 + (alpha_0+beta_0) s + alpha_0 kappa)

and the platoon is string stable when sup_{omega>0} |G(j omega)| < 1.  With
additional leaders the per-link coupling becomes a depth-(n+1) linear
recurrence in the Laplace domain; the margin is the largest root magnitude
of its characteristic polynomial, maximized over the frequency grid.

Look-behind couplings make the head-to-tail transfer ill-defined
(perturbations travel both ways); callers are directed to the ring
eigenvalue analysis and the time-domain simulation oracle instead.

The nudging indicator is nonsmooth at equilibrium (the indicator flips at
v~ = 0); the linearization here treats it as always active, which upper
bounds the coupling.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .microsim import ControllerParams

__all__ = [
    "LinearizedModel",
    "StabilityReport",
    "UnsupportedAnalysisError",
    "linearize",
    "string_stability_margin",
    "plant_stability_ring",
    "analyze",
    "default_omega_grid",
]


class UnsupportedAnalysisError(ValueError):
    """Raised when a frequency-domain analysis does not apply."""


@dataclass(frozen=True)
class LinearizedModel:
    kappa: float  # V_opt slope at s*, 1/s
    gains: ControllerParams
    s_star: float
    v_star: float


@dataclass
class StabilityReport:
    plant_stable: bool
    string_stable: bool | None
    max_gain: float | None  # sup_omega |G|, None when analysis unsupported
    spectral_abscissa: float

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def linearize(params: ControllerParams, s_star: float,
              v_star: float = 0.0) -> LinearizedModel:
    """V_opt slope at the equilibrium gap plus the gains.

    The slope is undefined exactly at the breakpoints s_st and s_go.
    """
    p = params.vopt
    if s_star == p.s_st or s_star == p.s_go:
        raise ValueError(
            f"equilibrium gap {s_star} sits on a V_opt breakpoint; "
            "slope undefined"
        )
    if p.s_st < s_star < p.s_go:
        kappa = p.v_max / (p.s_go - p.s_st)
    else:
        kappa = 0.0
    return LinearizedModel(kappa=kappa, gains=params, s_star=s_star,
                           v_star=v_star)


def default_omega_grid() -> np.ndarray:
    return np.logspace(-3.0, 2.0, 200)


def _acc_gain(omega, alpha0, beta0, kappa):
    s = 1j * np.asarray(omega, dtype=float)
    num = beta0 * s + alpha0 * kappa
    den = s * s + (alpha0 + beta0) * s + alpha0 * kappa
    return np.abs(num / den)


def _acc_critical_gains(alpha0, beta0, kappa):
    """|G| at interior critical points of |G(j omega)|^2 over u = omega^2.

    d|G|^2/du = 0 reduces to  b u^2 + 2 A^2 u - A^2 (b + 2A - P) = 0  with
    A = alpha0*kappa, b = beta0^2, P = (alpha0+beta0)^2.
    """
    A = alpha0 * kappa
    b = beta0 * beta0
    P = (alpha0 + beta0) ** 2
    out = []
    if b == 0.0:
        # |G|^2 = A^2 / ((A-u)^2 + P u); maximum at u = A - P/2 if interior
        u = A - P / 2.0
        if u > 0:
            out.append(float(_acc_gain(math.sqrt(u), alpha0, beta0, kappa)))
        return out
    disc = A * A * (A * A + b * (b + 2.0 * A - P))
    if disc < 0:
        return out
    root = math.sqrt(disc)
    for u in ((-A * A + root) / b, (-A * A - root) / b):
        if u > 0:
            out.append(float(_acc_gain(math.sqrt(u), alpha0, beta0, kappa)))
    return out


def _link_margin(model: LinearizedModel, omega: float) -> float:
    """Largest root magnitude of the per-link recurrence at one frequency.

    In the Laplace domain the linearized chain satisfies
        D(s) V_i = sum_{d=1}^{n+1} c_d(s) V_{i-d}
    with D(s) = s^2 + (A+B)s + alpha_0 kappa and
        c_d(s) = (alpha_{1-d} kappa + beta_{1-d} s) - alpha_{-d} kappa
    (the second term only for 1 <= d <= n).  The asymptotic per-link
    amplification is the dominant root of z^{n+1} = sum_d H_d z^{n+1-d},
    H_d = c_d / D.
    """
    g = model.gains
    n = g.lookahead_count
    kappa = model.kappa
    s = 1j * omega
    A = sum(g.alpha.get(j, 0.0) for j in range(-n, 1))
    B = sum(g.beta.get(j, 0.0) for j in range(-n, 1))
    D = s * s + (A + B) * s + g.alpha.get(0, 0.0) * kappa
    coeffs = np.zeros(n + 2, dtype=complex)
    coeffs[0] = 1.0
    for d in range(1, n + 2):
        c = 0.0j
        j = 1 - d
        if -n <= j <= 0:
            c += g.alpha.get(j, 0.0) * kappa + g.beta.get(j, 0.0) * s
        if 1 <= d <= n:
            c -= g.alpha.get(-d, 0.0) * kappa
        coeffs[d] = -c / D
    roots = np.roots(coeffs)
    return float(np.abs(roots).max())


def string_stability_margin(model: LinearizedModel,
                            omega_grid=None) -> float:
    """sup over the frequency grid of the per-link amplification.

    Raises UnsupportedAnalysisError for look-behind couplings; use
    plant_stability_ring and the simulation oracle for those.
    """
    g = model.gains
    if any(
        g.alpha.get(j, 0.0) != 0.0 or g.beta.get(j, 0.0) != 0.0
        for j in range(1, g.lookbehind_count + 1)
    ):
        raise UnsupportedAnalysisError(
            "string-stability transfer analysis is undefined with look-behind "
            "gains; use plant_stability_ring or the simulation oracle"
        )
    if omega_grid is None:
        omega_grid = default_omega_grid()
    omega_grid = np.asarray(omega_grid, dtype=float)

    if g.lookahead_count == 0:
        alpha0 = g.alpha.get(0, 0.0)
        beta0 = g.beta.get(0, 0.0)
        vals = list(_acc_gain(omega_grid, alpha0, beta0, model.kappa))
        vals.extend(_acc_critical_gains(alpha0, beta0, model.kappa))
        if alpha0 * model.kappa == 0.0 and alpha0 + beta0 > 0.0:
            # the s = 0 pole-zero pair cancels and G reduces to a
            # first-order lag whose supremum beta0/(alpha0+beta0) sits at
            # the omega -> 0 boundary, off any positive grid
            vals.append(beta0 / (alpha0 + beta0))
        return float(max(vals))

    vals = np.array([_link_margin(model, w) for w in omega_grid])
    best = int(np.argmax(vals))
    margin = float(vals[best])
    # local golden-section refinement around the best grid point
    lo = omega_grid[max(best - 1, 0)]
    hi = omega_grid[min(best + 1, omega_grid.shape[0] - 1)]
    phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - phi * (b - a)
    d = a + phi * (b - a)
    fc = _link_margin(model, c)
    fd = _link_margin(model, d)
    for _ in range(40):
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = _link_margin(model, c)
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = _link_margin(model, d)
    return max(margin, fc, fd)


def ring_matrix(model: LinearizedModel, N: int) -> np.ndarray:
    """2N x 2N generator of the linearized ring in (s~, v~) coordinates."""
    g = model.gains
    kappa = model.kappa
    n, m = g.lookahead_count, g.lookbehind_count
    A = np.zeros((2 * N, 2 * N))
    for i in range(N):
        A[i, N + (i - 1) % N] += 1.0
        A[i, N + i] -= 1.0
        for j in range(-n, m + 1):
            a = g.alpha.get(j, 0.0)
            b = g.beta.get(j, 0.0)
            A[N + i, (i + j) % N] += a * kappa
            A[N + i, N + i] -= a + b
            if j <= 0:
                A[N + i, N + (i + j - 1) % N] += b
            else:
                A[N + i, N + (i + j) % N] += b
    return A


def plant_stability_ring(model: LinearizedModel, N: int) -> float:
    """Spectral abscissa of the ring system, zero mode removed.

    The ring conserves total gap, which contributes one structural zero
    eigenvalue; the eigenvalue closest to zero is removed before taking the
    maximum real part.
    """
    if N < 2:
        raise ValueError("need at least 2 vehicles")
    ev = np.linalg.eigvals(ring_matrix(model, N))
    ev = np.delete(ev, int(np.argmin(np.abs(ev))))
    return float(ev.real.max())


def analyze(params: ControllerParams, s_star: float, v_star: float,
            N: int, omega_grid=None) -> StabilityReport:
    """Full report; string metrics are None when look-behind gains exist."""
    model = linearize(params, s_star, v_star)
    abscissa = plant_stability_ring(model, N)
    try:
        margin = string_stability_margin(model, omega_grid)
        string_stable = bool(margin < 1.0)
    except UnsupportedAnalysisError:
        margin = None
        string_stable = None
    return StabilityReport(
        plant_stable=bool(abscissa < 0.0),
        string_stable=string_stable,
        max_gain=margin,
        spectral_abscissa=abscissa,
    )
