"""Evaluation metrics for fields, kernels, and fundamental diagrams."""

from __future__ import annotations

import warnings

import numpy as np
from sklearn.isotonic import IsotonicRegression

__all__ = [
    "estimation_error",
    "kernel_mass_within",
    "kernel_mean",
    "kernel_l1",
    "fd_scatter_width",
    "fd_rmse",
]


def estimation_error(rho_true, rho_hat) -> float:
    """Root-mean-square relative density error, in percent.

    sqrt(mean(((rho - rho_hat)/rho)^2)) * 100 over the whole grid.
    """
    rho_true = np.asarray(rho_true, float)
    rho_hat = np.asarray(rho_hat, float)
    if rho_true.shape != rho_hat.shape:
        raise ValueError("fields must share a grid")
    if np.any(rho_true <= 0):
        raise ValueError("true density must be strictly positive")
    rel = (rho_true - rho_hat) / rho_true
    return float(np.sqrt(np.mean(rel * rel)) * 100.0)


def _split_offsets(weights, n_b: int):
    w = np.asarray(weights, float)
    n_a = w.shape[0] - n_b
    if n_a < 1 or n_b < 0:
        raise ValueError("weights must include the offset-0 cell")
    offsets = np.concatenate([np.arange(n_a), -np.arange(1, n_b + 1)])
    return w, offsets, n_a


def kernel_mass_within(weights, radius_m: float, dx: float = 1.0,
                       n_b: int = 0) -> float:
    """Fraction of kernel mass at offsets strictly inside ±radius.

    Weight k sits at offset k*dx ahead (or behind for the trailing
    look-behind block), so a uniform 30-cell look-ahead kernel at dx=1 has
    mass 5/30 within 5 m (offsets 0..4).
    """
    w, offsets, _ = _split_offsets(weights, n_b)
    inside = np.abs(offsets * dx) < radius_m
    total = w.sum()
    if total == 0:
        raise ValueError("kernel has no mass")
    return float(w[inside].sum() / total)


def kernel_mean(weights, dx: float = 1.0, n_b: int = 0) -> float:
    """First moment (meters) of the look-ahead segment of the kernel."""
    w, offsets, n_a = _split_offsets(weights, n_b)
    ahead = w[:n_a]
    return float(np.sum(ahead * np.arange(n_a) * dx))


def kernel_l1(weights_a, weights_b, n_b_a: int = 0, n_b_b: int = 0) -> float:
    """L1 distance between two discrete kernels on a shared offset grid.

    Kernels may have different support lengths; the shorter side is
    zero-padded.  Both must use the same cell length.
    """
    wa, offs_a, _ = _split_offsets(weights_a, n_b_a)
    wb, offs_b, _ = _split_offsets(weights_b, n_b_b)
    lo = min(offs_a.min(), offs_b.min())
    hi = max(offs_a.max(), offs_b.max())
    grid = np.arange(lo, hi + 1)
    fa = np.zeros(grid.shape[0])
    fb = np.zeros(grid.shape[0])
    fa[offs_a - lo] = wa
    fb[offs_b - lo] = wb
    return float(np.abs(fa - fb).sum())


def fd_scatter_width(rho, v) -> float:
    """Mean absolute residual of speed against a monotone fit in density.

    Fits a non-increasing step function v(rho) by isotonic regression and
    returns mean |v - fit|.  A degenerate constant-density cloud carries no
    ordering information; it yields width 0 with a warning.
    """
    rho = np.asarray(rho, float).ravel()
    v = np.asarray(v, float).ravel()
    if rho.shape != v.shape:
        raise ValueError("rho and v must have the same length")
    if rho.shape[0] < 10:
        raise ValueError("need at least 10 pairs")
    if np.ptp(rho) == 0.0:
        warnings.warn("degenerate scatter: constant density")
        return 0.0
    iso = IsotonicRegression(increasing=False, out_of_bounds="clip")
    fit = iso.fit_transform(rho, v)
    return float(np.mean(np.abs(v - fit)))


def fd_rmse(rho_grid, v_hat, v_true) -> float:
    """RMSE between two speed curves sampled on a shared density grid."""
    v_hat = np.asarray(v_hat, float)
    v_true = np.asarray(v_true, float)
    if v_hat.shape != v_true.shape:
        raise ValueError("curves must share the sampling grid")
    d = v_hat - v_true
    return float(np.sqrt(np.mean(d * d)))
