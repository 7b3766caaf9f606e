"""Small fully connected networks over the autodiff tape.

Networks are flat lists of parameter tensors [W1, b1, W2, b2, ...] with
tanh hidden activations and a linear output layer.  Besides the plain
forward pass there is a joint forward-and-input-tangent pass: tangent
directions are pushed through the layer recursion

    u_l = g_{l-1} @ W_l,    g_l = (1 - a_l^2) * u_l

using tape primitives, so the returned tangents are themselves
differentiable (reverse mode through them gives exact mixed second-order
parameter gradients, as required by PDE residual training).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

__all__ = ["init_mlp", "feature_init", "lsq_output_init", "layer_sizes",
           "forward", "forward_with_tangents", "flatten_params",
           "unflatten_params"]


def init_mlp(sizes, rng: np.random.Generator):
    """Glorot-uniform weights and zero biases for given layer sizes.

    sizes = (in, hidden..., out); returns [W1, b1, ..., WL, bL] params.
    """
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        params.append(ad.param(w))
        params.append(ad.param(b))
    return params


def feature_init(params, in_scales, rng: np.random.Generator) -> None:
    """Rewrite an MLP in place as a bank of oscillatory input features.

    Glorot-initialized deep tanh networks start in a near-linear regime:
    with inputs normalized to [0, 1], first-layer pre-activations are tiny
    and gradient descent sits on a long plateau at the target's variance
    floor before it discovers any oscillatory structure.  Seeding the first
    layer with frequencies drawn up to ``in_scales[d]`` (radians per unit
    of input d) and the biases with matching phase offsets puts those
    features in the span of the network from step one, while the remaining
    hidden layers start near the identity so the features survive depth
    and gradients flow back to the first layer.  The output layer starts
    at zero; callers fit it cheaply via :func:`lsq_output_init`.
    """
    sizes = layer_sizes(params)
    d_in, width = sizes[0], sizes[1]
    scales = np.broadcast_to(np.asarray(in_scales, dtype=np.float64), (d_in,))
    if scales.shape[0] != d_in or np.any(scales <= 0):
        raise ValueError("need one positive frequency scale per input")
    w0 = np.stack([rng.uniform(-s, s, width) for s in scales])
    params[0].value = w0
    params[1].value = rng.uniform(-0.7, 0.7, width) * float(scales.max())
    n_layers = len(params) // 2
    for layer in range(1, n_layers - 1):
        w = params[2 * layer]
        if w.value.shape[0] == w.value.shape[1]:
            w.value = (np.eye(w.value.shape[0])
                       + 0.05 * rng.standard_normal(w.value.shape))
        params[2 * layer + 1].value[:] = 0.0
    params[-2].value[:] = 0.0
    params[-1].value[:] = 0.0


def lsq_output_init(params, x, y, ridge: float = 1e-6) -> None:
    """Fit the linear output layer to (x, y) by ridge least squares.

    Hidden layers are held fixed; this is exact and cheap (one dense solve
    per network), and it starts training at the random-feature optimum
    instead of at zero.
    """
    a = np.asarray(x, dtype=np.float64)
    n_layers = len(params) // 2
    for layer in range(n_layers - 1):
        a = np.tanh(a @ params[2 * layer].value + params[2 * layer + 1].value)
    target = np.asarray(y, dtype=np.float64).reshape(a.shape[0], -1)
    A = np.concatenate([a, np.ones((a.shape[0], 1))], axis=1)
    gram = A.T @ A + ridge * np.eye(A.shape[1])
    sol = np.linalg.solve(gram, A.T @ target)
    params[-2].value = sol[:-1].copy()
    params[-1].value = sol[-1].copy()


def layer_sizes(params) -> list:
    """Recover (in, hidden..., out) from a parameter list."""
    sizes = [params[0].value.shape[0]]
    for i in range(0, len(params), 2):
        sizes.append(params[i].value.shape[1])
    return sizes


def forward(params, x) -> ad.Tensor:
    """Plain forward pass; ``x`` is an (n, d_in) array or tensor."""
    a = ad.const(x)
    n_layers = len(params) // 2
    for layer in range(n_layers):
        w, b = params[2 * layer], params[2 * layer + 1]
        z = ad.affine(a, w, b)
        a = ad.tanh(z) if layer < n_layers - 1 else z
    return a


def forward_with_tangents(params, x, seeds):
    """Forward pass plus one tangent per seed direction.

    ``seeds`` is a list of (n, d_in) arrays or tensors, each the derivative
    of the input with respect to one scalar direction (e.g. unit vectors
    for plain input coordinates).  Returns (output, [tangent outputs]).

    Multiple directions are stacked along axis 0 and pushed through the
    layers as one chain (one matmul per layer instead of one per
    direction), then split back apart at the output.
    """
    a = ad.const(x)
    n = a.value.shape[0]
    n_dirs = len(seeds)
    if n_dirs == 1:
        g = ad.const(seeds[0])
    else:
        parts = []
        for s in seeds:
            if isinstance(s, ad.Tensor):
                if s.requires_grad:
                    raise ValueError(
                        "stacked seed directions must be constants"
                    )
                s = s.value
            parts.append(np.asarray(s, dtype=np.float64))
        g = ad.const(np.vstack(parts))
    n_layers = len(params) // 2
    for layer in range(n_layers):
        w, b = params[2 * layer], params[2 * layer + 1]
        z = ad.affine(a, w, b)
        u = ad.matmul(g, w)
        if layer < n_layers - 1:
            a = ad.tanh(z)
            g = ad.tanh_tangent_mul(a, u)
        else:
            a = z
            g = u
    if n_dirs == 1:
        return a, [g]
    return a, [ad.rows(g, k * n, (k + 1) * n) for k in range(n_dirs)]


def flatten_params(params) -> np.ndarray:
    return np.concatenate([p.value.ravel() for p in params])


def unflatten_params(flat, params_like) -> None:
    """Write a flat vector back into an existing parameter list in place."""
    offset = 0
    for p in params_like:
        n = p.value.size
        p.value = np.asarray(flat[offset:offset + n], dtype=np.float64).reshape(
            p.value.shape
        )
        offset += n
    if offset != np.asarray(flat).size:
        raise ValueError("flat vector length does not match parameters")
