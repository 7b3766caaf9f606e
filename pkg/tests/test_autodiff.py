"""The tape engine against central finite differences."""

import numpy as np
import pytest

import nlflow.autodiff as ad
from nlflow.nets import forward, forward_with_tangents, init_mlp


def fd_grad(make_loss, leaf, step=1e-6):
    """Central finite differences of make_loss() w.r.t. leaf.value."""
    g = np.zeros_like(leaf.value)
    flat = leaf.value.ravel()
    gf = g.ravel()
    for i in range(flat.shape[0]):
        keep = flat[i]
        flat[i] = keep + step
        hi = make_loss().item()
        flat[i] = keep - step
        lo = make_loss().item()
        flat[i] = keep
        gf[i] = (hi - lo) / (2.0 * step)
    return g


def check_against_fd(make_loss, leaves, rtol=2e-6):
    loss = make_loss()
    ad.zero_grad(leaves)
    ad.backward(loss)
    for leaf in leaves:
        ref = fd_grad(make_loss, leaf)
        scale = np.abs(ref).max() + 1e-12
        assert np.allclose(leaf.grad, ref, atol=rtol * scale), (
            f"gradient mismatch: analytic {leaf.grad}, fd {ref}"
        )


class TestElementwiseOps:
    def test_add_sub_mul_div_neg(self, rng):
        a = ad.param(rng.normal(size=(3, 4)))
        b = ad.param(rng.normal(size=(3, 4)) + 3.0)  # keep away from 0

        def loss():
            z = ad.add(ad.mul(a, b), ad.sub(a, ad.div(a, b)))
            return ad.mean_all(ad.square(ad.neg(z)))

        check_against_fd(loss, [a, b])

    def test_tanh_and_square(self, rng):
        a = ad.param(rng.normal(size=(5, 2)))

        def loss():
            return ad.mean_all(ad.square(ad.tanh(a)))

        check_against_fd(loss, [a])

    def test_hinges_away_from_kink(self, rng):
        vals = rng.normal(size=(8,))
        vals[np.abs(vals) < 0.2] = 0.5
        a = ad.param(vals)

        def loss():
            return ad.sum_all(
                ad.add(ad.square(ad.min0(a)), ad.square(ad.max0(a)))
            )

        check_against_fd(loss, [a])

    def test_min0_max0_values(self):
        a = ad.const(np.array([-2.0, 0.0, 3.0]))
        assert np.array_equal(ad.min0(a).value, [-2.0, 0.0, 0.0])
        assert np.array_equal(ad.max0(a).value, [0.0, 0.0, 3.0])


class TestLinearAlgebraOps:
    def test_matmul_affine(self, rng):
        x = ad.const(rng.normal(size=(4, 3)))
        w = ad.param(rng.normal(size=(3, 2)))
        b = ad.param(rng.normal(size=(2,)))

        def loss():
            return ad.mean_all(ad.square(ad.affine(x, w, b)))

        check_against_fd(loss, [w, b])

    def test_matmul_both_sides(self, rng):
        a = ad.param(rng.normal(size=(3, 4)))
        b = ad.param(rng.normal(size=(4, 2)))

        def loss():
            return ad.sum_all(ad.square(ad.matmul(a, b)))

        check_against_fd(loss, [a, b])

    def test_gather_reshape_rows(self, rng):
        a = ad.param(rng.normal(size=(6,)))
        idx = np.array([[0, 2], [3, 3], [5, 1]])

        def loss():
            g = ad.gather(a, idx)  # (3, 2)
            r = ad.reshape(g, (2, 3))
            return ad.mean_all(ad.square(ad.rows(r, 0, 1)))

        check_against_fd(loss, [a])

    def test_rows_adjoint_is_zero_padded(self):
        a = ad.param(np.arange(8.0).reshape(4, 2))
        loss = ad.sum_all(ad.rows(a, 1, 3))
        ad.backward(loss)
        expected = np.zeros((4, 2))
        expected[1:3] = 1.0
        assert np.array_equal(a.grad, expected)


class TestBroadcasting:
    def test_bias_row_broadcast(self, rng):
        a = ad.param(rng.normal(size=(5, 3)))
        b = ad.param(rng.normal(size=(1, 3)))

        def loss():
            return ad.mean_all(ad.square(ad.add(a, b)))

        check_against_fd(loss, [a, b])

    def test_scalar_times_matrix(self, rng):
        s = ad.param(np.array(1.7))
        a = ad.param(rng.normal(size=(3, 3)))

        def loss():
            return ad.sum_all(ad.square(ad.mul(s, a)))

        check_against_fd(loss, [s, a])


class TestSharedSubgraphs:
    def test_reused_leaf_accumulates_exactly(self):
        x = ad.param(np.array([1.0, 2.0, 3.0]))
        loss = ad.add(ad.sum_all(x), ad.sum_all(x))
        ad.backward(loss)
        assert np.array_equal(x.grad, np.full(3, 2.0))

    def test_diamond_graph(self, rng):
        x = ad.param(rng.normal(size=(4,)))

        def loss():
            t = ad.tanh(x)
            return ad.sum_all(ad.mul(t, ad.square(t)))

        check_against_fd(loss, [x])

    def test_backward_without_zero_grad_accumulates(self):
        x = ad.param(np.ones(2))
        ad.backward(ad.sum_all(x))
        ad.backward(ad.sum_all(x))
        assert np.array_equal(x.grad, np.full(2, 2.0))
        ad.zero_grad([x])
        assert x.grad is None


class TestTangentChains:
    def test_single_direction_matches_fd_jacobian(self, rng):
        params = init_mlp((2, 8, 8, 1), rng)
        x = rng.normal(size=(5, 2))
        seed = np.tile(np.array([[1.0, 0.0]]), (5, 1))
        _, (gx,) = forward_with_tangents(params, x, [seed])
        eps = 1e-6
        xp = x.copy()
        xp[:, 0] += eps
        xm = x.copy()
        xm[:, 0] -= eps
        ref = (forward(params, xp).value - forward(params, xm).value) / (
            2.0 * eps)
        assert np.allclose(gx.value, ref, atol=1e-8)

    def test_stacked_directions_match_separate_chains(self, rng):
        params = init_mlp((2, 6, 6, 1), rng)
        x = rng.normal(size=(7, 2))
        sx = np.tile(np.array([[1.0, 0.0]]), (7, 1))
        st = np.tile(np.array([[0.0, 1.0]]), (7, 1))
        y2, (gx2, gt2) = forward_with_tangents(params, x, [sx, st])
        y1a, (gx1,) = forward_with_tangents(params, x, [sx])
        y1b, (gt1,) = forward_with_tangents(params, x, [st])
        assert np.array_equal(y2.value, y1a.value)
        assert np.array_equal(y2.value, y1b.value)
        assert np.allclose(gx2.value, gx1.value, atol=1e-14)
        assert np.allclose(gt2.value, gt1.value, atol=1e-14)

    def test_stacked_seeds_must_be_constants(self, rng):
        params = init_mlp((2, 4, 1), rng)
        x = rng.normal(size=(3, 2))
        live = ad.param(np.ones((3, 2)))
        with pytest.raises(ValueError):
            forward_with_tangents(params, x, [live, ad.const(np.ones((3, 2)))])

    def test_tangent_mul_rejects_ragged_stack(self, rng):
        a = ad.tanh(ad.const(rng.normal(size=(4, 3))))
        with pytest.raises(ValueError):
            ad.tanh_tangent_mul(a, np.ones((6, 3)))  # 6 not a multiple of 4

    def test_mixed_second_order_matches_fd_of_tangent(self, rng):
        # reverse mode through a forward tangent: the same composition the
        # PDE residual differentiates during training
        params = init_mlp((2, 6, 6, 1), rng)
        x = rng.normal(size=(4, 2))
        seed = np.tile(np.array([[1.0, 0.0]]), (4, 1))

        def make_loss():
            _, (gx,) = forward_with_tangents(params, x, [seed])
            return ad.mean_all(ad.square(gx))

        loss = make_loss()
        ad.zero_grad(params)
        ad.backward(loss)
        for leaf in (params[0], params[1], params[-2]):
            ref = fd_grad(make_loss, leaf)
            scale = np.abs(ref).max() + 1e-12
            assert np.allclose(leaf.grad, ref, atol=5e-6 * scale)
        # the output bias cancels out of the input derivative entirely
        assert params[-1].grad is None


class TestTensorBasics:
    def test_const_wraps_and_param_requires_grad(self):
        c = ad.const(np.ones(3))
        p = ad.param(np.ones(3))
        assert not c.requires_grad
        assert p.requires_grad
        assert ad.const(c) is c

    def test_item_on_scalar(self):
        assert ad.sum_all(ad.const(np.array([1.5, 2.5]))).item() == 4.0

    def test_operator_sugar_matches_functions(self, rng):
        a = ad.param(rng.normal(size=(3,)))
        b = ad.param(rng.normal(size=(3,)) + 2.0)
        assert np.array_equal((a + b).value, ad.add(a, b).value)
        assert np.array_equal((a - b).value, ad.sub(a, b).value)
        assert np.array_equal((a * b).value, ad.mul(a, b).value)
        assert np.array_equal((a / b).value, ad.div(a, b).value)
        assert np.array_equal((-a).value, ad.neg(a).value)
        assert np.array_equal((2.0 * a).value, ad.mul(a, 2.0).value)
