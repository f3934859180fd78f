"""Reverse-mode engine: forward values, gradients, graph checks."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossald import autodiff as ad
from crossald.autodiff import Tensor


def naive_conv(x, w, b):
    """Nested-loop 'same' correlation of x [Cin,H,W] with w [Cout,Cin,k,k]."""
    cin, H, W = x.shape
    cout, _, k, _ = w.shape
    r = k // 2
    out = np.zeros((cout, H, W))
    for o in range(cout):
        for i in range(H):
            for j in range(W):
                acc = float(b[o])
                for c in range(cin):
                    for di in range(k):
                        for dj in range(k):
                            y, xx = i + di - r, j + dj - r
                            if 0 <= y < H and 0 <= xx < W:
                                acc += float(x[c, y, xx]) * float(w[o, c, di, dj])
                out[o, i, j] = acc
    return out


class TestForwardValues:
    def test_softmax_equal_logits(self):
        p = ad.softmax(Tensor(np.zeros((2, 1, 1))))
        np.testing.assert_array_equal(p.data.ravel(), [0.5, 0.5])

    def test_delta_kernel_conv_is_identity(self):
        x = np.ones((1, 4, 4), dtype=np.float32)
        w = np.zeros((1, 1, 3, 3), dtype=np.float32)
        w[0, 0, 1, 1] = 1.0
        y = ad.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(y.data, x)

    def test_conv_matches_nested_loops(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 8, 8)).astype(np.float32)
        w = rng.normal(size=(4, 1, 3, 3)).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        y = ad.conv2d(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(y.data, naive_conv(x, w, b), rtol=1e-6, atol=1e-6)

    def test_conv_batched_equals_single(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 2, 6, 6)).astype(np.float32)
        w = rng.normal(size=(5, 2, 3, 3)).astype(np.float32)
        batched = ad.conv2d(Tensor(x), Tensor(w)).data
        for n in range(3):
            np.testing.assert_array_equal(batched[n], ad.conv2d(Tensor(x[n]), Tensor(w)).data)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        p = ad.softmax(Tensor(rng.normal(scale=10, size=(4, 7, 9))))
        np.testing.assert_allclose(p.data.sum(axis=0), 1.0, atol=1e-6)

    def test_pool_and_upsample(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
        pooled = ad.avg_pool2(Tensor(x)).data
        np.testing.assert_array_equal(pooled[0], [[2.5, 4.5], [10.5, 12.5]])
        up = ad.upsample2(Tensor(pooled)).data
        assert up.shape == (1, 4, 4)
        np.testing.assert_array_equal(up[0, :2, :2], 2.5)

    def test_sum_accumulates_in_float64(self):
        x = np.full(10**6, 0.1, dtype=np.float32)
        s = ad.sum(Tensor(x)).item()
        assert s == pytest.approx(float(np.float32(0.1)) * 10**6, rel=1e-7)


class TestErrors:
    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"\(2,\).*\(3,\)"):
            ad.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))

    def test_non_finite_input_rejected(self):
        with pytest.raises(ad.NonFiniteError):
            Tensor(np.array([1.0, np.nan]))

    def test_even_kernel_rejected(self):
        with pytest.raises(ad.ShapeError):
            ad.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))

    def test_non_scalar_root_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            ad.backward(x * 2.0)

    def test_cycle_rejected(self):
        x = Tensor(np.ones(1), requires_grad=True)
        y = ad.sum(x * 2.0)
        # splice y into its own ancestry
        x.parents = (y,)
        with pytest.raises(ad.GraphError):
            ad.backward(y)

    def test_log_of_negative_is_non_finite(self):
        with pytest.raises(ad.NonFiniteError):
            ad.log(Tensor(np.array([-1.0])))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        g = ad.backward(ad.sum(x))
        np.testing.assert_array_equal(g[x], np.ones((2, 3)))

    def test_product_rule(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=5), requires_grad=True)
        y = Tensor(rng.normal(size=5), requires_grad=True)
        g = ad.backward(ad.sum(x * y))
        np.testing.assert_array_equal(g[x], y.data)
        np.testing.assert_array_equal(g[y], x.data)

    def test_fan_out_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        g = ad.backward(ad.sum(x * x + x))
        assert g[x][0] == pytest.approx(7.0)

    def test_leaf_grad_attribute_set(self):
        x = Tensor(np.ones(3), requires_grad=True)
        ad.backward(ad.sum(x * 3.0))
        np.testing.assert_array_equal(x.grad, 3.0)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        root = ad.sum(ad.softmax(ad.conv2d(x, w)) * ad.softmax(ad.conv2d(x, w)))
        a = ad.backward(root)
        b = ad.backward(root)
        assert a[x].tobytes() == b[x].tobytes()
        assert a[w].tobytes() == b[w].tobytes()

    def test_no_grad_for_constants(self):
        x = Tensor(np.ones(2), requires_grad=True)
        c = Tensor(np.ones(2))
        g = ad.backward(ad.sum(x * c))
        assert c not in g


class TestFiniteDifferenceCheck:
    def test_sum_of_squares_analytic(self):
        x = np.array([1.0, 2.0, 3.0])
        with ad.precision(np.float64):
            np.testing.assert_allclose(ad.grad(lambda t: ad.sum(t * t), x), [2.0, 4.0, 6.0])
            assert ad.finite_difference_check(lambda t: ad.sum(t * t), x) < 1e-5

    def test_constant_function(self):
        with ad.precision(np.float64):
            err = ad.finite_difference_check(lambda t: ad.sum(t * 0.0), np.ones(4))
        assert err == 0.0

    def test_non_finite_output_rejected(self):
        with ad.precision(np.float64):
            with pytest.raises(ad.NonFiniteError):
                ad.finite_difference_check(lambda t: ad.sum(ad.log(t)), np.array([1e-4, 1.0]), step=1e-3)

    def test_bad_step(self):
        with pytest.raises(ValueError):
            ad.finite_difference_check(lambda t: ad.sum(t), np.ones(2), step=0.0)


@settings(max_examples=30, deadline=None)
@given(
    st.integers(1, 3),
    st.integers(1, 3),
    st.sampled_from([1, 3]),
    st.integers(0, 2**31 - 1),
)
def test_conv_gradient_routes_agree_with_fd(cin, cout, k, seed):
    """Both input-gradient routes of conv2d match central differences."""
    rng = np.random.default_rng(seed)
    with ad.precision(np.float64):
        w = Tensor(rng.normal(size=(cout, cin, k, k)))
        x = rng.normal(size=(cin, 4, 4))
        err = ad.finite_difference_check(lambda t: ad.sum(ad.conv2d(t, w) * ad.conv2d(t, w)), x, step=1e-4)
    assert err < 1e-5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6))
def test_softmax_simplex_property(logits):
    x = np.array(logits, dtype=np.float32).reshape(-1, 1, 1)
    p = ad.softmax(Tensor(x)).data
    assert (p >= 0).all() and (p <= 1).all()
    assert math.isclose(float(p.astype(np.float64).sum()), 1.0, abs_tol=1e-6)
