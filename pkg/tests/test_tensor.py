from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from superonn import tensor
from superonn.errors import DimensionError, ParameterError
from superonn.tensor import (
    bilinear_shift,
    bilinear_shift_backward,
    col2im,
    conv2d,
    conv2d_backward,
    im2col,
    power_expand,
    power_expand_backward,
)

from conftest import bilinear_oracle, central_diff, conv_oracle, rel_err


def _probe(rng, size, n=100):
    return rng.choice(size, size=min(n, size), replace=False)


class TestConv2d:
    def test_delta_kernel_is_identity(self, rng):
        x = rng.normal(size=(1, 1, 5, 5))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        np.testing.assert_array_equal(conv2d(x, w, np.zeros(1)), x)

    def test_zero_weight_gives_bias(self, rng):
        x = rng.normal(size=(2, 3, 4, 6))
        y = conv2d(x, np.zeros((2, 3, 3, 3)), np.array([0.7, -1.5]))
        assert np.all(y[:, 0] == 0.7) and np.all(y[:, 1] == -1.5)

    def test_all_ones_center_and_corner(self):
        y = conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))[0, 0]
        assert y[1, 1] == 9.0
        assert y[0, 0] == y[0, 2] == y[2, 0] == y[2, 2] == 4.0
        expected = conv_oracle(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
        np.testing.assert_array_equal(y, expected[0, 0])

    def test_correlation_not_flipped(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 2] = 1.0  # right of centre
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 2] = 1.0  # weight on the right tap
        assert conv2d(x, w, np.zeros(1))[0, 0, 1, 1] == 1.0

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_matches_direct_summation(self, rng, k):
        x = rng.normal(size=(2, 3, 5, 6))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        np.testing.assert_allclose(conv2d(x, w, b), conv_oracle(x, w, b), rtol=1e-12, atol=1e-12)

    def test_small_blocks_give_same_result(self, rng, monkeypatch):
        x = rng.normal(size=(3, 4, 9, 7))
        w = rng.normal(size=(5, 4, 3, 3))
        b = rng.normal(size=5)
        g = rng.normal(size=(3, 5, 9, 7))
        ref = conv2d(x, w, b)
        ref_grads = conv2d_backward(g, x, w)
        for block in (64, 4096):
            monkeypatch.setattr(tensor, "BLOCK_BYTES", block)
            np.testing.assert_allclose(conv2d(x, w, b), ref, rtol=1e-13, atol=1e-13)
            for got, want in zip(conv2d_backward(g, x, w), ref_grads):
                np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(DimensionError):
            conv2d(rng.normal(size=(1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))

    def test_bad_bias_and_even_kernel(self, rng):
        x = rng.normal(size=(1, 1, 4, 4))
        with pytest.raises(DimensionError):
            conv2d(x, np.zeros((2, 1, 3, 3)), np.zeros(3))
        with pytest.raises(ParameterError):
            conv2d(x, np.zeros((1, 1, 2, 2)), np.zeros(1))
        with pytest.raises(DimensionError):
            conv2d(x[0], np.zeros((1, 1, 3, 3)), np.zeros(1))


class TestConv2dBackward:
    def test_zero_grad_out(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        w = rng.normal(size=(2, 3, 3, 3))
        for g in conv2d_backward(np.zeros((2, 2, 4, 4)), x, w):
            assert not np.any(g)

    def test_one_by_one_kernel(self, rng):
        x = rng.normal(size=(3, 1, 4, 5))
        g = rng.normal(size=(3, 1, 4, 5))
        _, gw, gb = conv2d_backward(g, x, np.array([[[[0.3]]]]))
        assert gw[0, 0, 0, 0] == pytest.approx(float(np.sum(g * x)), rel=1e-13)
        assert gb[0] == pytest.approx(float(g.sum()), rel=1e-13)

    def test_finite_differences(self, rng):
        x = rng.normal(size=(2, 4, 4, 4))
        w = rng.normal(size=(3, 4, 3, 3))
        b = rng.normal(size=3)
        g = rng.normal(size=(2, 3, 4, 4))

        def f():
            return float(np.sum(g * conv2d(x, w, b)))

        gi, gw, gb = conv2d_backward(g, x, w)
        assert rel_err(gi, central_diff(f, x)) < 1e-6
        assert rel_err(gw, central_diff(f, w)) < 1e-6
        assert rel_err(gb, central_diff(f, b)) < 1e-6

    def test_skip_flags(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(2, 2, 3, 3))
        g = rng.normal(size=(1, 2, 4, 4))
        gi, gw, gb = conv2d_backward(g, x, w, need_input=False)
        assert gi is None and gw is not None and gb is not None
        gi, gw, gb = conv2d_backward(g, x, w, need_weight=False)
        assert gi is not None and gw is None and gb is None

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            conv2d_backward(np.zeros((1, 2, 4, 5)), np.zeros((1, 1, 4, 4)), np.zeros((2, 1, 3, 3)))

    def test_input_adjoint(self, rng):
        x = rng.normal(size=(2, 3, 6, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        v = rng.normal(size=(2, 4, 6, 5))
        lhs = np.sum(conv2d(x, w, np.zeros(4)) * v)
        rhs = np.sum(x * conv2d_backward(v, x, w)[0])
        assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


class TestIm2col:
    def test_adjoint_pair(self, rng):
        x = rng.normal(size=(2, 3, 5, 4))
        cols = im2col(x, 3)
        assert cols.shape == (27, 40)
        v = rng.normal(size=cols.shape)
        lhs = np.sum(cols * v)
        rhs = np.sum(x * col2im(v, x.shape, 3))
        assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


class TestPowerExpand:
    def test_q1_identity(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        np.testing.assert_array_equal(power_expand(x, 1), x)

    def test_zero_input(self):
        assert not np.any(power_expand(np.zeros((1, 2, 3, 3)), 3))

    def test_half_blocks(self):
        y = power_expand(np.full((1, 1, 1, 1), 0.5), 3)
        assert y.ravel().tolist() == [0.5, 0.25, 0.125]

    def test_power_major_order(self, rng):
        x = rng.normal(size=(2, 3, 2, 2))
        y = power_expand(x, 4)
        for p in range(1, 5):
            for c in range(3):
                np.testing.assert_allclose(y[:, (p - 1) * 3 + c], x[:, c] ** p, rtol=1e-14)

    def test_q0_rejected(self):
        with pytest.raises(ParameterError):
            power_expand(np.zeros((1, 1, 2, 2)), 0)
        with pytest.raises(ParameterError):
            power_expand_backward(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)), 0)


class TestPowerExpandBackward:
    def test_q1_passthrough(self, rng):
        g = rng.normal(size=(1, 2, 3, 3))
        np.testing.assert_array_equal(power_expand_backward(g, rng.normal(size=g.shape), 1), g)

    def test_polynomial_derivative(self):
        g = power_expand_backward(np.ones((1, 3, 1, 1)), np.full((1, 1, 1, 1), 0.5), 3)
        assert g.item() == 2.75

    def test_zero_input_keeps_linear_term(self):
        g = power_expand_backward(np.ones((1, 3, 1, 1)), np.zeros((1, 1, 1, 1)), 3)
        assert g.item() == 1.0

    def test_finite_differences(self, rng):
        x = rng.uniform(-1, 1, size=(2, 3, 3, 3))
        g = rng.normal(size=(2, 15, 3, 3))

        def f():
            return float(np.sum(g * power_expand(x, 5)))

        assert rel_err(power_expand_backward(g, x, 5), central_diff(f, x)) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            power_expand_backward(np.zeros((1, 5, 2, 2)), np.zeros((1, 2, 2, 2)), 3)


class TestBilinearShift:
    def test_zero_shift_identity(self, rng):
        x = rng.normal(size=(2, 3, 5, 4))
        np.testing.assert_array_equal(bilinear_shift(x, np.zeros((3, 2))), x)

    def test_integer_row_shift(self, rng):
        x = rng.normal(size=(1, 1, 4, 3))
        y = bilinear_shift(x, [(1, 0)])
        np.testing.assert_array_equal(y[0, 0, :-1], x[0, 0, 1:])
        assert not np.any(y[0, 0, -1])

    def test_half_pixel_row(self):
        x = np.arange(4.0).reshape(1, 1, 1, 4)
        assert bilinear_shift(x, [(0.0, 0.5)]).ravel().tolist() == [0.5, 1.5, 2.5, 1.5]

    @pytest.mark.parametrize("alpha,beta", [(0.3, -1.7), (-2.25, 0.6), (4.9, -4.9), (0.0, 2.0), (-0.5, 0.0)])
    def test_matches_bilinear_formula(self, rng, alpha, beta):
        x = rng.normal(size=(1, 1, 6, 7))
        np.testing.assert_allclose(
            bilinear_shift(x, [(alpha, beta)])[0, 0], bilinear_oracle(x[0, 0], alpha, beta), atol=1e-14
        )

    def test_per_channel_shifts(self, rng):
        x = rng.normal(size=(2, 3, 5, 5))
        s = rng.uniform(-3, 3, size=(3, 2))
        y = bilinear_shift(x, s)
        for b in range(2):
            for c in range(3):
                np.testing.assert_allclose(y[b, c], bilinear_oracle(x[b, c], *s[c]), atol=1e-14)

    def test_shift_count_mismatch(self, rng):
        x = rng.normal(size=(1, 3, 4, 4))
        with pytest.raises(DimensionError):
            bilinear_shift(x, np.zeros((2, 2)))
        with pytest.raises(DimensionError):
            bilinear_shift_backward(x, np.zeros((4, 2)))
        with pytest.raises(DimensionError):
            bilinear_shift(x, np.zeros((3, 3)))

    def test_far_shift_gives_zero(self, rng):
        x = rng.normal(size=(1, 1, 3, 3))
        assert not np.any(bilinear_shift(x, [(3.0, 0.0)]))


class TestBilinearShiftBackward:
    def test_zero_shift_passthrough(self, rng):
        g = rng.normal(size=(1, 2, 4, 4))
        np.testing.assert_array_equal(bilinear_shift_backward(g, np.zeros((2, 2)), 4, 4), g)

    def test_integer_shift_scatters_down(self, rng):
        g = rng.normal(size=(1, 1, 4, 3))
        gi = bilinear_shift_backward(g, [(1, 0)], 4, 3)
        np.testing.assert_array_equal(gi[0, 0, 1:], g[0, 0, :-1])
        assert not np.any(gi[0, 0, 0])

    def test_finite_differences(self, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        s = rng.uniform(-5, 5, size=(3, 2))
        g = rng.normal(size=x.shape)

        def f():
            return float(np.sum(g * bilinear_shift(x, s)))

        assert rel_err(bilinear_shift_backward(g, s, 6, 6), central_diff(f, x)) < 1e-6

    def test_extent_check(self, rng):
        with pytest.raises(DimensionError):
            bilinear_shift_backward(np.zeros((1, 1, 4, 4)), [(0.5, 0.5)], 5, 4)


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)
maps = st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(1, 6), st.integers(1, 6))


@st.composite
def conv_case(draw):
    b, c, h, w = draw(maps)
    k = draw(st.sampled_from([1, 3, 5]))
    o = draw(st.integers(1, 3))
    x = draw(arrays(np.float64, (b, c, h, w), elements=finite))
    wt = draw(arrays(np.float64, (o, c, k, k), elements=finite))
    v = draw(arrays(np.float64, (b, o, h, w), elements=finite))
    return x, wt, v


@st.composite
def shift_case(draw):
    b, c, h, w = draw(maps)
    x = draw(arrays(np.float64, (b, c, h, w), elements=finite))
    s = draw(arrays(np.float64, (c, 2), elements=st.floats(-5, 5, allow_nan=False)))
    v = draw(arrays(np.float64, (b, c, h, w), elements=finite))
    return x, s, v


def _close(lhs, rhs, scale):
    return abs(lhs - rhs) <= 1e-10 * max(scale, 1e-300)


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(conv_case())
    def test_conv_adjoint(self, case):
        x, w, v = case
        y = conv2d(x, w, np.zeros(w.shape[0]))
        gi = conv2d_backward(v, x, w)[0]
        scale = np.abs(y).sum() * np.abs(v).max(initial=0) + np.abs(x).sum() * np.abs(gi).max(initial=0)
        assert _close(np.sum(y * v), np.sum(x * gi), scale)

    @settings(max_examples=60, deadline=None)
    @given(shift_case())
    def test_shift_adjoint(self, case):
        x, s, v = case
        y = bilinear_shift(x, s)
        gi = bilinear_shift_backward(v, s)
        scale = np.abs(y).sum() * np.abs(v).max(initial=0) + np.abs(x).sum() * np.abs(gi).max(initial=0)
        assert _close(np.sum(y * v), np.sum(x * gi), scale)

    @settings(max_examples=40, deadline=None)
    @given(shift_case())
    def test_outputs_finite(self, case):
        x, s, _ = case
        assert np.all(np.isfinite(bilinear_shift(x, s)))
        assert np.all(np.isfinite(power_expand(x, 3)))
        w = np.ones((1, x.shape[1], 3, 3))
        assert np.all(np.isfinite(conv2d(x, w, np.zeros(1))))

    @settings(max_examples=40, deadline=None)
    @given(
        arrays(np.float64, (1, 2, 7, 7), elements=finite),
        st.integers(-2, 2), st.integers(-2, 2),
    )
    def test_integer_shift_round_trip_interior(self, x, di, dj):
        s = np.array([[di, dj], [di, dj]], dtype=float)
        back = bilinear_shift(bilinear_shift(x, s), -s)
        rows = slice(max(di, 0), 7 - max(-di, 0))
        cols = slice(max(dj, 0), 7 - max(-dj, 0))
        np.testing.assert_array_equal(back[..., rows, cols], x[..., rows, cols])

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (2, 2, 4, 5), elements=finite), st.integers(-4, 4), st.integers(-4, 4))
    def test_integer_shift_is_translation(self, x, di, dj):
        y = bilinear_shift(x, np.array([[di, dj]] * 2, dtype=float))
        expected = np.zeros_like(x)
        for m in range(4):
            for n in range(5):
                if 0 <= m + di < 4 and 0 <= n + dj < 5:
                    expected[..., m, n] = x[..., m + di, n + dj]
        np.testing.assert_array_equal(y, expected)

    def test_probed_finite_differences(self, rng):
        # at least 100 random coordinates per backward pass, relative error < 1e-4
        x = rng.uniform(-1, 1, size=(2, 4, 8, 8))
        w = rng.normal(size=(3, 4, 3, 3))
        s = rng.uniform(-5, 5, size=(4, 2))
        g3 = rng.normal(size=(2, 3, 8, 8))
        gq = rng.normal(size=(2, 12, 8, 8))
        gs = rng.normal(size=x.shape)
        idx = _probe(rng, x.size, 120)
        cases = [
            (lambda: np.sum(g3 * conv2d(x, w, np.zeros(3))), conv2d_backward(g3, x, w)[0]),
            (lambda: np.sum(gq * power_expand(x, 3)), power_expand_backward(gq, x, 3)),
            (lambda: np.sum(gs * bilinear_shift(x, s)), bilinear_shift_backward(gs, s)),
        ]
        for f, analytic in cases:
            numeric = central_diff(f, x, index=idx)
            assert rel_err(analytic.reshape(-1)[idx], numeric.reshape(-1)[idx]) < 1e-4
