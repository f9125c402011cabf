import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bevkit import tensor as T
from bevkit.errors import ConsistencyError, OracleError, ParameterError, ShapeError

from oracles import naive_conv


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv2d_matches_loop_reference(rng, stride, pad):
    x = rng.standard_normal((7, 6, 3))
    w = rng.standard_normal((3, 3, 3, 4))
    b = rng.standard_normal(4)
    np.testing.assert_allclose(T.conv2d(x, w, b, stride, pad), naive_conv(x, w, b, stride, pad), atol=1e-12)


def test_conv2d_output_shape_and_errors():
    assert T.conv2d_output_shape((256, 704, 3), (3, 3, 3, 8), stride=2, padding=1) == (128, 352, 8)
    with pytest.raises(ShapeError):
        T.conv2d(np.zeros((4, 4, 2)), np.zeros((3, 3, 3, 1)))
    with pytest.raises(ParameterError):
        T.conv2d(np.zeros((2, 2, 1)), np.zeros((5, 5, 1, 1)))
    with pytest.raises(ParameterError):
        T.conv2d(np.zeros((4, 4, 1)), np.zeros((3, 3, 1, 1)), stride=0)


def test_float32_storage_and_float64_passthrough(rng):
    a32 = rng.standard_normal((3, 4)).astype(np.float32)
    b32 = rng.standard_normal((4, 2)).astype(np.float32)
    assert T.matmul(a32, b32).dtype == np.float32
    assert T.matmul(a32, b32.astype(np.float64)).dtype == np.float64
    assert T.softmax_lastdim(a32).dtype == np.float32


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        T.matmul(np.zeros(3), np.zeros((3, 1)))


def test_softmax_is_shift_invariant_and_stable():
    x = np.array([[1000.0, 1001.0, 999.0]])
    y = T.softmax_lastdim(x)
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, T.softmax_lastdim(x - 1000.0), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_are_distributions(x):
    y = T.softmax_lastdim(x)
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


def test_maxpool_ties_pick_first_row_major():
    x = np.ones((2, 2, 1))
    _, idx = T.maxpool2d_with_indices(x)
    assert idx.flat[0, 0, 0] == 0


def test_maxpool_unpool_round_trip(rng):
    x = rng.standard_normal((4, 6, 3))
    y, idx = T.maxpool2d_with_indices(x)
    u = T.maxunpool2d(y, idx)
    for i in range(2):
        for j in range(3):
            for c in range(3):
                block = x[2 * i : 2 * i + 2, 2 * j : 2 * j + 2, c]
                r, k = divmod(int(idx.flat[i, j, c]), 6)
                assert y[i, j, c] == block.max() == x[r, k, c]
                # the maximum goes back to its source cell, the rest of the window is zero
                expect = np.zeros((2, 2))
                expect[r - 2 * i, k - 2 * j] = block.max()
                np.testing.assert_array_equal(u[2 * i : 2 * i + 2, 2 * j : 2 * j + 2, c], expect)


def test_unpool_rejects_foreign_indices(rng):
    y, idx = T.maxpool2d_with_indices(rng.standard_normal((4, 4, 2)))
    with pytest.raises(ConsistencyError):
        T.maxunpool2d(np.zeros((3, 3, 2)), idx)
    with pytest.raises(ConsistencyError):
        T.maxunpool2d(y, "not indices")
    with pytest.raises(ShapeError):
        T.maxpool2d_with_indices(np.zeros((5, 4, 1)))


def test_affine_norm_channel_check():
    with pytest.raises(ShapeError):
        T.affine_norm(np.zeros((2, 2, 3)), np.ones(2), np.zeros(3))


def test_concat_pullback_splits_by_position(rng):
    a, b = rng.standard_normal((2, 3, 2)), rng.standard_normal((2, 3, 4))
    v, pb = T.concat_channels_vjp(a, b)
    g = pb(v)
    np.testing.assert_array_equal(g[0], a)
    np.testing.assert_array_equal(g[1], b)
    with pytest.raises(ShapeError):
        T.concat_channels_vjp(a, np.zeros((3, 3, 1)))


def test_finite_diff_oracle_on_known_function():
    x = np.array([1.0, -2.0, 0.5])
    g = T.finite_diff_grad(lambda v: float(np.sum(v**3)), x)
    np.testing.assert_allclose(g, 3 * x**2, atol=1e-5)


def test_finite_diff_oracle_rejects_non_finite():
    with pytest.raises(OracleError):
        T.finite_diff_grad(lambda v: float("nan"), np.zeros(2))


def test_relu_pullback_masks(rng):
    x = rng.standard_normal((3, 3))
    y, pb = T.relu_vjp(x)
    g = pb(np.ones_like(x))["x"]
    np.testing.assert_array_equal(g, (x > 0).astype(float))
    assert np.all(y >= 0)
