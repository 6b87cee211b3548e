"""
Tests for the dense tensor substrate
Convolution paths against the loop oracle, analytic backward against finite
differences, batch statistics and geometry validation.
"""
import numpy as np
import pytest

from errors import ConfigError, NonFiniteError, ShapeError
from tensor_core import (ConvGeometry, MacCounter, as_tensor, batch_moments, conv2d, conv2d_grad_filters,
                         conv2d_grad_input, conv2d_reference, finite_diff_grad, make_rng, max_relative_error)


@pytest.mark.parametrize('kernel,stride,padding', [(1, 1, 0), (3, 1, 1), (3, 2, 1), (4, 4, 0), (5, 2, 2)])
def test_direct_conv_matches_loop_oracle_bitwise(kernel, stride, padding):
    rng = make_rng(0)
    geom = ConvGeometry(kernel, stride, padding)
    x = rng.standard_normal((2, 3, 9, 9))
    w = rng.standard_normal((4, 3, kernel, kernel))
    np.testing.assert_array_equal(conv2d(x, w, geom), conv2d_reference(x, w, geom))


@pytest.mark.parametrize('stride,padding', [(1, 0), (1, 1), (2, 1)])
def test_gemm_conv_agrees_with_direct(stride, padding):
    rng = make_rng(1)
    geom = ConvGeometry(3, stride, padding)
    x = rng.standard_normal((3, 4, 10, 10))
    w = rng.standard_normal((5, 4, 3, 3))
    np.testing.assert_allclose(conv2d(x, w, geom, method='gemm'), conv2d(x, w, geom), rtol=1e-12, atol=1e-12)


def test_threaded_conv_is_bitwise_equal_to_single_worker():
    rng = make_rng(2)
    geom = ConvGeometry(3, 1, 1)
    x = rng.standard_normal((5, 2, 8, 8)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    np.testing.assert_array_equal(conv2d(x, w, geom, workers=3), conv2d(x, w, geom))


@pytest.mark.parametrize('method', ['direct', 'gemm'])
def test_conv_is_linear_in_input_and_filters(method):
    rng = make_rng(4)
    geom = ConvGeometry(3, 2, 1)
    x, y = rng.standard_normal((2, 2, 2, 7, 7))
    w, v = rng.standard_normal((2, 3, 2, 3, 3))
    a, b = 1.7, -0.4
    np.testing.assert_allclose(conv2d(a * x + b * y, w, geom, method),
                               a * conv2d(x, w, geom, method) + b * conv2d(y, w, geom, method), atol=1e-10)
    np.testing.assert_allclose(conv2d(x, a * w + b * v, geom, method),
                               a * conv2d(x, w, geom, method) + b * conv2d(x, v, geom, method), atol=1e-10)


def test_reference_counts_one_mac_per_tap():
    rng = make_rng(3)
    geom = ConvGeometry(3, 1, 1)
    counter = MacCounter()
    conv2d_reference(rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((4, 2, 3, 3)), geom, counter)
    assert counter.count == 2 * 4 * 9 * 5 * 5


def test_output_geometry():
    assert ConvGeometry(3, 2, 1).output_shape(32, 32) == (16, 16)
    assert ConvGeometry(4, 4, 0).output_shape(96, 96) == (24, 24)
    with pytest.raises(ShapeError):
        ConvGeometry(5).output_extent(3)
    with pytest.raises(ShapeError):
        ConvGeometry(0)


def test_channel_mismatch_reports_shapes():
    x = np.zeros((1, 3, 5, 5))
    w = np.zeros((2, 4, 3, 3))
    with pytest.raises(ShapeError, match=r"expected \(2, 3, 3, 3\), got \(2, 4, 3, 3\)"):
        conv2d(x, w, ConvGeometry(3))


@pytest.mark.parametrize('stride,padding', [(1, 1), (2, 1), (2, 0)])
def test_conv_backward_matches_finite_differences(stride, padding):
    rng = make_rng(4)
    geom = ConvGeometry(3, stride, padding)
    x = rng.standard_normal((2, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    upstream = rng.standard_normal(conv2d(x, w, geom).shape)

    def loss_x(v):
        return float(np.sum(conv2d(v, w, geom) * upstream))

    def loss_w(v):
        return float(np.sum(conv2d(x, v, geom) * upstream))

    assert max_relative_error(conv2d_grad_input(upstream, w, x.shape, geom), finite_diff_grad(loss_x, x)) < 1e-6
    assert max_relative_error(conv2d_grad_filters(x, upstream, geom), finite_diff_grad(loss_w, w)) < 1e-6


def test_finite_diff_reports_non_finite_index():
    def f(v):
        return np.inf if v[1] > 1.0 else float(v.sum())

    with pytest.raises(NonFiniteError) as info:
        finite_diff_grad(f, np.array([0.0, 1.0]), eps=1e-3)
    assert tuple(info.value.index) == (1,)


def test_finite_diff_evaluates_integer_inputs_in_float64():
    grad = finite_diff_grad(lambda v: float(np.sum(v.astype(np.float64) ** 2)), np.array([1, 2]))
    assert grad.dtype == np.float64
    np.testing.assert_allclose(grad, [2.0, 4.0], atol=1e-6)


def test_finite_diff_rejects_a_step_that_rounds_away():
    with pytest.raises(ConfigError, match="vanishes"):
        finite_diff_grad(lambda v: float(v.sum()), np.array([1e4], dtype=np.float32), eps=1e-6)
    with pytest.raises(ConfigError):
        finite_diff_grad(lambda v: float(v.sum()), np.zeros(2), eps=0.0)


def test_batch_moments_are_biased_two_pass():
    rng = make_rng(5)
    x = rng.standard_normal((4, 3, 5, 5)) * 3.0 + 1e4
    mean, var = batch_moments(x)
    np.testing.assert_allclose(mean, x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(var, x.var(axis=(0, 2, 3)), rtol=1e-9)
    with pytest.raises(ShapeError):
        batch_moments(np.zeros((4, 3)))


def test_as_tensor_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        as_tensor(np.zeros((1, 1, 1, 1, 1)))
    with pytest.raises(ShapeError):
        as_tensor(np.zeros((0, 3)))
    assert as_tensor([[1, 2]], dtype=np.float32).dtype == np.float32


def test_seeded_generators_repeat():
    np.testing.assert_array_equal(make_rng(7).standard_normal(5), make_rng(7).standard_normal(5))
