"""
Tests for the harmonic block
Two-stage vs merged equivalence, spectrum BN semantics, exact multiply-add
counts of the loop oracles and analytic gradients of every formulation.
"""
from dataclasses import replace

import numpy as np
import pytest

from compression import layer_cost
from dct_basis import make_basis, select_spectrum
from errors import ConfigError, SelectionError, ShapeError
from harmonic_block import (HarmonicBlockConfig, HarmonicBlockParams, SpectrumBNState, block_gradients,
                            forward_bn, forward_merged, forward_merged_reference, forward_twostage,
                            forward_twostage_reference, init_params, stage1_responses, synthesize_filters)
from model_spec import LayerSpec
from tensor_core import MacCounter, finite_diff_grad, make_rng, max_relative_error


def _random_block(rng, dtype, spectrum_bn=False, norm='orthonormal', has_bias=True):
    K = int(rng.integers(1, 6))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, K // 2 + 1))
    lam = int(rng.integers(1, 2 * K))
    cfg = HarmonicBlockConfig.create(int(rng.integers(1, 4)), int(rng.integers(1, 5)), K, stride, padding, lam,
                                     use_spectrum_bn=spectrum_bn, basis_norm=norm, has_bias=has_bias)
    params = init_params(cfg, rng, dtype)
    params = replace(params, bias=rng.standard_normal(cfg.out_channels).astype(dtype) if has_bias else None)
    size = int(rng.integers(K + 1, K + 6))
    x = rng.standard_normal((int(rng.integers(1, 3)), cfg.in_channels, size, size)).astype(dtype)
    return cfg, params, make_basis(K, norm, dtype), x


@pytest.mark.parametrize('dtype,tol', [(np.float64, 1e-10), (np.float32, 1e-4)])
def test_merged_equals_twostage_over_random_configs(dtype, tol):
    rng = make_rng(0)
    for trial in range(100):
        norm = 'l1' if trial % 5 == 0 else 'orthonormal'
        cfg, params, basis, x = _random_block(rng, dtype, norm=norm, has_bias=trial % 3 != 0)
        twostage = forward_twostage(x, cfg, params, basis)
        merged = forward_merged(x, cfg, params, basis)
        assert twostage.dtype == dtype and merged.dtype == dtype
        assert np.max(np.abs(merged - twostage)) <= tol, (trial, cfg)


def _wide_block(rng, N, M, K, stride, lam):
    padding = int(rng.integers(0, K // 2 + 1))
    cfg = HarmonicBlockConfig.create(N, M, K, stride, padding, lam)
    params = replace(init_params(cfg, rng, np.float64), bias=rng.standard_normal(M))
    size = int(rng.integers(K, K + 3 * stride + 1))
    x = rng.standard_normal((2, N, size, size))
    return cfg, params, make_basis(K), x


@pytest.mark.parametrize('N,M,K,stride,lam', [(8, 8, 7, 4, 13), (8, 1, 7, 1, 1), (1, 8, 7, 2, 7),
                                              (5, 3, 2, 4, 2), (2, 6, 4, 4, 5), (8, 8, 5, 2, 3)])
def test_merged_equals_twostage_at_extreme_shapes(N, M, K, stride, lam):
    cfg, params, basis, x = _wide_block(make_rng(N * 100 + K), N, M, K, stride, lam)
    np.testing.assert_allclose(forward_merged(x, cfg, params, basis), forward_twostage(x, cfg, params, basis),
                               rtol=0, atol=1e-10)


@pytest.mark.slow
def test_merged_equals_twostage_full_sweep():
    rng = make_rng(20)
    for trial in range(100):
        K = int(rng.choice([2, 3, 4, 5, 7]))
        N, M = (int(v) for v in rng.integers(1, 9, size=2))
        cfg, params, basis, x = _wide_block(rng, N, M, K, int(rng.choice([1, 2, 4])), int(rng.integers(1, 2 * K)))
        diff = np.max(np.abs(forward_merged(x, cfg, params, basis) - forward_twostage(x, cfg, params, basis)))
        assert diff <= 1e-10, (trial, cfg)


@pytest.mark.parametrize('forward', [forward_twostage, forward_merged])
def test_block_is_linear_without_bias(forward):
    rng = make_rng(21)
    cfg = HarmonicBlockConfig.create(3, 4, 3, stride=2, padding=1, lam=4, has_bias=False)
    params = init_params(cfg, rng, np.float64)
    basis = make_basis(3)
    x, y = rng.standard_normal((2, 2, 3, 9, 9))
    a, b = -2.5, 0.75
    np.testing.assert_allclose(forward(a * x + b * y, cfg, params, basis),
                               a * forward(x, cfg, params, basis) + b * forward(y, cfg, params, basis),
                               rtol=0, atol=1e-10)


def test_block_without_dc_ignores_per_channel_offsets():
    rng = make_rng(22)
    selection = select_spectrum(3, 3).without_dc()
    cfg = HarmonicBlockConfig.create(2, 3, 3, selection=selection)
    params = replace(init_params(cfg, rng, np.float32), bias=rng.standard_normal(3).astype(np.float32))
    basis = make_basis(3, dtype=np.float32)
    x = rng.standard_normal((2, 2, 7, 7)).astype(np.float32)
    offset = np.array([3.0, -2.0], dtype=np.float32)[None, :, None, None]
    for forward in (forward_twostage, forward_merged):
        np.testing.assert_allclose(forward(x + offset, cfg, params, basis), forward(x, cfg, params, basis),
                                   rtol=0, atol=1e-5)
    with_dc = HarmonicBlockConfig.create(2, 3, 3, lam=3)
    dc_params = init_params(with_dc, rng, np.float32)
    assert np.max(np.abs(forward_twostage(x + offset, with_dc, dc_params, basis)
                         - forward_twostage(x, with_dc, dc_params, basis))) > 1e-2


def test_stage1_methods_agree():
    rng = make_rng(1)
    cfg = HarmonicBlockConfig.create(3, 2, 3, padding=1, lam=4)
    basis = make_basis(3)
    x = rng.standard_normal((2, 3, 7, 7))
    separable = stage1_responses(x, cfg, basis, 'separable')
    assert separable.shape == (2, 3, cfg.P, 7, 7)
    np.testing.assert_allclose(stage1_responses(x, cfg, basis, 'direct'), separable, atol=1e-12)
    np.testing.assert_allclose(stage1_responses(x, cfg, basis, 'gemm'), separable, atol=1e-12)
    strided = HarmonicBlockConfig.create(3, 2, 3, stride=2, padding=1)
    with pytest.raises(ConfigError):
        stage1_responses(x, strided, basis, 'separable')


def test_full_spectrum_k1_block_is_a_1x1_convolution():
    rng = make_rng(2)
    cfg = HarmonicBlockConfig.create(4, 3, 1)
    params = init_params(cfg, rng, np.float64)
    x = rng.standard_normal((2, 4, 5, 5))
    expected = np.einsum('mn,bnhw->bmhw', params.weights[:, :, 0], x)
    np.testing.assert_allclose(forward_twostage(x, cfg, params, make_basis(1)), expected, atol=1e-12)


def test_init_variance_follows_fan_in():
    cfg = HarmonicBlockConfig.create(16, 64, 3)
    params = init_params(cfg, make_rng(3), np.float64)
    assert params.weights.shape == (64, 16, 9)
    assert params.weights.var() == pytest.approx(2.0 / (16 * 9), rel=0.1)
    np.testing.assert_array_equal(params.bias, 0.0)


def test_config_validation():
    with pytest.raises(SelectionError):
        HarmonicBlockConfig.create(2, 2, 3, selection=select_spectrum(4, 2))
    with pytest.raises(ShapeError):
        HarmonicBlockConfig.create(0, 2, 3)
    cfg = HarmonicBlockConfig.create(2, 2, 3, lam=2)
    params = init_params(cfg, make_rng(4))
    with pytest.raises(ShapeError):
        forward_twostage(np.zeros((1, 3, 5, 5), dtype=np.float32), cfg, params, make_basis(3))
    with pytest.raises(SelectionError):
        forward_twostage(np.zeros((1, 2, 5, 5), dtype=np.float32), cfg, params, make_basis(4))
    with pytest.raises(ShapeError):
        forward_twostage(np.zeros((1, 2, 5, 5)), cfg, replace(params, weights=np.zeros((2, 2, 6))), make_basis(3))


def test_spectrum_bn_train_mode_normalizes_and_advances_running_stats():
    rng = make_rng(5)
    cfg = HarmonicBlockConfig.create(2, 3, 3, padding=1, use_spectrum_bn=True)
    params = init_params(cfg, rng, np.float64)
    x = rng.standard_normal((4, 2, 6, 6)) * 2.0 + 1.0
    out = forward_bn(x, cfg, params, make_basis(3), mode='train')
    z = out.normalized
    np.testing.assert_allclose(z.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    np.testing.assert_allclose(z.var(axis=(0, 2, 3)), 1.0, atol=1e-3)

    responses = stage1_responses(x, cfg, make_basis(3)).reshape(4, 18, 6, 6)
    np.testing.assert_allclose(out.bn_state.running_mean, 0.1 * responses.mean(axis=(0, 2, 3)), atol=1e-12)
    np.testing.assert_allclose(out.bn_state.running_var, 0.9 + 0.1 * responses.var(axis=(0, 2, 3)), atol=1e-12)
    # the caller's state is untouched
    np.testing.assert_array_equal(params.bn_state.running_mean, 0.0)


def test_spectrum_bn_eval_mode_uses_running_stats():
    rng = make_rng(6)
    cfg = HarmonicBlockConfig.create(2, 3, 3, padding=1, use_spectrum_bn=True)
    basis = make_basis(3)
    params = init_params(cfg, rng, np.float64)
    eps = params.bn_state.eps
    identity_state = replace(params.bn_state, running_var=np.full(18, 1.0 - eps))
    params = replace(params, bn_state=identity_state)
    x = rng.standard_normal((2, 2, 5, 5))
    out = forward_bn(x, cfg, params, basis, mode='eval')
    assert out.bn_state is identity_state
    plain_cfg = replace(cfg, use_spectrum_bn=False)
    plain = forward_twostage(x, plain_cfg, replace(params, bn_state=None), basis)
    np.testing.assert_allclose(out.output, plain, rtol=1e-12, atol=1e-12)
    with pytest.raises(ConfigError):
        forward_bn(x, cfg, params, basis, mode='infer')


def test_spectrum_bn_blocks_cannot_merge():
    cfg = HarmonicBlockConfig.create(2, 2, 3, use_spectrum_bn=True)
    params = init_params(cfg, make_rng(7))
    with pytest.raises(ConfigError):
        synthesize_filters(params, cfg, make_basis(3, dtype=np.float32))
    with pytest.raises(ConfigError):
        SpectrumBNState(np.zeros(4), np.zeros(4), np.ones(4), np.zeros(4))


@pytest.mark.parametrize('lam', [5, 3, 2])
def test_reference_mac_counts_match_cost_model(lam):
    rng = make_rng(8)
    N, M, K, A = 2, 3, 3, 4
    cfg = HarmonicBlockConfig.create(N, M, K, padding=1, lam=lam)
    params = init_params(cfg, rng, np.float64)
    basis = make_basis(K)
    x = rng.standard_normal((1, N, A, A))
    cost = layer_cost(LayerSpec('harm', name='h', in_channels=N, out_channels=M, kernel=K, padding=1,
                                in_res=(A, A), out_res=(A, A), lam=lam), cfg.selection)

    twostage_count, merged_count = MacCounter(), MacCounter()
    y2 = forward_twostage_reference(x, cfg, params, basis, twostage_count)
    ym = forward_merged_reference(x, cfg, params, basis, merged_count)
    P = cfg.P
    assert twostage_count.count == cost.macs_twostage == N * P * A * A * K * K + N * P * M * A * A
    assert merged_count.count == cost.macs_merged == N * M * K * K * A * A + N * M * P * K * K
    if lam == 5:
        assert twostage_count.count == N * K * K * A * A * (M + K * K)
    np.testing.assert_allclose(y2, forward_twostage(x, cfg, params, basis), atol=1e-12)
    np.testing.assert_allclose(ym, y2, atol=1e-12)


def _check_gradients(cfg, params, basis, x, formulation, tol, mode='train'):
    rng = make_rng(9)
    x64 = x.astype(np.float64)
    basis64 = basis.astype(np.float64)

    def params64(**changes):
        current = replace(params, weights=params.weights.astype(np.float64),
                          bias=None if params.bias is None else params.bias.astype(np.float64))
        if params.bn_state is not None:
            bn = params.bn_state
            current = replace(current, bn_state=SpectrumBNState(*(a.astype(np.float64) for a in (
                bn.running_mean, bn.running_var, bn.gamma, bn.beta)), bn.momentum, bn.eps))
        return replace(current, **changes)

    def run(xv, p):
        if formulation == 'bn':
            return forward_bn(xv, cfg, p, basis64, mode=mode).output
        if formulation == 'merged':
            return forward_merged(xv, cfg, p, basis64)
        return forward_twostage(xv, cfg, p, basis64)

    upstream = rng.standard_normal(run(x64, params64()).shape)
    grads = block_gradients(x, cfg, params, basis, upstream.astype(x.dtype), formulation, mode=mode)

    fd_x = finite_diff_grad(lambda v: np.sum(run(v, params64()) * upstream), x64)
    fd_w = finite_diff_grad(lambda w: np.sum(run(x64, params64(weights=w)) * upstream),
                            params.weights.astype(np.float64))
    assert max_relative_error(grads.grad_input, fd_x) <= tol
    assert max_relative_error(grads.grad_weights, fd_w) <= tol
    if cfg.has_bias:
        np.testing.assert_allclose(grads.grad_bias, upstream.sum(axis=(0, 2, 3)), rtol=tol)
    if formulation == 'bn':
        bn = params64().bn_state
        fd_gamma = finite_diff_grad(
            lambda g: np.sum(run(x64, params64(bn_state=replace(bn, gamma=g))) * upstream), bn.gamma)
        fd_beta = finite_diff_grad(
            lambda b: np.sum(run(x64, params64(bn_state=replace(bn, beta=b))) * upstream), bn.beta)
        assert max_relative_error(grads.grad_bn['gamma'], fd_gamma) <= tol
        assert max_relative_error(grads.grad_bn['beta'], fd_beta) <= tol


@pytest.mark.parametrize('dtype,tol', [(np.float64, 1e-6), (np.float32, 1e-3)])
@pytest.mark.parametrize('formulation', ['twostage', 'merged'])
@pytest.mark.parametrize('stride,padding,lam', [(1, 1, 5), (2, 1, 3), (1, 0, 2)])
def test_block_gradients_match_finite_differences(dtype, tol, formulation, stride, padding, lam):
    rng = make_rng(10)
    cfg = HarmonicBlockConfig.create(2, 3, 3, stride, padding, lam)
    params = init_params(cfg, rng, dtype)
    params = replace(params, bias=rng.standard_normal(3).astype(dtype))
    x = rng.standard_normal((2, 2, 5, 5)).astype(dtype)
    _check_gradients(cfg, params, make_basis(3, dtype=dtype), x, formulation, tol)


@pytest.mark.parametrize('formulation', ['twostage', 'merged', 'bn'])
def test_zero_upstream_gives_zero_gradients(formulation):
    rng = make_rng(23)
    cfg = HarmonicBlockConfig.create(2, 3, 3, 1, 1, 4, use_spectrum_bn=formulation == 'bn')
    params = init_params(cfg, rng, np.float64)
    x = rng.standard_normal((2, 2, 5, 5))
    grads = block_gradients(x, cfg, params, make_basis(3), np.zeros((2, 3, 5, 5)), formulation)
    np.testing.assert_array_equal(grads.grad_input, 0.0)
    np.testing.assert_array_equal(grads.grad_weights, 0.0)
    np.testing.assert_array_equal(grads.grad_bias, 0.0)
    for value in (grads.grad_bn or {}).values():
        np.testing.assert_array_equal(value, 0.0)


@pytest.mark.parametrize('stride,padding,lam', [(1, 1, 5), (2, 0, 2), (4, 2, 4)])
def test_merged_and_twostage_gradients_agree(stride, padding, lam):
    rng = make_rng(24)
    cfg = HarmonicBlockConfig.create(3, 4, 3, stride, padding, lam)
    params = replace(init_params(cfg, rng, np.float64), bias=rng.standard_normal(4))
    basis = make_basis(3)
    x = rng.standard_normal((2, 3, 9, 9))
    upstream = rng.standard_normal(forward_twostage(x, cfg, params, basis).shape)
    twostage = block_gradients(x, cfg, params, basis, upstream, 'twostage')
    merged = block_gradients(x, cfg, params, basis, upstream, 'merged')
    np.testing.assert_allclose(merged.grad_input, twostage.grad_input, rtol=0, atol=1e-10)
    np.testing.assert_allclose(merged.grad_weights, twostage.grad_weights, rtol=0, atol=1e-10)
    np.testing.assert_allclose(merged.grad_bias, twostage.grad_bias, rtol=0, atol=1e-10)


@pytest.mark.parametrize('dtype,tol', [(np.float64, 1e-6), (np.float32, 1e-3)])
@pytest.mark.parametrize('mode', ['train', 'eval'])
def test_spectrum_bn_gradients_match_finite_differences(dtype, tol, mode):
    rng = make_rng(11)
    cfg = HarmonicBlockConfig.create(2, 2, 2, stride=2, use_spectrum_bn=True, has_bias=False)
    params = init_params(cfg, rng, dtype)
    size = cfg.in_channels * cfg.P
    bn = replace(params.bn_state, gamma=(1 + 0.3 * rng.standard_normal(size)).astype(dtype),
                 beta=(0.2 * rng.standard_normal(size)).astype(dtype),
                 running_mean=(0.1 * rng.standard_normal(size)).astype(dtype),
                 running_var=(1 + 0.5 * rng.random(size)).astype(dtype))
    params = replace(params, bn_state=bn)
    x = rng.standard_normal((3, 2, 6, 6)).astype(dtype)
    _check_gradients(cfg, params, make_basis(2, dtype=dtype), x, 'bn', tol, mode=mode)


def test_block_gradients_reject_mismatched_formulation():
    cfg = HarmonicBlockConfig.create(2, 2, 3, use_spectrum_bn=True)
    params = init_params(cfg, make_rng(12), np.float64)
    x = np.zeros((1, 2, 5, 5))
    with pytest.raises(ConfigError):
        block_gradients(x, cfg, params, make_basis(3), np.zeros((1, 2, 3, 3)), 'merged')
    with pytest.raises(ShapeError):
        block_gradients(x, cfg, params, make_basis(3), np.zeros((1, 2, 5, 5)))


def test_block_params_are_validated():
    cfg = HarmonicBlockConfig.create(2, 2, 3)
    with pytest.raises(ShapeError):
        HarmonicBlockParams(np.zeros((2, 2, 9)), bias=None).validate(cfg)
