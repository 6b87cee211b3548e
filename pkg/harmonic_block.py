"""
Harmonic block
A fixed DCT filter bank applied depthwise, followed by a learned 1x1
combination of the responses. Three formulations share one parameter set:
two-stage, spectrum-normalized, and merged (filters synthesized up front).
"""
import logging
from dataclasses import dataclass, replace
from typing import Dict, NamedTuple, Optional

import numpy as np

from dct_basis import DctBasis, SpectrumSelection, select_spectrum
from errors import ConfigError, SelectionError, ShapeError
from tensor_core import (
    ConvGeometry,
    MacCounter,
    Tensor,
    batch_moments,
    conv2d,
    conv2d_grad_filters,
    conv2d_grad_input,
    conv2d_reference,
    pad2d,
)

logger = logging.getLogger(__name__)

FORMULATIONS = ('twostage', 'bn', 'merged')
STAGE1_METHODS = ('separable', 'direct', 'gemm')

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass(frozen=True)
class HarmonicBlockConfig:
    in_channels: int
    out_channels: int
    kernel_size: int
    geom: ConvGeometry
    selection: SpectrumSelection
    use_spectrum_bn: bool = False
    basis_norm: str = 'orthonormal'
    has_bias: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError(f"channel counts must be >= 1, got N={self.in_channels} M={self.out_channels}")
        if self.selection.K != self.kernel_size:
            raise SelectionError(
                f"selection is for K={self.selection.K}, block kernel is {self.kernel_size}"
            )
        if self.geom.kernel != self.kernel_size:
            raise ShapeError(f"geometry kernel {self.geom.kernel} != block kernel {self.kernel_size}")

    @property
    def P(self) -> int:
        return self.selection.count

    @classmethod
    def create(cls, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
               padding: int = 0, lam: Optional[int] = None,
               selection: Optional[SpectrumSelection] = None, **kwargs) -> 'HarmonicBlockConfig':
        if selection is None:
            selection = select_spectrum(kernel_size, lam if lam is not None else 2 * kernel_size - 1)
        return cls(
            in_channels=in_channels,
            out_channels=out_channels,
            kernel_size=kernel_size,
            geom=ConvGeometry(kernel_size, stride, padding),
            selection=selection,
            **kwargs,
        )


@dataclass(frozen=True, eq=False)
class SpectrumBNState:
    """Per (n, u, v) normalization state, each array of length N*P"""
    running_mean: np.ndarray
    running_var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    def __post_init__(self):
        if np.any(self.running_var <= 0):
            raise ConfigError("spectrum BN running variance must be > 0")

    @classmethod
    def initial(cls, size: int, dtype=np.float32) -> 'SpectrumBNState':
        return cls(
            running_mean=np.zeros(size, dtype=dtype),
            running_var=np.ones(size, dtype=dtype),
            gamma=np.ones(size, dtype=dtype),
            beta=np.zeros(size, dtype=dtype),
        )

    def updated(self, mean: np.ndarray, var: np.ndarray) -> 'SpectrumBNState':
        m = self.momentum
        dtype = self.running_mean.dtype
        return replace(
            self,
            running_mean=((1 - m) * self.running_mean + m * mean).astype(dtype),
            running_var=((1 - m) * self.running_var + m * var).astype(dtype),
        )


@dataclass(frozen=True, eq=False)
class HarmonicBlockParams:
    weights: np.ndarray
    bias: Optional[np.ndarray] = None
    bn_state: Optional[SpectrumBNState] = None

    def validate(self, cfg: HarmonicBlockConfig):
        expected = (cfg.out_channels, cfg.in_channels, cfg.P)
        if self.weights.shape != expected:
            raise ShapeError("combination weights do not match the block", expected=expected,
                             got=self.weights.shape)
        if cfg.has_bias and (self.bias is None or self.bias.shape != (cfg.out_channels,)):
            raise ShapeError("bias does not match the block", expected=(cfg.out_channels,),
                             got=None if self.bias is None else self.bias.shape)
        if cfg.use_spectrum_bn:
            if self.bn_state is None:
                raise ConfigError("spectrum BN enabled but no bn_state supplied")
            size = cfg.in_channels * cfg.P
            for name in ('running_mean', 'running_var', 'gamma', 'beta'):
                arr = getattr(self.bn_state, name)
                if arr.shape != (size,):
                    raise ShapeError(f"spectrum BN {name} does not match the block",
                                     expected=(size,), got=arr.shape)


def init_params(cfg: HarmonicBlockConfig, rng: np.random.Generator, dtype=np.float32) -> HarmonicBlockParams:
    """Gaussian weights with variance 2 / fan-in (fan-in = N*P), zero bias"""
    fan_in = cfg.in_channels * cfg.P
    std = np.sqrt(2.0 / fan_in)
    weights = (rng.standard_normal((cfg.out_channels, cfg.in_channels, cfg.P)) * std).astype(dtype)
    bias = np.zeros(cfg.out_channels, dtype=dtype) if cfg.has_bias else None
    bn_state = SpectrumBNState.initial(fan_in, dtype) if cfg.use_spectrum_bn else None
    return HarmonicBlockParams(weights=weights, bias=bias, bn_state=bn_state)


def _check_inputs(x: Tensor, cfg: HarmonicBlockConfig, params: HarmonicBlockParams, basis: DctBasis):
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError("block input must be B x N x H x W",
                         expected=('B', cfg.in_channels, 'H', 'W'), got=x.shape)
    if basis.size != cfg.kernel_size:
        raise SelectionError(f"basis K={basis.size} does not match block kernel {cfg.kernel_size}")
    if basis.norm_mode != cfg.basis_norm:
        raise SelectionError(f"basis is {basis.norm_mode}, block expects {cfg.basis_norm}")
    params.validate(cfg)


def _selected_filters(cfg: HarmonicBlockConfig, basis: DctBasis) -> np.ndarray:
    return basis.filters[cfg.selection.flat_indices()]


def stage1_responses(x: Tensor, cfg: HarmonicBlockConfig, basis: DctBasis,
                     method: Optional[str] = None) -> Tensor:
    """
    Depthwise DCT responses, B x N x P x H' x W'.

    'separable' applies the rank-1 row / column factors (stride 1 only);
    'direct' and 'gemm' run a 2-D convolution per input channel.
    """
    x = np.asarray(x)
    method = method or ('separable' if cfg.geom.stride == 1 else 'direct')
    if method not in STAGE1_METHODS:
        raise ConfigError(f"unknown stage-1 method '{method}'")
    if method == 'separable' and cfg.geom.stride != 1:
        raise ConfigError("separable stage 1 needs stride 1")
    dtype = np.result_type(x.dtype, basis.dtype)
    x = x.astype(dtype, copy=False)
    B, N, H, W = x.shape
    P = cfg.P

    if method == 'separable':
        return _stage1_separable(x, cfg, basis.astype(dtype))

    filters = _selected_filters(cfg, basis).astype(dtype)[:, None, :, :]
    y = conv2d(x.reshape(B * N, 1, H, W), filters, cfg.geom, method=method)
    return y.reshape(B, N, P, y.shape[2], y.shape[3])


def _stage1_separable(x: Tensor, cfg: HarmonicBlockConfig, basis: DctBasis) -> Tensor:
    K = cfg.kernel_size
    xp = pad2d(x, cfg.geom.padding)
    B, N, Hp, Wp = xp.shape
    out_h, out_w = Hp - K + 1, Wp - K + 1
    cos = basis.cosines

    # column pass, shared by every frequency with the same v
    columns: Dict[int, np.ndarray] = {}
    for v in sorted({v for _, v in cfg.selection.indices}):
        acc = np.zeros((B, N, Hp, out_w), dtype=x.dtype)
        for y in range(K):
            acc += cos[v, y] * xp[:, :, :, y:y + out_w]
        columns[v] = acc

    out = np.empty((B, N, cfg.P, out_h, out_w), dtype=x.dtype)
    for p, (u, v) in enumerate(cfg.selection.indices):
        acc = np.zeros((B, N, out_h, out_w), dtype=x.dtype)
        col = columns[v]
        for r in range(K):
            acc += cos[u, r] * col[:, :, r:r + out_h, :]
        out[:, :, p] = basis.scales[u * K + v] * acc
    return out


def _combine(responses: Tensor, weights: np.ndarray, bias: Optional[np.ndarray], workers: int = 1) -> Tensor:
    B, N, P, H, W = responses.shape
    M = weights.shape[0]
    flat = responses.reshape(B, N * P, H, W)
    y = conv2d(flat, weights.reshape(M, N * P, 1, 1).astype(flat.dtype, copy=False), ConvGeometry(1), workers=workers)
    if bias is not None:
        y = y + bias.astype(y.dtype, copy=False)[None, :, None, None]
    return y


def forward_twostage(x: Tensor, cfg: HarmonicBlockConfig, params: HarmonicBlockParams,
                     basis: DctBasis, method: Optional[str] = None, workers: int = 1) -> Tensor:
    """Stage 1 depthwise DCT, stage 2 learned 1x1 combination (+ bias)"""
    x = np.asarray(x)
    _check_inputs(x, cfg, params, basis)
    responses = stage1_responses(x, cfg, basis, method)
    return _combine(responses, params.weights, params.bias if cfg.has_bias else None, workers)


class _Normalized(NamedTuple):
    scaled: Tensor          # gamma * z + beta, B x N x P x H' x W'
    z: Tensor               # B x N*P x H' x W'
    inv_std: np.ndarray
    state: SpectrumBNState


def _normalize(responses: Tensor, bn: SpectrumBNState, mode: str) -> _Normalized:
    B, N, P, H, W = responses.shape
    flat = responses.reshape(B, N * P, H, W)
    dtype = flat.dtype
    if mode == 'train':
        mean, var = batch_moments(flat)
        state = bn.updated(mean, var)
    elif mode == 'eval':
        mean, var = bn.running_mean.astype(dtype), bn.running_var.astype(dtype)
        state = bn
    else:
        raise ConfigError(f"unknown BN mode '{mode}' (expected train or eval)")
    inv_std = (1.0 / np.sqrt(var + dtype.type(bn.eps))).astype(dtype)
    z = (flat - mean[None, :, None, None]) * inv_std[None, :, None, None]
    scaled = z * bn.gamma.astype(dtype)[None, :, None, None] + bn.beta.astype(dtype)[None, :, None, None]
    return _Normalized(scaled.reshape(B, N, P, H, W), z, inv_std, state)


class SpectrumBNOutput(NamedTuple):
    output: Tensor
    bn_state: SpectrumBNState
    normalized: Tensor


def forward_bn(x: Tensor, cfg: HarmonicBlockConfig, params: HarmonicBlockParams, basis: DctBasis,
               mode: str = 'train', method: Optional[str] = None) -> SpectrumBNOutput:
    """
    Two-stage block with per-(n, u, v) normalization between the stages.

    Train mode normalizes with batch statistics and returns the running
    state advanced by the moving average; eval mode uses the running state
    and returns it unchanged. Params are never mutated.
    """
    x = np.asarray(x)
    if not cfg.use_spectrum_bn:
        raise ConfigError("forward_bn needs a block configured with spectrum BN")
    _check_inputs(x, cfg, params, basis)
    responses = stage1_responses(x, cfg, basis, method)
    norm = _normalize(responses, params.bn_state, mode)
    out = _combine(norm.scaled, params.weights, params.bias if cfg.has_bias else None)
    return SpectrumBNOutput(out, norm.state, norm.z)


def synthesize_filters(params: HarmonicBlockParams, cfg: HarmonicBlockConfig, basis: DctBasis) -> Tensor:
    """g[m, n] = sum over retained (u, v) of w[m, n, (u, v)] * psi_uv"""
    if cfg.use_spectrum_bn:
        raise ConfigError("filters cannot be merged across spectrum normalization")
    if basis.size != cfg.kernel_size:
        raise SelectionError(f"basis K={basis.size} does not match block kernel {cfg.kernel_size}")
    params.validate(cfg)
    psi = _selected_filters(cfg, basis)
    dtype = np.result_type(params.weights.dtype, psi.dtype)
    return np.tensordot(params.weights.astype(dtype, copy=False), psi.astype(dtype, copy=False), axes=([2], [0]))


def forward_merged(x: Tensor, cfg: HarmonicBlockConfig, params: HarmonicBlockParams,
                   basis: DctBasis, method: str = 'direct', workers: int = 1) -> Tensor:
    """One convolution with synthesized filters (+ bias)"""
    x = np.asarray(x)
    _check_inputs(x, cfg, params, basis)
    g = synthesize_filters(params, cfg, basis)
    y = conv2d(x, g, cfg.geom, method=method, workers=workers)
    if cfg.has_bias:
        y = y + params.bias.astype(y.dtype, copy=False)[None, :, None, None]
    return y


class BlockGradients(NamedTuple):
    grad_input: Tensor
    grad_weights: np.ndarray
    grad_bias: Optional[np.ndarray]
    grad_bn: Optional[Dict[str, np.ndarray]]


def _stage1_backward(grad_responses: Tensor, x_shape, cfg: HarmonicBlockConfig, basis: DctBasis) -> Tensor:
    B, N, P, H2, W2 = grad_responses.shape
    _, _, H, W = x_shape
    filters = _selected_filters(cfg, basis).astype(grad_responses.dtype)[:, None, :, :]
    gx = conv2d_grad_input(grad_responses.reshape(B * N, P, H2, W2), filters, (B * N, 1, H, W), cfg.geom)
    return gx.reshape(B, N, H, W)


def block_gradients(x: Tensor, cfg: HarmonicBlockConfig, params: HarmonicBlockParams,
                    basis: DctBasis, upstream: Tensor, formulation: Optional[str] = None,
                    mode: str = 'train', method: Optional[str] = None) -> BlockGradients:
    """
    Analytic gradients of one forward formulation.

    Args:
        upstream: dL/d(output), same shape as the forward output
        formulation: 'twostage', 'bn' or 'merged'; defaults to 'bn' when the
            block has spectrum BN, 'twostage' otherwise
        mode: BN mode for the 'bn' formulation
    """
    x = np.asarray(x)
    upstream = np.asarray(upstream)
    formulation = formulation or ('bn' if cfg.use_spectrum_bn else 'twostage')
    if formulation not in FORMULATIONS:
        raise ConfigError(f"unknown formulation '{formulation}'")
    if formulation == 'bn' and not cfg.use_spectrum_bn:
        raise ConfigError("the 'bn' formulation needs spectrum BN enabled")
    if formulation != 'bn' and cfg.use_spectrum_bn:
        raise ConfigError(f"the '{formulation}' formulation cannot skip the block's spectrum BN")
    _check_inputs(x, cfg, params, basis)

    B = x.shape[0]
    M, N, P = params.weights.shape
    out_h, out_w = cfg.geom.output_shape(x.shape[2], x.shape[3])
    if upstream.shape != (B, M, out_h, out_w):
        raise ShapeError("upstream gradient does not match the block output",
                         expected=(B, M, out_h, out_w), got=upstream.shape)
    grad_bias = upstream.sum(axis=(0, 2, 3)) if cfg.has_bias else None

    if formulation == 'merged':
        g = synthesize_filters(params, cfg, basis)
        grad_input = conv2d_grad_input(upstream, g, x.shape, cfg.geom)
        grad_g = conv2d_grad_filters(x, upstream, cfg.geom)
        psi = _selected_filters(cfg, basis).astype(grad_g.dtype)
        grad_w = np.tensordot(grad_g, psi, axes=([2, 3], [1, 2]))
        return BlockGradients(grad_input, grad_w, grad_bias, None)

    responses = stage1_responses(x, cfg, basis, method)
    w_flat = params.weights.reshape(M, N * P).astype(responses.dtype, copy=False)

    if formulation == 'twostage':
        combined_in = responses.reshape(B, N * P, out_h, out_w)
        grad_w = np.tensordot(upstream, combined_in, axes=([0, 2, 3], [0, 2, 3])).reshape(M, N, P)
        grad_flat = np.tensordot(w_flat, upstream, axes=([0], [1])).transpose(1, 0, 2, 3)
        grad_input = _stage1_backward(grad_flat.reshape(B, N, P, out_h, out_w), x.shape, cfg, basis)
        return BlockGradients(grad_input, grad_w, grad_bias, None)

    bn = params.bn_state
    norm = _normalize(responses, bn, mode)
    combined_in = norm.scaled.reshape(B, N * P, out_h, out_w)
    grad_w = np.tensordot(upstream, combined_in, axes=([0, 2, 3], [0, 2, 3])).reshape(M, N, P)
    grad_scaled = np.tensordot(w_flat, upstream, axes=([0], [1])).transpose(1, 0, 2, 3)
    grad_gamma = (grad_scaled * norm.z).sum(axis=(0, 2, 3))
    grad_beta = grad_scaled.sum(axis=(0, 2, 3))
    grad_z = grad_scaled * bn.gamma.astype(grad_scaled.dtype)[None, :, None, None]
    inv_std = norm.inv_std[None, :, None, None]
    if mode == 'train':
        mean_gz = grad_z.mean(axis=(0, 2, 3), keepdims=True)
        mean_gz_z = (grad_z * norm.z).mean(axis=(0, 2, 3), keepdims=True)
        grad_flat = inv_std * (grad_z - mean_gz - norm.z * mean_gz_z)
    else:
        grad_flat = grad_z * inv_std
    grad_input = _stage1_backward(grad_flat.reshape(B, N, P, out_h, out_w), x.shape, cfg, basis)
    return BlockGradients(grad_input, grad_w, grad_bias, {'gamma': grad_gamma, 'beta': grad_beta})


# Loop-oracle formulations: every multiply-add is tallied

def forward_twostage_reference(x: Tensor, cfg: HarmonicBlockConfig, params: HarmonicBlockParams,
                               basis: DctBasis, counter: Optional[MacCounter] = None) -> Tensor:
    x = np.asarray(x)
    _check_inputs(x, cfg, params, basis)
    psi = _selected_filters(cfg, basis)[:, None, :, :]
    per_channel = [conv2d_reference(x[:, n:n + 1], psi, cfg.geom, counter) for n in range(cfg.in_channels)]
    responses = np.stack(per_channel, axis=1)
    B, N, P, H, W = responses.shape
    w = params.weights.reshape(cfg.out_channels, N * P, 1, 1)
    y = conv2d_reference(responses.reshape(B, N * P, H, W), w, ConvGeometry(1), counter)
    if cfg.has_bias:
        y = y + params.bias[None, :, None, None]
    return y


def forward_merged_reference(x: Tensor, cfg: HarmonicBlockConfig, params: HarmonicBlockParams,
                             basis: DctBasis, counter: Optional[MacCounter] = None) -> Tensor:
    x = np.asarray(x)
    _check_inputs(x, cfg, params, basis)
    if cfg.use_spectrum_bn:
        raise ConfigError("filters cannot be merged across spectrum normalization")
    psi = _selected_filters(cfg, basis)
    M, N, P = params.weights.shape
    K = cfg.kernel_size
    dtype = np.result_type(params.weights.dtype, psi.dtype)
    g = np.zeros((M, N, K, K), dtype=dtype)
    macs = 0
    for m in range(M):
        for n in range(N):
            for p in range(P):
                for i in range(K):
                    for j in range(K):
                        g[m, n, i, j] = g[m, n, i, j] + params.weights[m, n, p] * psi[p, i, j]
                        macs += 1
    if counter is not None:
        counter.add(macs)
    y = conv2d_reference(x, g, cfg.geom, counter)
    if cfg.has_bias:
        y = y + params.bias[None, :, None, None]
    return y
