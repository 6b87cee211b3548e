"""
Trainable layers
Forward / backward pairs for conv, harmonic, pool, fc, bn, relu and dropout
layers. Parameters live outside the layer and are passed in on every call;
forward returns the state updates (BN running statistics) instead of
applying them.
"""
import logging
from functools import lru_cache
from typing import Any, Dict, Optional, Tuple

import numpy as np

from dct_basis import DctBasis, make_basis
from errors import ConfigError, ShapeError, UnsupportedLayerError
from harmonic_block import (
    BN_EPS,
    BN_MOMENTUM,
    HarmonicBlockConfig,
    HarmonicBlockParams,
    SpectrumBNState,
    block_gradients,
    forward_bn,
    forward_merged,
    forward_twostage,
)
from harmonic_block import init_params as init_block_params
from model_spec import LayerSpec, layer_selection
from tensor_core import (
    ConvGeometry,
    batch_moments,
    conv2d,
    conv2d_grad_filters,
    conv2d_grad_input,
    pad2d,
)

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]


@lru_cache(maxsize=64)
def cached_basis(K: int, norm_mode: str, dtype_str: str) -> DctBasis:
    return make_basis(K, norm_mode, np.dtype(dtype_str))


class Layer:
    """Base layer: no parameters, identity forward"""
    decayed = ('weight',)

    def __init__(self, spec: LayerSpec, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)

    @property
    def name(self) -> str:
        return self.spec.name

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {}

    def state_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {}

    def init(self, rng: np.random.Generator) -> Tuple[Params, Params]:
        return {}, {}

    def forward(self, x: np.ndarray, params: Params, state: Params, train: bool,
                rng: Optional[np.random.Generator]) -> Tuple[np.ndarray, Any, Params]:
        return x, None, {}

    def backward(self, dy: np.ndarray, params: Params, state: Params, cache: Any) -> Tuple[np.ndarray, Params]:
        return dy, {}


class ConvLayer(Layer):
    def __init__(self, spec: LayerSpec, dtype=np.float32, method: str = 'direct'):
        super().__init__(spec, dtype)
        self.geom = spec.geom
        self.method = method

    def param_shapes(self):
        s = self.spec
        shapes = {'weight': (s.out_channels, s.in_channels, s.kernel, s.kernel)}
        if s.bias:
            shapes['bias'] = (s.out_channels,)
        return shapes

    def init(self, rng):
        s = self.spec
        std = np.sqrt(2.0 / (s.in_channels * s.kernel * s.kernel))
        params = {'weight': (rng.standard_normal(self.param_shapes()['weight']) * std).astype(self.dtype)}
        if s.bias:
            params['bias'] = np.zeros(s.out_channels, dtype=self.dtype)
        return params, {}

    def forward(self, x, params, state, train, rng):
        y = conv2d(x, params['weight'], self.geom, method=self.method)
        if 'bias' in params:
            y = y + params['bias'][None, :, None, None]
        return y, x, {}

    def backward(self, dy, params, state, cache):
        x = cache
        grads = {'weight': conv2d_grad_filters(x, dy, self.geom)}
        if 'bias' in params:
            grads['bias'] = dy.sum(axis=(0, 2, 3))
        return conv2d_grad_input(dy, params['weight'], x.shape, self.geom), grads


class HarmonicLayer(Layer):
    """Harmonic block; spectrum-BN parameters are stored flat as bn_* entries"""

    def __init__(self, spec: LayerSpec, dtype=np.float32):
        super().__init__(spec, dtype)
        self.cfg = HarmonicBlockConfig(
            in_channels=spec.in_channels,
            out_channels=spec.out_channels,
            kernel_size=spec.kernel,
            geom=spec.geom,
            selection=layer_selection(spec),
            use_spectrum_bn=spec.spectrum_bn,
            basis_norm=spec.basis_norm,
            has_bias=spec.bias,
        )
        if spec.spectrum_bn:
            self.formulation = 'bn'
        elif spec.formulation in ('twostage', 'merged'):
            self.formulation = spec.formulation
        else:
            raise ConfigError(f"layer '{spec.name}': unknown formulation '{spec.formulation}'")
        self.basis = cached_basis(spec.kernel, spec.basis_norm, self.dtype.str)

    def param_shapes(self):
        c = self.cfg
        shapes = {'weight': (c.out_channels, c.in_channels, c.P)}
        if c.has_bias:
            shapes['bias'] = (c.out_channels,)
        if c.use_spectrum_bn:
            shapes['bn_gamma'] = shapes['bn_beta'] = (c.in_channels * c.P,)
        return shapes

    def state_shapes(self):
        if not self.cfg.use_spectrum_bn:
            return {}
        size = (self.cfg.in_channels * self.cfg.P,)
        return {'bn_running_mean': size, 'bn_running_var': size}

    def init(self, rng):
        block = init_block_params(self.cfg, rng, self.dtype)
        params = {'weight': block.weights}
        state = {}
        if block.bias is not None:
            params['bias'] = block.bias
        if block.bn_state is not None:
            params['bn_gamma'] = block.bn_state.gamma
            params['bn_beta'] = block.bn_state.beta
            state['bn_running_mean'] = block.bn_state.running_mean
            state['bn_running_var'] = block.bn_state.running_var
        return params, state

    def block_params(self, params: Params, state: Params) -> HarmonicBlockParams:
        bn_state = None
        if self.cfg.use_spectrum_bn:
            bn_state = SpectrumBNState(
                running_mean=state['bn_running_mean'],
                running_var=state['bn_running_var'],
                gamma=params['bn_gamma'],
                beta=params['bn_beta'],
            )
        return HarmonicBlockParams(params['weight'], params.get('bias'), bn_state)

    def forward(self, x, params, state, train, rng):
        block = self.block_params(params, state)
        mode = 'train' if train else 'eval'
        if self.formulation == 'bn':
            out = forward_bn(x, self.cfg, block, self.basis, mode=mode)
            updates = {}
            if train:
                updates = {'bn_running_mean': out.bn_state.running_mean,
                           'bn_running_var': out.bn_state.running_var}
            return out.output, (x, mode), updates
        if self.formulation == 'merged':
            return forward_merged(x, self.cfg, block, self.basis), (x, mode), {}
        return forward_twostage(x, self.cfg, block, self.basis), (x, mode), {}

    def backward(self, dy, params, state, cache):
        x, mode = cache
        block = self.block_params(params, state)
        g = block_gradients(x, self.cfg, block, self.basis, dy, formulation=self.formulation, mode=mode)
        grads = {'weight': g.grad_weights}
        if g.grad_bias is not None:
            grads['bias'] = g.grad_bias
        if g.grad_bn is not None:
            grads['bn_gamma'] = g.grad_bn['gamma']
            grads['bn_beta'] = g.grad_bn['beta']
        return g.grad_input, grads


class PoolLayer(Layer):
    def __init__(self, spec: LayerSpec, dtype=np.float32):
        super().__init__(spec, dtype)
        if spec.pool_mode not in ('max', 'avg'):
            raise ConfigError(f"layer '{spec.name}': unknown pool mode '{spec.pool_mode}'")
        self.geom = ConvGeometry(spec.kernel, spec.stride, spec.padding)

    def _windows(self, xp):
        k, s = self.geom.kernel, self.geom.stride
        return np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]

    def forward(self, x, params, state, train, rng):
        p = self.geom.padding
        if self.spec.pool_mode == 'max':
            xp = np.pad(x, [(0, 0), (0, 0), (p, p), (p, p)], constant_values=-np.inf) if p else x
            windows = self._windows(xp)
            B, C, H2, W2, k, _ = windows.shape
            flat = windows.reshape(B, C, H2, W2, k * k)
            arg = flat.argmax(axis=-1)
            y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
            return y, (x.shape, arg), {}
        windows = self._windows(pad2d(x, p))
        k = self.geom.kernel
        return windows.sum(axis=(4, 5)) / (k * k), (x.shape, None), {}

    def backward(self, dy, params, state, cache):
        shape, arg = cache
        B, C, H, W = shape
        k, s, p = self.geom.kernel, self.geom.stride, self.geom.padding
        _, _, H2, W2 = dy.shape
        grad = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=dy.dtype)
        if arg is not None:
            rows = np.arange(H2)[None, None, :, None] * s + arg // k
            cols = np.arange(W2)[None, None, None, :] * s + arg % k
            b = np.broadcast_to(np.arange(B)[:, None, None, None], arg.shape)
            c = np.broadcast_to(np.arange(C)[None, :, None, None], arg.shape)
            np.add.at(grad, (b, c, rows, cols), dy)
        else:
            share = dy / (k * k)
            h_span, w_span = s * (H2 - 1) + 1, s * (W2 - 1) + 1
            for i in range(k):
                for j in range(k):
                    grad[:, :, i:i + h_span:s, j:j + w_span:s] += share
        return np.ascontiguousarray(grad[:, :, p:p + H, p:p + W]), {}


class FCLayer(Layer):
    def param_shapes(self):
        s = self.spec
        shapes = {'weight': (s.out_channels, s.in_channels)}
        if s.bias:
            shapes['bias'] = (s.out_channels,)
        return shapes

    def init(self, rng):
        s = self.spec
        std = np.sqrt(2.0 / s.in_channels)
        params = {'weight': (rng.standard_normal((s.out_channels, s.in_channels)) * std).astype(self.dtype)}
        if s.bias:
            params['bias'] = np.zeros(s.out_channels, dtype=self.dtype)
        return params, {}

    def forward(self, x, params, state, train, rng):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.spec.in_channels:
            raise ShapeError(f"layer '{self.name}' input features",
                             expected=(x.shape[0], self.spec.in_channels), got=flat.shape)
        y = flat @ params['weight'].T
        if 'bias' in params:
            y = y + params['bias']
        return y.reshape(x.shape[0], -1, 1, 1), (x.shape, flat), {}

    def backward(self, dy, params, state, cache):
        shape, flat = cache
        dy2 = dy.reshape(dy.shape[0], -1)
        grads = {'weight': dy2.T @ flat}
        if 'bias' in params:
            grads['bias'] = dy2.sum(axis=0)
        return (dy2 @ params['weight']).reshape(shape), grads


class BatchNormLayer(Layer):
    decayed = ()

    def param_shapes(self):
        c = self.spec.in_channels
        return {'gamma': (c,), 'beta': (c,)}

    def state_shapes(self):
        c = self.spec.in_channels
        return {'running_mean': (c,), 'running_var': (c,)}

    def init(self, rng):
        c = self.spec.in_channels
        params = {'gamma': np.ones(c, dtype=self.dtype), 'beta': np.zeros(c, dtype=self.dtype)}
        state = {'running_mean': np.zeros(c, dtype=self.dtype), 'running_var': np.ones(c, dtype=self.dtype)}
        return params, state

    def forward(self, x, params, state, train, rng):
        updates = {}
        if train:
            mean, var = batch_moments(x)
            m = BN_MOMENTUM
            updates = {'running_mean': ((1 - m) * state['running_mean'] + m * mean).astype(self.dtype),
                       'running_var': ((1 - m) * state['running_var'] + m * var).astype(self.dtype)}
        else:
            mean, var = state['running_mean'], state['running_var']
        inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
        z = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        y = z * params['gamma'][None, :, None, None] + params['beta'][None, :, None, None]
        return y, (z, inv_std, train), updates

    def backward(self, dy, params, state, cache):
        z, inv_std, train = cache
        grads = {'gamma': (dy * z).sum(axis=(0, 2, 3)), 'beta': dy.sum(axis=(0, 2, 3))}
        dz = dy * params['gamma'][None, :, None, None]
        if train:
            dz = dz - dz.mean(axis=(0, 2, 3), keepdims=True) - z * (dz * z).mean(axis=(0, 2, 3), keepdims=True)
        return dz * inv_std[None, :, None, None], grads


class ReLULayer(Layer):
    def forward(self, x, params, state, train, rng):
        mask = x > 0
        return x * mask, mask, {}

    def backward(self, dy, params, state, cache):
        return dy * cache, {}


class DropoutLayer(Layer):
    """Inverted dropout: surviving activations are scaled by 1 / (1 - p) at train time"""

    def forward(self, x, params, state, train, rng):
        p = self.spec.p
        if not train or p == 0:
            return x, None, {}
        if rng is None:
            raise ConfigError(f"layer '{self.name}' needs a generator in train mode")
        mask = ((rng.random(x.shape) >= p) / (1.0 - p)).astype(x.dtype)
        return x * mask, mask, {}

    def backward(self, dy, params, state, cache):
        return (dy if cache is None else dy * cache), {}


LAYER_TYPES = {
    'conv': ConvLayer,
    'harm': HarmonicLayer,
    'pool': PoolLayer,
    'fc': FCLayer,
    'bn': BatchNormLayer,
    'relu': ReLULayer,
    'dropout': DropoutLayer,
}


def build_layer(spec: LayerSpec, dtype=np.float32) -> Layer:
    layer_type = LAYER_TYPES.get(spec.kind)
    if layer_type is None:
        raise UnsupportedLayerError([spec.name], f"layer kind '{spec.kind}' is not trainable")
    return layer_type(spec, dtype)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient with respect to the logits"""
    logits = logits.reshape(logits.shape[0], -1)
    labels = np.asarray(labels)
    B, classes = logits.shape
    if labels.shape != (B,):
        raise ShapeError("labels must be one integer per sample", expected=(B,), got=labels.shape)
    if labels.min() < 0 or labels.max() >= classes:
        raise ConfigError(f"labels must lie in [0, {classes}), got [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(B)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return loss, (grad / B).astype(logits.dtype)
