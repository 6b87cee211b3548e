"""
Dense tensor substrate
2-D convolution (with analytic backward and a loop oracle), batch statistics,
seeded random generators and a central finite-difference gradient oracle.

Tensors are plain numpy arrays laid out N x C x H x W.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from errors import ConfigError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

Tensor = np.ndarray

CONV_METHODS = ('direct', 'gemm')


def make_rng(seed: Optional[int] = None) -> np.random.Generator:
    """Seeded generator; numpy's PCG64 bit generator behind default_rng"""
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class ConvGeometry:
    """Kernel size, stride and symmetric zero padding of a convolution"""
    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel < 1:
            raise ShapeError(f"kernel size must be >= 1, got {self.kernel}")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")

    def output_extent(self, extent: int) -> int:
        out = (extent + 2 * self.padding - self.kernel) // self.stride + 1
        if out < 1:
            raise ShapeError(
                f"input extent {extent} too small for kernel {self.kernel} "
                f"(stride {self.stride}, padding {self.padding})"
            )
        return out

    def output_shape(self, height: int, width: int) -> Tuple[int, int]:
        return self.output_extent(height), self.output_extent(width)

    def to_dict(self) -> dict:
        return {'kernel': self.kernel, 'stride': self.stride, 'padding': self.padding}


@dataclass
class MacCounter:
    """Multiply-accumulate tally filled by the loop-oracle paths"""
    count: int = 0

    def add(self, n: int):
        self.count += int(n)


def as_tensor(x, dtype=None) -> Tensor:
    """Validate a rank <= 4 array with positive extents"""
    x = np.asarray(x, dtype=dtype)
    if x.ndim > 4:
        raise ShapeError(f"tensors have at most 4 axes, got {x.ndim}", got=x.shape)
    if any(extent < 1 for extent in x.shape):
        raise ShapeError("all tensor extents must be >= 1", got=x.shape)
    return x


def pad2d(x: Tensor, padding: int) -> Tensor:
    if padding == 0:
        return x
    pad = [(0, 0)] * (x.ndim - 2) + [(padding, padding), (padding, padding)]
    return np.pad(x, pad, mode='constant')


def _check_conv(x: Tensor, filters: Tensor, geom: ConvGeometry) -> Tuple[int, int]:
    if x.ndim != 4:
        raise ShapeError("conv2d input must be N x C x H x W", got=x.shape)
    if filters.ndim != 4:
        raise ShapeError("conv2d filters must be M x C x K x K", got=filters.shape)
    if filters.shape[1] != x.shape[1]:
        raise ShapeError(
            "filter channel count does not match input channels",
            expected=(filters.shape[0], x.shape[1], geom.kernel, geom.kernel),
            got=filters.shape,
        )
    if filters.shape[2] != geom.kernel or filters.shape[3] != geom.kernel:
        raise ShapeError(
            "filter extent does not match the geometry kernel",
            expected=(filters.shape[0], filters.shape[1], geom.kernel, geom.kernel),
            got=filters.shape,
        )
    return geom.output_shape(x.shape[2], x.shape[3])


def conv2d(x: Tensor, filters: Tensor, geom: ConvGeometry, method: str = 'direct',
           workers: int = 1) -> Tensor:
    """
    Cross-correlation with zero padding (no kernel flip).

    Args:
        x: input N x C x H x W
        filters: M x C x K x K
        geom: kernel / stride / padding
        method: 'direct' accumulates every output element in the fixed order
            channel, kernel row, kernel column (bitwise equal to the loop
            oracle); 'gemm' gathers patches and contracts them with tensordot
        workers: split the batch over a thread pool; each worker keeps the
            per-element order of the chosen method

    Returns:
        N x M x H' x W'
    """
    x = np.asarray(x)
    filters = np.asarray(filters)
    if method not in CONV_METHODS:
        raise ShapeError(f"unknown conv method '{method}'")
    _check_conv(x, filters, geom)
    dtype = np.result_type(x.dtype, filters.dtype)
    x = x.astype(dtype, copy=False)
    filters = filters.astype(dtype, copy=False)

    single = _conv2d_direct if method == 'direct' else _conv2d_gemm
    batch = x.shape[0]
    if workers > 1 and batch > 1:
        chunks = [c for c in np.array_split(np.arange(batch), min(workers, batch)) if len(c)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda idx: single(x[idx[0]:idx[-1] + 1], filters, geom), chunks))
        return np.concatenate(parts, axis=0)
    return single(x, filters, geom)


def _conv2d_direct(x: Tensor, filters: Tensor, geom: ConvGeometry) -> Tensor:
    batch, channels, height, width = x.shape
    out_channels, k = filters.shape[0], geom.kernel
    out_h, out_w = geom.output_shape(height, width)
    s = geom.stride
    xp = pad2d(x, geom.padding)
    h_span, w_span = s * (out_h - 1) + 1, s * (out_w - 1) + 1

    out = np.zeros((batch, out_channels, out_h, out_w), dtype=x.dtype)
    for c in range(channels):
        for i in range(k):
            for j in range(k):
                patch = xp[:, c, i:i + h_span:s, j:j + w_span:s]
                out += patch[:, None, :, :] * filters[:, c, i, j][None, :, None, None]
    return out


def _conv2d_gemm(x: Tensor, filters: Tensor, geom: ConvGeometry) -> Tensor:
    k, s = geom.kernel, geom.stride
    xp = pad2d(x, geom.padding)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    out = np.tensordot(windows, filters, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_grad_input(upstream: Tensor, filters: Tensor, input_shape: Tuple[int, ...],
                      geom: ConvGeometry) -> Tensor:
    """Gradient of conv2d with respect to its input"""
    batch, channels, height, width = input_shape
    out_h, out_w = geom.output_shape(height, width)
    if upstream.shape != (batch, filters.shape[0], out_h, out_w):
        raise ShapeError("upstream gradient does not match conv output",
                         expected=(batch, filters.shape[0], out_h, out_w), got=upstream.shape)
    k, s, p = geom.kernel, geom.stride, geom.padding
    dtype = np.result_type(upstream.dtype, filters.dtype)
    h_span, w_span = s * (out_h - 1) + 1, s * (out_w - 1) + 1

    grad = np.zeros((batch, channels, height + 2 * p, width + 2 * p), dtype=dtype)
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(upstream, filters[:, :, i, j], axes=([1], [0]))
            grad[:, :, i:i + h_span:s, j:j + w_span:s] += contrib.transpose(0, 3, 1, 2)
    return np.ascontiguousarray(grad[:, :, p:p + height, p:p + width])


def conv2d_grad_filters(x: Tensor, upstream: Tensor, geom: ConvGeometry) -> Tensor:
    """Gradient of conv2d with respect to its filters"""
    batch, channels, height, width = x.shape
    out_h, out_w = geom.output_shape(height, width)
    if upstream.shape[0] != batch or upstream.shape[2:] != (out_h, out_w):
        raise ShapeError("upstream gradient does not match conv output",
                         expected=(batch, '*', out_h, out_w), got=upstream.shape)
    k, s = geom.kernel, geom.stride
    dtype = np.result_type(upstream.dtype, x.dtype)
    xp = pad2d(x, geom.padding)
    h_span, w_span = s * (out_h - 1) + 1, s * (out_w - 1) + 1

    grad = np.zeros((upstream.shape[1], channels, k, k), dtype=dtype)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + h_span:s, j:j + w_span:s]
            grad[:, :, i, j] = np.tensordot(upstream, patch, axes=([0, 2, 3], [0, 2, 3]))
    return grad


def conv2d_reference(x: Tensor, filters: Tensor, geom: ConvGeometry,
                     counter: Optional[MacCounter] = None) -> Tensor:
    """Naive loop oracle; every kernel tap counts as one multiply-add"""
    x = np.asarray(x)
    filters = np.asarray(filters)
    out_h, out_w = _check_conv(x, filters, geom)
    dtype = np.result_type(x.dtype, filters.dtype)
    x = x.astype(dtype, copy=False)
    filters = filters.astype(dtype, copy=False)
    zero = dtype.type(0)
    batch, channels = x.shape[:2]
    out_channels, k, s = filters.shape[0], geom.kernel, geom.stride
    xp = pad2d(x, geom.padding)

    out = np.zeros((batch, out_channels, out_h, out_w), dtype=dtype)
    macs = 0
    for b in range(batch):
        for m in range(out_channels):
            for oh in range(out_h):
                for ow in range(out_w):
                    acc = zero
                    for c in range(channels):
                        for i in range(k):
                            for j in range(k):
                                acc = acc + xp[b, c, oh * s + i, ow * s + j] * filters[m, c, i, j]
                                macs += 1
                    out[b, m, oh, ow] = acc
    if counter is not None:
        counter.add(macs)
    return out


def batch_moments(x: Tensor) -> Tuple[Tensor, Tensor]:
    """Per-channel mean and biased variance over N, H, W (two passes)"""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError("batch_moments expects N x C x H x W", got=x.shape)
    if x.size == 0:
        raise ShapeError("batch_moments needs at least one element per channel", got=x.shape)
    mean = x.mean(axis=(0, 2, 3))
    centered = x - mean[None, :, None, None]
    var = (centered * centered).mean(axis=(0, 2, 3))
    return mean, var


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) per coordinate.

    Non-float inputs are evaluated in float64. The step is rounded to the
    input dtype; a step that rounds away at some coordinate is a ConfigError.
    """
    if not eps > 0:
        raise ConfigError(f"finite-difference step must be positive, got {eps}")
    work = np.array(x, copy=True)
    if not np.issubdtype(work.dtype, np.floating):
        work = work.astype(np.float64)
    grad = np.zeros(work.shape, dtype=np.float64)
    for idx in np.ndindex(work.shape):
        original = work[idx]
        # actual step after rounding to the array's dtype
        upper, lower = work.dtype.type(original + eps), work.dtype.type(original - eps)
        if upper == lower:
            raise ConfigError(f"step eps={eps} vanishes at {idx} in {work.dtype} (value {float(original)})")
        work[idx] = upper
        f_plus = float(f(work))
        work[idx] = lower
        f_minus = float(f(work))
        work[idx] = original
        if not np.isfinite(f_plus):
            raise NonFiniteError(idx, f_plus)
        if not np.isfinite(f_minus):
            raise NonFiniteError(idx, f_minus)
        grad[idx] = (f_plus - f_minus) / (float(upper) - float(lower))
    return grad.astype(work.dtype, copy=False)


def max_relative_error(a: Tensor, b: Tensor, floor: float = 1e-12) -> float:
    """max|a - b| scaled by the larger of the two max magnitudes"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), floor)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)
