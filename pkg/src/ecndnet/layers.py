"""Layer primitives: dilated 3x3 convolution, batch normalization and ReLU.

Every layer is a pair of functions.  ``*_forward`` returns the output and a
cache object; ``*_backward`` consumes that cache.  Parameters live in small
dataclasses holding numpy arrays that are updated in place by the optimizer.

Activations keep the dtype of the input (float32 in normal use, float64 when
a test wants tight finite-difference checks); inner products and batch
moments are always accumulated in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateBatchError, ShapeError, StateError
from .tensor import DTYPE, check_tensor4

KERNEL = 3

# Upper bound on float64 elements of one im2col-style tap matrix.  Larger
# forward passes are processed in bands of output rows.
_BAND_ELEMENTS = 1 << 23


@dataclass
class Conv2dParams:
    weights: np.ndarray  # (out, in, 3, 3)
    bias: Optional[np.ndarray] = None  # (out,)
    dilation: int = 1

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[2:] != (KERNEL, KERNEL):
            raise ShapeError(f"conv weights must be out x in x 3 x 3, got {self.weights.shape}")
        if int(self.dilation) != self.dilation or self.dilation < 1:
            raise ShapeError(f"dilation must be a positive integer, got {self.dilation}")
        if self.bias is not None and self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} outputs")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def padding(self) -> int:
        return self.dilation

    @property
    def extent(self) -> int:
        """Side length of the dilated filter footprint."""
        return 2 * self.dilation + 1


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.9, eps: float = 1e-5, dtype=DTYPE) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass
class ConvCache:
    x: np.ndarray
    weights_shape: tuple
    dilation: int


@dataclass
class BatchNormCache:
    mode: str
    xhat: Optional[np.ndarray] = None  # float64
    inv_std: Optional[np.ndarray] = None  # float64, per channel
    dtype: np.dtype = field(default=np.dtype(DTYPE))


@dataclass
class ReluCache:
    mask: np.ndarray


def _im2col(xp: np.ndarray, d: int, rows: slice, w: int) -> np.ndarray:
    """Float64 column matrix (9*c, n*rows*w) from a padded (n, c, H, W) input.

    Row ``tap * c + channel`` holds the input shifted by kernel tap
    ``tap = 3 * u + v``.
    """
    n, c = xp.shape[:2]
    r0, r1 = rows.start, rows.stop
    cols = np.empty((KERNEL * KERNEL, c, n, r1 - r0, w))
    for u in range(KERNEL):
        for v in range(KERNEL):
            window = xp[:, :, r0 + u * d:r1 + u * d, v * d:v * d + w]
            np.copyto(cols[KERNEL * u + v], window.transpose(1, 0, 2, 3))
    return cols.reshape(KERNEL * KERNEL * c, -1)


def _weight_matrix(weights: np.ndarray) -> np.ndarray:
    """(out, in, 3, 3) -> float64 (out, 9*in) matching the ``_im2col`` row order."""
    o = weights.shape[0]
    return weights.astype(np.float64).transpose(0, 2, 3, 1).reshape(o, -1)


def _pad(x: np.ndarray, d: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (d, d), (d, d)))


def conv2d_forward(x: np.ndarray, params: Conv2dParams) -> tuple[np.ndarray, ConvCache]:
    """Size-preserving 3x3 cross-correlation with dilation and zero padding.

    One im2col GEMM per band of output rows; large inputs are split into
    bands so the column matrix stays bounded.
    """
    check_tensor4(x, "input")
    n, c, h, w = x.shape
    if c != params.in_channels:
        raise ShapeError(f"input has {c} channels, layer expects {params.in_channels}")
    d = params.dilation
    o = params.out_channels
    xp = _pad(x, d)
    wmat = _weight_matrix(params.weights)
    b64 = None if params.bias is None else params.bias.astype(np.float64)[:, None]

    band = max(1, min(h, _BAND_ELEMENTS // max(1, KERNEL * KERNEL * c * n * w)))
    out = np.empty((o, n, h, w), dtype=x.dtype)
    for r0 in range(0, h, band):
        rows = slice(r0, min(h, r0 + band))
        acc = wmat @ _im2col(xp, d, rows, w)
        if b64 is not None:
            acc += b64
        out[:, :, rows, :] = acc.reshape(o, n, -1, w)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    return out, ConvCache(x=x, weights_shape=params.weights.shape, dilation=d)


def conv2d_backward(grad_out: np.ndarray, cache: ConvCache, params: Conv2dParams):
    """Gradients of a scalar loss w.r.t. input, weights and bias.

    Returns ``(grad_input, grad_weights, grad_bias)``; ``grad_bias`` is None
    for a bias-free layer.  The column matrix is rebuilt from the cached
    input rather than stored.
    """
    if cache.weights_shape != params.weights.shape or cache.dilation != params.dilation:
        raise StateError("convolution cache was produced with different parameters")
    x = cache.x
    n, c, h, w = x.shape
    if grad_out.shape != (n, params.out_channels, h, w):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output")
    d = params.dilation
    o = params.out_channels
    g = np.empty((o, n, h, w))
    np.copyto(g, grad_out.transpose(1, 0, 2, 3))
    g = g.reshape(o, -1)

    cols = _im2col(_pad(x, d), d, slice(0, h), w)
    grad_w = (g @ cols.T).reshape(o, KERNEL, KERNEL, c).transpose(0, 3, 1, 2)
    del cols
    dcols = (_weight_matrix(params.weights).T @ g).reshape(KERNEL * KERNEL, c, n, h, w)
    grad_xp = np.zeros((c, n, h + 2 * d, w + 2 * d))
    for u in range(KERNEL):
        for v in range(KERNEL):
            grad_xp[:, :, u * d:u * d + h, v * d:v * d + w] += dcols[KERNEL * u + v]

    grad_x = np.ascontiguousarray(grad_xp[:, :, d:d + h, d:d + w].transpose(1, 0, 2, 3), dtype=x.dtype)
    grad_b = None if params.bias is None else g.sum(axis=1).astype(params.bias.dtype)
    return grad_x, np.ascontiguousarray(grad_w, dtype=params.weights.dtype), grad_b


def batchnorm_forward(x: np.ndarray, params: BatchNormParams, mode: str = "train"):
    check_tensor4(x, "input")
    n, c, h, w = x.shape
    if c != params.channels:
        raise ShapeError(f"input has {c} channels, batch norm expects {params.channels}")
    x64 = x.astype(np.float64)
    if mode == "train":
        if n * h * w < 2:
            raise DegenerateBatchError("batch normalization needs at least two values per channel in train mode")
        mean = x64.mean(axis=(0, 2, 3))
        var = x64.var(axis=(0, 2, 3))
        m = params.momentum
        params.running_mean[...] = m * params.running_mean + (1.0 - m) * mean
        params.running_var[...] = m * params.running_var + (1.0 - m) * var
    elif mode == "infer":
        mean = params.running_mean.astype(np.float64)
        var = params.running_var.astype(np.float64)
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")

    inv_std = 1.0 / np.sqrt(var + params.eps)
    xhat = (x64 - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = params.gamma.astype(np.float64)[None, :, None, None] * xhat + params.beta.astype(np.float64)[None, :, None, None]
    if mode == "train":
        cache = BatchNormCache(mode, xhat=xhat, inv_std=inv_std, dtype=x.dtype)
    else:
        cache = BatchNormCache(mode, dtype=x.dtype)
    return out.astype(x.dtype), cache


def batchnorm_backward(grad_out: np.ndarray, cache: BatchNormCache, params: BatchNormParams):
    """Backward pass through train-mode normalization, including the batch statistics."""
    if cache.mode != "train":
        raise StateError("batchnorm backward requires a cache from a train-mode forward")
    if grad_out.shape != cache.xhat.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output {cache.xhat.shape}")
    if params.channels != cache.xhat.shape[1]:
        raise StateError("batchnorm cache was produced with a different channel count")
    g = grad_out.astype(np.float64)
    xhat = cache.xhat
    count = g.shape[0] * g.shape[2] * g.shape[3]
    axes = (0, 2, 3)

    grad_beta = g.sum(axis=axes)
    grad_gamma = (g * xhat).sum(axis=axes)
    scale = params.gamma.astype(np.float64) * cache.inv_std / count
    grad_x = scale[None, :, None, None] * (
        count * g - grad_beta[None, :, None, None] - xhat * grad_gamma[None, :, None, None]
    )
    return grad_x.astype(cache.dtype), grad_gamma.astype(params.gamma.dtype), grad_beta.astype(params.beta.dtype)


def relu_forward(x: np.ndarray):
    check_tensor4(x, "input")
    mask = x > 0
    return np.where(mask, x, x.dtype.type(0)), ReluCache(mask)


def relu_backward(grad_out: np.ndarray, cache: ReluCache) -> np.ndarray:
    if grad_out.shape != cache.mask.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward input {cache.mask.shape}")
    return np.where(cache.mask, grad_out, grad_out.dtype.type(0))


def he_init(out_channels: int, in_channels: int, seed, dtype=DTYPE) -> np.ndarray:
    """Zero-mean Gaussian 3x3 weights with variance 2 / fan_in."""
    if out_channels < 1 or in_channels < 1:
        raise ShapeError("channel counts must be positive")
    rng = np.random.default_rng(seed)
    std = np.sqrt(2.0 / (in_channels * KERNEL * KERNEL))
    return (rng.standard_normal((out_channels, in_channels, KERNEL, KERNEL)) * std).astype(dtype)
