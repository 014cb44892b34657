"""Dense NCHW tensors.

A ``Tensor4`` is a plain C-contiguous numpy array of rank 4, laid out
batch-major (n, c, h, w).  Storage is float32; the helpers here validate
that contract instead of wrapping arrays in a custom class, so the rest of
the package can use ordinary numpy indexing.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ShapeError

Tensor4 = np.ndarray

DTYPE = np.float32


def check_tensor4(a: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not isinstance(a, np.ndarray) or a.ndim != 4:
        raise ShapeError(f"{name} must be a rank-4 array, got {getattr(a, 'shape', type(a))}")
    if min(a.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {a.shape}")
    return a


def tensor_create(n: int, c: int, h: int, w: int, fill: float = 0.0, dtype=DTYPE) -> Tensor4:
    dims = (n, c, h, w)
    if any(int(d) != d or d < 1 for d in dims):
        raise ShapeError(f"all dimensions must be positive integers, got {dims}")
    return np.full(dims, fill, dtype=dtype)


def tensor_zip(a: Tensor4, b: Tensor4, op: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> Tensor4:
    """Apply ``op`` elementwise to two tensors of identical shape."""
    check_tensor4(a, "a")
    check_tensor4(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    out = np.asarray(op(a, b))
    if out.shape != a.shape:
        raise ShapeError(f"op changed the shape from {a.shape} to {out.shape}")
    return np.ascontiguousarray(out, dtype=np.result_type(a, b))


def tensor_reduce_mean_sq(a: Tensor4) -> float:
    """Mean of squared elements, accumulated in float64."""
    check_tensor4(a)
    a64 = a.astype(np.float64, copy=False).ravel()
    return float(np.dot(a64, a64) / a64.size)
