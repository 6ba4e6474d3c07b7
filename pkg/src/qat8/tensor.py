"""Dense tensor helpers and the two GEMM kernels everything else builds on.

Conventions used throughout the package:

* FP32 tensors are ``np.ndarray`` with dtype ``float32``, row-major.
* Int8 tensors hold values in ``[-127, 127]`` for 8-bit quantization
  (``-128`` is never produced, keeping the grid symmetric around zero).
* Int32 tensors appear only as GEMM accumulators and quantized biases.
"""

from __future__ import annotations

import numpy as np

# Inner-dimension cap for the integer GEMM. With 8-bit operands,
# 2**15 * 127 * 127 < 2**31, so the Int32 accumulator cannot overflow.
INT_GEMM_MAX_K = 1 << 15


class ShapeError(ValueError):
    """Operand shapes are inconsistent for the requested operation."""


class CapacityError(ValueError):
    """Operand sizes exceed a documented kernel limit."""


def as_f32(x) -> np.ndarray:
    """Coerce ``x`` to a float32 array and verify all values are finite."""
    a = np.asarray(x, dtype=np.float32)
    if not np.isfinite(a).all():
        raise ValueError("tensor contains NaN or Inf")
    return a


def as_i8(x, max_magnitude: int = 127) -> np.ndarray:
    """Coerce ``x`` to an int8 array, verifying values lie in [-max, max]."""
    a = np.asarray(x)
    if a.size and (a.min() < -max_magnitude or a.max() > max_magnitude):
        raise ValueError(f"int8 tensor values outside [-{max_magnitude}, {max_magnitude}]")
    return a.astype(np.int8)


def _check_2d_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"gemm requires 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape}")


def gemm_f32(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """FP32 GEMM: c[i, j] = sum_t a[i, t] * b[t, j].

    Accumulation runs in float32 through one fixed kernel (numpy's BLAS
    matmul), so repeated calls on identical inputs are bit-identical on a
    given build. Tiling inside the kernel is allowed by the determinism
    contract; only the output bytes are pinned.
    """
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    _check_2d_pair(a, b)
    if not np.isfinite(a).all() or not np.isfinite(b).all():
        raise ValueError("gemm_f32 operands must be finite")
    return np.matmul(a, b)


def gemm_i8_i32(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Int8 x Int8 GEMM with exact Int32 accumulation.

    The inner dimension is capped at ``INT_GEMM_MAX_K`` so the accumulator
    cannot overflow; within that cap the result is exact and independent of
    summation order.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    _check_2d_pair(a, b)
    if a.dtype != np.int8 or b.dtype != np.int8:
        raise TypeError(f"gemm_i8_i32 requires int8 operands, got {a.dtype} x {b.dtype}")
    if a.shape[1] > INT_GEMM_MAX_K:
        raise CapacityError(
            f"inner dimension {a.shape[1]} exceeds {INT_GEMM_MAX_K}; "
            "Int32 accumulator could overflow"
        )
    return np.matmul(a.astype(np.int32), b.astype(np.int32))
