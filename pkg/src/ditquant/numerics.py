"""Dense tensor kernels for the toy denoiser.

Tensors are plain C-contiguous float64 numpy arrays. All operations are
pure functions: identical inputs give bit-identical outputs (within the
active backend). Reductions use a fixed left-to-right order over the
reduced axis, so there is no run-to-run or thread-scheduling variance.
"""

import numpy as np

from .backend import kernels
from .errors import ShapeError

GELU_TANH_COEFF = kernels.GELU_TANH_COEFF

_FLOAT = np.float64


def as_tensor(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 array."""
    return np.ascontiguousarray(x, dtype=_FLOAT)


def check_finite(x: np.ndarray, name: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        raise ShapeError(f"{name} contains NaN or Inf values")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a (m,k) by b (k,n).

    Accumulates over k in ascending order (no parallel reduction), so the
    result is bit-reproducible across runs and backends.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    check_finite(a, "matmul lhs")
    check_finite(b, "matmul rhs")
    return kernels.matmul(a, b)


def _rows_view(x: np.ndarray, axis: int):
    """Move `axis` last and flatten the rest; returns (rows2d, restore)."""
    moved = np.moveaxis(x, axis, -1)
    shape = moved.shape
    rows = np.ascontiguousarray(moved.reshape(-1, shape[-1]))

    def restore(out2d):
        return np.moveaxis(out2d.reshape(shape), -1, axis)

    return rows, restore


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax along `axis`, computed with max-subtraction for stability.

    Values along the axis sum to 1 within 1e-12 for any finite input.
    """
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    check_finite(x, "softmax input")
    rows, restore = _rows_view(x, axis)
    return np.ascontiguousarray(restore(kernels.softmax_rows(rows)))


def layer_norm(
    x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Layer norm over the last axis: zero mean, unit variance, then gain/bias."""
    x = as_tensor(x)
    gain = as_tensor(gain)
    bias = as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    check_finite(x, "layer_norm input")
    rows, restore = _rows_view(x, -1)
    return np.ascontiguousarray(restore(kernels.layer_norm_rows(rows, gain, bias, eps)))


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh-approximation GELU, elementwise.

    Uses 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))); the cubic
    coefficient 0.044715 is the standard approximation constant.
    """
    x = as_tensor(x)
    check_finite(x, "gelu input")
    flat = kernels.gelu(x.reshape(-1))
    return flat.reshape(x.shape)
