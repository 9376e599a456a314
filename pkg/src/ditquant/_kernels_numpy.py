"""Pure-numpy kernel implementations.

This is the fallback backend used when numba is unavailable or disabled via
DITQUANT_BACKEND=numpy. Reductions accumulate strictly left-to-right over
the reduced axis (k-loop / cumsum) so results match the numba kernels
bit-for-bit wherever only +,-,*,/,sqrt and comparisons are involved
(matmul, layer_norm, fake-quant, calibration scans). softmax and gelu go
through exp/tanh, where numpy's vectorized routines may differ from libm
in the last ulp; those kernels agree across backends to ~1e-15 relative.

No argument validation happens here; the wrappers in `numerics` and
`quant` own the contracts.
"""

import numpy as np

NAME = "numpy"

GELU_TANH_COEFF = 0.044715  # cubic coefficient of the tanh-approximation GELU
_GELU_SCALE = np.sqrt(2.0 / np.pi)


def matmul(a, b):
    """Matrix product with fixed left-to-right accumulation over k."""
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for p in range(k):
        out += a[:, p : p + 1] * b[p : p + 1, :]
    return out


def softmax_rows(x):
    """Row-wise softmax of a 2-D array, max-subtracted for stability."""
    shifted = x - np.max(x, axis=1)[:, None]
    e = np.exp(shifted)
    total = np.cumsum(e, axis=1)[:, -1]  # sequential sum, matches a scalar loop
    return e / total[:, None]


def layer_norm_rows(x, gain, bias, eps):
    """Row-wise layer norm of a 2-D array: normalize, then gain/bias."""
    n = x.shape[1]
    mean = np.cumsum(x, axis=1)[:, -1] / n
    centered = x - mean[:, None]
    var = np.cumsum(centered * centered, axis=1)[:, -1] / n
    inv = 1.0 / np.sqrt(var + eps)
    return centered * inv[:, None] * gain[None, :] + bias[None, :]


def gelu(x):
    """Elementwise tanh-approximation GELU on a flat array."""
    inner = _GELU_SCALE * (x + GELU_TANH_COEFF * (x * x * x))
    return (0.5 * x) * (1.0 + np.tanh(inner))


def round_half_away(t):
    """Round to nearest integer, halves away from zero, as float64.

    np.rint is correctly-rounded nearest-even; the two modes differ only at
    exact .5 fractions, which are patched explicitly. This avoids the
    classic floor(t + 0.5) bug at values one ulp below a half.
    """
    r = np.rint(t)
    frac = t - np.trunc(t)
    halves = np.abs(frac) == 0.5
    if np.any(halves):
        r = r.copy() if r is t else r
        r[halves] = np.trunc(t[halves]) + np.copysign(1.0, t[halves])
    return r


def quantize_rows(v, scales, c_min, c_max):
    """Integer codes for a (rows, n) block with one scale per row."""
    t = v / scales[:, None]
    r = round_half_away(t)
    return np.clip(r, c_min, c_max).astype(np.int32)


def fake_quant_rows(v, scales, c_min, c_max):
    """Quantize-dequantize a (rows, n) block with one scale per row."""
    t = v / scales[:, None]
    r = round_half_away(t)
    np.clip(r, c_min, c_max, out=r)
    return scales[:, None] * r


def maxabs_rows(v):
    """Per-row max absolute value of a 2-D array."""
    return np.max(np.abs(v), axis=1)
