"""Numba-jitted kernels, the default backend for the hot inner loops.

Each function mirrors its namesake in `_kernels_numpy` operation-for-
operation: accumulations run left-to-right over the reduced axis and no
parallel or reassociating optimizations are enabled (no fastmath), so
matmul, layer_norm and the quantization kernels are bit-identical to the
numpy fallback. softmax/gelu call libm exp/tanh and may differ from
numpy's vectorized versions in the last ulp.

Importing this module requires numba; `backend` guards the import.
"""

import math

import numpy as np
from numba import njit

NAME = "numba"

GELU_TANH_COEFF = 0.044715
_GELU_SCALE = np.sqrt(2.0 / np.pi)


@njit(cache=True)
def matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]
    return out


@njit(cache=True)
def softmax_rows(x):
    rows, n = x.shape
    out = np.empty((rows, n))
    for i in range(rows):
        m = x[i, 0]
        for j in range(1, n):
            if x[i, j] > m:
                m = x[i, j]
        total = 0.0
        for j in range(n):
            e = math.exp(x[i, j] - m)
            out[i, j] = e
            total += e
        for j in range(n):
            out[i, j] /= total
    return out


@njit(cache=True)
def layer_norm_rows(x, gain, bias, eps):
    rows, n = x.shape
    out = np.empty((rows, n))
    for i in range(rows):
        s = 0.0
        for j in range(n):
            s += x[i, j]
        mean = s / n
        sq = 0.0
        for j in range(n):
            d = x[i, j] - mean
            sq += d * d
        inv = 1.0 / math.sqrt(sq / n + eps)
        for j in range(n):
            out[i, j] = (x[i, j] - mean) * inv * gain[j] + bias[j]
    return out


@njit(cache=True)
def gelu(x):
    out = np.empty_like(x)
    for i in range(x.size):
        xi = x[i]
        inner = _GELU_SCALE * (xi + GELU_TANH_COEFF * (xi * xi * xi))
        out[i] = (0.5 * xi) * (1.0 + math.tanh(inner))
    return out


@njit(cache=True, inline="always")
def _round_half_away_scalar(t):
    f = t - math.trunc(t)
    if f == 0.5:
        return math.trunc(t) + 1.0
    if f == -0.5:
        return math.trunc(t) - 1.0
    return np.rint(t)


@njit(cache=True)
def quantize_rows(v, scales, c_min, c_max):
    rows, n = v.shape
    out = np.empty((rows, n), dtype=np.int32)
    for i in range(rows):
        s = scales[i]
        for j in range(n):
            r = _round_half_away_scalar(v[i, j] / s)
            if r < c_min:
                r = c_min
            elif r > c_max:
                r = c_max
            out[i, j] = np.int32(r)
    return out


@njit(cache=True)
def fake_quant_rows(v, scales, c_min, c_max):
    rows, n = v.shape
    out = np.empty((rows, n))
    for i in range(rows):
        s = scales[i]
        for j in range(n):
            r = _round_half_away_scalar(v[i, j] / s)
            if r < c_min:
                r = c_min
            elif r > c_max:
                r = c_max
            out[i, j] = s * r
    return out


@njit(cache=True)
def maxabs_rows(v):
    rows, n = v.shape
    out = np.empty(rows)
    for i in range(rows):
        m = 0.0
        for j in range(n):
            a = abs(v[i, j])
            if a > m:
                m = a
        out[i] = m
    return out
