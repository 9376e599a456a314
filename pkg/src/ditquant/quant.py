"""Symmetric quantization core.

Values map to a b-bit integer grid via v_hat = s * clip(round(v/s), c_min,
c_max). There is no zero point. Rounding is round-half-away-from-zero,
fixed so results are bit-reproducible. Scales come from plain min-max
calibration: s = max(|min|, |max|) / max(|c_min|, c_max), with sentinel
s = 1.0 for all-zero data.

Three granularities are supported: one scale for the whole tensor, one
per output channel, or one per fixed-size group within a channel
(group-wise quantization of 2-D weights).
"""

import json
from dataclasses import dataclass

import numpy as np

from .backend import kernels
from .errors import ConfigError, ContractError, ShapeError
from .numerics import as_tensor, check_finite

PARAMS_SCHEMA_VERSION = 1

PER_TENSOR = "per_tensor"
PER_CHANNEL = "per_channel"
PER_GROUP = "per_group"


@dataclass(frozen=True)
class IntGrid:
    """Clipping bounds of a b-bit two's-complement (or unsigned) grid."""

    bits: int
    signed: bool
    c_min: int
    c_max: int

    @property
    def denom(self) -> int:
        """Denominator of the symmetric min-max scale: max(|c_min|, c_max)."""
        return max(abs(self.c_min), self.c_max)


def make_grid(bits: int, signed: bool = True) -> IntGrid:
    if not 2 <= bits <= 16:
        raise ConfigError(f"grid bits must be in [2, 16], got {bits}")
    if signed:
        return IntGrid(bits, True, -(2 ** (bits - 1)), 2 ** (bits - 1) - 1)
    return IntGrid(bits, False, 0, 2**bits - 1)


@dataclass(frozen=True)
class Granularity:
    """How many scales a tensor gets and along which axis they apply."""

    kind: str
    axis: int | None = None
    group_size: int | None = None

    @staticmethod
    def per_tensor() -> "Granularity":
        return Granularity(PER_TENSOR)

    @staticmethod
    def per_channel(axis: int = 0) -> "Granularity":
        return Granularity(PER_CHANNEL, axis=axis)

    @staticmethod
    def per_group(group_size: int, axis: int = 1) -> "Granularity":
        if group_size < 1:
            raise ConfigError(f"group_size must be >= 1, got {group_size}")
        return Granularity(PER_GROUP, axis=axis, group_size=group_size)


@dataclass(frozen=True)
class QuantParams:
    """Grid + scales + granularity; everything quantize/dequantize need."""

    grid: IntGrid
    scales: np.ndarray  # 1-D, one strictly-positive scale per quant unit
    granularity: Granularity

    def __post_init__(self):
        scales = np.atleast_1d(np.asarray(self.scales, dtype=np.float64))
        if scales.ndim != 1:
            raise ConfigError(f"scales must be 1-D, got shape {scales.shape}")
        if not np.all(np.isfinite(scales)) or np.any(scales <= 0.0):
            raise ConfigError("every scale must be strictly positive and finite")
        object.__setattr__(self, "scales", scales)

    @staticmethod
    def per_tensor(grid: IntGrid, scale: float) -> "QuantParams":
        return QuantParams(grid, np.array([scale]), Granularity.per_tensor())


def _units_view(v: np.ndarray, gran: Granularity):
    """View `v` as (units, unit_len) rows plus a function undoing the view."""
    if gran.kind == PER_TENSOR:
        rows = v.reshape(1, -1)
        return rows, lambda out: out.reshape(v.shape)
    if gran.kind == PER_CHANNEL:
        axis = gran.axis if gran.axis is not None else 0
        if not -v.ndim <= axis < v.ndim:
            raise ShapeError(f"per-channel axis {axis} invalid for shape {v.shape}")
        moved = np.moveaxis(v, axis, 0)
        rows = np.ascontiguousarray(moved.reshape(moved.shape[0], -1))
        shape = moved.shape
        return rows, lambda out: np.ascontiguousarray(
            np.moveaxis(out.reshape(shape), 0, axis)
        )
    if gran.kind == PER_GROUP:
        if v.ndim != 2:
            raise ShapeError(f"per-group quantization expects a 2-D weight, got {v.shape}")
        if gran.axis != 1:
            raise ConfigError(f"per-group axis must be 1 (input channels), got {gran.axis}")
        g = gran.group_size
        if g is None or g < 1:
            raise ConfigError(f"per-group granularity needs group_size >= 1, got {g}")
        c_in = v.shape[1]
        if c_in % g != 0:
            raise ConfigError(
                f"input-channel count {c_in} is not divisible by group size {g}"
            )
        rows = v.reshape(-1, g)
        return rows, lambda out: out.reshape(v.shape)
    raise ConfigError(f"unknown granularity kind {gran.kind!r}")


def _check_params(v: np.ndarray, p: QuantParams):
    rows, restore = _units_view(v, p.granularity)
    if p.scales.shape[0] != rows.shape[0]:
        raise ShapeError(
            f"params carry {p.scales.shape[0]} scales but {p.granularity.kind} "
            f"over shape {v.shape} implies {rows.shape[0]} quant units"
        )
    return rows, restore


def quantize(v: np.ndarray, p: QuantParams) -> np.ndarray:
    """Integer codes: clip(round(v/s), c_min, c_max), one scale per unit."""
    v = as_tensor(v)
    check_finite(v, "quantize input")
    rows, restore = _check_params(v, p)
    codes = kernels.quantize_rows(rows, p.scales, p.grid.c_min, p.grid.c_max)
    return restore(codes)


def dequantize(q: np.ndarray, p: QuantParams) -> np.ndarray:
    """v_hat = s * q per quant unit; rejects codes outside the grid."""
    q = np.asarray(q)
    if q.min(initial=0) < p.grid.c_min or q.max(initial=0) > p.grid.c_max:
        raise ContractError(
            f"integer codes outside grid [{p.grid.c_min}, {p.grid.c_max}]"
        )
    qf = np.ascontiguousarray(q, dtype=np.float64)
    rows, restore = _check_params(qf, p)
    return restore(p.scales[:, None] * rows)


def fake_quant(v: np.ndarray, p: QuantParams) -> np.ndarray:
    """Quantize then dequantize; idempotent, bit-equal to the two-step path."""
    v = as_tensor(v)
    check_finite(v, "fake_quant input")
    rows, restore = _check_params(v, p)
    out = kernels.fake_quant_rows(rows, p.scales, p.grid.c_min, p.grid.c_max)
    return restore(out)


def _scales_from_maxabs(maxabs: np.ndarray, grid: IntGrid) -> np.ndarray:
    # all-zero unit: any positive scale quantizes it losslessly; use 1.0
    return np.where(maxabs == 0.0, 1.0, maxabs / grid.denom)


def calibrate_minmax(values: np.ndarray, grid: IntGrid) -> float:
    """Symmetric min-max scale over all observed values.

    s = max(|min|, |max|) / max(|c_min|, c_max); 1.0 when all values are 0.
    """
    values = as_tensor(values)
    if values.size == 0:
        raise ShapeError("calibrate_minmax: empty input")
    check_finite(values, "calibrate_minmax input")
    maxabs = kernels.maxabs_rows(values.reshape(1, -1))[0]
    if maxabs == 0.0:
        return 1.0
    return maxabs / grid.denom


def scale_from_range(lo: float, hi: float, grid: IntGrid) -> float:
    """Scale for an observed [lo, hi] range under the same min-max rule."""
    maxabs = max(abs(lo), abs(hi))
    if maxabs == 0.0:
        return 1.0
    return maxabs / grid.denom


def quantize_weights(
    w: np.ndarray, bits: int, gran: Granularity
) -> tuple[QuantParams, np.ndarray]:
    """Calibrate and fake-quantize a 2-D weight at the given granularity.

    Each quant unit (tensor, output channel, or group) gets an independent
    min-max scale. Returns the params and the fake-quantized weight.
    """
    w = as_tensor(w)
    if w.ndim != 2:
        raise ShapeError(f"quantize_weights expects a 2-D weight, got shape {w.shape}")
    check_finite(w, "weight")
    grid = make_grid(bits, signed=True)
    rows, restore = _units_view(w, gran)
    scales = _scales_from_maxabs(kernels.maxabs_rows(rows), grid)
    params = QuantParams(grid, scales, gran)
    w_hat = restore(kernels.fake_quant_rows(rows, scales, grid.c_min, grid.c_max))
    return params, w_hat


def group_quantize(
    w: np.ndarray, bits: int, g: int
) -> tuple[QuantParams, np.ndarray]:
    """Group-wise weight quantization.

    The (C_out, C_in) weight is viewed as rows of length g (C_in must be
    divisible by g) and each row is calibrated and fake-quantized on its
    own, isolating dispersed outliers into small ranges. g == C_in is
    exactly per-channel quantization.
    """
    if g < 1:
        raise ConfigError(f"group size must be >= 1, got {g}")
    return quantize_weights(w, bits, Granularity.per_group(g))


def params_to_dict(p: QuantParams) -> dict:
    """JSON-ready form of QuantParams (schema_version 1)."""
    gran: dict = {"kind": p.granularity.kind}
    if p.granularity.axis is not None:
        gran["axis"] = p.granularity.axis
    if p.granularity.group_size is not None:
        gran["group_size"] = p.granularity.group_size
    return {
        "schema_version": PARAMS_SCHEMA_VERSION,
        "bits": p.grid.bits,
        "signed": p.grid.signed,
        "granularity": gran,
        "scales": [float(s) for s in p.scales],
    }


def params_from_dict(d: dict) -> QuantParams:
    try:
        version = d["schema_version"]
        if version != PARAMS_SCHEMA_VERSION:
            raise ConfigError(f"unsupported params schema_version {version}")
        grid = make_grid(int(d["bits"]), bool(d["signed"]))
        gd = d["granularity"]
        gran = Granularity(
            kind=gd["kind"],
            axis=gd.get("axis"),
            group_size=gd.get("group_size"),
        )
        scales = np.asarray(d["scales"], dtype=np.float64)
    except KeyError as exc:
        raise ConfigError(f"quant params dict missing field {exc.args[0]!r}") from exc
    return QuantParams(grid, scales, gran)


def params_to_json(p: QuantParams) -> str:
    return json.dumps(params_to_dict(p), sort_keys=True)


def params_from_json(text: str) -> QuantParams:
    return params_from_dict(json.loads(text))
