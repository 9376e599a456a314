"""Activation-range collection and calibration strategies.

Two strategies are supported: one-step, which observes layer inputs only
at the first reverse step (maximal noise), and multi-step, which observes
a set of inference steps (default: all) and unions the ranges. Ranges are
recorded on layer inputs, where activation fake-quant is applied, while
the model runs full precision; records merge associatively across
calibration samples.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffusion
from .errors import ConfigError, ContractError, ShapeError
from .model import DenoiserModel
from .quant import (
    Granularity,
    QuantParams,
    PER_GROUP,
    group_quantize,
    make_grid,
    quantize_weights,
    scale_from_range,
)

log = logging.getLogger("ditquant.calibration")

ONE_STEP = "one_step"
MULTI_STEP = "multi_step"


@dataclass(frozen=True)
class CalibrationStrategy:
    """Which inference steps contribute activation statistics."""

    kind: str
    steps: tuple[int, ...] | None = None  # multi-step only; None means all

    @staticmethod
    def one_step() -> "CalibrationStrategy":
        return CalibrationStrategy(ONE_STEP, (0,))

    @staticmethod
    def multi_step(steps=None) -> "CalibrationStrategy":
        return CalibrationStrategy(MULTI_STEP, None if steps is None else tuple(steps))

    def active_steps(self, num_inference_steps: int) -> tuple[int, ...]:
        if self.kind == ONE_STEP:
            return (0,)
        if self.kind != MULTI_STEP:
            raise ConfigError(f"unknown calibration strategy {self.kind!r}")
        steps = tuple(range(num_inference_steps)) if self.steps is None else self.steps
        for s in steps:
            if not 0 <= s < num_inference_steps:
                raise ConfigError(
                    f"calibration step {s} outside [0, {num_inference_steps})"
                )
        return steps


@dataclass
class CalibrationRecord:
    """Per-layer, per-inference-step input ranges, merged over samples."""

    layer_id: str
    step_mins: dict[int, float] = field(default_factory=dict)
    step_maxs: dict[int, float] = field(default_factory=dict)
    sample_count: int = 0

    def observe(self, step: int, values: np.ndarray) -> None:
        lo = float(values.min())
        hi = float(values.max())
        if step in self.step_mins:
            self.step_mins[step] = min(self.step_mins[step], lo)
            self.step_maxs[step] = max(self.step_maxs[step], hi)
        else:
            self.step_mins[step] = lo
            self.step_maxs[step] = hi
        self.sample_count += 1

    def merge(self, other: "CalibrationRecord") -> "CalibrationRecord":
        if other.layer_id != self.layer_id:
            raise ContractError(
                f"cannot merge records for {self.layer_id!r} and {other.layer_id!r}"
            )
        merged = CalibrationRecord(
            self.layer_id,
            dict(self.step_mins),
            dict(self.step_maxs),
            self.sample_count + other.sample_count,
        )
        for step, lo in other.step_mins.items():
            hi = other.step_maxs[step]
            if step in merged.step_mins:
                merged.step_mins[step] = min(merged.step_mins[step], lo)
                merged.step_maxs[step] = max(merged.step_maxs[step], hi)
            else:
                merged.step_mins[step] = lo
                merged.step_maxs[step] = hi
        return merged

    def steps(self) -> list[int]:
        return sorted(self.step_mins)

    def union_range(self, steps=None) -> tuple[float, float]:
        """Min of mins / max of maxes over the given steps (default: all)."""
        keys = self.steps() if steps is None else [s for s in steps if s in self.step_mins]
        if not keys:
            raise ShapeError(f"record for {self.layer_id!r} has no observed steps")
        return (
            min(self.step_mins[s] for s in keys),
            max(self.step_maxs[s] for s in keys),
        )

    def to_dict(self) -> dict:
        return {
            "layer_id": self.layer_id,
            "sample_count": self.sample_count,
            "steps": [
                {"step": s, "min": self.step_mins[s], "max": self.step_maxs[s]}
                for s in self.steps()
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "CalibrationRecord":
        rec = CalibrationRecord(d["layer_id"], sample_count=d["sample_count"])
        for entry in d["steps"]:
            rec.step_mins[entry["step"]] = entry["min"]
            rec.step_maxs[entry["step"]] = entry["max"]
        return rec


def records_to_jsonl(records: list[CalibrationRecord]) -> str:
    return "\n".join(json.dumps(r.to_dict(), sort_keys=True) for r in records) + "\n"


def records_from_jsonl(text: str) -> list[CalibrationRecord]:
    return [
        CalibrationRecord.from_dict(json.loads(line))
        for line in text.splitlines()
        if line.strip()
    ]


@dataclass(frozen=True)
class CalibSet:
    """Seeded (seed, label) pairs driving calibration trajectories."""

    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.pairs:
            raise ConfigError("calibration set must be non-empty")

    @staticmethod
    def generate(num_samples: int, seed: int, num_classes: int) -> "CalibSet":
        if num_samples < 1:
            raise ConfigError(f"need at least one calibration sample, got {num_samples}")
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, num_classes, size=num_samples)
        seeds = rng.integers(0, 2**63, size=num_samples)
        return CalibSet(tuple((int(s), int(l)) for s, l in zip(seeds, labels)))


def collect_ranges(
    model: DenoiserModel,
    sched: diffusion.NoiseSchedule,
    sampler_cfg: diffusion.SamplerConfig,
    calib: CalibSet,
    strategy: CalibrationStrategy,
) -> list[CalibrationRecord]:
    """Observe per-layer input min/max along full-precision trajectories.

    One-step observes only the first reverse step (the x_T input, maximal
    noise) and skips the rest of the trajectory; multi-step runs the full
    sampler and records at every step in the strategy. Results are merged
    across calibration samples and do not depend on sample order.
    """
    if model.has_hooks:
        raise ContractError("collect_ranges requires a hook-free (full-precision) model")
    if model.observer is not None:
        raise ContractError("model already has an observer installed")
    sampler_cfg.validate(sched)
    active = set(strategy.active_steps(sampler_cfg.num_inference_steps))
    records = {h.layer_id: CalibrationRecord(h.layer_id) for h in model.enumerate_layers()}
    for label_seed, label in calib.pairs:
        model.check_label(label)

    current = {"step": None}

    def observer(layer_id, x):
        if current["step"] in active:
            records[layer_id].observe(current["step"], x)

    model.observer = observer
    try:
        for sample_seed, label in calib.pairs:
            if strategy.kind == ONE_STEP:
                # only the first reverse step matters; skip the trajectory
                t_start = diffusion.inference_timesteps(
                    sched.T, sampler_cfg.num_inference_steps
                )[0]
                x = np.random.default_rng(sample_seed).standard_normal(model.sample_shape)
                current["step"] = 0
                model.forward(x, t_start, label)
                model.forward(x, t_start, model.null_label)
            else:

                def on_step_start(i, t):
                    current["step"] = i

                diffusion.sample(
                    model,
                    sched,
                    sampler_cfg,
                    label,
                    sample_seed,
                    on_step_start=on_step_start,
                )
            current["step"] = None
    finally:
        model.observer = None
    return [records[h.layer_id] for h in model.enumerate_layers()]


def derive_act_params(
    record: CalibrationRecord, bits: int, strategy: CalibrationStrategy
) -> QuantParams:
    """Per-tensor symmetric activation params from the strategy's ranges."""
    steps = record.steps() if strategy.steps is None else strategy.steps
    lo, hi = record.union_range(steps)
    grid = make_grid(bits, signed=True)
    return QuantParams.per_tensor(grid, scale_from_range(lo, hi, grid))


def fallback_group_size(c_in: int, g: int) -> int:
    """Largest divisor of c_in that is <= g."""
    for d in range(min(g, c_in), 0, -1):
        if c_in % d == 0:
            return d
    return 1


def derive_weight_params(
    model: DenoiserModel, bits: int, gran: Granularity
) -> dict[str, QuantParams]:
    """Weight quant params for every enumerated layer.

    Per-group granularity falls back, per layer, to the largest divisor of
    that layer's input-channel count not exceeding the requested group
    size; the effective size is recorded in the returned params (and a
    warning logged), so reports can surface it.
    """
    params: dict[str, QuantParams] = {}
    for handle in model.enumerate_layers():
        w = model.weight(handle.layer_id)
        if gran.kind == PER_GROUP:
            g_eff = fallback_group_size(w.shape[1], gran.group_size)
            if g_eff != gran.group_size:
                log.warning(
                    "layer %s: group size %d does not divide C_in=%d, falling back to %d",
                    handle.layer_id,
                    gran.group_size,
                    w.shape[1],
                    g_eff,
                )
            p, _ = group_quantize(w, bits, g_eff)
        else:
            p, _ = quantize_weights(w, bits, gran)
        params[handle.layer_id] = p
    return params


@dataclass
class QuantizedModelHandle:
    """A model with hooks attached plus everything used to build them."""

    model: DenoiserModel
    weight_params: dict[str, QuantParams]
    act_params: dict[str, QuantParams]
    records: list[CalibrationRecord]
    strategy: CalibrationStrategy
    bits_act: int
    bits_weight: int

    def detach_all(self) -> None:
        self.model.detach_all()


def calibrate_pipeline(
    model: DenoiserModel,
    sched: diffusion.NoiseSchedule,
    sampler_cfg: diffusion.SamplerConfig,
    calib: CalibSet,
    strategy: CalibrationStrategy,
    bits_act: int,
    bits_weight: int,
    gran: Granularity,
) -> QuantizedModelHandle:
    """Collect ranges, derive all params, and hook every enumerated layer."""
    records = collect_ranges(model, sched, sampler_cfg, calib, strategy)
    act_params = {
        r.layer_id: derive_act_params(r, bits_act, strategy) for r in records
    }
    weight_params = derive_weight_params(model, bits_weight, gran)
    for handle in model.enumerate_layers():
        model.attach_fake_quant(
            handle.layer_id,
            weight_params=weight_params[handle.layer_id],
            act_params=act_params[handle.layer_id],
        )
    return QuantizedModelHandle(
        model, weight_params, act_params, records, strategy, bits_act, bits_weight
    )
