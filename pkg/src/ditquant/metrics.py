"""Quantization-error and SQNR reporting.

Error is the squared L2 distance between quantized and unquantized
values. SQNR is 10*log10 of signal power over error power (decibel
convention, base-10 log); the expectation over inputs is a mean over the
probe set, taken inside the log. Zero-error comparisons report the cap
value SQNR_CAP_DB instead of infinity; the cap is recorded in report
metadata.

Per-step reports run paired trajectories from the same seed: the
full-precision model follows its own states, the quantized model follows
its own, so per-step output SQNR captures accumulated drift.
"""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffusion
from .backend import backend_name
from .calibration import CalibrationRecord, QuantizedModelHandle
from .errors import ContractError, ShapeError, SignalError
from .numerics import as_tensor

SQNR_CAP_DB = 100.0

RANGES_HEADER = ["layer_id", "step", "min", "max"]
SQNR_HEADER = ["unit", "step", "sqnr_db"]
WEIGHTS_HEADER = ["layer_id", "channel", "min", "max", "dispersion"]


def report_metadata() -> dict:
    """Conventions behind every report, recorded for reproducibility."""
    return {
        "sqnr_cap_db": SQNR_CAP_DB,
        "sqnr_log_base": 10,  # the dB convention; a natural-log reading would differ by a constant factor
        "sqnr_prefactor": 10,
        "prng": diffusion.PRNG_NAME,
        "backend": backend_name(),
    }


def quant_error(v: np.ndarray, v_hat: np.ndarray) -> float:
    """Squared L2 distance: sum of squared elementwise differences."""
    v = as_tensor(v)
    v_hat = as_tensor(v_hat)
    if v.shape != v_hat.shape:
        raise ShapeError(f"shape mismatch: {v.shape} vs {v_hat.shape}")
    d = v_hat - v
    return float(np.sum(d * d))


def sqnr_db(fp_out: np.ndarray, q_out: np.ndarray) -> float:
    """10*log10(||fp||^2 / ||q - fp||^2), capped at SQNR_CAP_DB for zero error."""
    fp_out = as_tensor(fp_out)
    q_out = as_tensor(q_out)
    if fp_out.shape != q_out.shape:
        raise ShapeError(f"shape mismatch: {fp_out.shape} vs {q_out.shape}")
    sig = float(np.sum(fp_out * fp_out))
    if sig == 0.0:
        raise SignalError("SQNR undefined: reference signal is all-zero")
    err = quant_error(fp_out, q_out)
    if err == 0.0:
        return SQNR_CAP_DB
    return 10.0 * math.log10(sig / err)


@dataclass
class SqnrReport:
    """Rows of (unit, step, sqnr_db) plus the mean output SQNR over steps."""

    rows: list[tuple[str, int, float]]
    aggregate: float
    metadata: dict = field(default_factory=report_metadata)

    def output_rows(self) -> list[tuple[str, int, float]]:
        return [r for r in self.rows if r[0] == "output"]


def trajectory_outputs(model, sched, cfg, probes, capture_layers: bool = False):
    """Per-probe, per-step guided sampler outputs (and layer inputs if asked).

    Pure in (model state, sched, cfg, probes), so callers may compute this
    once for a full-precision model and share it across comparisons.
    """
    per_probe = []
    for sample_seed, label in probes.pairs:
        steps_eps: list[np.ndarray] = []
        layer_inputs: dict[tuple[str, int], np.ndarray] = {}
        current = {"step": 0}

        def on_step_start(i, t):
            current["step"] = i

        def on_prediction(i, t, x_t, eps):
            steps_eps.append(eps.copy())

        if capture_layers:

            def observer(layer_id, x):
                key = (layer_id, current["step"])
                if key not in layer_inputs:  # conditional pass only
                    layer_inputs[key] = x.copy()

            model.observer = observer
        try:
            diffusion.sample(
                model,
                sched,
                cfg,
                label,
                sample_seed,
                on_step_start=on_step_start,
                on_prediction=on_prediction,
            )
        finally:
            model.observer = None
        per_probe.append((steps_eps, layer_inputs))
    return per_probe


def _ratio(num: float, den: float) -> float:
    if num == 0.0:
        raise SignalError("SQNR undefined: reference signal is all-zero")
    return math.inf if den == 0.0 else num / den


def _db(ratio_mean: float) -> float:
    return SQNR_CAP_DB if math.isinf(ratio_mean) else 10.0 * math.log10(ratio_mean)


def per_step_sqnr(
    fp_model,
    q_handle: QuantizedModelHandle | None,
    sched,
    cfg,
    probes,
    include_layers: bool = False,
    fp_cache=None,
) -> SqnrReport:
    """Per-inference-step output SQNR between paired trajectories.

    Both models start each probe from the same seeded x_T and advance
    along their own trajectories. The per-step ratio averages over probes
    in a fixed order before the log; the aggregate is the mean of the
    per-step dB values. Optional per-layer rows compare each layer's
    input features (conditional pass) at every step.

    fp_cache, when given, must be trajectory_outputs() of the FP model
    for these probes; it lets a caller amortize FP runs across settings.
    """
    q_model = q_handle.model if q_handle is not None else fp_model
    if fp_model.config != q_model.config:
        raise ContractError("architecture mismatch between FP and quantized models")
    if fp_model.has_hooks:
        raise ContractError("the reference model must be full precision (no hooks)")
    for name, p in fp_model.params.items():
        if not np.array_equal(p, q_model.params[name]):
            raise ContractError(f"FP and quantized models disagree on parameter {name!r}")
    cfg.validate(sched)

    fp_runs = fp_cache if fp_cache is not None else trajectory_outputs(
        fp_model, sched, cfg, probes, include_layers
    )
    q_runs = (
        fp_runs
        if q_model is fp_model and not q_model.has_hooks
        else trajectory_outputs(q_model, sched, cfg, probes, include_layers)
    )

    n_steps = cfg.num_inference_steps
    rows: list[tuple[str, int, float]] = []
    for step in range(n_steps):
        ratios = [
            _ratio(
                float(np.sum(fp_eps[step] * fp_eps[step])),
                quant_error(fp_eps[step], q_eps[step]),
            )
            for (fp_eps, _), (q_eps, _) in zip(fp_runs, q_runs)
        ]
        rows.append(("output", step, _db(sum(ratios) / len(ratios))))

    if include_layers:
        layer_ids = [h.layer_id for h in fp_model.enumerate_layers()]
        for layer_id in layer_ids:
            for step in range(n_steps):
                ratios = []
                for (_, fp_feats), (_, q_feats) in zip(fp_runs, q_runs):
                    fp_x = fp_feats[(layer_id, step)]
                    q_x = q_feats[(layer_id, step)]
                    ratios.append(
                        _ratio(float(np.sum(fp_x * fp_x)), quant_error(fp_x, q_x))
                    )
                rows.append((layer_id, step, _db(sum(ratios) / len(ratios))))

    output_vals = [v for unit, _, v in rows if unit == "output"]
    return SqnrReport(rows, aggregate=sum(output_vals) / len(output_vals))


def _csv(header: list[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def range_report(records: list[CalibrationRecord]) -> str:
    """ranges.csv: one (layer_id, step, min, max) row per observed step."""
    rows = []
    for rec in records:
        for step in rec.steps():
            rows.append((rec.layer_id, step, rec.step_mins[step], rec.step_maxs[step]))
    return _csv(RANGES_HEADER, rows)


def sqnr_report_csv(report: SqnrReport) -> str:
    """sqnr.csv: one (unit, step, sqnr_db) row per measurement."""
    return _csv(SQNR_HEADER, report.rows)


def weight_dispersion_report(model) -> str:
    """weights.csv: per output channel (min, max, max|w|/median|w|).

    A constant channel has dispersion 1; a channel whose median magnitude
    is zero but max is not reports inf (maximally dispersed).
    """
    rows = []
    for handle in model.enumerate_layers():
        w = model.weight(handle.layer_id)
        for ch in range(w.shape[0]):
            row = w[ch]
            absrow = np.abs(row)
            maxabs = float(absrow.max())
            med = float(np.median(absrow))
            if maxabs == 0.0:
                disp = 1.0
            elif med == 0.0:
                disp = math.inf
            else:
                disp = maxabs / med
            rows.append((handle.layer_id, ch, float(row.min()), float(row.max()), disp))
    return _csv(WEIGHTS_HEADER, rows)
