"""Experiment runner CLI.

Subcommands: init, calibrate, sample, compare, report. Configuration
comes from a JSON file (see config.py); flags override file fields, which
override the desk-scale defaults. Every error path exits nonzero with a
single-line `ditquant: error: ...` message. Set DITQUANT_LOG to a logging
level name for verbosity.
"""

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .calibration import (
    CalibSet,
    CalibrationStrategy,
    calibrate_pipeline,
    collect_ranges,
    fallback_group_size,
    records_to_jsonl,
)
from .config import (
    ExperimentConfig,
    QuantSettings,
    config_to_json,
    load_config,
)
from .diffusion import linear_beta_schedule, sample
from .errors import ConfigError, DitquantError
from .metrics import (
    RANGES_HEADER,
    SQNR_HEADER,
    WEIGHTS_HEADER,
    per_step_sqnr,
    range_report,
    report_metadata,
    trajectory_outputs,
    weight_dispersion_report,
)
from .model import (
    DenoiserModel,
    init_model,
    inject_weight_outliers,
    load_checkpoint,
    save_checkpoint,
)
from .quant import PARAMS_SCHEMA_VERSION, params_from_dict, params_to_dict
from .training import train_denoiser

log = logging.getLogger("ditquant.cli")

CHECKPOINT_NAME = "checkpoint.dq"


# -- shared plumbing ---------------------------------------------------------


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "output_dir", None):
        cfg = replace(cfg, output_dir=args.output_dir)
    sampler = cfg.sampler
    if getattr(args, "steps", None) is not None:
        sampler = replace(sampler, num_inference_steps=args.steps)
    if getattr(args, "guidance", None) is not None:
        sampler = replace(sampler, guidance_scale=args.guidance)
    cfg = replace(cfg, sampler=sampler)
    cfg.validate()
    return cfg


def _schedule(cfg: ExperimentConfig):
    return linear_beta_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)


def _ensure_output_dir(cfg: ExperimentConfig) -> str:
    os.makedirs(cfg.output_dir, exist_ok=True)
    return cfg.output_dir


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    log.info("wrote %s", path)


def _strategy(cfg: ExperimentConfig) -> CalibrationStrategy:
    if cfg.quant.act_strategy == "one_step":
        return CalibrationStrategy.one_step()
    return CalibrationStrategy.multi_step()


def _parse_label(model: DenoiserModel, raw: str) -> int:
    if raw == "null":
        return model.null_label
    try:
        label = int(raw)
    except ValueError:
        raise ConfigError(f"label must be an integer or 'null', got {raw!r}") from None
    model.check_label(label)
    return label


def render_png(tensor: np.ndarray, path: str) -> None:
    """Min-max map to 8-bit grayscale (1 channel) or RGB (3 channels).

    Cosmetic: channel 0 is rendered for any other channel count. Pixel
    data is deterministic.
    """
    from PIL import Image

    arr = np.asarray(tensor, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    norm = np.zeros_like(arr) if hi == lo else (arr - lo) / (hi - lo)
    pixels = np.rint(norm * 255.0).astype(np.uint8)
    if tensor.shape[0] == 3:
        Image.fromarray(pixels.transpose(1, 2, 0), mode="RGB").save(path)
    else:
        Image.fromarray(pixels[0], mode="L").save(path)


# -- init ----------------------------------------------------------------------


def cmd_init(args) -> int:
    cfg = _resolve_config(args)
    out_dir = _ensure_output_dir(cfg)
    model = init_model(cfg.model)
    train_steps = args.train_steps if args.train_steps is not None else cfg.train.steps
    if train_steps > 0:
        sched = _schedule(cfg)
        losses = train_denoiser(
            model,
            sched,
            steps=train_steps,
            lr=cfg.train.lr,
            batch=cfg.train.batch,
            seed=cfg.train.seed,
        )
        log.info("trained %d steps, loss %.4f -> %.4f", train_steps, losses[0], losses[-1])
    if cfg.perturb.outlier_rate > 0.0:
        inject_weight_outliers(
            model,
            rate=cfg.perturb.outlier_rate,
            magnitude=cfg.perturb.outlier_magnitude,
            seed=cfg.perturb.seed,
        )
        log.info(
            "injected outliers: rate=%g magnitude=%g",
            cfg.perturb.outlier_rate,
            cfg.perturb.outlier_magnitude,
        )
    ckpt_path = os.path.join(out_dir, CHECKPOINT_NAME)
    save_checkpoint(model, ckpt_path)
    _write(os.path.join(out_dir, "config.json"), config_to_json(cfg))
    print(ckpt_path)
    return 0


# -- calibrate -------------------------------------------------------------------


def _params_file_payload(cfg: ExperimentConfig, handle) -> dict:
    requested_g = cfg.quant.group_size
    fallbacks = {}
    warnings = []
    for lid, p in handle.weight_params.items():
        gran = p.granularity
        if cfg.quant.weight_granularity == "per_group" and gran.group_size != requested_g:
            fallbacks[lid] = gran.group_size
            warnings.append(
                f"layer {lid}: group size fell back from {requested_g} to {gran.group_size}"
            )
    metadata = {
        "bits_act": handle.bits_act,
        "bits_weight": handle.bits_weight,
        "act_strategy": handle.strategy.kind,
        "weight_granularity": cfg.quant.weight_granularity,
        "requested_group_size": requested_g,
        "group_size_fallbacks": fallbacks,
        "warnings": warnings,
    }
    metadata.update(report_metadata())
    return {
        "schema_version": PARAMS_SCHEMA_VERSION,
        "metadata": metadata,
        "activations": {lid: params_to_dict(p) for lid, p in handle.act_params.items()},
        "weights": {lid: params_to_dict(p) for lid, p in handle.weight_params.items()},
    }


def cmd_calibrate(args) -> int:
    cfg = _resolve_config(args)
    out_dir = _ensure_output_dir(cfg)
    model = load_checkpoint(args.checkpoint)
    sched = _schedule(cfg)
    calib = CalibSet.generate(cfg.calib.num_samples, cfg.calib.seed, cfg.model.num_classes)
    handle = calibrate_pipeline(
        model,
        sched,
        cfg.sampler,
        calib,
        _strategy(cfg),
        cfg.quant.bits_act,
        cfg.quant.bits_weight,
        cfg.quant.granularity(),
    )
    params_path = os.path.join(out_dir, "params.json")
    _write(params_path, json.dumps(_params_file_payload(cfg, handle), sort_keys=True, indent=2) + "\n")
    _write(os.path.join(out_dir, "ranges.csv"), range_report(handle.records))
    _write(os.path.join(out_dir, "ranges.jsonl"), records_to_jsonl(handle.records))
    _write(os.path.join(out_dir, "weights.csv"), weight_dispersion_report(model))
    print(params_path)
    return 0


def _attach_from_params_file(model: DenoiserModel, path: str) -> None:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read params file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"params file is not valid JSON: {exc}") from exc
    if payload.get("schema_version") != PARAMS_SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported params schema_version {payload.get('schema_version')!r}"
        )
    weights = payload.get("weights", {})
    acts = payload.get("activations", {})
    for lid in sorted(set(weights) | set(acts)):
        wp = params_from_dict(weights[lid]) if lid in weights else None
        ap = params_from_dict(acts[lid]) if lid in acts else None
        model.attach_fake_quant(lid, weight_params=wp, act_params=ap)


# -- sample ---------------------------------------------------------------------


def cmd_sample(args) -> int:
    cfg = _resolve_config(args)
    out_dir = _ensure_output_dir(cfg)
    model = load_checkpoint(args.checkpoint)
    if args.params:
        _attach_from_params_file(model, args.params)
    sched = _schedule(cfg)
    label = _parse_label(model, args.label)
    x = sample(model, sched, cfg.sampler, label, args.seed)
    stem = os.path.join(out_dir, f"sample_seed{args.seed}_label{args.label}")
    np.save(stem + ".npy", x)
    render_png(x, stem + ".png")
    log.info("wrote %s.npy and .png", stem)
    print(stem + ".npy")
    return 0


# -- compare ----------------------------------------------------------------------


def default_compare_settings(cfg: ExperimentConfig) -> list[dict]:
    """The five-row harness: FP plus the four quantized configurations."""
    g = cfg.quant.group_size
    return [
        {"label": "fp32", "fp": True},
        {
            "label": "8A8W-multi-step",
            "bits_act": 8,
            "bits_weight": 8,
            "act_strategy": "multi_step",
            "weight_granularity": "per_channel",
        },
        {
            "label": "8A8W-one-step",
            "bits_act": 8,
            "bits_weight": 8,
            "act_strategy": "one_step",
            "weight_granularity": "per_channel",
        },
        {
            "label": "8A4W-per-channel",
            "bits_act": 8,
            "bits_weight": 4,
            "act_strategy": "one_step",
            "weight_granularity": "per_channel",
        },
        {
            "label": "8A4W-per-group",
            "bits_act": 8,
            "bits_weight": 4,
            "act_strategy": "one_step",
            "weight_granularity": "per_group",
            "group_size": g,
        },
    ]


def _setting_quant(cfg: ExperimentConfig, setting: dict) -> QuantSettings:
    fields = {k: v for k, v in setting.items() if k not in ("label", "fp")}
    unknown = sorted(set(fields) - set(QuantSettings.__dataclass_fields__))
    if unknown:
        raise ConfigError(f"compare setting {setting.get('label')!r} has unknown field {unknown[0]!r}")
    base = {
        "bits_act": cfg.quant.bits_act,
        "bits_weight": cfg.quant.bits_weight,
        "act_strategy": cfg.quant.act_strategy,
        "weight_granularity": cfg.quant.weight_granularity,
        "group_size": cfg.quant.group_size,
    }
    base.update(fields)
    qs = QuantSettings(**base)
    qs.validate()
    return qs


def _load_settings(path: str) -> list[dict]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            settings = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read settings file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"settings file is not valid JSON: {exc}") from exc
    if not isinstance(settings, list) or not settings:
        raise ConfigError("settings file must hold a non-empty JSON list")
    return settings


def cmd_compare(args) -> int:
    cfg = _resolve_config(args)
    out_dir = _ensure_output_dir(cfg)
    settings = _load_settings(args.settings) if args.settings else default_compare_settings(cfg)
    labels = [s.get("label") for s in settings]
    if len(set(labels)) != len(labels) or any(not l for l in labels):
        raise ConfigError("every compare setting needs a unique non-empty 'label'")

    sched = _schedule(cfg)
    fp_model = load_checkpoint(args.checkpoint)
    calib = CalibSet.generate(cfg.calib.num_samples, cfg.calib.seed, cfg.model.num_classes)
    probes = CalibSet.generate(cfg.probes.num_samples, cfg.probes.seed, cfg.model.num_classes)
    log.info("precomputing full-precision probe trajectories")
    fp_cache = trajectory_outputs(fp_model, sched, cfg.sampler, probes)

    rows = []
    csv_rows = []
    for setting in settings:
        label = setting["label"]
        log.info("running setting %s", label)
        if setting.get("fp"):
            report = per_step_sqnr(
                fp_model, None, sched, cfg.sampler, probes, fp_cache=fp_cache
            )
            row = {"label": label, "bits": "32fp/32fp"}
        else:
            qs = _setting_quant(cfg, setting)
            strategy = (
                CalibrationStrategy.one_step()
                if qs.act_strategy == "one_step"
                else CalibrationStrategy.multi_step()
            )
            q_model = load_checkpoint(args.checkpoint)
            handle = calibrate_pipeline(
                q_model,
                sched,
                cfg.sampler,
                calib,
                strategy,
                qs.bits_act,
                qs.bits_weight,
                qs.granularity(),
            )
            report = per_step_sqnr(
                fp_model, handle, sched, cfg.sampler, probes, fp_cache=fp_cache
            )
            row = {
                "label": label,
                "bits": f"{qs.bits_act}/{qs.bits_weight}",
                "act_strategy": qs.act_strategy,
                "weight_granularity": qs.weight_granularity,
            }
            if qs.weight_granularity == "per_group":
                row["group_size"] = qs.group_size
        row["mean_output_sqnr_db"] = report.aggregate
        rows.append(row)
        for unit, step, value in report.rows:
            csv_rows.append((label, unit, step, value))

    summary = {
        "schema_version": 1,
        "metadata": report_metadata(),
        "rows": rows,
    }
    _write(os.path.join(out_dir, "summary.json"), json.dumps(summary, sort_keys=True, indent=2) + "\n")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["setting"] + SQNR_HEADER)
    for setting_label, unit, step, value in csv_rows:
        writer.writerow([setting_label, unit, step, repr(float(value))])
    _write(os.path.join(out_dir, "sqnr.csv"), buf.getvalue())
    for row in rows:
        print(f"{row['label']}: bits={row['bits']} mean_output_sqnr_db={row['mean_output_sqnr_db']:.4f}")
    return 0


# -- report -----------------------------------------------------------------------


def _parse_csv(path: str):
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    if not reader:
        raise ConfigError(f"{path}: line 1: empty file, expected a CSV header")
    return reader


def _rows_as(rows, types, path):
    out = []
    for lineno, row in rows:
        if len(row) != len(types):
            raise ConfigError(
                f"{path}: line {lineno}: expected {len(types)} fields, got {len(row)}"
            )
        try:
            out.append(tuple(t(v) for t, v in zip(types, row)))
        except ValueError as exc:
            raise ConfigError(f"{path}: line {lineno}: {exc}") from exc
    return out


def cmd_report(args) -> int:
    path = args.csv
    raw = _parse_csv(path)
    header, body = raw[0], [(i + 2, r) for i, r in enumerate(raw[1:]) if r]
    lines: list[str] = []
    if header == RANGES_HEADER:
        rows = _rows_as(body, (str, int, float, float), path)
        lines.append(f"ranges report: {len(rows)} rows")
        layers: dict[str, list] = {}
        for lid, step, lo, hi in rows:
            layers.setdefault(lid, []).append((step, lo, hi))
        for lid, entries in layers.items():
            lo = min(e[1] for e in entries)
            hi = max(e[2] for e in entries)
            lines.append(f"  {lid}: steps={len(entries)} min={lo:.6g} max={hi:.6g}")
    elif header == SQNR_HEADER or header == ["setting"] + SQNR_HEADER:
        has_setting = header[0] == "setting"
        types = (str, str, int, float) if has_setting else (str, int, float)
        rows = _rows_as(body, types, path)
        lines.append(f"sqnr report: {len(rows)} rows")
        groups: dict[str, list] = {}
        for row in rows:
            key = f"{row[0]}/{row[1]}" if has_setting else row[0]
            groups.setdefault(key, []).append((row[-2], row[-1]))
        for key, entries in groups.items():
            worst_step, worst = min(entries, key=lambda e: e[1])
            mean = sum(e[1] for e in entries) / len(entries)
            lines.append(
                f"  {key}: worst {worst:.4f} dB at step {worst_step}, mean {mean:.4f} dB"
            )
    elif header == WEIGHTS_HEADER:
        rows = _rows_as(body, (str, int, float, float, float), path)
        lines.append(f"weights report: {len(rows)} rows")
        top = sorted(rows, key=lambda r: -r[4])[:5]
        for lid, ch, lo, hi, disp in top:
            lines.append(f"  {lid}[{ch}]: dispersion={disp:.6g} range=[{lo:.6g}, {hi:.6g}]")
    else:
        raise ConfigError(f"{path}: line 1: unrecognized CSV header {header}")
    print("\n".join(lines))
    return 0


# -- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ditquant",
        description="Post-training quantization experiments on a desk-scale diffusion transformer",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, checkpoint=False):
        p.add_argument("--config", help="JSON experiment config (defaults used when omitted)")
        p.add_argument("--output-dir", help="override config output_dir")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint file from init")

    p = sub.add_parser("init", help="write a seeded model checkpoint + manifest")
    add_common(p)
    p.add_argument("--train-steps", type=int, help="optional gradient-descent steps before saving")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("calibrate", help="collect ranges and derive quant params")
    add_common(p, checkpoint=True)
    p.add_argument("--steps", type=int, help="override sampler inference steps")
    p.add_argument("--guidance", type=float, help="override guidance scale")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("sample", help="generate one image tensor (+PNG)")
    add_common(p, checkpoint=True)
    p.add_argument("--params", help="params.json from calibrate; omit for full precision")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--label", default="0", help="class label index, or 'null'")
    p.add_argument("--steps", type=int, help="override sampler inference steps")
    p.add_argument("--guidance", type=float, help="override guidance scale")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("compare", help="run the multi-setting SQNR harness")
    add_common(p, checkpoint=True)
    p.add_argument("--settings", help="JSON list of quant settings (default: the five-row harness)")
    p.add_argument("--steps", type=int, help="override sampler inference steps")
    p.add_argument("--guidance", type=float, help="override guidance scale")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="summarize a ranges/sqnr/weights CSV")
    p.add_argument("csv", help="CSV file produced by calibrate or compare")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    level = os.environ.get("DITQUANT_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DitquantError as exc:
        print(f"ditquant: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"ditquant: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
