"""Experiment configuration: JSON file in, validated dataclasses out.

One parser for everything the CLI runs. Unknown keys are rejected by
name, every nested invariant is checked on construction, and
parse(serialize(config)) == config holds for all valid configs. CLI flags
override file fields; file fields override the desk-scale defaults.
"""

import json
from dataclasses import dataclass, field, asdict

from .diffusion import SamplerConfig
from .errors import ConfigError
from .model import ModelConfig
from .quant import Granularity, PER_TENSOR, PER_CHANNEL, PER_GROUP

_GRANULARITIES = (PER_TENSOR, PER_CHANNEL, PER_GROUP)
_STRATEGIES = ("one_step", "multi_step")


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class QuantSettings:
    bits_act: int = 8
    bits_weight: int = 8
    act_strategy: str = "one_step"
    weight_granularity: str = "per_channel"
    group_size: int = 128

    def validate(self) -> None:
        if self.act_strategy not in _STRATEGIES:
            raise ConfigError(
                f"act_strategy must be one of {_STRATEGIES}, got {self.act_strategy!r}"
            )
        if self.weight_granularity not in _GRANULARITIES:
            raise ConfigError(
                f"weight_granularity must be one of {_GRANULARITIES}, "
                f"got {self.weight_granularity!r}"
            )
        if self.group_size < 1:
            raise ConfigError(f"group_size must be >= 1, got {self.group_size}")

    def granularity(self) -> Granularity:
        if self.weight_granularity == PER_GROUP:
            return Granularity.per_group(self.group_size)
        if self.weight_granularity == PER_CHANNEL:
            return Granularity.per_channel(axis=0)
        return Granularity.per_tensor()


@dataclass(frozen=True)
class SampleSet:
    num_samples: int
    seed: int

    def validate(self) -> None:
        if self.num_samples < 1:
            raise ConfigError(f"num_samples must be >= 1, got {self.num_samples}")


@dataclass(frozen=True)
class TrainSettings:
    """Optional seeded training pass at init time (0 steps = skip)."""

    steps: int = 0
    lr: float = 0.02
    batch: int = 4
    seed: int = 0


@dataclass(frozen=True)
class PerturbSettings:
    """Optional seeded weight-outlier injection at init time (rate 0 = skip)."""

    outlier_rate: float = 0.0
    outlier_magnitude: float = 50.0
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    quant: QuantSettings = field(default_factory=QuantSettings)
    calib: SampleSet = field(default_factory=lambda: SampleSet(16, 20240901))
    probes: SampleSet = field(default_factory=lambda: SampleSet(8, 20240902))
    train: TrainSettings = field(default_factory=TrainSettings)
    perturb: PerturbSettings = field(default_factory=PerturbSettings)
    output_dir: str = "runs/desk"

    def validate(self) -> None:
        self.model.validate()
        if self.schedule.T < 1:
            raise ConfigError(f"schedule.T must be >= 1, got {self.schedule.T}")
        if not 0.0 < self.schedule.beta_start <= self.schedule.beta_end < 1.0:
            raise ConfigError("schedule betas must satisfy 0 < start <= end < 1")
        if not 1 <= self.sampler.num_inference_steps <= self.schedule.T:
            raise ConfigError(
                f"sampler.num_inference_steps must be in [1, T={self.schedule.T}]"
            )
        if self.sampler.guidance_scale < 0:
            raise ConfigError("sampler.guidance_scale must be >= 0")
        self.quant.validate()
        self.calib.validate()
        self.probes.validate()
        if not 0.0 <= self.perturb.outlier_rate <= 1.0:
            raise ConfigError("perturb.outlier_rate must be in [0, 1]")
        if self.train.steps < 0:
            raise ConfigError("train.steps must be >= 0")


_SECTIONS = {
    "model": ModelConfig,
    "schedule": ScheduleConfig,
    "sampler": SamplerConfig,
    "quant": QuantSettings,
    "calib": SampleSet,
    "probes": SampleSet,
    "train": TrainSettings,
    "perturb": PerturbSettings,
}


def _build_section(name: str, cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    fields = {f for f in cls.__dataclass_fields__}
    unknown = sorted(set(data) - fields)
    if unknown:
        raise ConfigError(f"config section {name!r} has unknown field {unknown[0]!r}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"config section {name!r} is invalid: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    known = set(_SECTIONS) | {"output_dir"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"config has unknown field {unknown[0]!r}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build_section(name, cls, data[name])
    if "output_dir" in data:
        if not isinstance(data["output_dir"], str):
            raise ConfigError("config field 'output_dir' must be a string")
        kwargs["output_dir"] = data["output_dir"]
    cfg = ExperimentConfig(**kwargs)
    cfg.validate()
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def config_to_json(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), sort_keys=True, indent=2) + "\n"


def config_from_json(text: str) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return config_from_json(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
