"""Pipeline configuration: one JSON document aggregating every stage's settings."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .features import MODEL_PIPELINE, RULE_PIPELINE, FrameConfig
from .nn.model import DetectorConfig
from .nn.training import TrainConfig
from .rule_annotator import RuleThresholds
from .self_training import SelfTrainConfig

__all__ = ["Paths", "SelfTrainSchedule", "DetectSettings", "PipelineConfig", "load_config"]


@dataclass(frozen=True)
class Paths:
    corpus_dir: str | None = None
    pause_tsv: str | None = None
    validation_dir: str | None = None
    validation_pause_tsv: str | None = None
    gold_tsv: str | None = None  # gold breath annotation of the validation / test utterances
    annotation_tsv: str | None = None  # where cmd_annotate writes, and what cmd_selftrain reads if present
    run_dir: str | None = None


@dataclass(frozen=True)
class SelfTrainSchedule:
    initial_target: float = 0.98
    target_decrement: float = 0.02
    target_floor: float = 0.80
    max_iterations: int = 4
    use_pseudo_labels: bool = True
    use_non_breath: bool = True
    accumulate_pseudo: bool = False
    withhold_fraction: float = 0.0  # drop this share of rule labels (synthetic experiments)

    def __post_init__(self):
        for name in ("initial_target", "target_floor", "withhold_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"self_training.{name} must lie in [0, 1]")
        if self.target_decrement < 0 or self.max_iterations < 0:
            raise ConfigError("self_training.target_decrement and max_iterations must be non-negative")


@dataclass(frozen=True)
class DetectSettings:
    threshold: float = 0.5
    min_duration: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0 or self.min_duration < 0:
            raise ConfigError("detect.threshold must lie in [0, 1] and min_duration be >= 0")


_SECTIONS = {
    "rule_pipeline": FrameConfig,
    "model_pipeline": FrameConfig,
    "rule_thresholds": RuleThresholds,
    "detector": DetectorConfig,
    "training": TrainConfig,
    "self_training": SelfTrainSchedule,
    "detect": DetectSettings,
    "paths": Paths,
}


@dataclass(frozen=True)
class PipelineConfig:
    rule_pipeline: FrameConfig = RULE_PIPELINE
    model_pipeline: FrameConfig = MODEL_PIPELINE
    rule_thresholds: RuleThresholds = RuleThresholds()
    detector: DetectorConfig = DetectorConfig()
    training: TrainConfig = TrainConfig()
    self_training: SelfTrainSchedule = SelfTrainSchedule()
    detect: DetectSettings = DetectSettings()
    paths: Paths = Paths()
    seed: int = 0
    base_dir: str = field(default=".", compare=False)  # relative paths resolve against this

    def __post_init__(self):
        if self.detector.n_mels != self.model_pipeline.n_mels:
            raise ConfigError("detector.n_mels must equal model_pipeline.n_mels")

    @classmethod
    def from_dict(cls, data: dict, base_dir=".") -> "PipelineConfig":
        unknown = set(data) - set(_SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        kwargs = {}
        for name, typ in _SECTIONS.items():
            if name in data:
                kwargs[name] = _build(typ, data[name], name, getattr(cls(), name))
        if "seed" in data:
            kwargs["seed"] = int(data["seed"])
        return cls(base_dir=str(base_dir), **kwargs)

    def to_dict(self) -> dict:
        out = {name: asdict(getattr(self, name)) for name in _SECTIONS}
        out["seed"] = self.seed
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_overrides(self, overrides: dict) -> "PipelineConfig":
        """Apply ``{"section.key": value}`` overrides (flags win over the file)."""
        data = self.to_dict()
        for key, value in overrides.items():
            if key == "seed":
                data["seed"] = value
                continue
            section, _, name = key.partition(".")
            if section not in _SECTIONS or not name:
                raise ConfigError(f"bad override key {key!r}")
            data[section][name] = value
        return PipelineConfig.from_dict(data, self.base_dir)

    def path(self, name: str, required: bool = True, must_exist: bool = True) -> Path | None:
        value = getattr(self.paths, name)
        if value is None:
            if required:
                raise ConfigError(f"paths.{name} is not set")
            return None
        p = Path(value)
        if not p.is_absolute():
            p = Path(self.base_dir) / p
        if must_exist and not p.exists():
            raise ConfigError(f"paths.{name} does not exist: {p}")
        return p

    def self_train_config(self) -> SelfTrainConfig:
        s = self.self_training
        return SelfTrainConfig(initial_target=s.initial_target, target_decrement=s.target_decrement,
                               target_floor=s.target_floor, max_iterations=s.max_iterations,
                               train=self.training, seed=self.seed,
                               use_pseudo_labels=s.use_pseudo_labels, use_non_breath=s.use_non_breath,
                               accumulate_pseudo=s.accumulate_pseudo)


def _build(typ, values, section, default):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(typ)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(sorted(unknown))}")
    try:
        return replace(default, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r}: {exc}") from None


def load_config(path=None) -> PipelineConfig:
    """Read a JSON config; missing sections take their defaults. ``None`` gives all defaults."""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return PipelineConfig.from_dict(data, base_dir=path.parent)
