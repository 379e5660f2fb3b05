"""
Run configuration: presets, JSON config files and flag overrides.

Resolution order is preset -> JSON file -> command-line flags. The resolved
configuration is hashed (SHA-256 of its sorted-key JSON) and the hash travels
with every artifact a command writes.
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace

from dataset import SplitSpec, SyntheticConfig
from detector import DetectorConfig
from errors import ConfigError
from falcnn import FalcnnConfig
from fusion import FusionConfig
from schedule import LrSchedule, StageSchedule, settings_from_dict

logger = logging.getLogger(__name__)

PRESETS = ("desk", "paper")


@dataclass(frozen=True)
class EvalConfig:
    radius_px: float = 30.0
    oracle_box_size: float = 50.0


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    seed: int = 7
    data_dir: str = "data/synth"
    out_dir: str = "runs/desk"
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    patch_split: SplitSpec = field(default_factory=SplitSpec)
    negatives_per_positive: int = 1
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    classifier: FalcnnConfig = field(default_factory=FalcnnConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    detector_schedule: StageSchedule = field(
        default_factory=lambda: StageSchedule(30, LrSchedule(1e-2), batch_size=4))
    classifier_schedule: StageSchedule = field(
        default_factory=lambda: StageSchedule(30, LrSchedule(1e-2), batch_size=32))
    fusion_schedule: StageSchedule = field(
        default_factory=lambda: StageSchedule(30, LrSchedule(1e-3), batch_size=1))

    def to_dict(self):
        return asdict(self)


def preset_config(name):
    """
    The built-in presets.

    ``desk`` trains small networks for 30 epochs per stage on synthetic data.
    ``paper`` is the long schedule for real data: 150 / 50 / 150 epochs starting
    at 1e-4 / 1e-5 / 1e-4, decayed x0.7 every 30 epochs.
    """
    if name == "desk":
        return RunConfig()
    if name == "paper":
        return RunConfig(
            preset="paper",
            out_dir="runs/paper",
            detector_schedule=StageSchedule(150, LrSchedule(1e-4), batch_size=4),
            classifier_schedule=StageSchedule(50, LrSchedule(1e-5), batch_size=32),
            fusion_schedule=StageSchedule(150, LrSchedule(1e-4), batch_size=1),
        )
    raise ConfigError(f"unknown preset {name!r} (choose from {', '.join(PRESETS)})")


# nested dataclass fields of RunConfig and how to rebuild them
_NESTED = {
    "synthetic": SyntheticConfig,
    "patch_split": SplitSpec,
    "detector": DetectorConfig,
    "classifier": FalcnnConfig,
    "fusion": FusionConfig,
    "evaluation": EvalConfig,
    "detector_schedule": StageSchedule,
    "classifier_schedule": StageSchedule,
    "fusion_schedule": StageSchedule,
}


def _merge(base, update, where):
    out = dict(base)
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key} must be an object")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _schedule_from_dict(data):
    data = dict(data)
    data["lr"] = LrSchedule(**data["lr"])
    return settings_from_dict(StageSchedule, data)


def config_from_dict(data):
    """Rebuild a RunConfig from its (complete) dictionary form."""
    try:
        kwargs = {}
        for f in fields(RunConfig):
            value = data[f.name]
            cls = _NESTED.get(f.name)
            if cls is StageSchedule:
                value = _schedule_from_dict(value)
            elif cls is not None:
                value = settings_from_dict(cls, value)
            kwargs[f.name] = value
        cfg = RunConfig(**kwargs)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid configuration: {e}") from e
    validate(cfg)
    return cfg


def validate(cfg):
    if cfg.preset not in PRESETS:
        raise ConfigError(f"unknown preset {cfg.preset!r}")
    cfg.synthetic.validate()
    cfg.detector.validate()
    cfg.classifier.validate()
    if cfg.evaluation.radius_px <= 0:
        raise ConfigError("evaluation.radius_px must be positive")
    if cfg.negatives_per_positive < 1:
        raise ConfigError("negatives_per_positive must be >= 1")
    for name in ("detector_schedule", "classifier_schedule", "fusion_schedule"):
        sched = getattr(cfg, name)
        if sched.epochs < 0 or sched.batch_size < 1:
            raise ConfigError(f"{name}: epochs must be >= 0 and batch_size >= 1")
    return cfg


def load_config(path=None, preset="desk", seed=None, out_dir=None, data_dir=None):
    """
    Resolve the configuration for one command.

    Args:
        path: optional JSON file merged over the preset
        preset: "desk" or "paper"
        seed, out_dir, data_dir: flag overrides applied last

    Returns:
        RunConfig
    """
    base = preset_config(preset).to_dict()
    if path:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, encoding="utf-8") as f:
                doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        base = _merge(base, doc, "")
        logger.debug("merged config file %s", path)
    cfg = config_from_dict(base)
    overrides = {k: v for k, v in (("seed", seed), ("out_dir", out_dir), ("data_dir", data_dir)) if v is not None}
    return replace(cfg, **overrides) if overrides else cfg


def config_hash(cfg):
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
