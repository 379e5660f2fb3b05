"""
Step-decay learning-rate schedule and per-stage training settings.
"""

import math
from dataclasses import dataclass, field


@dataclass(frozen=True)
class LrSchedule:
    initial_lr: float
    gamma: float = 0.7
    step_epochs: int = 30

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise ValueError(f"initial_lr must be positive, got {self.initial_lr}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.step_epochs < 1:
            raise ValueError(f"step_epochs must be >= 1, got {self.step_epochs}")


def lr_at_epoch(schedule, epoch):
    """
    Learning rate for a zero-based epoch: initial_lr * gamma ** floor(epoch / step_epochs).
    """
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    return schedule.initial_lr * schedule.gamma ** math.floor(epoch / schedule.step_epochs)


@dataclass(frozen=True)
class StageSchedule:
    """Optimisation settings for one training stage."""

    epochs: int
    lr: LrSchedule = field(default_factory=lambda: LrSchedule(1e-4))
    batch_size: int = 4
    momentum: float = 0.9
    weight_decay: float = 0.0
    clip_norm: float = 10.0


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def settings_from_dict(cls, data):
    """
    Rebuild a frozen settings dataclass from its JSON form.

    JSON lists become tuples; unknown keys are rejected.
    """
    known = {f for f in cls.__dataclass_fields__}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {', '.join(unknown)}")
    return cls(**{k: _tuplify(v) for k, v in data.items()})
