"""Experiment configuration: a flat JSON object with exactly these fields."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from ..aggregate import STRATEGIES
from ..errors import ConfigError
from ..losses import PENALTY_MODES

MODES = ("bilevel", "unrolled", "loop")
TASKS = ("V", "P", "both")
SOURCES = ("synthetic", "files")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    iterations: int = 200
    warm_steps: int = 500
    inner_steps_V: int = 1
    inner_steps_P: int = 1
    lr_outer: float = 2e-4
    lr_inner: float = 2e-4
    lr_warm: float = 2e-4
    lr_min: float = 2e-6
    lr_milestones: tuple = (0.5, 0.8)
    lr_gamma: float = 0.1
    momentum: float = 0.0
    eta: float = 10.0
    penalty_on: str = "fused"
    adv_weight: float = 1.0
    indirect: bool = True
    aggregation: str = "rlw"
    manual_weights: tuple = (0.7, 0.3)
    dwa_temperature: float = 2.0
    gradnorm_alpha: float = 1.5
    gradnorm_lr: float = 0.025
    strategy_mode: str = "bilevel"
    tasks: str = "both"
    batch_size: int = 4
    image_size: int = 32
    class_count: int = 3
    n_pairs: int = 16
    data_source: str = "synthetic"
    data_dir: str | None = None
    split_fraction: float = 0.8
    bins: int = 256
    eval_every: int = 0
    notes: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "lr_milestones", tuple(self.lr_milestones))
        object.__setattr__(self, "manual_weights", tuple(self.manual_weights))
        self.validate()

    def validate(self) -> None:
        for name in ("lr_outer", "lr_inner", "lr_warm", "lr_min"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        for name in ("warm_steps", "inner_steps_V", "inner_steps_P", "eval_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0 < self.split_fraction < 1:
            raise ConfigError(f"split_fraction must lie in (0, 1), got {self.split_fraction}")
        if self.eta < 0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0 < self.lr_gamma <= 1:
            raise ConfigError(f"lr_gamma must lie in (0, 1], got {self.lr_gamma}")
        if any(not 0 < m < 1 for m in self.lr_milestones):
            raise ConfigError(f"lr_milestones must be fractions in (0, 1), got {self.lr_milestones}")
        if len(self.manual_weights) != 2 or min(self.manual_weights) < 0:
            raise ConfigError(f"manual_weights must be two non-negative values, got {self.manual_weights}")
        choices = {
            "aggregation": STRATEGIES,
            "strategy_mode": MODES,
            "tasks": TASKS,
            "data_source": SOURCES,
            "penalty_on": PENALTY_MODES,
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.batch_size < 1 or self.n_pairs < 2:
            raise ConfigError("batch_size must be >= 1 and n_pairs >= 2")
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        if self.class_count < 2:
            raise ConfigError(f"class_count must be >= 2, got {self.class_count}")
        if self.bins < 2:
            raise ConfigError(f"bins must be >= 2, got {self.bins}")
        if self.data_source == "files" and not self.data_dir:
            raise ConfigError("data_source 'files' needs data_dir")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        d["manual_weights"] = list(self.manual_weights)
        if not d["notes"]:
            del d["notes"]
        return d

    def with_(self, **changes) -> TrainConfig:
        return replace(self, **changes)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> TrainConfig:
        try:
            with open(path) as fh:
                d = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(d)

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def lr_at(self, base: float, iteration: int) -> float:
        """Multi-step decay at the milestone fractions, floored at ``lr_min``."""
        passed = sum(iteration >= int(m * self.iterations) for m in self.lr_milestones)
        return max(base * self.lr_gamma**passed, self.lr_min)
