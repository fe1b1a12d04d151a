"""Task-weighting strategies for combining the two hypergradients.

``rlw`` draws fresh weights every iteration from a softmax of two standard
normals. ``equal``, ``manual``, ``dwa`` and ``gradnorm`` are the usual
multi-task baselines.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .bilevel import HyperGradient
from .errors import ConfigError, NumericError, ShapeError
from .networks import ParamSet

log = logging.getLogger(__name__)

STRATEGIES = ("rlw", "equal", "manual", "gradnorm", "dwa")


@dataclass(frozen=True)
class AggWeights:
    lambda_V: float
    lambda_P: float
    strategy: str

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown aggregation strategy {self.strategy!r}")
        if self.lambda_V < 0 or self.lambda_P < 0:
            raise ConfigError(f"negative task weights ({self.lambda_V}, {self.lambda_P})")


def softmax2(a: float, b: float) -> tuple[float, float]:
    m = max(a, b)
    ea, eb = np.exp(a - m), np.exp(b - m)
    s = ea + eb
    return float(ea / s), float(eb / s)


def rlw_sample(rng: np.random.Generator) -> AggWeights:
    z_v, z_p = rng.standard_normal(2)
    return AggWeights(*softmax2(z_v, z_p), "rlw")


@dataclass
class TaskStats:
    """Per-iteration inputs to the adaptive baselines."""

    loss_V: float
    loss_P: float
    grad_norm_V: float
    grad_norm_P: float


@dataclass
class AggHistory:
    records: list[TaskStats] = field(default_factory=list)
    gradnorm_weights: np.ndarray = field(default_factory=lambda: np.ones(2))

    def append(self, stats: TaskStats) -> None:
        self.records.append(stats)


def _dwa(history: AggHistory, temperature: float) -> AggWeights | None:
    if len(history.records) < 2:
        return None
    prev, prev2 = history.records[-1], history.records[-2]
    ratios = []
    for now, before in ((prev.loss_V, prev2.loss_V), (prev.loss_P, prev2.loss_P)):
        # the visual upper loss can go negative through the critic term
        if abs(before) < 1e-12:
            return None
        ratios.append(abs(now) / abs(before))
    return AggWeights(*softmax2(ratios[0] / temperature, ratios[1] / temperature), "dwa")


def _gradnorm(history: AggHistory, current: TaskStats | None, alpha: float, lr: float) -> AggWeights | None:
    if current is None:
        return None
    first = history.records[0] if history.records else current
    norms = np.array([current.grad_norm_V, current.grad_norm_P])
    init = np.array([abs(first.loss_V), abs(first.loss_P)])
    if (init < 1e-12).any():
        return None
    rel = np.array([abs(current.loss_V), abs(current.loss_P)]) / init
    rate = rel / rel.mean()
    w = history.gradnorm_weights
    weighted = w * norms
    target = weighted.mean() * rate**alpha
    # one projected subgradient step on sum_k |w_k ||G_k|| - target_k|
    w = np.maximum(w - lr * np.sign(weighted - target) * norms, 1e-3)
    w = 2.0 * w / w.sum()
    history.gradnorm_weights = w
    return AggWeights(float(w[0]), float(w[1]), "gradnorm")


def baseline_weights(
    strategy: str,
    history: AggHistory,
    current: TaskStats | None = None,
    manual: tuple[float, float] = (0.7, 0.3),
    temperature: float = 2.0,
    gradnorm_alpha: float = 1.5,
    gradnorm_lr: float = 0.025,
) -> AggWeights:
    """Weights for the non-random strategies.

    ``history`` holds completed iterations; ``current`` the stats of the
    iteration being weighted (GradNorm only). Missing history falls back to
    equal weights.
    """
    if strategy == "equal":
        return AggWeights(0.5, 0.5, "equal")
    if strategy == "manual":
        return AggWeights(float(manual[0]), float(manual[1]), "manual")
    if strategy == "dwa":
        w = _dwa(history, temperature)
    elif strategy == "gradnorm":
        w = _gradnorm(history, current, gradnorm_alpha, gradnorm_lr)
    else:
        raise ConfigError(f"baseline_weights does not handle strategy {strategy!r}")
    if w is None:
        log.info("%s: insufficient history, using equal weights", strategy)
        return AggWeights(0.5, 0.5, strategy)
    return w


class Aggregator:
    """Stateful weight source for one run."""

    def __init__(self, strategy: str, rng: np.random.Generator, **options):
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown aggregation strategy {strategy!r}")
        self.strategy = strategy
        self.rng = rng
        self.options = options
        self.history = AggHistory()

    def weights(self, current: TaskStats) -> AggWeights:
        if self.strategy == "rlw":
            w = rlw_sample(self.rng)
        else:
            w = baseline_weights(self.strategy, self.history, current, **self.options)
        self.history.append(current)
        return w


def sgd_step(params: ParamSet, grad: np.ndarray, lr: float, momentum: float = 0.0, velocity: dict | None = None) -> None:
    """In-place SGD on a ParamSet from a flat gradient; bumps ``step_count``."""
    velocity = {} if velocity is None else velocity
    for key, g in params.unflatten(grad).items():
        if momentum:
            buf = velocity.get(key)
            buf = g.copy() if buf is None else momentum * buf + g
            velocity[key] = buf
            g = buf
        t = params.entries[key]
        t.data = t.data - lr * g
    params.step_count += 1


def aggregate_step(
    G_V: HyperGradient,
    G_P: HyperGradient,
    weights: AggWeights,
    omega: ParamSet,
    lr: float,
    momentum: float = 0.0,
    velocity: dict | None = None,
) -> ParamSet:
    """``omega <- omega - lr * (lambda_V G_V + lambda_P G_P)``, in place."""
    if G_V.total.shape != (omega.count,) or G_P.total.shape != (omega.count,):
        raise ShapeError(f"hypergradients {G_V.total.shape}, {G_P.total.shape} for {omega.count} weights")
    with np.errstate(over="ignore", invalid="ignore"):
        combined = weights.lambda_V * G_V.total + weights.lambda_P * G_P.total
    if not np.isfinite(combined).all():
        raise NumericError(f"combined gradient is non-finite (weights {weights.lambda_V}, {weights.lambda_P})")
    sgd_step(omega, combined, lr, momentum, velocity)
    return omega
