"""Hypergradients for the fusion / task bi-level problem.

The upper objective Phi(omega; theta) is minimized over the fusion weights
while theta tracks a minimizer of the lower objective phi. The total
gradient is ``grad_omega Phi + grad_theta Phi . d theta*/d omega``; the
second factor is replaced by the first-order ratio

    c = <grad_theta Phi, grad_theta phi> / <grad_theta phi, grad_theta phi>

times ``grad_omega phi``. :func:`exact_hypergrad` gives the closed-form
implicit-function answer on quadratic problems for validation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Protocol

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .losses import disc_loss, fusion_visual_loss, task_objective
from .networks import FusionPass, ParamSet

DENOM_EPS = 1e-12


@dataclass
class HyperGradient:
    direct: np.ndarray
    indirect: np.ndarray
    coefficient: float | None = None
    losses: dict = field(default_factory=dict)
    total: np.ndarray = field(init=False)

    def __post_init__(self):
        self.direct = np.asarray(self.direct, dtype=np.float64)
        self.indirect = np.asarray(self.indirect, dtype=np.float64)
        if self.direct.shape != self.indirect.shape:
            raise ShapeError(f"direct {self.direct.shape} and indirect {self.indirect.shape} differ")
        self.total = self.direct + self.indirect
        if not np.isfinite(self.total).all():
            raise NumericError("hypergradient has non-finite entries")

    def norm(self) -> float:
        return float(np.linalg.norm(self.total))


# --- quadratic fixtures --------------------------------------------------------------


@dataclass
class QuadraticBilevel:
    """Lower ``0.5 t'At - t'B w``; upper ``0.5 t'Pt + 0.5 w'Qw + t'Rw + p't + q'w``."""

    A: np.ndarray
    B: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=np.float64))
        n, m = self.B.shape
        if self.A.shape != (n, n):
            raise ShapeError(f"A {self.A.shape} does not match B {self.B.shape}")
        if not np.allclose(self.A, self.A.T, rtol=0, atol=1e-12):
            raise ConfigError("A must be symmetric")
        if np.linalg.eigvalsh(self.A).min() <= 0:
            raise ConfigError("A must be positive definite")
        self.P = np.atleast_2d(np.asarray(self.P, dtype=np.float64)).reshape(n, n)
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=np.float64)).reshape(m, m)
        self.R = np.atleast_2d(np.asarray(self.R, dtype=np.float64)).reshape(n, m)
        self.p = np.asarray(self.p, dtype=np.float64).reshape(n)
        self.q = np.asarray(self.q, dtype=np.float64).reshape(m)

    @property
    def dims(self) -> tuple[int, int]:
        return self.B.shape

    @classmethod
    def random(cls, rng: np.random.Generator, n: int, m: int) -> QuadraticBilevel:
        M = rng.standard_normal((n, n))
        A = M @ M.T + n * np.eye(n)
        S = rng.standard_normal((n, n))
        U = rng.standard_normal((m, m))
        return cls(
            A=(A + A.T) / 2,
            B=rng.standard_normal((n, m)),
            P=(S + S.T) / 2,
            Q=(U + U.T) / 2,
            R=rng.standard_normal((n, m)),
            p=rng.standard_normal(n),
            q=rng.standard_normal(m),
        )

    @classmethod
    def scalar(cls, a, b, P=0.0, Q=0.0, R=0.0, p=0.0, q=0.0) -> QuadraticBilevel:
        return cls(A=[[a]], B=[[b]], P=[[P]], Q=[[Q]], R=[[R]], p=[p], q=[q])

    def theta_star(self, omega) -> np.ndarray:
        return np.linalg.solve(self.A, self.B @ np.asarray(omega, dtype=np.float64))

    def lower(self, omega, theta) -> float:
        return float(0.5 * theta @ self.A @ theta - theta @ self.B @ omega)

    def lower_grads(self, omega, theta) -> tuple[np.ndarray, np.ndarray]:
        """(grad_omega phi, grad_theta phi)."""
        return -self.B.T @ theta, self.A @ theta - self.B @ omega

    def upper(self, omega, theta) -> float:
        return float(
            0.5 * theta @ self.P @ theta
            + 0.5 * omega @ self.Q @ omega
            + theta @ self.R @ omega
            + self.p @ theta
            + self.q @ omega
        )

    def upper_grads(self, omega, theta) -> tuple[np.ndarray, np.ndarray]:
        """(grad_omega Phi, grad_theta Phi)."""
        return self.Q @ omega + self.R.T @ theta + self.q, self.P @ theta + self.R @ omega + self.p

    def reduced_upper(self, omega) -> float:
        """``omega -> Phi(omega, theta*(omega))``."""
        omega = np.asarray(omega, dtype=np.float64)
        return self.upper(omega, self.theta_star(omega))


def exact_hypergrad(problem: QuadraticBilevel, omega, theta=None) -> HyperGradient:
    """Implicit-function hypergradient; ``theta`` defaults to theta*(omega)."""
    omega = np.asarray(omega, dtype=np.float64)
    if omega.shape != (problem.dims[1],):
        raise ShapeError(f"omega of shape {omega.shape} for a problem with m={problem.dims[1]}")
    theta = problem.theta_star(omega) if theta is None else np.asarray(theta, dtype=np.float64)
    try:
        jac = np.linalg.solve(problem.A, problem.B)  # d theta*/d omega, (n, m)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular lower-level Hessian: {exc}") from None
    g_omega, g_theta = problem.upper_grads(omega, theta)
    return HyperGradient(direct=g_omega, indirect=jac.T @ g_theta)


def gn_coefficient(grad_theta_Phi, grad_theta_phi) -> float:
    a = np.asarray(grad_theta_Phi, dtype=np.float64).ravel()
    b = np.asarray(grad_theta_phi, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"theta gradients differ in shape: {a.shape} vs {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        denom = float(b @ b)
        if denom < DENOM_EPS:
            return 0.0
        return float(a @ b) / denom


def gn_approx_hypergrad(grad_theta_Phi, grad_theta_phi, grad_omega_phi, grad_omega_Phi) -> HyperGradient:
    """First-order approximation: ``indirect = c * grad_omega phi``."""
    g_omega_phi = np.asarray(grad_omega_phi, dtype=np.float64)
    g_omega_Phi = np.asarray(grad_omega_Phi, dtype=np.float64)
    if g_omega_phi.shape != g_omega_Phi.shape:
        raise ShapeError(f"omega gradients differ in shape: {g_omega_phi.shape} vs {g_omega_Phi.shape}")
    c = gn_coefficient(grad_theta_Phi, grad_theta_phi)
    return HyperGradient(direct=g_omega_Phi, indirect=c * g_omega_phi, coefficient=c)


# --- task assembly ---------------------------------------------------------------------


class Objective(NamedTuple):
    value: float
    grad_omega: np.ndarray
    grad_theta: np.ndarray
    parts: dict


class BilevelTask(Protocol):
    name: str

    def upper(self, batch, omega, theta) -> Objective: ...

    def lower(self, batch, omega, theta) -> Objective: ...


def _check_objective(task: str, level: str, obj: Objective) -> None:
    for key, val in {"total": obj.value, **obj.parts}.items():
        if not np.isfinite(val):
            raise NumericError(f"task {task}: {level} objective part {key!r} is non-finite ({val})")


def assemble_task_gradient(task: BilevelTask, batch, omega, theta, indirect: bool = True) -> HyperGradient:
    """Direct gradient of the upper objective plus the first-order correction.

    ``theta`` must already have been refreshed by the inner steps of this
    iteration. With ``indirect=False`` the lower objective is not evaluated
    and the result is exactly ``grad_omega Phi``.
    """
    up = task.upper(batch, omega, theta)
    _check_objective(task.name, "upper", up)
    losses = {"upper": {"total": up.value, **up.parts}}
    if not indirect:
        hg = HyperGradient(up.grad_omega, np.zeros_like(up.grad_omega), 0.0, losses)
        return hg
    low = task.lower(batch, omega, theta)
    _check_objective(task.name, "lower", low)
    losses["lower"] = {"total": low.value, **low.parts}
    hg = gn_approx_hypergrad(up.grad_theta, low.grad_theta, low.grad_omega, up.grad_omega)
    hg.losses = losses
    return hg


class QuadraticTask:
    """A :class:`QuadraticBilevel` exposed through the task interface."""

    def __init__(self, problem: QuadraticBilevel, name: str = "Q"):
        self.problem = problem
        self.name = name

    def upper(self, batch, omega, theta) -> Objective:
        g_w, g_t = self.problem.upper_grads(omega, theta)
        return Objective(self.problem.upper(omega, theta), g_w, g_t, {})

    def lower(self, batch, omega, theta) -> Objective:
        g_w, g_t = self.problem.lower_grads(omega, theta)
        return Objective(self.problem.lower(omega, theta), g_w, g_t, {})


@dataclass
class Batch:
    """Stacked pairs: images are (N, 1, H, W), labels (N, H, W)."""

    x: np.ndarray
    y: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    u_m: np.ndarray
    labels: np.ndarray | None = None
    ids: tuple[str, ...] = ()

    def __len__(self) -> int:
        return self.x.shape[0]


class BilevelBatch:
    """Training and validation batches for one outer iteration.

    Lower objectives use ``train``, upper objectives ``val``. Fusion forwards
    are cached per split, so the cache must not outlive an update of omega.
    """

    def __init__(self, train: Batch, val: Batch):
        self.train = train
        self.val = val
        self._passes: dict[str, FusionPass] = {}

    def fusion(self, split: str, omega: ParamSet) -> FusionPass:
        fp = self._passes.get(split)
        if fp is None or fp.omega is not omega:
            b = self.train if split == "train" else self.val
            fp = FusionPass(b.x, b.y, omega)
            self._passes[split] = fp
        return fp

    def seed_pass(self, split: str, fp: FusionPass) -> None:
        self._passes[split] = fp


class VisualTask:
    """Upper: pixel + adversarial fusion loss; lower: gradient-penalty critic loss."""

    name = "V"

    def __init__(self, eta=10.0, penalty_on="fused", adv_weight=1.0, rng=None):
        self.eta = eta
        self.penalty_on = penalty_on
        self.adv_weight = adv_weight
        self.rng = rng

    def upper(self, batch: BilevelBatch, omega, theta_V) -> Objective:
        fp = batch.fusion("val", omega)
        v = batch.val
        loss = fusion_visual_loss(fp.value, v.x, v.y, v.m1, v.m2, theta_V, self.adv_weight)
        return Objective(loss.total, fp.pullback(loss.grads["u"]), loss.grads["theta"], loss.parts)

    def lower(self, batch: BilevelBatch, omega, theta_V) -> Objective:
        fp = batch.fusion("train", omega)
        loss = disc_loss(fp.value, batch.train.u_m, theta_V, self.eta, self.penalty_on, self.rng)
        return Objective(loss.total, fp.pullback(loss.grads["u"]), loss.grads["theta"], loss.parts)


class PerceptionTask:
    """Cross-entropy of the task head on validation (upper) and training (lower) data."""

    name = "P"

    def upper(self, batch: BilevelBatch, omega, theta_P) -> Objective:
        fp = batch.fusion("val", omega)
        loss = task_objective(fp.value, batch.val.labels, theta_P)
        return Objective(loss.total, fp.pullback(loss.grads["u"]), loss.grads["theta"], loss.parts)

    def lower(self, batch: BilevelBatch, omega, theta_P) -> Objective:
        fp = batch.fusion("train", omega)
        loss = task_objective(fp.value, batch.train.labels, theta_P)
        return Objective(loss.total, fp.pullback(loss.grads["u"]), loss.grads["theta"], loss.parts)
