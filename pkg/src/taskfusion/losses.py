"""Scalar objectives for the critic, the fusion network and the task head.

Every loss returns a :class:`LossValue` carrying the scalar total, a named
breakdown, and gradients of the total with respect to the fused batch
(``grads["u"]``) and the network's own parameters (``grads["theta"]``, flat
in ParamSet order). Gradients w.r.t. the fusion weights are obtained by the
caller by pulling ``grads["u"]`` back through the fusion network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, LabelRangeError, NumericError, ShapeError
from .networks import ParamSet, as_batch, discriminator_forward, task_forward
from .tensor import Tape, Tensor

PENALTY_MODES = ("fused", "interpolates")


@dataclass
class LossValue:
    total: float
    parts: dict[str, float]
    grads: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def check_finite(self, name: str) -> LossValue:
        for key, val in {"total": self.total, **self.parts}.items():
            if not np.isfinite(val):
                raise NumericError(f"{name}: non-finite {key} ({val})")
        return self


def _critic_input_grad(s: np.ndarray, theta_V: ParamSet, weights: np.ndarray | None = None):
    """Gradient of sum_n w_n T(s_n) w.r.t. the batch and the critic weights."""
    theta_V.zero_grad()
    leaf = Tensor(s, requires_grad=True)
    with Tape() as tape:
        scores = discriminator_forward(leaf, theta_V)
        if weights is None:
            out = T.sum(scores)
        else:
            out = T.sum(T.mul(scores, Tensor(weights.reshape(-1, 1))))
    tape.backward(out)
    g_theta = theta_V.flat_grad()
    theta_V.zero_grad()
    return leaf.grad, g_theta


def _directional_hvp(s, direction, theta_V: ParamSet, weights, step: float, shrinks: int = 6):
    """Derivative of the weighted critic gradients along ``direction``.

    The critic is piecewise linear in its input, so a central difference is
    exact unless the step crosses an activation kink, where it returns a
    jump divided by the step. Such crossings show up as disagreement between
    the forward and backward one-sided differences; the step then shrinks
    tenfold and the difference is retaken.
    """
    g0_s, g0_t = _critic_input_grad(s, theta_V, weights)
    for _ in range(shrinks + 1):
        gp_s, gp_t = _critic_input_grad(s + step * direction, theta_V, weights)
        gm_s, gm_t = _critic_input_grad(s - step * direction, theta_V, weights)
        central = ((gp_s - gm_s) / (2 * step), (gp_t - gm_t) / (2 * step))
        consistent = all(
            np.allclose((p - c) / step, (c - m) / step, rtol=1e-5, atol=1e-8 * max(1.0, np.abs(mid).max()))
            for p, c, m, mid in ((gp_s, g0_s, gm_s, central[0]), (gp_t, g0_t, gm_t, central[1]))
        )
        if consistent:
            break
        step /= 10.0
    return central


def gradient_penalty(samples, theta_V: ParamSet) -> tuple[float, np.ndarray]:
    """Mean of (||grad_s T(s)||_2 - 1)^2 over the batch, plus per-sample norms."""
    g, _ = _critic_input_grad(as_batch(samples), theta_V)
    norms = np.sqrt((g.reshape(g.shape[0], -1) ** 2).sum(axis=1))
    return float(np.mean((norms - 1.0) ** 2)), norms


def disc_loss(
    u,
    u_m,
    theta_V: ParamSet,
    eta: float = 10.0,
    penalty_on: str = "fused",
    rng: np.random.Generator | None = None,
    fd_step: float = 1e-4,
) -> LossValue:
    """Wasserstein critic loss ``E[T(u)] - E[T(u_m)] + eta * penalty``.

    The penalty's own gradient needs a Hessian-vector product of the critic;
    it is taken as a central difference of first-order gradients along the
    unit input-gradient direction with step ``fd_step``.
    """
    if eta < 0:
        raise ConfigError(f"penalty weight eta must be >= 0, got {eta}")
    if penalty_on not in PENALTY_MODES:
        raise ConfigError(f"penalty_on must be one of {PENALTY_MODES}, got {penalty_on!r}")
    u, u_m = as_batch(u), as_batch(u_m)
    if u.shape != u_m.shape:
        raise ShapeError(f"disc_loss: fused {u.shape} and pseudo-fused {u_m.shape} differ")
    n = u.shape[0]

    theta_V.zero_grad()
    leaf = Tensor(u, requires_grad=True)
    with Tape() as tape:
        fake = T.mean(discriminator_forward(leaf, theta_V))
        real = T.mean(discriminator_forward(u_m, theta_V))
        wasserstein = T.sub(fake, real)
    tape.backward(wasserstein)
    g_theta = theta_V.flat_grad()
    g_u = leaf.grad.copy()
    theta_V.zero_grad()

    if penalty_on == "fused":
        alpha = np.ones((n, 1, 1, 1))
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        alpha = rng.random((n, 1, 1, 1))
    samples = alpha * u + (1.0 - alpha) * u_m
    g_s, _ = _critic_input_grad(samples, theta_V)
    flat = g_s.reshape(n, -1)
    norms = np.sqrt((flat**2).sum(axis=1))
    penalty = float(np.mean((norms - 1.0) ** 2))

    if eta > 0:
        coef = 2.0 * (norms - 1.0) / n
        direction = np.where(norms[:, None] > 0, flat / np.where(norms > 0, norms, 1.0)[:, None], 0.0)
        direction = direction.reshape(samples.shape)
        hv_s, hv_theta = _directional_hvp(samples, direction, theta_V, coef, fd_step)
        g_theta = g_theta + eta * hv_theta
        g_u = g_u + eta * alpha * hv_s

    w = wasserstein.item()
    return LossValue(
        total=w + eta * penalty,
        parts={"wasserstein": w, "penalty": penalty},
        grads={"u": g_u, "theta": g_theta},
    ).check_finite("disc_loss")


def fusion_visual_loss(
    u,
    x,
    y,
    m1,
    m2,
    theta_V: ParamSet | None,
    adv_weight: float = 1.0,
) -> LossValue:
    """``mean(u - m1 x)^2 + mean(u - m2 y)^2 - adv_weight * E[T(u)]``.

    With ``theta_V=None`` the adversarial term is dropped (warm start).
    """
    u = as_batch(u)
    tx = as_batch(np.asarray(m1) * np.asarray(x))
    ty = as_batch(np.asarray(m2) * np.asarray(y))
    if not (u.shape == tx.shape == ty.shape):
        raise ShapeError(f"fusion_visual_loss: shapes {u.shape}, {tx.shape}, {ty.shape} differ")

    if theta_V is not None:
        theta_V.zero_grad()
    leaf = Tensor(u, requires_grad=True)
    with Tape() as tape:
        pixel_x = T.mean(T.square(T.sub(leaf, tx)))
        pixel_y = T.mean(T.square(T.sub(leaf, ty)))
        total = T.add(pixel_x, pixel_y)
        adv = None
        if theta_V is not None:
            adv = T.mean(discriminator_forward(leaf, theta_V))
            total = T.sub(total, T.scale(adv, adv_weight))
    tape.backward(total)
    grads = {"u": leaf.grad}
    if theta_V is not None:
        grads["theta"] = theta_V.flat_grad()
        theta_V.zero_grad()
    return LossValue(
        total=total.item(),
        parts={
            "pixel_x": pixel_x.item(),
            "pixel_y": pixel_y.item(),
            "adv": 0.0 if adv is None else adv.item(),
        },
        grads=grads,
    ).check_finite("fusion_visual_loss")


def check_labels(labels, classes: int) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.size and (not np.issubdtype(lab.dtype, np.integer)):
        if not np.array_equal(lab, np.round(lab)):
            raise LabelRangeError("labels must be integers")
        lab = lab.astype(np.int64)
    if lab.size and (lab.min() < 0 or lab.max() >= classes):
        raise LabelRangeError(f"labels must lie in [0, {classes - 1}], got range [{lab.min()}, {lab.max()}]")
    return lab


def _one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    return np.moveaxis(np.eye(classes)[labels], -1, 1)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Taped mean per-pixel cross-entropy; ``logits`` is (N, C, H, W)."""
    classes = logits.shape[1]
    lab = check_labels(labels, classes)
    if lab.ndim == 2:
        lab = lab[None]
    if lab.shape != (logits.shape[0], *logits.shape[2:]):
        raise ShapeError(f"labels {lab.shape} do not match logits {logits.shape}")
    picked = T.sum(T.mul(T.log_softmax(logits, axis=1), _one_hot(lab, classes)))
    return T.scale(picked, -1.0 / lab.size)


def task_loss(logits, labels) -> LossValue:
    """Mean per-pixel cross-entropy with its gradient w.r.t. the logits."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    leaf = Tensor(arr, requires_grad=True)
    with Tape() as tape:
        ce = cross_entropy(leaf, labels)
    tape.backward(ce)
    return LossValue(ce.item(), {"ce": ce.item()}, {"logits": leaf.grad}).check_finite("task_loss")


def task_objective(u, labels, theta_P: ParamSet) -> LossValue:
    """Cross-entropy of the task head on ``u`` with gradients w.r.t. u and theta_P."""
    theta_P.zero_grad()
    leaf = Tensor(as_batch(u), requires_grad=True)
    with Tape() as tape:
        ce = cross_entropy(task_forward(leaf, theta_P), labels)
    tape.backward(ce)
    grads = {"u": leaf.grad, "theta": theta_P.flat_grad()}
    theta_P.zero_grad()
    return LossValue(ce.item(), {"ce": ce.item()}, grads).check_finite("task_loss")
