"""Warm start, the bi-level outer loop, and the single-level baselines.

Per outer iteration of the bi-level mode:

1. ``inner_steps_V`` SGD steps of the critic on the gradient-penalty loss and
   ``inner_steps_P`` steps of the task head on cross-entropy, both on the
   fused training batch of the current fusion weights;
2. visual and perception hypergradients from validation-split upper
   objectives and training-split lower objectives;
3. task weights from the configured strategy;
4. one SGD step of the fusion weights on the weighted sum.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from ..aggregate import AggWeights, Aggregator, TaskStats, aggregate_step, sgd_step
from ..bilevel import (
    Batch,
    BilevelBatch,
    HyperGradient,
    PerceptionTask,
    VisualTask,
    assemble_task_gradient,
)
from ..errors import DataError, NumericError
from ..losses import disc_loss, fusion_visual_loss, task_objective
from ..metrics import MetricReport, report
from ..networks import FusionPass, ParamSet, fusion_forward, init_params
from .config import TrainConfig
from .data import BatchSampler, ModalityPair, load_dir, split_pairs, stack, synth_pairs
from .records import RunRecord, RunWriter

log = logging.getLogger(__name__)


@dataclass
class Streams:
    """Independent RNG streams derived from the run seed."""

    split: np.random.Generator
    warm: np.random.Generator
    batches: np.random.Generator
    weights: np.random.Generator
    penalty: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> Streams:
        children = np.random.SeedSequence(seed).spawn(5)
        return cls(*(np.random.default_rng(c) for c in children))


def dataset(config: TrainConfig) -> list[ModalityPair]:
    if config.data_source == "files":
        return load_dir(config.data_dir, config.class_count, config.bins)
    return synth_pairs(config.n_pairs, config.seed, config.image_size, config.class_count, config.bins)


def split_for(config: TrainConfig, pairs: list[ModalityPair]) -> tuple[list, list]:
    return split_pairs(pairs, config.split_fraction, Streams.from_seed(config.seed).split)


def fuse(pairs_or_batch, omega: ParamSet) -> np.ndarray:
    b = pairs_or_batch if isinstance(pairs_or_batch, Batch) else stack(pairs_or_batch)
    return fusion_forward(b.x, b.y, omega).data


def evaluate(omega: ParamSet, pairs: list[ModalityPair], theta_P: ParamSet | None = None, bins: int = 256):
    """Validation metrics: per-pair reports plus their means, task CE and pixel loss."""
    batch = stack(pairs)
    u = fuse(batch, omega)
    reports = [report(pid, u[i, 0], batch.x[i, 0], batch.y[i, 0], bins) for i, pid in enumerate(batch.ids)]
    pixel = fusion_visual_loss(u, batch.x, batch.y, batch.m1, batch.m2, None)
    summary = {
        "mi_x": float(np.mean([r.mi_x for r in reports])),
        "mi_y": float(np.mean([r.mi_y for r in reports])),
        "mi_total": float(np.mean([r.mi_total for r in reports])),
        "fmi": float(np.mean([r.fmi for r in reports])),
        "entropy_u": float(np.mean([r.entropy_u for r in reports])),
        "pixel": pixel.total,
    }
    if theta_P is not None and batch.labels is not None:
        summary["task_ce"] = task_objective(u, batch.labels, theta_P).total
    return summary, reports


class _Optim:
    """Per-ParamSet SGD with optional momentum buffers."""

    def __init__(self, momentum: float):
        self.momentum = momentum
        self.buffers: dict[str, dict] = {}

    def step(self, params: ParamSet, grad: np.ndarray, lr: float) -> None:
        sgd_step(params, grad, lr, self.momentum, self.buffers.setdefault(params.name, {}))

    def velocity(self, params: ParamSet) -> dict:
        return self.buffers.setdefault(params.name, {})


def warm_start(
    pairs: list[ModalityPair],
    config: TrainConfig,
    omega: ParamSet | None = None,
    rng: np.random.Generator | None = None,
    val_pairs: list[ModalityPair] | None = None,
) -> tuple[ParamSet, dict]:
    """Pretrain the fusion network on the pixel terms alone.

    Returns the weights and a log with per-step batch losses and the pixel
    loss on ``val_pairs`` (default: ``pairs``) before and after.
    """
    if not pairs:
        raise DataError("warm start needs at least one pair")
    omega = omega if omega is not None else init_params("omega", config.seed)
    rng = rng if rng is not None else Streams.from_seed(config.seed).warm
    probe = stack(val_pairs or pairs)

    def probe_pixel() -> float:
        u = fuse(probe, omega)
        return fusion_visual_loss(u, probe.x, probe.y, probe.m1, probe.m2, None).total

    info = {"steps": config.warm_steps, "pixel_init": probe_pixel(), "batch_losses": []}
    sampler = BatchSampler(pairs, config.batch_size, rng)
    opt = _Optim(config.momentum)
    for step in range(config.warm_steps):
        b = sampler.next()
        try:
            fp = FusionPass(b.x, b.y, omega)
            loss = fusion_visual_loss(fp.value, b.x, b.y, b.m1, b.m2, None)
            grad = fp.pullback(loss.grads["u"])
            if not np.isfinite(grad).all():
                raise NumericError("non-finite warm-start gradient")
        except NumericError as exc:
            last = info["batch_losses"][-1] if info["batch_losses"] else None
            raise NumericError(f"warm start diverged at step {step} (last finite loss {last}): {exc}") from exc
        opt.step(omega, grad, config.lr_warm)
        info["batch_losses"].append(loss.total)
    info["pixel_final"] = probe_pixel()
    return omega, info


class Trainer:
    def __init__(self, pairs: list[ModalityPair], config: TrainConfig):
        self.config = config
        self.streams = Streams.from_seed(config.seed)
        self.train_pairs, self.val_pairs = split_pairs(pairs, config.split_fraction, self.streams.split)
        self.val = stack(self.val_pairs)
        if self.val.labels is None and config.tasks != "V":
            raise DataError("perception task needs labels on every pair")
        self.omega = init_params("omega", config.seed)
        self.theta_V = init_params("theta_V", config.seed)
        self.theta_P = init_params("theta_P", config.seed, config.class_count)
        self.sampler = BatchSampler(self.train_pairs, config.batch_size, self.streams.batches)
        self.opt = _Optim(config.momentum)
        self.aggregator = Aggregator(
            config.aggregation,
            self.streams.weights,
            **(
                {}
                if config.aggregation == "rlw"
                else {
                    "manual": config.manual_weights,
                    "temperature": config.dwa_temperature,
                    "gradnorm_alpha": config.gradnorm_alpha,
                    "gradnorm_lr": config.gradnorm_lr,
                }
            ),
        )
        self.visual = VisualTask(config.eta, config.penalty_on, config.adv_weight, self.streams.penalty)
        self.perception = PerceptionTask()

    @property
    def use_V(self) -> bool:
        return self.config.tasks in ("V", "both")

    @property
    def use_P(self) -> bool:
        return self.config.tasks in ("P", "both")

    def evaluate(self) -> tuple[dict, list[MetricReport]]:
        return evaluate(self.omega, self.val_pairs, self.theta_P if self.use_P else None, self.config.bins)

    # --- lower level -------------------------------------------------------------------

    def _critic_steps(self, u: np.ndarray, b: Batch, lr: float, steps: int) -> dict | None:
        parts = None
        for _ in range(steps):
            loss = disc_loss(u, b.u_m, self.theta_V, self.config.eta, self.config.penalty_on, self.streams.penalty)
            self.opt.step(self.theta_V, loss.grads["theta"], lr)
            parts = {"total": loss.total, **loss.parts}
        return parts

    def _task_steps(self, u: np.ndarray, b: Batch, lr: float, steps: int) -> dict | None:
        parts = None
        for _ in range(steps):
            loss = task_objective(u, b.labels, self.theta_P)
            self.opt.step(self.theta_P, loss.grads["theta"], lr)
            parts = {"total": loss.total, **loss.parts}
        return parts

    # --- one outer iteration per mode -----------------------------------------------

    def step_bilevel(self, b: Batch, lr_o: float, lr_i: float) -> dict:
        cfg = self.config
        fp = FusionPass(b.x, b.y, self.omega)
        rec = {"inner": {}}
        if self.use_V:
            rec["inner"]["V"] = self._critic_steps(fp.value, b, lr_i, cfg.inner_steps_V)
        if self.use_P:
            rec["inner"]["P"] = self._task_steps(fp.value, b, lr_i, cfg.inner_steps_P)

        ctx = BilevelBatch(b, self.val)
        ctx.seed_pass("train", fp)
        zero = np.zeros(self.omega.count)
        G_V = G_P = HyperGradient(zero, zero, 0.0)
        if self.use_V:
            G_V = assemble_task_gradient(self.visual, ctx, self.omega, self.theta_V, cfg.indirect)
        if self.use_P:
            G_P = assemble_task_gradient(self.perception, ctx, self.omega, self.theta_P, cfg.indirect)

        if cfg.tasks == "both":
            stats = TaskStats(
                G_V.losses["upper"]["total"], G_P.losses["upper"]["total"], G_V.norm(), G_P.norm()
            )
            weights = self.aggregator.weights(stats)
        else:
            weights = AggWeights(1.0, 0.0, "manual") if cfg.tasks == "V" else AggWeights(0.0, 1.0, "manual")
        aggregate_step(G_V, G_P, weights, self.omega, lr_o, cfg.momentum, self.opt.velocity(self.omega))

        rec.update(
            {
                "lambda_V": weights.lambda_V,
                "lambda_P": weights.lambda_P,
                "losses_V": G_V.losses,
                "losses_P": G_P.losses,
                "coef_V": G_V.coefficient,
                "coef_P": G_P.coefficient,
                "grad_norm_V": G_V.norm(),
                "grad_norm_P": G_P.norm(),
                "indirect_norm_V": float(np.linalg.norm(G_V.indirect)),
                "indirect_norm_P": float(np.linalg.norm(G_P.indirect)),
            }
        )
        return rec

    def _joint_fusion_step(self, fp: FusionPass, b: Batch, lr_o: float, lr_i: float, update_task: bool) -> dict:
        cfg = self.config
        cot = np.zeros_like(fp.value)
        rec = {}
        if self.use_V:
            lv = fusion_visual_loss(fp.value, b.x, b.y, b.m1, b.m2, self.theta_V, cfg.adv_weight)
            cot = cot + lv.grads["u"]
            rec["Phi_V"] = {"total": lv.total, **lv.parts}
        if self.use_P:
            lp = task_objective(fp.value, b.labels, self.theta_P)
            cot = cot + lp.grads["u"]
            rec["Phi_P"] = {"total": lp.total, **lp.parts}
        grad = fp.pullback(cot)
        if not np.isfinite(grad).all():
            raise NumericError("non-finite fusion gradient")
        self.opt.step(self.omega, grad, lr_o)
        if update_task and self.use_P:
            self.opt.step(self.theta_P, lp.grads["theta"], lr_i)
        rec["grad_norm"] = float(np.linalg.norm(grad))
        return rec

    def step_unrolled(self, b: Batch, lr_o: float, lr_i: float) -> dict:
        fp = FusionPass(b.x, b.y, self.omega)
        rec = {"inner": {}}
        if self.use_V:
            rec["inner"]["V"] = self._critic_steps(fp.value, b, lr_i, self.config.inner_steps_V)
        rec.update(self._joint_fusion_step(fp, b, lr_o, lr_i, update_task=True))
        return rec

    def step_loop(self, it: int, b: Batch, lr_o: float, lr_i: float) -> dict:
        phase_len = max(1, self.sampler.per_epoch)
        fusion_phase = (it // phase_len) % 2 == 0 or not self.use_P
        fp = FusionPass(b.x, b.y, self.omega)
        rec = {"phase": "fusion" if fusion_phase else "task", "inner": {}}
        if fusion_phase:
            if self.use_V:
                rec["inner"]["V"] = self._critic_steps(fp.value, b, lr_i, self.config.inner_steps_V)
            rec.update(self._joint_fusion_step(fp, b, lr_o, lr_i, update_task=False))
        else:
            rec["inner"]["P"] = self._task_steps(fp.value, b, lr_i, max(1, self.config.inner_steps_P))
        return rec

    # --- driver ------------------------------------------------------------------------------

    def run(self, writer: RunWriter | None = None) -> RunRecord:
        cfg = self.config
        record = RunRecord(config=cfg.to_dict(), omega=self.omega, theta_V=self.theta_V, theta_P=self.theta_P)
        eval_every = cfg.eval_every or max(1, self.sampler.per_epoch)
        try:
            record.baseline, _ = self.evaluate()
            _, record.warm = warm_start(self.train_pairs, cfg, self.omega, self.streams.warm, self.val_pairs)
            record.warm = {k: v for k, v in record.warm.items()}
            record.post_warm, _ = self.evaluate()
            for it in range(cfg.iterations):
                start = time.perf_counter()
                lr_o = cfg.lr_at(cfg.lr_outer, it)
                lr_i = cfg.lr_at(cfg.lr_inner, it)
                b = self.sampler.next()
                if cfg.strategy_mode == "bilevel":
                    rec = self.step_bilevel(b, lr_o, lr_i)
                elif cfg.strategy_mode == "unrolled":
                    rec = self.step_unrolled(b, lr_o, lr_i)
                else:
                    rec = self.step_loop(it, b, lr_o, lr_i)
                rec.update({"iteration": it, "lr_outer": lr_o, "lr_inner": lr_i})
                rec["wall_time"] = time.perf_counter() - start
                record.iterations.append(rec)
                if writer is not None:
                    writer.iteration(rec)
                if (it + 1) % eval_every == 0 or it + 1 == cfg.iterations:
                    summary, _ = self.evaluate()
                    record.epochs.append({"iteration": it + 1, **summary})
            record.final, record.final_reports = self.evaluate()
            record.status = "completed"
        except NumericError as exc:
            record.status = f"diverged: {exc}"
            raise
        except KeyboardInterrupt:
            record.status = "interrupted"
            raise
        finally:
            if record.status != "completed" and not record.final and record.post_warm:
                try:
                    record.final, record.final_reports = self.evaluate()
                except NumericError:
                    pass
            if writer is not None:
                writer.close(record)
        return record


def train(pairs: list[ModalityPair], config: TrainConfig, out_dir=None) -> RunRecord:
    """Run one experiment single-threaded; writes a run directory if ``out_dir`` is set."""
    with threadpool_limits(1):
        trainer = Trainer(pairs, config)
        writer = RunWriter(out_dir) if out_dir is not None else None
        return trainer.run(writer)
