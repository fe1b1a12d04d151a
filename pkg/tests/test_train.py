import json

import numpy as np
import pytest

from taskfusion.checks import smoke_config
from taskfusion.errors import NumericError
from taskfusion.harness.data import ModalityPair, synth_pairs
from taskfusion.harness.records import read_metrics_csv
from taskfusion.harness.sweeps import aggregation_baselines, strategy_baselines
from taskfusion.harness.train import Trainer, dataset, fuse, train, warm_start
from taskfusion.losses import fusion_visual_loss
from taskfusion.networks import FusionPass, init_params


def tiny(**kw):
    return smoke_config(**{"warm_steps": 2, "iterations": 2, **kw})


@pytest.fixture(scope="module")
def pairs():
    return dataset(tiny())


def test_warm_start_with_no_steps_is_identity(pairs):
    cfg = tiny(warm_steps=0)
    omega = init_params("omega", cfg.seed)
    before = omega.flatten()
    out, info = warm_start(pairs, cfg, omega)
    np.testing.assert_array_equal(out.flatten(), before)
    assert info["pixel_init"] == info["pixel_final"] and info["batch_losses"] == []


def test_warm_start_on_identical_modalities_moves_toward_half():
    # with x == y both saliency weights are 1/2, so the pixel loss is minimised by u = x / 2
    pairs = [ModalityPair(p.x, p.x.copy(), p.labels, p.id).prepare() for p in synth_pairs(4, seed=2, size=16)]
    np.testing.assert_allclose(pairs[0].m1, 0.5)
    cfg = tiny(warm_steps=60, lr_warm=0.02)
    omega, info = warm_start(pairs, cfg)
    assert info["pixel_final"] < info["pixel_init"]
    u = fuse(pairs, omega)
    target = np.stack([p.x for p in pairs])[:, None] / 2
    start = fuse(pairs, init_params("omega", cfg.seed))
    assert np.mean(np.abs(u - target)) < np.mean(np.abs(start - target))


def test_single_step_reduces_to_sgd_on_upper_gradient(pairs):
    cfg = tiny(warm_steps=0, iterations=1, inner_steps_V=0, inner_steps_P=0,
               aggregation="manual", manual_weights=(1.0, 0.0), indirect=False)
    trainer = Trainer(pairs, cfg)
    omega0 = trainer.omega.copy()
    fp = FusionPass(trainer.val.x, trainer.val.y, omega0)
    v = trainer.val
    loss = fusion_visual_loss(fp.value, v.x, v.y, v.m1, v.m2, trainer.theta_V.copy(), cfg.adv_weight)
    expected = omega0.flatten() - cfg.lr_at(cfg.lr_outer, 0) * fp.pullback(loss.grads["u"])
    record = trainer.run()
    assert record.status == "completed"
    np.testing.assert_allclose(trainer.omega.flatten(), expected, rtol=1e-10, atol=1e-12)


def test_unrolled_and_bilevel_differ(pairs):
    a = train(pairs, tiny(strategy_mode="bilevel"))
    b = train(pairs, tiny(strategy_mode="unrolled"))
    assert not np.array_equal(a.omega.flatten(), b.omega.flatten())


def test_same_seed_is_bit_identical(pairs):
    a = train(pairs, tiny())
    b = train(pairs, tiny())
    assert a.stable_iterations() == b.stable_iterations()
    assert a.final == b.final
    np.testing.assert_array_equal(a.omega.flatten(), b.omega.flatten())


def test_different_seed_differs():
    a = train(dataset(tiny(seed=0)), tiny(seed=0))
    b = train(dataset(tiny(seed=1)), tiny(seed=1))
    assert a.final != b.final


def test_loop_mode_alternates_phases(pairs):
    cfg = tiny(strategy_mode="loop", iterations=6, batch_size=3)
    rec = train(pairs, cfg)
    phases = [r["phase"] for r in rec.iterations]
    assert "fusion" in phases and "task" in phases
    assert phases[0] == "fusion"


def test_single_task_runs(pairs):
    for tasks in ("V", "P"):
        rec = train(pairs, tiny(tasks=tasks))
        assert rec.status == "completed"
        lam = (rec.iterations[0]["lambda_V"], rec.iterations[0]["lambda_P"])
        assert lam == ((1.0, 0.0) if tasks == "V" else (0.0, 1.0))


def test_run_directory(tmp_path, pairs):
    rec = train(pairs, tiny(), out_dir=tmp_path)
    lines = (tmp_path / "records.jsonl").read_text().splitlines()
    assert len(lines) == 2 and json.loads(lines[1])["iteration"] == 1
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["status"] == "completed" and summary["iterations_completed"] == 2
    rows = read_metrics_csv(tmp_path / "metrics.csv")
    assert [r["pair_id"] for r in rows] == [r.pair_id for r in rec.final_reports]
    for name in ("omega", "theta_V", "theta_P"):
        assert (tmp_path / f"{name}.ckpt").stat().st_size > 0


def test_divergence_is_recorded(tmp_path, pairs, monkeypatch):
    def boom(self, *a, **k):
        raise NumericError("injected")

    monkeypatch.setattr(Trainer, "step_bilevel", boom)
    with pytest.raises(NumericError):
        train(pairs, tiny(), out_dir=tmp_path)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["status"].startswith("diverged") and summary["final"]


def test_interrupt_is_recorded(tmp_path, pairs, monkeypatch):
    def stop(self, *a, **k):
        raise KeyboardInterrupt

    monkeypatch.setattr(Trainer, "step_bilevel", stop)
    with pytest.raises(KeyboardInterrupt):
        train(pairs, tiny(), out_dir=tmp_path)
    assert json.loads((tmp_path / "summary.json").read_text())["status"] == "interrupted"


def test_sweep_tables(pairs):
    cfg = tiny(iterations=1)
    rows = strategy_baselines(pairs, cfg)
    assert [r["mode"] for r in rows] == ["bilevel", "unrolled", "loop"]
    rows = aggregation_baselines(pairs, cfg)
    assert len(rows) == 5
    assert all(np.isfinite(r["mi_total"]) for r in rows)
