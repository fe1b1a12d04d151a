"""Oracle checks behind ``taskfusion selftest`` and the acceptance suite.

Each check returns a :class:`CheckResult` with the measured quantity next to
its threshold. Everything is seeded, so repeated runs print identical
numbers (wall times aside).
"""

from __future__ import annotations

import contextlib
import io
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .aggregate import rlw_sample
from .bilevel import QuadraticBilevel, exact_hypergrad, gn_approx_hypergrad
from .losses import cross_entropy, disc_loss
from .metrics import fmi, mutual_information
from .networks import (
    ParamSet,
    discriminator_forward,
    dump_params,
    fusion_forward,
    init_params,
    load_params,
    parse_params,
    save_params,
    task_forward,
)
from .saliency import pseudo_fusion, vsm
from .tensor import Tensor, grad_check

# overrides of TrainConfig defaults for the desk-scale end-to-end run
DESK = {
    "warm_steps": 500,
    "iterations": 200,
    "lr_warm": 0.02,
    "lr_outer": 0.005,
    "lr_inner": 0.005,
    "adv_weight": 0.1,
    "inner_steps_P": 3,
    "penalty_on": "interpolates",
}
# reduced budget for the sweep and persistence checks
SMOKE = {"warm_steps": 20, "iterations": 6, "n_pairs": 8, "image_size": 16}


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _timed(name, fn) -> CheckResult:
    start = time.perf_counter()
    passed, detail = fn()
    return CheckResult(name, bool(passed), detail, time.perf_counter() - start)


# --- hypergradients ----------------------------------------------------------------


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def hypergrad_fd_error(seed: int) -> float:
    rng = np.random.default_rng(seed)
    n, m = (int(v) for v in rng.integers(1, 6, size=2))
    problem = QuadraticBilevel.random(rng, n, m)
    omega = rng.standard_normal(m)
    exact = exact_hypergrad(problem, omega).total
    numeric = central_diff(problem.reduced_upper, omega)
    return float(np.max(np.abs(exact - numeric) / np.maximum(1.0, np.abs(numeric))))


def check_hypergrad_oracle() -> CheckResult:
    def run():
        start = time.perf_counter()
        worst = max(hypergrad_fd_error(s) for s in range(20))
        elapsed = time.perf_counter() - start
        return worst < 1e-6 and elapsed < 5.0, f"max rel err {worst:.2e} < 1e-6 over 20 instances, {elapsed:.3f}s < 5s"

    return _timed("hypergradient oracle agreement", run)


def check_gn_coefficient() -> CheckResult:
    def run():
        rng = np.random.default_rng(0)
        g = rng.standard_normal(6)
        w_phi, w_Phi = rng.standard_normal(4), rng.standard_normal(4)
        same = gn_approx_hypergrad(g, g, w_phi, w_Phi)
        orth = gn_approx_hypergrad([1.0, 0.0, 2.0], [0.0, 3.0, 0.0], w_phi, w_Phi)
        half = gn_approx_hypergrad([1.0, 0.0], [1.0, 1.0], w_phi, w_Phi)
        errs = [
            abs(same.coefficient - 1.0),
            float(np.max(np.abs(same.indirect - w_phi))),
            abs(orth.coefficient),
            float(np.max(np.abs(orth.indirect))),
            abs(half.coefficient - 0.5),
        ]
        worst = max(errs)
        return worst <= 1e-12, (
            f"c(aligned)={same.coefficient!r}, c(orthogonal)={orth.coefficient!r}, "
            f"c((1,0),(1,1))={half.coefficient!r}; max dev {worst:.1e} <= 1e-12"
        )

    return _timed("first-order coefficient closed forms", run)


# --- autodiff -------------------------------------------------------------------------


def _weighted(out: Tensor, rng_seed: int) -> Tensor:
    w = np.random.default_rng(rng_seed).standard_normal(out.shape)
    return T.sum(T.mul(out, Tensor(w)))


def op_gradchecks(size: int = 8, seed: int = 0) -> dict[str, float]:
    """Worst relative error of every closed-set op on seeded ``size x size`` data."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((size, size))
    b = rng.standard_normal((size, size))
    pos = np.abs(rng.standard_normal((size, size))) + 0.5
    img = rng.standard_normal((2, 2, size, size))
    ker = rng.standard_normal((3, 2, 3, 3)) * 0.3
    bias = rng.standard_normal(3)
    cases = {
        "add": (lambda p, q: _weighted(T.add(p, q), 1), [a, b]),
        "sub": (lambda p, q: _weighted(T.sub(p, q), 2), [a, b]),
        "mul": (lambda p, q: _weighted(T.mul(p, q), 3), [a, b]),
        "scale": (lambda p: _weighted(T.scale(p, -1.7), 4), [a]),
        "matmul": (lambda p, q: _weighted(T.matmul(p, q), 5), [a, b]),
        "leaky_relu": (lambda p: _weighted(T.leaky_relu(p, 0.2), 6), [a]),
        "sigmoid": (lambda p: _weighted(T.sigmoid(p), 7), [a]),
        "mean": (lambda p: T.mul(T.mean(T.mul(p, p)), Tensor(3.0)), [a]),
        "mean_axis": (lambda p: _weighted(T.mean(p, axis=0), 8), [a]),
        "sum": (lambda p: _weighted(T.sum(p, axis=1, keepdims=True), 9), [a]),
        "square": (lambda p: _weighted(T.square(p), 10), [a]),
        "sqrt": (lambda p: _weighted(T.sqrt(p), 11), [pos]),
        "concat": (lambda p, q: _weighted(T.concat([p, q], axis=1), 12), [a, b]),
        "l2_norm": (lambda p: _weighted(T.l2_norm(p), 18), [a]),
        "log_softmax": (lambda p: _weighted(T.log_softmax(p, axis=1), 13), [a]),
        "conv2d": (lambda x, w, c: _weighted(T.conv2d(x, w, c, padding=1), 14), [img, ker, bias]),
        "conv2d_stride2": (lambda x, w, c: _weighted(T.conv2d(x, w, c, stride=2, padding=1), 15), [img, ker, bias]),
        "conv2d_dilated": (lambda x, w: _weighted(T.conv2d(x, w, padding=2, dilation=2), 16), [img, ker]),
        "conv2d_1x1": (lambda x, w: _weighted(T.conv2d(x, w), 17), [img, ker[:, :, :1, :1]]),
    }
    return {name: grad_check(f, at) for name, (f, at) in cases.items()}


def _param_leaves(params: ParamSet, leaves) -> ParamSet:
    return ParamSet(params.name, dict(zip(params.entries, leaves)))


def network_gradchecks(size: int = 8, seed: int = 0, max_coords: int = 24) -> dict[str, float]:
    """Gradchecks of the three forwards w.r.t. inputs and sampled parameters.

    The critic needs at least 16x16 inputs (four stride-2 stages), so it is
    checked at 16x16.
    """
    rng = np.random.default_rng(seed)
    x = rng.random((1, 1, size, size))
    y = rng.random((1, 1, size, size))
    u16 = rng.random((2, 1, 16, 16))
    labels = rng.integers(0, 3, size=(1, size, size))
    omega = init_params("omega", seed)
    theta_V = init_params("theta_V", seed + 1)
    theta_P = init_params("theta_P", seed + 2)
    kw = {"max_coords": max_coords, "seed": seed}

    def fusion(*leaves):
        return _weighted(fusion_forward(leaves[0], leaves[1], _param_leaves(omega, leaves[2:])), 21)

    def critic(*leaves):
        return _weighted(discriminator_forward(leaves[0], _param_leaves(theta_V, leaves[1:])), 22)

    def task(*leaves):
        return cross_entropy(task_forward(leaves[0], _param_leaves(theta_P, leaves[1:])), labels)

    out = {}
    for name, f, inputs, params in (
        ("fusion_forward", fusion, [x, y], omega),
        ("discriminator_forward", critic, [u16], theta_V),
        ("task_forward+cross_entropy", task, [x], theta_P),
    ):
        out[name] = grad_check(f, inputs + [t.data for t in params.tensors()], **kw)
    return out


def check_gradcheck() -> CheckResult:
    def run():
        start = time.perf_counter()
        errs = {**op_gradchecks(), **network_gradchecks()}
        elapsed = time.perf_counter() - start
        name, worst = max(errs.items(), key=lambda kv: kv[1])
        ok = worst < 1e-5 and elapsed < 30.0
        return ok, f"{len(errs)} cases, worst {worst:.2e} ({name}) < 1e-5, {elapsed:.1f}s < 30s"

    return _timed("autodiff gradcheck", run)


# --- gradient penalty --------------------------------------------------------------------


def fd_critic_input_norms(u: np.ndarray, theta_V: ParamSet, h: float = 1e-6) -> np.ndarray:
    """Per-sample ||grad_u T_V(u)|| from central differences of critic scores only."""
    norms = []
    for s in u:
        n_pix = s.size
        eye = np.eye(n_pix).reshape((n_pix,) + s.shape)
        plus = discriminator_forward(s[None] + h * eye, theta_V).data[:, 0]
        minus = discriminator_forward(s[None] - h * eye, theta_V).data[:, 0]
        norms.append(np.linalg.norm((plus - minus) / (2 * h)))
    return np.array(norms)


def penalty_fd_error(seed: int) -> float:
    rng = np.random.default_rng(seed)
    u = rng.random((2, 1, 16, 16))
    u_m = rng.random((2, 1, 16, 16))
    theta_V = init_params("theta_V", seed)
    got = disc_loss(u, u_m, theta_V, eta=10.0, penalty_on="fused").parts["penalty"]
    want = float(np.mean((fd_critic_input_norms(u, theta_V) - 1.0) ** 2))
    return abs(got - want)


def check_penalty_oracle() -> CheckResult:
    def run():
        worst = max(penalty_fd_error(s) for s in range(5))
        return worst < 1e-4, f"max |penalty - fd penalty| {worst:.2e} < 1e-4 over 5 cases"

    return _timed("gradient-penalty oracle", run)


# --- saliency ------------------------------------------------------------------------------


def check_saliency() -> CheckResult:
    def run():
        rng = np.random.default_rng(0)
        sum_dev, bracket_dev = 0.0, 0.0
        for _ in range(20):
            x, y = rng.random((2, 24, 24)) ** rng.uniform(0.5, 3.0, size=(2, 1, 1))
            pf = pseudo_fusion(x, y)
            sum_dev = max(sum_dev, float(np.max(np.abs(pf.m1 + pf.m2 - 1.0))))
            lo, hi = np.minimum(x, y), np.maximum(x, y)
            bracket_dev = max(bracket_dev, float(np.max(np.maximum(lo - pf.u_m, pf.u_m - hi))))
        got = vsm(np.array([[0.0, 0.0], [0.0, 1.0]]))
        # S(level) = sum_j hist(j) |level - j| over levels {0, 255}: 255 and 765
        want = np.array([[255.0, 255.0], [255.0, 765.0]]) / 765.0
        exact = bool(np.array_equal(got, want))
        ok = sum_dev <= 1e-12 and bracket_dev <= 0.0 and exact
        return ok, (
            f"max |m1+m2-1| {sum_dev:.1e} <= 1e-12, u_m bracket excess {max(bracket_dev, 0.0):.1e} <= 0, "
            f"2x2 VSM exact={exact}"
        )

    return _timed("saliency and pseudo fusion", run)


# --- aggregation ------------------------------------------------------------------------------


def rlw_statistics(n: int = 10_000, seed: int = 0) -> tuple[float, float]:
    rng = np.random.default_rng(seed)
    lam = np.array([rlw_sample(rng).lambda_V for _ in range(n)])
    c = lam - lam.mean()
    lag1 = float((c[1:] @ c[:-1]) / (c @ c))
    return float(lam.mean()), lag1


def check_rlw() -> CheckResult:
    def run():
        start = time.perf_counter()
        mean, lag1 = rlw_statistics()
        elapsed = time.perf_counter() - start
        ok = 0.48 <= mean <= 0.52 and abs(lag1) < 0.05 and elapsed < 1.0
        return ok, f"mean lambda_V {mean:.4f} in [0.48, 0.52], |lag-1 autocorr| {abs(lag1):.4f} < 0.05, {elapsed:.3f}s < 1s"

    return _timed("RLW statistics", run)


# --- metrics -------------------------------------------------------------------------------------


def check_metric_identities() -> CheckResult:
    def run():
        two = np.zeros((8, 8))
        two[:, 4:] = 1.0
        self_mi = mutual_information(two, two)
        rng = np.random.default_rng(0)
        sym = 0.0
        for _ in range(10):
            a, b = rng.random((2, 32, 32))
            b = 0.5 * a + 0.5 * b
            sym = max(sym, abs(mutual_information(a, b) - mutual_information(b, a)))
        yy, xx = np.mgrid[0:32, 0:32] / 31.0
        u = 0.5 + 0.25 * np.sin(6 * xx) * np.cos(4 * yy) + 0.1 * rng.random((32, 32))
        f_self = fmi(u, u, u)
        ok = abs(self_mi - 1.0) <= 1e-9 and sym <= 1e-12 and f_self == 1.0
        return ok, f"MI(a,a)={self_mi!r} (1 to 1e-9), symmetry dev {sym:.1e} <= 1e-12, FMI(u,u,u)={f_self!r}"

    return _timed("metric identities", run)


# --- harness ---------------------------------------------------------------------------------------


def desk_config(**overrides):
    from .harness.config import TrainConfig

    return TrainConfig(**{**DESK, **overrides})


def smoke_config(**overrides):
    return desk_config(**{**SMOKE, **overrides})


def end_to_end_measurements(config=None, out_dir=None) -> dict:
    """Train on the desk configuration and collect the quantities the criterion compares."""
    from .harness.train import dataset, train

    cfg = config or desk_config()
    start = time.perf_counter()
    record = train(dataset(cfg), cfg, out_dir=out_dir)
    elapsed = time.perf_counter() - start
    warm = record.warm
    return {
        "seconds": elapsed,
        "status": record.status,
        "pixel_init": warm["pixel_init"],
        "pixel_post_warm": warm["pixel_final"],
        "pixel_drop": 1.0 - warm["pixel_final"] / warm["pixel_init"],
        "task_ce_post_warm": record.post_warm["task_ce"],
        "task_ce_final": record.final["task_ce"],
        "task_ce_drop": 1.0 - record.final["task_ce"] / record.post_warm["task_ce"],
        "mi_total_untrained": record.baseline["mi_total"],
        "mi_total_post_warm": record.post_warm["mi_total"],
        "mi_total_final": record.final["mi_total"],
        "baseline": record.baseline,
        "post_warm": record.post_warm,
        "final": record.final,
    }


def end_to_end_criteria(m: dict) -> dict[str, tuple[bool, str]]:
    return {
        "runtime": (m["seconds"] < 300.0, f"{m['seconds']:.1f}s < 300s"),
        "warm pixel drop": (m["pixel_drop"] >= 0.5, f"{m['pixel_drop']:.1%} >= 50%"),
        "task CE drop": (m["task_ce_drop"] >= 0.3, f"{m['task_ce_drop']:.1%} >= 30%"),
        "final MI vs untrained": (
            m["mi_total_final"] > m["mi_total_untrained"],
            f"{m['mi_total_final']:.4f} > {m['mi_total_untrained']:.4f}",
        ),
    }


def check_end_to_end(measurements: dict | None = None) -> CheckResult:
    def run():
        m = measurements or end_to_end_measurements()
        crit = end_to_end_criteria(m)
        ok = m["status"] == "completed" and all(p for p, _ in crit.values())
        return ok, "; ".join(f"{k} {'ok' if p else 'MISSED'} ({d})" for k, (p, d) in crit.items())

    return _timed("end-to-end desk run", run)


def sweep_tables(config=None) -> dict[str, bytes]:
    from .harness.records import write_table
    from .harness.sweeps import AGG_COLUMNS, STRATEGY_COLUMNS, aggregation_baselines, strategy_baselines
    from .harness.train import dataset

    cfg = config or smoke_config()
    pairs = dataset(cfg)
    out = {}
    with tempfile.TemporaryDirectory() as tmp:
        write_table(strategy_baselines(pairs, cfg), STRATEGY_COLUMNS, tmp, "strategy")
        write_table(aggregation_baselines(pairs, cfg), AGG_COLUMNS, tmp, "agg")
        for stem in ("strategy", "agg"):
            out[stem] = (Path(tmp) / f"{stem}.csv").read_bytes()
    return out


def check_sweeps() -> CheckResult:
    def run():
        first, second = sweep_tables(), sweep_tables()
        rows = {k: v.decode().strip().splitlines() for k, v in first.items()}
        complete = len(rows["strategy"]) == 4 and len(rows["agg"]) == 6
        no_nan = all("nan" not in line for lines in rows.values() for line in lines)
        identical = first == second
        ok = complete and no_nan and identical
        return ok, f"3 mode rows and 5 strategy rows complete={complete and no_nan}, bit-identical reruns={identical}"

    return _timed("strategy and aggregation sweeps", run)


def check_persistence() -> CheckResult:
    def run():
        from .cli import main
        from .harness.records import read_metrics_csv

        params = init_params("omega", 7)
        params.step_count = 3
        blob = dump_params(params)
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            save_params(parse_params(blob), root / "a.ckpt")
            save_params(load_params(root / "a.ckpt"), root / "b.ckpt")
            round_trip = blob == (root / "a.ckpt").read_bytes() == (root / "b.ckpt").read_bytes()

            smoke = smoke_config()
            smoke.dump(root / "smoke.json")
            with contextlib.redirect_stdout(io.StringIO()):
                codes = [
                    main(["train", "--config", str(root / "smoke.json"), "--out", str(root / "run")]),
                    main(["eval", "--run", str(root / "run"), "--out", str(root / "eval")]),
                ]
            recorded = read_metrics_csv(root / "run" / "metrics.csv")
            again = read_metrics_csv(root / "eval" / "metrics.csv")
        dev = max(
            abs(r[k] - s[k]) for r, s in zip(recorded, again) for k in r if k != "pair_id"
        ) if len(recorded) == len(again) else float("inf")
        ok = round_trip and codes == [0, 0] and dev <= 1e-9
        return ok, f"checkpoint bytes identical={round_trip}, train->eval max metric dev {dev:.1e} <= 1e-9"

    return _timed("persistence round trips", run)


FAST_CHECKS = (
    check_hypergrad_oracle,
    check_gn_coefficient,
    check_gradcheck,
    check_penalty_oracle,
    check_saliency,
    check_rlw,
    check_metric_identities,
    check_persistence,
)


def run_checks(full: bool = False) -> list[CheckResult]:
    checks = list(FAST_CHECKS)
    if full:
        checks += [check_end_to_end, check_sweeps]
    return [c() for c in checks]
