"""Budget-matched comparison sweeps over training modes and task weightings."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

from ..aggregate import STRATEGIES
from .config import MODES, TrainConfig
from .data import ModalityPair
from .train import train

STRATEGY_COLUMNS = ["mode", "mi_total", "fmi", "entropy_u", "task_ce", "pixel"]
AGG_COLUMNS = ["strategy", "mi_total", "fmi", "entropy_u", "task_ce", "pixel"]


def _row(pairs, config: TrainConfig, key: str, value: str) -> dict:
    final = train(pairs, config).final
    return {key: value, **{c: final.get(c, float("nan")) for c in STRATEGY_COLUMNS[1:]}}


def _sweep(pairs, configs, key, values, jobs):
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_row, pairs, cfg, key, v) for cfg, v in zip(configs, values)]
            return [f.result() for f in futures]
    return [_row(pairs, cfg, key, v) for cfg, v in zip(configs, values)]


def strategy_baselines(pairs: list[ModalityPair], config: TrainConfig, jobs: int = 1) -> list[dict]:
    """One row per training mode (bilevel, unrolled, loop) at identical budgets."""
    configs = [config.with_(strategy_mode=m) for m in MODES]
    return _sweep(pairs, configs, "mode", MODES, jobs)


def aggregation_baselines(pairs: list[ModalityPair], config: TrainConfig, jobs: int = 1) -> list[dict]:
    """One row per task-weighting strategy, bi-level mode, identical budgets."""
    configs = [config.with_(aggregation=s, strategy_mode="bilevel", tasks="both") for s in STRATEGIES]
    return _sweep(pairs, configs, "strategy", STRATEGIES, jobs)
