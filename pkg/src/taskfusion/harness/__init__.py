"""Experiment harness: configuration, data, training driver and sweeps."""

from .config import TrainConfig
from .data import ModalityPair, load_pair, read_pgm, synth_pair, synth_pairs, write_pgm
from .records import RunRecord
from .sweeps import aggregation_baselines, strategy_baselines
from .train import dataset, evaluate, split_for, train, warm_start

__all__ = [
    "ModalityPair",
    "RunRecord",
    "TrainConfig",
    "aggregation_baselines",
    "dataset",
    "evaluate",
    "load_pair",
    "read_pgm",
    "split_for",
    "strategy_baselines",
    "synth_pair",
    "synth_pairs",
    "train",
    "warm_start",
    "write_pgm",
]
