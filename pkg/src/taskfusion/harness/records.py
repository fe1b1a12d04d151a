"""Run records and their on-disk layout.

A run directory holds::

    config.json     the exact TrainConfig
    records.jsonl   one JSON object per outer iteration, flushed as written
    summary.json    warm start, baselines, epoch metrics, final metrics, status
    metrics.csv     final validation MetricReport rows
    summary.txt     human-readable digest
    omega.ckpt, theta_V.ckpt, theta_P.ckpt
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..metrics import CSV_COLUMNS, MetricReport
from ..networks import ParamSet, save_params

# fields excluded from determinism comparisons
VOLATILE = ("wall_time",)


@dataclass
class RunRecord:
    config: dict
    iterations: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    warm: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)
    post_warm: dict = field(default_factory=dict)
    final: dict = field(default_factory=dict)
    final_reports: list[MetricReport] = field(default_factory=list)
    status: str = "running"
    omega: ParamSet | None = None
    theta_V: ParamSet | None = None
    theta_P: ParamSet | None = None

    def summary(self) -> dict:
        return {
            "config": self.config,
            "status": self.status,
            "iterations_completed": len(self.iterations),
            "warm": self.warm,
            "baseline": self.baseline,
            "post_warm": self.post_warm,
            "epochs": self.epochs,
            "final": self.final,
        }

    def stable_iterations(self) -> list[dict]:
        return [{k: v for k, v in rec.items() if k not in VOLATILE} for rec in self.iterations]


class RunWriter:
    """Streams iteration records to ``records.jsonl`` as they are produced."""

    def __init__(self, out_dir):
        self.root = Path(out_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.root / "records.jsonl", "w")

    def iteration(self, rec: dict) -> None:
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self, record: RunRecord) -> None:
        self._fh.close()
        write_summary(record, self.root)


def write_metrics_csv(reports: list[MetricReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in reports:
            w.writerow([r.pair_id] + [repr(float(getattr(r, c))) for c in CSV_COLUMNS[1:]])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (v if k == "pair_id" else float(v)) for k, v in row.items()} for row in rows]


def write_summary(record: RunRecord, out_dir) -> None:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "config.json", "w") as fh:
        json.dump(record.config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(root / "summary.json", "w") as fh:
        json.dump(record.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if record.final_reports:
        write_metrics_csv(record.final_reports, root / "metrics.csv")
    for name in ("omega", "theta_V", "theta_P"):
        params = getattr(record, name)
        if params is not None:
            save_params(params, root / f"{name}.ckpt")
    (root / "summary.txt").write_text(summary_text(record))


def summary_text(record: RunRecord) -> str:
    lines = [f"status: {record.status}", f"iterations: {len(record.iterations)}"]
    warm = record.warm
    if warm:
        lines.append(
            f"warm start: {warm.get('steps', 0)} steps, pixel loss "
            f"{warm.get('pixel_init', float('nan')):.6f} -> {warm.get('pixel_final', float('nan')):.6f}"
        )
    for label, block in (("untrained", record.baseline), ("post-warm", record.post_warm), ("final", record.final)):
        if block:
            lines.append(
                f"{label:>10}: mi_total={block['mi_total']:.6f} fmi={block['fmi']:.6f} "
                f"task_ce={block.get('task_ce', float('nan')):.6f} pixel={block['pixel']:.6f}"
            )
    return "\n".join(lines) + "\n"


def format_table(rows: list[dict], columns: list[str]) -> str:
    cells = [[str(c) for c in columns]]
    for row in rows:
        cells.append([f"{row[c]:.6f}" if isinstance(row[c], float) else str(row[c]) for c in columns])
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    out = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    out.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def write_table(rows: list[dict], columns: list[str], out_dir, stem: str) -> None:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / f"{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
    (root / f"{stem}.txt").write_text(format_table(rows, columns))
