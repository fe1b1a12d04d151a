"""Desk-scale end-to-end run of the bi-level training loop.

Trains on the desk configuration, writes the run directory to
``results/desk/`` and the measured acceptance quantities to
``results/desk_oracle.json``. The acceptance suite reruns the same
configuration against the fixed thresholds recorded there.

    python3 scripts/desk_run.py
"""

import argparse
import json
from pathlib import Path

from taskfusion.checks import desk_config, end_to_end_criteria, end_to_end_measurements

ROOT = Path(__file__).resolve().parent.parent

THRESHOLDS = {
    "runtime_seconds_max": 300.0,
    "pixel_drop_min": 0.5,
    "task_ce_drop_min": 0.3,
    "mi_total_final_must_exceed": "mi_total_untrained",
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(ROOT / "results"))
    args = ap.parse_args()
    out = Path(args.out)
    cfg = desk_config()
    cfg.dump(ROOT / "configs" / "desk.json")

    m = end_to_end_measurements(cfg, out_dir=out / "desk")
    crit = end_to_end_criteria(m)
    m["criteria"] = {k: {"passed": bool(p), "detail": d} for k, (p, d) in crit.items()}
    m["thresholds"] = THRESHOLDS
    with open(out / "desk_oracle.json", "w") as fh:
        json.dump(m, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for k, (p, d) in crit.items():
        print(f"[{'PASS' if p else 'FAIL'}] {k}: {d}")


if __name__ == "__main__":
    main()
