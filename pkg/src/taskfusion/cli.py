"""Command line entry point.

Exit codes: 0 success, 1 data error, 2 configuration or usage error,
3 numeric failure during a run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, DataError, NumericError, UsageError
from .harness.config import TrainConfig
from .harness.data import load_pair, write_pgm
from .harness.records import format_table, write_metrics_csv, write_table
from .harness.sweeps import AGG_COLUMNS, STRATEGY_COLUMNS, aggregation_baselines, strategy_baselines
from .harness.train import dataset, evaluate, split_for, train
from .networks import fusion_forward, load_params

log = logging.getLogger("taskfusion")


def _config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_(seed=args.seed)
    return cfg


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {value}")
    return value


def cmd_train(args) -> int:
    cfg = _config(args)
    pairs = dataset(cfg)
    record = train(pairs, cfg, out_dir=args.out)
    print(Path(args.out, "summary.txt").read_text(), end="")
    return 0 if record.status == "completed" else 3


def cmd_eval(args) -> int:
    if args.run:
        run = Path(args.run)
        cfg = TrainConfig.load(run / "config.json")
        ckpt = Path(args.checkpoint) if args.checkpoint else run / "omega.ckpt"
        theta_p = run / "theta_P.ckpt"
    elif args.checkpoint and args.config:
        cfg = TrainConfig.load(args.config)
        ckpt = Path(args.checkpoint)
        theta_p = Path(args.theta_p) if args.theta_p else None
    else:
        raise UsageError("eval needs --run DIR, or --config together with --checkpoint")
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    if args.data_dir:
        cfg = cfg.with_(data_source="files", data_dir=args.data_dir)
    omega = load_params(ckpt)
    theta_P = load_params(theta_p) if theta_p is not None and theta_p.exists() else None
    pairs = dataset(cfg)
    if args.split != "all":
        train_pairs, val_pairs = split_for(cfg, pairs)
        pairs = val_pairs if args.split == "val" else train_pairs
    summary, reports = evaluate(omega, pairs, theta_P, cfg.bins)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(reports, out / "metrics.csv")
    with open(out / "eval.json", "w") as fh:
        json.dump({"split": args.split, "checkpoint": str(ckpt), **summary}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(format_table([summary], list(summary)), end="")
    return 0


def cmd_fuse(args) -> int:
    omega = load_params(args.checkpoint)
    pair = load_pair(args.ir, args.vis)
    u = fusion_forward(pair.x[None, None], pair.y[None, None], omega).data[0, 0]
    write_pgm(args.out, u)
    print(f"wrote {args.out} ({u.shape[1]}x{u.shape[0]})")
    return 0


def _sweep(args, fn, columns, stem) -> int:
    cfg = _config(args)
    pairs = dataset(cfg)
    rows = fn(pairs, cfg, jobs=args.jobs)
    write_table(rows, columns, args.out, stem)
    print(format_table(rows, columns), end="")
    return 0


def cmd_compare_agg(args) -> int:
    return _sweep(args, aggregation_baselines, AGG_COLUMNS, "compare_agg")


def cmd_compare_strategy(args) -> int:
    return _sweep(args, strategy_baselines, STRATEGY_COLUMNS, "compare_strategy")


def cmd_selftest(args) -> int:
    from .checks import run_checks

    results = run_checks(full=args.full)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 0 if not failed else 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="taskfusion", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, out_required=True):
        sp.add_argument("--config", help="TrainConfig JSON file (defaults used if omitted)")
        sp.add_argument("--seed", type=_seed, help="override the config seed")
        sp.add_argument("--out", required=out_required, help="output directory")
        return sp

    sp = with_config(sub.add_parser("train", help="train the fusion network and write a run directory"))
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="metrics of a fusion checkpoint on a data split")
    sp.add_argument("--run", help="run directory written by train")
    sp.add_argument("--config", help="TrainConfig JSON (with --checkpoint)")
    sp.add_argument("--checkpoint", help="fusion weights file")
    sp.add_argument("--theta-p", help="task head weights for the cross-entropy column")
    sp.add_argument("--data-dir", help="evaluate on PGM pairs from this directory")
    sp.add_argument("--split", choices=("val", "train", "all"), default="val")
    sp.add_argument("--seed", type=_seed, help="override the config seed")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("fuse", help="fuse one infrared/visible PGM pair")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--ir", required=True, help="infrared PGM")
    sp.add_argument("--vis", required=True, help="visible PGM")
    sp.add_argument("--out", required=True, help="output PGM path")
    sp.set_defaults(fn=cmd_fuse)

    for name, fn in (("compare-agg", cmd_compare_agg), ("compare-strategy", cmd_compare_strategy)):
        sp = with_config(sub.add_parser(name, help=f"budget-matched {name[8:]} sweep"))
        sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("selftest", help="run the built-in oracle checks")
    sp.add_argument("--full", action="store_true", help="include the end-to-end desk run")
    sp.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.fn(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
