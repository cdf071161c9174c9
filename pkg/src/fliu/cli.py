"""Command line entry point: ``fliu run | replay | inspect``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

import numpy as np

from .experiment import emit_results, parse_config, parse_strategy, replay, run_experiment
from .partition import Partition


def _apply_overrides(cfg, args):
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, output_dir=args.out)
    if getattr(args, "strategies", None):
        cfg = replace(
            cfg, strategies=tuple(parse_strategy(s, cfg.aggregation) for s in args.strategies.split(","))
        )
    return cfg


def cmd_run(args) -> int:
    cfg = _apply_overrides(parse_config(args.config), args)
    result = run_experiment(cfg, out_dir=cfg.output_dir)
    out = emit_results(result, cfg.output_dir)
    print(f"wrote results to {out}")
    return 0


def cmd_replay(args) -> int:
    cfg = _apply_overrides(parse_config(args.config), args)
    _, identical = replay(args.partition, cfg, out_dir=cfg.output_dir)
    print(f"partition rebuilt from seed {'matches' if identical else 'DIFFERS FROM'} the stored assignment")
    print(f"wrote results to {cfg.output_dir}")
    return 0 if identical else 1


def cmd_inspect(args) -> int:
    part = Partition.load(args.partition)
    hist = part.meta.get("train_histogram")
    print(f"environment {part.environment}  clients {part.num_clients}  seed {part.seed}")
    if part.alpha_label is not None or part.alpha_quantity is not None:
        print(f"alpha_label {part.alpha_label}  alpha_quantity {part.alpha_quantity}")
    sizes = part.train_sizes()
    if hist is None:
        for k, n in enumerate(sizes):
            print(f"client {k:>3}  n_k={n}")
        return 0
    hist = np.asarray(hist)
    print("client    n_k  " + " ".join(f"{c:>6}" for c in range(hist.shape[1])))
    for k, row in enumerate(hist):
        print(f"{k:>6} {sizes[k]:>6}  " + " ".join(f"{v:>6}" for v in row))
    if args.json:
        print(json.dumps({"train_histogram": hist.tolist(), "test_histogram": part.meta.get("test_histogram")}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fliu", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def overrides(p):
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--strategies", help="comma separated, e.g. clt,fedavg,fliu_fixed:0.25")

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("config")
    overrides(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replay", help="re-run one repetition on a stored partition")
    p.add_argument("partition")
    p.add_argument("config")
    overrides(p)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("inspect", help="print per-client label histograms of a partition")
    p.add_argument("partition")
    p.add_argument("--json", action="store_true", help="also dump histograms as JSON")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
