"""Command-line entry point: ``mmembed <command> [flags]``.

Commands: gen-data, train, eval, ablate, inspect-checkpoint.  Set
``VISTA_THREADS`` to cap the BLAS thread pool.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from .checkpoint import CheckpointError
from .config import FUSION_METHODS, TOKEN_ORDERS, ConfigError, load_run_config
from .data.manifest import ManifestError
from .retrieval import EvalError

STAGES = ("0", "1", "2", "finetune")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config (JSON); defaults are used for missing keys")
    common.add_argument("--seed", type=int, help="root seed; overrides the config")
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="data directory; overrides the config's data_dir")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mmembed", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate synthetic manifests")
    g.add_argument("--checkpoint", help="stage-1 model used for similarity filtering")

    t = sub.add_parser("train", parents=[common], help="run one training stage")
    t.add_argument("--stage", choices=STAGES, required=True,
                   help="0 = text-encoder pretraining, 1 = image/caption alignment, "
                        "2 = composed training, finetune = all parameters")
    t.add_argument("--checkpoint", help="upstream model, or a partial checkpoint to resume")
    t.add_argument("--until", type=int, help="stop after this many steps (for resumable runs)")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--fusion", choices=FUSION_METHODS)
    e.add_argument("--tasks", default="it2i,t2it")
    e.add_argument("--split", default="dev", choices=("train", "dev", "test"))

    a = sub.add_parser("ablate", parents=[common], help="stage-2 data and fusion ablation grid")
    a.add_argument("--checkpoint", required=True, help="stage-1 checkpoint")
    a.add_argument("--orders", default=None,
                   help=f"comma-separated token orders from {', '.join(TOKEN_ORDERS)}")

    i = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata")
    i.add_argument("checkpoint")
    return p


def _resolve(args):
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.data:
        cfg = dataclasses.replace(cfg, data_dir=args.data)
    if getattr(args, "fusion", None):
        cfg = dataclasses.replace(cfg, fusion=args.fusion)
    return cfg


def _thread_limit():
    n = os.environ.get("VISTA_THREADS")
    if not n:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return nullcontext()
    return threadpool_limits(limits=int(n))


def _run(args) -> int:
    from . import pipeline as pl

    if args.command == "inspect-checkpoint":
        print(json.dumps(pl.inspect_checkpoint(args.checkpoint), indent=2))
        return 0
    cfg = _resolve(args)
    if args.command == "gen-data":
        out = args.out or cfg.data_dir
        report = pl.gen_data(cfg, out, checkpoint=args.checkpoint)
        print(f"pairs: {report['pairs']}")
        print(f"it2i records: {report['it2i_records']} ({report['it2i_groups']} groups)")
        print(f"t2it records: {report['t2it_records']}")
        rate = report["filter"]["rejection_rate"] if report["filter"] else 0.0
        print(f"filter rejection rate: {rate:.4f}")
        return 0
    if args.command == "train":
        out = args.out or str(Path(cfg.out_dir) / pl.STAGE_ALIASES[args.stage])
        path = pl.train_stage(cfg, args.stage, out, checkpoint=args.checkpoint, until=args.until)
        print(path)
        return 0
    if args.command == "eval":
        out = args.out or str(Path(cfg.out_dir) / "eval")
        tasks = [t for t in args.tasks.split(",") if t]
        reports = pl.evaluate(cfg, args.checkpoint, out, fusion=cfg.fusion, tasks=tasks,
                              split=args.split)
        for name, rep in reports.items():
            recall = " ".join(f"R@{k}={v:.4f}" for k, v in sorted(rep.recall.items()))
            print(f"{name}\t{rep.fusion}\t{recall}\tMRR@10={rep.mrr_at_10:.4f}")
        return 0
    if args.command == "ablate":
        out = args.out or str(Path(cfg.out_dir) / "ablate")
        orders = args.orders.split(",") if args.orders else None
        if orders and any(o not in TOKEN_ORDERS for o in orders):
            raise ConfigError(f"--orders must be drawn from {TOKEN_ORDERS}")
        result = pl.ablate(cfg, args.checkpoint, out, orders=orders)
        sys.stdout.write(result["table"])
        return 0
    raise AssertionError(args.command)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .pipeline import PipelineError

    try:
        with _thread_limit():
            return _run(args)
    except (ConfigError, CheckpointError, ManifestError, EvalError, PipelineError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
