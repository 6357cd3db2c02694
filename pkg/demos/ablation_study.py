"""Data-configuration and fusion ablation at the default desk-scale config.

Each seed generates its own data, pretrains the text encoder, runs stage 1
and trains the six stage-2 legs (about 7 CPU-minutes per seed):

    python demos/ablation_study.py /tmp/mmembed-study 0 1 2
"""
import sys
from collections import defaultdict
from pathlib import Path

from mmembed import pipeline as pl
from mmembed.config import RunConfig


def main(root: str, seeds: list[int]) -> None:
    totals = defaultdict(lambda: [0.0, 0.0])
    for seed in seeds:
        res = pl.full_run(RunConfig().with_seed(seed), Path(root) / f"seed{seed}")
        print(f"seed {seed}\n{res['table']}")
        for row in res["rows"]:
            totals[row["config"]][0] += row["it2i_r5"] / len(seeds)
            totals[row["config"]][1] += row["t2it_r5"] / len(seeds)
    print(f"mean over seeds {seeds}")
    print(f"{'config':30s} {'it2i R@5':>9s} {'t2it R@5':>9s} {'avg':>7s}")
    for config, (it, t) in totals.items():
        print(f"{config:30s} {it:9.3f} {t:9.3f} {(it + t) / 2:7.3f}")


if __name__ == "__main__":
    args = sys.argv[1:]
    main(args[0] if args else "runs/study", [int(s) for s in args[1:]] or [0])
