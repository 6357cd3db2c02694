"""Small end-to-end run: data, the three training stages, evaluation.

Uses a shrunken model and corpus so it finishes in about a minute:

    python demos/quickstart.py /tmp/mmembed-quickstart
"""
import sys
from pathlib import Path

from mmembed import pipeline as pl
from mmembed.config import run_config_from_dict

SMALL = {
    "model": {"d_model": 32, "n_heads": 4, "n_text_layers": 1, "n_vit_layers": 1},
    "data": {"it2i_groups": 200, "t2it_records": 200, "stage1_pairs": 400},
    "text_pretrain": {"total_steps": 150},
    "stage1": {"total_steps": 200},
    "stage2": {"total_steps": 150},
}


def main(root: str) -> None:
    root = Path(root)
    cfg = run_config_from_dict(dict(SMALL, data_dir=str(root / "data"), out_dir=str(root)))
    report = pl.gen_data(cfg, cfg.data_dir)
    print(f"generated {report['it2i_records']} it2i queries and {report['t2it_records']} t2it records")

    text = pl.train_stage(cfg, "0", root / "text_pretrain")
    stage1 = pl.train_stage(cfg, "1", root / "stage1", checkpoint=text)
    stage2 = pl.train_stage(cfg, "2", root / "stage2", checkpoint=stage1)

    for name, ckpt in (("stage 1", stage1), ("stage 2", stage2)):
        reports = pl.evaluate(cfg, ckpt, root / "eval", tag="-" + name.replace(" ", ""))
        scores = ", ".join(f"{t} R@5 {r.recall[5]:.3f}" for t, r in reports.items())
        print(f"{name}: {scores}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "runs/quickstart")
