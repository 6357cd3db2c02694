"""Compare the three ways of embedding an (image, text) item on one checkpoint.

interleaved runs one sequence through the encoder, score_fusion adds the
separate text and image embeddings, pseudo_token maps the image to one word
vector inside "a photo of [*] <text>".  Needs a config whose data directory
exists and a trained checkpoint:

    python demos/fusion_baselines.py runs/quickstart/stage2/stage2.ckpt runs/quickstart/data
"""
import dataclasses
import sys
import tempfile

from mmembed import pipeline as pl
from mmembed.checkpoint import load_checkpoint
from mmembed.config import RunConfig


def main(checkpoint: str, data_dir: str) -> None:
    model = load_checkpoint(checkpoint).config
    cfg = dataclasses.replace(RunConfig(), model=model, data_dir=data_dir)
    with tempfile.TemporaryDirectory() as out:
        for fusion in ("interleaved", "score_fusion", "pseudo_token"):
            reports = pl.evaluate(cfg, checkpoint, out, fusion=fusion)
            scores = "  ".join(f"{t} R@5 {r.recall[5]:.3f}" for t, r in reports.items())
            print(f"{fusion:13s} {scores}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
