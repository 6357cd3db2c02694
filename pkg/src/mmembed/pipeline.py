"""End-to-end commands: generate data, train a stage, evaluate, ablate.

Every command takes a resolved :class:`RunConfig` and writes the config it
ran with next to its outputs, so a directory is self-describing.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import file_digest, load_checkpoint, save_checkpoint
from .config import RunConfig, TrainConfig
from .data import forge
from .data.manifest import (TaskFiles, it2i_to_manifests, pairs_to_manifest, read_manifest,
                            read_task, t2it_to_manifests, write_manifest, write_task)
from .fusion import init_pseudo_map, train_pseudo_token_map
from .model import ModelParams, SequenceBatch, encode_batch, init_params
from .retrieval import EvalReport, ModelEncoder, evaluate_task, scene_pixels, task_from_files
from .tokenizer import Vocab, tokenize_text
from .training import Example, Item, Stage1Source, Stage2Source, TextViewSource, Trainer

log = logging.getLogger(__name__)

STAGE_ALIASES = {"0": "text_pretrain", "1": "stage1", "2": "stage2", "finetune": "finetune"}
TASKS = ("it2i", "t2it")


class PipelineError(RuntimeError):
    pass


def write_resolved_config(cfg: RunConfig, out_dir: str | Path) -> Path:
    path = Path(out_dir) / "resolved_config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.dumps(), encoding="utf-8")
    return path


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# gen-data

def _pair_similarities(params: ModelParams, vocab: Vocab, captions, scenes,
                       batch_size: int = 256) -> np.ndarray:
    cfg = params.config
    sims = np.zeros(len(captions))
    for s in range(0, len(captions), batch_size):
        batch = SequenceBatch()
        chunk = list(zip(captions[s:s + batch_size], scenes[s:s + batch_size]))
        for cap, _ in chunk:
            batch.add_text(tokenize_text(cap, vocab, cfg.max_text_len))
        for _, scene in chunk:
            img = scene_pixels(scene.to_string(), cfg.image_size, cfg.channels)
            batch.add_image(batch.add_image_array(img))
        emb = encode_batch(params, batch).emb.astype(np.float64)
        n = len(chunk)
        sims[s:s + n] = (emb[:n] * emb[n:]).sum(axis=1)
    return sims


def gen_data(cfg: RunConfig, out_dir: str | Path, checkpoint: str | Path | None = None) -> dict:
    """Generate pairs, it2i and t2it manifests plus the vocabulary.

    With ``checkpoint`` (a stage-1 model) the it2i triples are similarity
    filtered, dropping the lowest ``filter_drop_fraction`` of them.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dc = cfg.data
    seed = cfg.seed
    pairs = forge.generate_pairs(dc.stage1_pairs, seed, dc.palette, dc.backgrounds, dc.max_objects)
    it2i = forge.generate_it2i(dc.it2i_groups, dc.edits_per_group, seed, dc.palette,
                               dc.backgrounds, dc.max_objects, dc.distractors_per_group)
    t2it = forge.generate_t2it(dc.t2it_records, seed, dc.palette, dc.backgrounds,
                               min(dc.max_objects, 3))
    texts = [c for c, _ in pairs]
    texts += [t for r in it2i for t in (r.instruction, r.source_caption, r.target_caption)]
    texts += [t for r in t2it for t in (r.query, r.doc_text)]
    vocab = Vocab.build(texts, cfg.model.vocab_size)

    distractors = [r for r in it2i if r.distractor]
    it2i = [r for r in it2i if not r.distractor]
    report = {"pairs": len(pairs), "it2i_records": len(it2i), "it2i_groups": dc.it2i_groups,
              "it2i_distractors": len(distractors),
              "t2it_records": len(t2it), "vocab_size": len(vocab),
              "filter": None}
    if checkpoint is not None:
        ck = load_checkpoint(checkpoint)
        params = ck.params()
        sims = _pair_similarities(params, ck.vocab or vocab, [r.target_caption for r in it2i],
                                  [r.target_image for r in it2i])
        threshold = forge.drop_fraction_threshold(sims, dc.filter_drop_fraction)
        it2i, frep = forge.similarity_filter(it2i, None, threshold, similarities=sims)
        report["filter"] = {"checkpoint": ck.digest, **dataclasses.asdict(frep),
                            "rejection_rate": frep.rejection_rate}
        report["it2i_records_kept"] = len(it2i)
        groups = {r.group_id for r in it2i}
        distractors = [r for r in distractors if r.group_id in groups]

    it2i = it2i + distractors
    write_manifest(pairs_to_manifest(pairs, dc.splits, seed), out / "pairs.jsonl")
    write_task(it2i_to_manifests(it2i, dc.splits, seed), out, "it2i")
    write_task(t2it_to_manifests(t2it, dc.splits, seed), out, "t2it")
    (out / "vocab.json").write_text(json.dumps(vocab.itos) + "\n", encoding="utf-8")
    _dump_json(report, out / "gen_report.json")
    write_resolved_config(cfg, out)
    return report


def load_vocab(data_dir: str | Path) -> Vocab:
    path = Path(data_dir) / "vocab.json"
    if not path.exists():
        raise PipelineError(f"vocabulary not found: {path} (run gen-data first)")
    vocab = Vocab.__new__(Vocab)
    vocab.itos = json.loads(path.read_text(encoding="utf-8"))
    vocab.stoi = {w: i for i, w in enumerate(vocab.itos)}
    return vocab


# ---------------------------------------------------------------------------
# manifests -> training items

class _ItemFactory:
    def __init__(self, vocab: Vocab, model_cfg):
        self.vocab = vocab
        self.cfg = model_cfg

    def __call__(self, rec, with_text: bool | None = None) -> Item:
        tokens = image = None
        use_text = rec.kind != "image" if with_text is None else with_text
        if use_text:
            tokens = tokenize_text(rec.text, self.vocab, self.cfg.max_text_len).ids
        if rec.kind != "text":
            image = scene_pixels(rec.image, self.cfg.image_size, self.cfg.channels)
        return Item(rec.id, tokens, image)


def training_texts(data_dir: str | Path, split: str = "train") -> list[str]:
    """Every distinct train-split text in the data directory, sorted."""
    data_dir = Path(data_dir)
    texts = {r.text for r in read_manifest(data_dir / "pairs.jsonl") if r.split == split}
    for name in TASKS:
        files = read_task(data_dir, name)
        for rec in files.queries + files.corpus:
            if rec.split == split and rec.text:
                texts.add(rec.text)
    return sorted(texts)


def stage1_pairs(data_dir: str | Path, vocab: Vocab, model_cfg, split: str = "train"):
    path = Path(data_dir) / "pairs.jsonl"
    if not path.exists():
        raise PipelineError(f"stage 1 needs a paired manifest: {path} not found")
    make = _ItemFactory(vocab, model_cfg)
    out = []
    for rec in read_manifest(path):
        if rec.split == split:
            out.append((Item(rec.id + "#t", make(rec).tokens), make(rec, with_text=False)))
    return out


def it2i_examples(files: TaskFiles, make: _ItemFactory, split: str = "train") -> list[Example]:
    """Hard-negative pool: sibling targets and the shared source image."""
    corpus = {c.id: c for c in files.corpus}
    by_group: dict[str, list[str]] = {}
    for c in files.corpus:
        by_group.setdefault(c.group_id, []).append(c.id)
    items: dict[str, Item] = {}

    def item(cid):
        if cid not in items:
            items[cid] = make(corpus[cid])
        return items[cid]

    out = []
    for q in files.queries:
        if q.split != split:
            continue
        (pos,) = files.qrels[q.id]
        pool = tuple(item(c) for c in by_group[q.group_id] if c != pos)
        out.append(Example(make(q), item(pos), pool, q.group_id))
    return out


def t2it_examples(files: TaskFiles, make: _ItemFactory, split: str = "train") -> list[Example]:
    corpus = {c.id: c for c in files.corpus}
    out = []
    for q in files.queries:
        if q.split != split:
            continue
        (pos,) = files.qrels[q.id]
        out.append(Example(make(q), make(corpus[pos]), (), q.group_id))
    return out


def stage2_tasks(data_dir: str | Path, vocab: Vocab, model_cfg, tasks: Sequence[str]):
    make = _ItemFactory(vocab, model_cfg)
    out = {}
    for name in tasks:
        files = read_task(data_dir, name)
        out[name] = (it2i_examples if name == "it2i" else t2it_examples)(files, make)
    return out


# ---------------------------------------------------------------------------
# train

def _with_order(params: ModelParams, order: str | None) -> ModelParams:
    if order is None or order == params.config.token_order:
        return params
    cfg = dataclasses.replace(params.config, token_order=order)
    return ModelParams(cfg, params.arrays, params.trainable)


def train_stage(cfg: RunConfig, stage: str, out_dir: str | Path, *,
                checkpoint: str | Path | None = None, until: int | None = None,
                train_cfg: TrainConfig | None = None, token_order: str | None = None) -> Path:
    """Run one stage; returns the path of the checkpoint written last.

    ``checkpoint`` is either the upstream model (stage-1 output for stage 2,
    any model for finetune) or a partial checkpoint of this same stage, in
    which case training resumes where it stopped.
    """
    stage = STAGE_ALIASES.get(stage, stage)
    if stage not in ("text_pretrain", "stage1", "stage2", "finetune"):
        raise PipelineError(f"unknown stage {stage!r}")
    tc = train_cfg or cfg.train_config(stage)
    tc = dataclasses.replace(tc, stage=stage)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = load_vocab(cfg.data_dir)

    start, opt = 0, None
    if checkpoint is None:
        if stage not in ("text_pretrain", "stage1"):
            raise PipelineError(f"{stage} needs an upstream checkpoint (--checkpoint)")
        params = init_params(cfg.model)
    else:
        ck = load_checkpoint(checkpoint)
        params = ck.params()
        if ck.state.get("stage") == stage and ck.state.get("step", 0) < tc.total_steps:
            start, opt = int(ck.state["step"]), ck.optimizer()
        elif stage == "stage2" and ck.state.get("stage") != "stage1":
            raise PipelineError(f"stage2 expects a stage-1 checkpoint, got {ck.state.get('stage')!r}")
        if ck.vocab is not None and ck.vocab != vocab:
            raise PipelineError("checkpoint vocabulary differs from the data directory's")
    params = _with_order(params, token_order)

    if stage == "text_pretrain":
        texts = [tokenize_text(t, vocab, params.config.max_text_len).ids
                 for t in training_texts(cfg.data_dir)]
        source = TextViewSource(texts, tc.batch_size, tc.seed)
    elif stage == "stage1":
        source = Stage1Source(stage1_pairs(cfg.data_dir, vocab, params.config), tc.batch_size,
                              tc.seed)
    else:
        tasks = stage2_tasks(cfg.data_dir, vocab, params.config, tc.tasks)
        source = Stage2Source(tasks, tc.batch_size, tc.hard_negatives_per_query, tc.seed,
                              order=list(tc.tasks))

    log_path = out / f"{stage}.log"
    if start == 0 and log_path.exists():
        log_path.unlink()
    trainer = Trainer(params, tc, source, log_path=log_path)
    if opt is not None:
        trainer.opt = opt
    trainer.step_index = start
    written: list[Path] = []

    def save(step: int) -> None:
        name = f"{stage}.ckpt" if step >= tc.total_steps else f"{stage}-step{step:05d}.ckpt"
        state = {"stage": stage, "step": step, "total_steps": tc.total_steps, "seed": tc.seed,
                 "tasks": list(tc.tasks)}
        save_checkpoint(out / name, trainer.params, vocab, optimizer=trainer.opt, state=state)
        written.append(out / name)

    trainer.checkpoint_fn = save
    trainer.run(until)
    write_resolved_config(cfg, out)
    return written[-1]


# ---------------------------------------------------------------------------
# eval

def _pseudo_map_for(cfg: RunConfig, params: ModelParams, vocab: Vocab):
    pairs = stage1_pairs(cfg.data_dir, vocab, params.config)
    pmap = init_pseudo_map(params, vocab, cfg.pseudo_map_depth, cfg.seed)
    if cfg.pseudo_map_steps == 0:
        return pmap
    tc = dataclasses.replace(cfg.stage1, total_steps=cfg.pseudo_map_steps, stage="stage2")
    return train_pseudo_token_map(params, pmap, [img.image for _, img in pairs], tc)


def evaluate(cfg: RunConfig, checkpoint: str | Path, out_dir: str | Path,
             fusion: str | None = None, tasks: Sequence[str] = TASKS, split: str = "dev",
             token_order: str | None = None, tag: str = "") -> dict[str, EvalReport]:
    """Evaluate ``checkpoint`` on the synthetic tasks, one JSON report per task."""
    fusion = fusion or cfg.fusion
    ck = load_checkpoint(checkpoint)
    vocab = ck.vocab or load_vocab(cfg.data_dir)
    params = _with_order(ck.params(), token_order)
    pmap = _pseudo_map_for(cfg, params, vocab) if fusion == "pseudo_token" else None
    encoder = ModelEncoder(params, vocab, fusion, pseudo_map=pmap)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = {}
    for name in tasks:
        task = task_from_files(name, read_task(cfg.data_dir, name), query_split=split)
        rep = evaluate_task(task, encoder, fusion=fusion, checkpoint=ck.digest, seed=cfg.seed)
        (out / f"eval-{name}-{fusion}{tag}.json").write_text(rep.to_json(), encoding="utf-8")
        reports[name] = rep
    write_resolved_config(cfg, out)
    return reports


# ---------------------------------------------------------------------------
# ablate

@dataclasses.dataclass(frozen=True)
class Leg:
    name: str
    tasks: tuple[str, ...] | None        # None: evaluate the stage-1 model as is
    hard_negatives: int | None = None    # None: keep the stage-2 default
    composition: str = "interleaved"


LEGS = (
    Leg("stage1-only", None),
    Leg("+it2i (no hard negatives)", ("it2i",), hard_negatives=0),
    Leg("+it2i", ("it2i",)),
    Leg("+t2it", ("t2it",)),
    Leg("+it2i+t2it", ("it2i", "t2it")),
    Leg("score fusion (+it2i+t2it)", ("it2i", "t2it"), composition="score_fusion"),
)


def _slug(name: str) -> str:
    keep = "".join(ch if ch.isalnum() else "-" for ch in name.lower())
    return "-".join(p for p in keep.split("-") if p)


def ablate(cfg: RunConfig, stage1_checkpoint: str | Path, out_dir: str | Path,
           orders: Sequence[str] | None = None, legs: Sequence[Leg] = LEGS) -> dict:
    """Train and evaluate every leg; returns the table and writes ``ablation.tsv``.

    Finished legs keep their checkpoints and reports if a later leg fails.
    """
    if not Path(stage1_checkpoint).exists():
        raise PipelineError(f"ablation needs a stage-1 checkpoint: {stage1_checkpoint}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    orders = list(orders or [cfg.model.token_order])
    rows = []
    for order in orders:
        for leg in legs:
            leg_dir = out / order / _slug(leg.name)
            ckpt = Path(stage1_checkpoint)
            if leg.tasks is not None:
                tc = dataclasses.replace(cfg.stage2, tasks=leg.tasks, composition=leg.composition)
                if leg.hard_negatives is not None:
                    tc = dataclasses.replace(tc, hard_negatives_per_query=leg.hard_negatives)
                ckpt = train_stage(cfg, "stage2", leg_dir, checkpoint=stage1_checkpoint,
                                   train_cfg=tc, token_order=order)
            fusion = "score_fusion" if leg.composition == "score_fusion" else "interleaved"
            reps = evaluate(cfg, ckpt, leg_dir, fusion=fusion, token_order=order)
            r5 = {t: reps[t].recall[5] for t in TASKS}
            rows.append({"order": order, "config": leg.name, "fusion": fusion,
                         "dir": f"{order}/{_slug(leg.name)}",
                         "it2i_r5": r5["it2i"], "t2it_r5": r5["t2it"],
                         "avg_r5": (r5["it2i"] + r5["t2it"]) / 2,
                         "checkpoint": file_digest(ckpt)})
            log.info("ablation %s/%s: %s", order, leg.name, r5)
    lines = ["order\tconfig\tit2i R@5\tt2it R@5\tavg"]
    for r in rows:
        lines.append(f"{r['order']}\t{r['config']}\t{r['it2i_r5']:.4f}\t{r['t2it_r5']:.4f}"
                     f"\t{r['avg_r5']:.4f}")
    table = "\n".join(lines) + "\n"
    (out / "ablation.tsv").write_text(table, encoding="utf-8")
    _dump_json(rows, out / "ablation.json")
    write_resolved_config(cfg, out)
    return {"rows": rows, "table": table}


# ---------------------------------------------------------------------------
# inspect

def inspect_checkpoint(path: str | Path) -> dict:
    ck = load_checkpoint(path)
    n_params = sum(int(np.prod(e["shape"])) for e in ck.meta["toc"]
                   if e["name"].startswith(("text.", "vit.")))
    n_trainable = sum(int(np.prod(e["shape"])) for e in ck.meta["toc"]
                      if e["name"].startswith(("text.", "vit.")) and e["trainable"])
    return {"digest": ck.digest, "state": ck.state, "model_config": ck.meta["model_config"],
            "vocab_size": len(ck.meta["vocab"] or []), "parameters": n_params,
            "trainable_parameters": n_trainable,
            "optimizer_step": (ck.meta.get("optimizer") or {}).get("t")}


# ---------------------------------------------------------------------------
# everything in one go

def full_run(cfg: RunConfig, root: str | Path, orders: Sequence[str] | None = None,
             legs: Sequence[Leg] = LEGS) -> dict:
    """gen-data, text pretraining, stage 1 and the ablation grid under ``root``.

    Uses ``root/data`` as the data directory regardless of ``cfg.data_dir``.
    """
    import time

    root = Path(root)
    cfg = dataclasses.replace(cfg, data_dir=str(root / "data"), out_dir=str(root))
    timings = {}
    t = time.process_time()
    gen_data(cfg, cfg.data_dir)
    timings["gen-data"] = time.process_time() - t
    t = time.process_time()
    text_ckpt = train_stage(cfg, "text_pretrain", root / "text_pretrain")
    timings["text_pretrain"] = time.process_time() - t
    t = time.process_time()
    stage1_ckpt = train_stage(cfg, "stage1", root / "stage1", checkpoint=text_ckpt)
    timings["stage1"] = time.process_time() - t
    t = time.process_time()
    result = ablate(cfg, stage1_ckpt, root / "ablate", orders=orders, legs=legs)
    timings["ablate"] = time.process_time() - t
    return {"rows": result["rows"], "table": result["table"], "timings": timings,
            "text_pretrain": text_ckpt, "stage1": stage1_ckpt, "root": root}
