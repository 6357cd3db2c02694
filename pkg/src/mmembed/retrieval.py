"""Exact cosine retrieval, Recall@K / MRR@K, and the task harness."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Protocol, Sequence

import numpy as np

from .data.manifest import ManifestRecord, TaskFiles
from .data.scenes import SceneSpec, render
from .model import ModelParams, SequenceBatch, encode_batch
from .tokenizer import Vocab, tokenize_text

REPORT_KS = (1, 5, 10, 20)


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# index + search

@dataclass
class RetrievalIndex:
    ids: list
    matrix: np.ndarray
    _rank: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or len(self.ids) != len(self.matrix):
            raise EvalError("need one matrix row per id")
        if len(set(self.ids)) != len(self.ids):
            raise EvalError("candidate ids must be unique")
        if len(self.ids):
            norms = np.linalg.norm(self.matrix, axis=1)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise EvalError("index rows must be unit-norm")
        rank = np.empty(len(self.ids), dtype=np.int64)
        rank[sorted(range(len(self.ids)), key=lambda i: self.ids[i])] = np.arange(len(self.ids))
        self._rank = rank

    def __len__(self):
        return len(self.ids)


def search(index: RetrievalIndex, query: np.ndarray, k: int) -> list[tuple[object, float]]:
    """Top-k by dot product, descending; equal scores go to the smaller id."""
    if k < 1:
        raise EvalError("k must be >= 1")
    if len(index) == 0:
        raise EvalError("empty index")
    q = np.asarray(query, dtype=np.float64)
    scores = (index.matrix * q).sum(axis=1)
    order = np.lexsort((index._rank, -scores))[:k]
    return [(index.ids[i], float(scores[i])) for i in order]


# ---------------------------------------------------------------------------
# metrics

def _ids_only(ranking) -> list:
    return [r[0] if isinstance(r, tuple) else r for r in ranking]


def _first_hit(ranking, relevant, k: int) -> int | None:
    for pos, cid in enumerate(_ids_only(ranking)[:k], start=1):
        if cid in relevant:
            return pos
    return None


def _check(rankings, qrels):
    if not rankings:
        raise EvalError("no rankings given")
    for qid in rankings:
        if qid not in qrels:
            raise EvalError(f"query {qid!r} missing from qrels")


def recall_at_k(rankings: dict, qrels: dict, k: int) -> float:
    """Fraction of queries with at least one relevant id in the top k."""
    _check(rankings, qrels)
    hits = sum(_first_hit(r, qrels[q], k) is not None for q, r in rankings.items())
    return hits / len(rankings)


def mrr_at_k(rankings: dict, qrels: dict, k: int = 10) -> float:
    _check(rankings, qrels)
    total = 0.0
    for q, r in rankings.items():
        pos = _first_hit(r, qrels[q], k)
        total += 0.0 if pos is None else 1.0 / pos
    return total / len(rankings)


# ---------------------------------------------------------------------------
# encoders

class Encoder(Protocol):
    def encode(self, records: Sequence[ManifestRecord]) -> np.ndarray: ...


@lru_cache(maxsize=65536)
def scene_pixels(scene: str, image_size: int, channels: int) -> np.ndarray:
    img = render(SceneSpec.from_string(scene), image_size, channels)
    img.setflags(write=False)
    return img


class ModelEncoder:
    """Encodes manifest items with a model; composed items use ``fusion``."""

    def __init__(self, params: ModelParams, vocab: Vocab, fusion: str = "interleaved",
                 order: str | None = None, pseudo_map=None, raw_sum: bool = False,
                 batch_size: int = 256):
        if fusion not in ("interleaved", "score_fusion", "pseudo_token"):
            raise EvalError(f"unknown fusion method {fusion!r}")
        if fusion == "pseudo_token" and pseudo_map is None:
            raise EvalError("pseudo_token fusion needs a pseudo-token map")
        self.params = params
        self.vocab = vocab
        self.fusion = fusion
        self.order = order or params.config.token_order
        self.pseudo_map = pseudo_map
        self.raw_sum = raw_sum
        self.batch_size = batch_size

    def tokens(self, text: str):
        return tokenize_text(text, self.vocab, self.params.config.max_text_len)

    def pixels(self, scene: str) -> np.ndarray:
        cfg = self.params.config
        return scene_pixels(scene, cfg.image_size, cfg.channels)

    def _encode_chunk(self, records: Sequence[ManifestRecord]) -> np.ndarray:
        from . import fusion as fu

        if self.fusion == "score_fusion":
            return fu.score_fusion_records(self, records, raw_sum=self.raw_sum)
        if self.fusion == "pseudo_token":
            return fu.pseudo_token_records(self, records, self.pseudo_map)
        batch = SequenceBatch()
        for rec in records:
            if rec.kind == "text":
                batch.add_text(self.tokens(rec.text))
            elif rec.kind == "image":
                batch.add_image(batch.add_image_array(self.pixels(rec.image)))
            else:
                img = batch.add_image_array(self.pixels(rec.image))
                batch.add_interleaved(img, self.tokens(rec.text), self.order)
        return encode_batch(self.params, batch).emb

    def encode(self, records: Sequence[ManifestRecord]) -> np.ndarray:
        records = list(records)
        out = np.zeros((len(records), self.params.config.d_model), dtype=self.params.dtype)
        for start in range(0, len(records), self.batch_size):
            chunk = records[start:start + self.batch_size]
            try:
                out[start:start + len(chunk)] = self._encode_chunk(chunk)
            except Exception as exc:
                ids = ", ".join(r.id for r in chunk[:3])
                raise EvalError(f"encoding failed in chunk starting at {ids}: {exc}") from exc
        return out


def encode_corpus(records: Sequence[ManifestRecord], encoder: Encoder,
                  batch_size: int | None = None) -> tuple[list[str], np.ndarray]:
    for rec in records:
        if rec.kind not in ("text", "image", "image_text"):
            raise EvalError(f"unknown kind {rec.kind!r} for item {rec.id}")
    if batch_size is not None and hasattr(encoder, "batch_size"):
        encoder.batch_size = batch_size
    return [r.id for r in records], np.asarray(encoder.encode(records))


# ---------------------------------------------------------------------------
# tasks

@dataclass
class TaskSpec:
    name: str
    queries: list[ManifestRecord]
    corpus: list[ManifestRecord]
    qrels: dict[str, set[str]]

    @property
    def query_kind(self) -> str:
        kinds = {r.kind for r in self.queries}
        return kinds.pop() if len(kinds) == 1 else "mixed"

    @property
    def candidate_kind(self) -> str:
        kinds = {r.kind for r in self.corpus}
        return kinds.pop() if len(kinds) == 1 else "mixed"

    def validate(self) -> None:
        if not self.queries:
            raise EvalError(f"task {self.name}: no queries")
        if not self.corpus:
            raise EvalError(f"task {self.name}: empty corpus")
        corpus_ids = {r.id for r in self.corpus}
        if len(corpus_ids) != len(self.corpus):
            raise EvalError(f"task {self.name}: duplicate corpus ids")
        for q in self.queries:
            rel = self.qrels.get(q.id)
            if rel is None:
                raise EvalError(f"task {self.name}: query {q.id!r} missing from qrels")
            missing = rel - corpus_ids
            if missing:
                raise EvalError(f"task {self.name}: qrel id {sorted(missing)[0]!r} not in corpus")


def dedup_by_id(records: Iterable[ManifestRecord]) -> list[ManifestRecord]:
    seen = set()
    out = []
    for r in records:
        if r.id not in seen:
            seen.add(r.id)
            out.append(r)
    return out


def task_from_files(name: str, files: TaskFiles, query_split: str = "dev",
                    corpus_splits: Sequence[str] | None = None) -> TaskSpec:
    """Queries from one split; by default the corpus is that split's items.

    Passing ``corpus_splits`` widens the corpus, e.g. to every split.
    """
    splits = (query_split,) if corpus_splits is None else tuple(corpus_splits)
    queries = [q for q in files.queries if q.split == query_split]
    corpus = [c for c in files.corpus if c.split in splits]
    qrels = {q.id: files.qrels.get(q.id, set()) for q in queries}
    return TaskSpec(name, queries, dedup_by_id(corpus), qrels)


@dataclass
class EvalReport:
    task: str
    query_kind: str
    candidate_kind: str
    fusion: str
    recall: dict[int, float]
    mrr_at_10: float
    n_queries: int
    corpus_size: int
    checkpoint: str
    seed: int

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "query_kind": self.query_kind,
            "candidate_kind": self.candidate_kind,
            "fusion": self.fusion,
            "recall": {f"@{k}": self.recall[k] for k in sorted(self.recall)},
            "mrr@10": self.mrr_at_10,
            "n_queries": self.n_queries,
            "corpus_size": self.corpus_size,
            "checkpoint": self.checkpoint,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def rank_all(index: RetrievalIndex, query_ids, query_matrix, k: int) -> dict:
    return {qid: [cid for cid, _ in search(index, q, k)] for qid, q in zip(query_ids, query_matrix)}


def evaluate_task(task: TaskSpec, encoder: Encoder, Ks: Sequence[int] = REPORT_KS, *,
                  fusion: str | None = None, checkpoint: str = "", seed: int = 0) -> EvalReport:
    task.validate()
    corpus_ids, corpus_matrix = encode_corpus(task.corpus, encoder)
    index = RetrievalIndex(corpus_ids, corpus_matrix)
    query_ids, query_matrix = encode_corpus(task.queries, encoder)
    depth = max(max(Ks), 10)
    rankings = rank_all(index, query_ids, query_matrix, depth)
    recall = {k: recall_at_k(rankings, task.qrels, k) for k in Ks}
    return EvalReport(task.name, task.query_kind, task.candidate_kind,
                      fusion or getattr(encoder, "fusion", "custom"), recall,
                      mrr_at_k(rankings, task.qrels, 10), len(task.queries), len(task.corpus),
                      checkpoint, seed)
