"""Line-oriented manifests and qrels files.

A manifest is UTF-8 JSON Lines, one item per line, keys in this order:
``id, kind, text, image, group_id, split``.  ``kind`` is ``text``,
``image`` or ``image_text``; ``image`` is a canonical scene string (empty
for text items).  Image items keep their caption in ``text`` as metadata.

A qrels file is tab-separated ``query_id  candidate_id  relevance``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

from .forge import It2iRecord, T2itRecord, assign_splits
from .scenes import SceneSpec

KINDS = ("text", "image", "image_text")
SPLITS = ("train", "dev", "test")
FIELDS = ("id", "kind", "text", "image", "group_id", "split")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    kind: str
    text: str = ""
    image: str = ""
    group_id: str = ""
    split: str = "train"

    def scene(self) -> SceneSpec | None:
        return SceneSpec.from_string(self.image) if self.image else None

    def to_line(self) -> str:
        return json.dumps({f: getattr(self, f) for f in FIELDS}, ensure_ascii=False,
                          separators=(",", ":")) + "\n"


def _parse(line: str, lineno: int, path) -> ManifestRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise ManifestError(f"{path}: line {lineno}: expected an object")
    for f in FIELDS:
        if f not in obj:
            raise ManifestError(f"{path}: line {lineno}: missing required field '{f}'")
    extra = set(obj) - set(FIELDS)
    if extra:
        raise ManifestError(f"{path}: line {lineno}: unknown field '{sorted(extra)[0]}'")
    if obj["kind"] not in KINDS:
        raise ManifestError(f"{path}: line {lineno}: unknown kind {obj['kind']!r}")
    if obj["split"] not in SPLITS:
        raise ManifestError(f"{path}: line {lineno}: unknown split {obj['split']!r}")
    if obj["kind"] != "text" and not obj["image"]:
        raise ManifestError(f"{path}: line {lineno}: {obj['kind']} item without an image")
    if obj["kind"] != "image" and not obj["text"]:
        raise ManifestError(f"{path}: line {lineno}: {obj['kind']} item without text")
    return ManifestRecord(*(obj[f] for f in FIELDS))


def iter_manifest(path: str | Path) -> Iterator[ManifestRecord]:
    """Stream records one line at a time; only the id set is held in memory."""
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = _parse(line, lineno, path)
            if rec.id in seen:
                raise ManifestError(f"{path}: line {lineno}: duplicate id {rec.id!r}")
            seen.add(rec.id)
            yield rec


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    return list(iter_manifest(path))


def write_manifest(records: Iterable[ManifestRecord], path: str | Path) -> int:
    seen: set[str] = set()
    n = 0
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            if rec.id in seen:
                raise ManifestError(f"duplicate id {rec.id!r}")
            seen.add(rec.id)
            fh.write(rec.to_line())
            n += 1
    return n


def write_qrels(qrels: dict[str, set[str]], path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid in qrels:
            for cid in sorted(qrels[qid]):
                fh.write(f"{qid}\t{cid}\t1\n")


def read_qrels(path: str | Path) -> dict[str, set[str]]:
    """Relevant (relevance 1) pairs; relevance-0 lines register the query only."""
    out: dict[str, set[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3 or parts[2] not in ("0", "1"):
                raise ManifestError(f"{path}: line {lineno}: expected 'query<TAB>candidate<TAB>0|1'")
            rel = out.setdefault(parts[0], set())
            if parts[2] == "1":
                rel.add(parts[1])
    return out


# ---------------------------------------------------------------------------
# generator records -> manifests

@dataclass
class TaskFiles:
    queries: list[ManifestRecord]
    corpus: list[ManifestRecord]
    qrels: dict[str, set[str]]


def it2i_to_manifests(records: list[It2iRecord], fractions, seed: int) -> TaskFiles:
    """Queries are (source, instruction); the corpus holds every target and every source.

    Distractor records add their target to the corpus and nothing else.
    """
    splits = assign_splits((r.group_id for r in records), fractions, seed, "it2i")
    queries, corpus, qrels = [], [], {}
    counters: dict[str, int] = {}
    seen_sources = set()
    for r in records:
        split = splits[r.group_id]
        if r.distractor:
            e = counters.get(r.group_id + "/x", 0)
            counters[r.group_id + "/x"] = e + 1
            corpus.append(ManifestRecord(f"it2i-x-{r.group_id}-{e}", "image", r.target_caption,
                                         r.target_image.to_string(), r.group_id, split))
            continue
        e = counters.get(r.group_id, 0)
        counters[r.group_id] = e + 1
        qid = f"it2i-q-{r.group_id}-{e}"
        tid = f"it2i-t-{r.group_id}-{e}"
        queries.append(ManifestRecord(qid, "image_text", r.instruction, r.source_image.to_string(),
                                      r.group_id, split))
        corpus.append(ManifestRecord(tid, "image", r.target_caption, r.target_image.to_string(),
                                     r.group_id, split))
        qrels[qid] = {tid}
        if r.group_id not in seen_sources:
            seen_sources.add(r.group_id)
            corpus.append(ManifestRecord(f"it2i-s-{r.group_id}", "image", r.source_caption,
                                         r.source_image.to_string(), r.group_id, split))
    return TaskFiles(queries, corpus, qrels)


def t2it_to_manifests(records: list[T2itRecord], fractions, seed: int) -> TaskFiles:
    splits = assign_splits((r.doc_id for r in records), fractions, seed, "t2it")
    queries, corpus, qrels = [], [], {}
    for r in records:
        split = splits[r.doc_id]
        qid, did = f"t2it-q-{r.doc_id}", f"t2it-{r.doc_id}"
        queries.append(ManifestRecord(qid, "text", r.query, "", r.doc_id, split))
        corpus.append(ManifestRecord(did, "image_text", r.doc_text, r.doc_image.to_string(),
                                     r.doc_id, split))
        qrels[qid] = {did}
    return TaskFiles(queries, corpus, qrels)


def pairs_to_manifest(pairs, fractions, seed: int) -> list[ManifestRecord]:
    ids = [f"pair-{i:05d}" for i in range(len(pairs))]
    splits = assign_splits(ids, fractions, seed, "pairs")
    return [ManifestRecord(pid, "image_text", caption, scene.to_string(), pid, splits[pid])
            for pid, (caption, scene) in zip(ids, pairs)]


def write_task(files: TaskFiles, directory: str | Path, name: str) -> dict[str, Path]:
    directory = Path(directory)
    paths = {
        "queries": directory / f"{name}_queries.jsonl",
        "corpus": directory / f"{name}_corpus.jsonl",
        "qrels": directory / f"{name}_qrels.tsv",
    }
    write_manifest(files.queries, paths["queries"])
    write_manifest(files.corpus, paths["corpus"])
    write_qrels(files.qrels, paths["qrels"])
    return paths


def read_task(directory: str | Path, name: str) -> TaskFiles:
    directory = Path(directory)
    return TaskFiles(read_manifest(directory / f"{name}_queries.jsonl"),
                     read_manifest(directory / f"{name}_corpus.jsonl"),
                     read_qrels(directory / f"{name}_qrels.tsv"))
