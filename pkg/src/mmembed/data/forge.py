"""Procedural stand-ins for the two composed image-text data pipelines.

* it2i: a source scene gets several single-attribute edits; each edit gives
  a (source image, instruction) -> target image triple, and the edits of one
  source are hard negatives for each other.
* t2it: a scene plus a short passage about a subtopic forms a document; a
  query needs both the passage (topic, shape) and the picture (colour).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from ..config import BACKGROUNDS, PALETTE
from ..seeding import stream
from .scenes import MAX_OBJECTS, SHAPES, SIZES, SceneObject, SceneSpec, random_scene

EDIT_KINDS = ("color", "shape", "position", "add", "remove")


class EditError(RuntimeError):
    pass


@dataclass(frozen=True)
class It2iRecord:
    source_image: SceneSpec
    source_caption: str
    instruction: str
    target_caption: str
    target_image: SceneSpec
    group_id: str
    edit_kind: str = ""
    # corpus-only edit of the same source: a look-alike candidate with no query
    distractor: bool = False


@dataclass(frozen=True)
class T2itRecord:
    query: str
    doc_image: SceneSpec
    doc_text: str
    doc_id: str
    topic: str = ""


# ---------------------------------------------------------------------------
# it2i

def _ref(scene: SceneSpec, obj: SceneObject) -> str:
    twins = [o for o in scene.objects if o.color == obj.color and o.shape == obj.shape]
    if len(twins) == 1:
        return f"the {obj.color} {obj.shape}"
    return f"the {obj.color} {obj.shape} at the {obj.where}"


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def propose_edit(scene: SceneSpec, kind: str, rng: np.random.Generator,
                 palette: Sequence[str] = PALETTE):
    """One random edit of ``kind``; ``None`` when the scene admits none."""
    objs = scene.objects
    if kind == "color":
        if not objs:
            return None
        obj = _pick(rng, objs)
        color = _pick(rng, [c for c in palette if c != obj.color])
        new = SceneObject(obj.cell, obj.shape, color, obj.size)
        text = _pick(rng, ("change {ref} to {c}", "make {ref} {c}")).format(ref=_ref(scene, obj), c=color)
        return text, scene.replace_object(obj, new)
    if kind == "shape":
        if not objs:
            return None
        obj = _pick(rng, objs)
        shape = _pick(rng, [s for s in SHAPES if s != obj.shape])
        new = SceneObject(obj.cell, shape, obj.color, obj.size)
        text = _pick(rng, ("turn {ref} into a {s}", "replace {ref} with a {s}")).format(
            ref=_ref(scene, obj), s=shape)
        return text, scene.replace_object(obj, new)
    if kind == "position":
        free = scene.free_cells()
        if not objs or not free:
            return None
        obj = _pick(rng, objs)
        cell = _pick(rng, free)
        new = SceneObject(cell, obj.shape, obj.color, obj.size)
        text = _pick(rng, ("move {ref} to the {w}", "put {ref} at the {w}")).format(
            ref=_ref(scene, obj), w=new.where)
        return text, scene.replace_object(obj, new)
    if kind == "add":
        free = scene.free_cells()
        if len(objs) >= MAX_OBJECTS or not free:
            return None
        new = SceneObject(_pick(rng, free), _pick(rng, SHAPES), _pick(rng, palette), _pick(rng, SIZES))
        text = _pick(rng, ("add {d}", "insert {d}")).format(d=new.describe())
        return text, scene.add_object(new)
    if kind == "remove":
        if not objs:
            return None
        obj = _pick(rng, objs)
        text = _pick(rng, ("remove {ref}", "delete {ref}")).format(ref=_ref(scene, obj))
        return text, scene.replace_object(obj, None)
    raise ValueError(f"unknown edit kind {kind!r}")


def generate_edits(source: SceneSpec, k: int, rng: np.random.Generator,
                   palette: Sequence[str] = PALETTE, max_tries: int = 200):
    """``k`` distinct single-attribute edits as ``(instruction, target, kind)`` triples."""
    if k < 2:
        raise ValueError("k must be >= 2")
    out = []
    seen_targets = {source}
    seen_text = set()
    tries = 0
    while len(out) < k:
        tries += 1
        if tries > max_tries:
            raise EditError(f"could not find {k} distinct edits for {source.to_string()}")
        kind = _pick(rng, EDIT_KINDS)
        proposal = propose_edit(source, kind, rng, palette)
        if proposal is None:
            continue
        text, target = proposal
        if target in seen_targets or text in seen_text:
            continue
        seen_targets.add(target)
        seen_text.add(text)
        out.append((text, target, kind))
    return out


def generate_it2i(n_groups: int, k: int, seed: int, palette=PALETTE,
                  backgrounds=BACKGROUNDS, max_objects: int = MAX_OBJECTS,
                  distractors: int = 0) -> list[It2iRecord]:
    """``n_groups`` unique source scenes with ``k`` edits each.

    ``distractors`` further edits per source are marked ``distractor=True``;
    they become corpus images without a query.
    """
    records = []
    sources = set()
    for g in range(n_groups):
        attempt = 0
        while True:
            rng = stream(seed, "it2i", g, attempt)
            src = random_scene(rng, palette, backgrounds, 1, max_objects)
            if src not in sources:
                break
            attempt += 1
        sources.add(src)
        gid = f"g{g:05d}"
        edits = generate_edits(src, k + distractors, rng, palette)
        for e, (text, target, kind) in enumerate(edits):
            records.append(It2iRecord(src, src.caption(), text, target.caption(), target, gid, kind,
                                      distractor=e >= k))
    return records


# ---------------------------------------------------------------------------
# t2it

TOPICS = (
    "harbor", "orchard", "violin", "glacier", "bakery", "railway", "library", "volcano",
    "circus", "garden", "castle", "desert", "museum", "lighthouse", "market", "forest",
    "theater", "bridge", "island", "canyon", "village", "workshop", "observatory", "stadium",
)
_INTROS = (
    "here is a short note on the {topic}",
    "this passage describes the {topic} in some detail",
    "a brief account of the {topic} follows",
)
_GROUNDINGS = (
    "the {topic} is known for a {shape} emblem",
    "visitors to the {topic} often remember its {shape} sign",
    "every guide to the {topic} mentions the {shape} symbol",
)
_FILLERS = (
    "many people arrive early in the morning",
    "the local council keeps careful records every season",
    "weather in spring tends to be mild and calm",
    "old maps suggest the area changed slowly over time",
    "families return year after year for the quiet atmosphere",
    "several volunteers help to maintain the grounds",
    "the nearest town lies beyond a row of tall trees",
    "small shops nearby sell bread and fresh fruit",
    "some historians argue the records are incomplete",
    "evening light makes the place look warm and welcoming",
    "children enjoy the open space and long walks",
    "local stories describe a long and peaceful history",
    "guided tours run twice each week during summer",
    "photographers like to visit just after sunrise",
)
_QUERIES = (
    "find the {topic} document showing a {color} {shape}",
    "which {topic} entry has a {color} {shape} picture",
    "{color} {shape} image for the {topic} text",
    "looking for the {topic} page with a {color} {shape}",
)


def _passage(topic: str, shape: str, rng: np.random.Generator) -> str:
    target = int(rng.integers(20, 61))
    sentences = [_pick(rng, _INTROS).format(topic=topic),
                 _pick(rng, _GROUNDINGS).format(topic=topic, shape=shape)]
    n = sum(len(s.split()) for s in sentences)
    fillers = list(rng.permutation(len(_FILLERS)))
    for j in fillers:
        extra = len(_FILLERS[j].split())
        if n >= target or n + extra > 60:
            if n >= 20:
                break
            continue
        sentences.append(_FILLERS[j])
        n += extra
    return ". ".join(sentences) + "."


def generate_t2it(n: int, seed: int, palette=PALETTE, backgrounds=BACKGROUNDS,
                  max_objects: int = 3) -> list[T2itRecord]:
    """``n`` (query, image, passage) records."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = []
    for i in range(n):
        rng = stream(seed, "t2it", i)
        scene = random_scene(rng, palette, backgrounds, 1, max_objects)
        anchor = _pick(rng, scene.objects)
        topic = _pick(rng, TOPICS)
        text = _passage(topic, anchor.shape, rng)
        query = _pick(rng, _QUERIES).format(topic=topic, color=anchor.color, shape=anchor.shape)
        out.append(T2itRecord(query, scene, text, f"d{i:05d}", topic))
    return out


def generate_pairs(n: int, seed: int, palette=PALETTE, backgrounds=BACKGROUNDS,
                   max_objects: int = MAX_OBJECTS) -> list[tuple[str, SceneSpec]]:
    """Caption/scene pairs for cross-modal alignment."""
    out = []
    for i in range(n):
        scene = random_scene(stream(seed, "pairs", i), palette, backgrounds, 1, max_objects)
        out.append((scene.caption(), scene))
    return out


# ---------------------------------------------------------------------------
# filtering

@dataclass
class FilterReport:
    threshold: float
    total: int
    kept: int
    dropped_low_similarity: int
    dropped_small_groups: int

    @property
    def rejection_rate(self) -> float:
        return 0.0 if self.total == 0 else 1.0 - self.kept / self.total


def similarity_filter(records: Sequence[It2iRecord],
                      encoder: Callable[[Sequence[str], Sequence[SceneSpec]], np.ndarray],
                      threshold: float, similarities: np.ndarray | None = None):
    """Keep records whose target caption and target image agree under ``encoder``.

    ``encoder(captions, scenes)`` returns one cosine similarity per record.
    Groups left with fewer than two members are dropped entirely.
    """
    records = list(records)
    if similarities is None:
        similarities = np.asarray(
            encoder([r.target_caption for r in records], [r.target_image for r in records])
            if records else np.zeros(0))
    passed = [r for r, s in zip(records, similarities) if s >= threshold]
    sizes: dict[str, int] = {}
    for r in passed:
        sizes[r.group_id] = sizes.get(r.group_id, 0) + 1
    kept = [r for r in passed if sizes[r.group_id] >= 2]
    report = FilterReport(float(threshold), len(records), len(kept),
                          len(records) - len(passed), len(passed) - len(kept))
    return kept, report


def drop_fraction_threshold(similarities: np.ndarray, fraction: float) -> float:
    """Threshold that removes the lowest ``fraction`` of similarities."""
    if fraction <= 0 or len(similarities) == 0:
        return -np.inf
    return float(np.quantile(np.asarray(similarities, dtype=np.float64), fraction))


# ---------------------------------------------------------------------------
# splits

def assign_splits(keys: Iterable[str], fractions, seed: int, name: str) -> dict[str, str]:
    keys = sorted(set(keys))
    order = stream(seed, "split-" + name).permutation(len(keys))
    n_train = int(round(fractions[0] * len(keys)))
    n_dev = int(round(fractions[1] * len(keys)))
    out = {}
    for rank, j in enumerate(order):
        out[keys[j]] = "train" if rank < n_train else ("dev" if rank < n_train + n_dev else "test")
    return out
