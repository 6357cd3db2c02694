"""Contrastive objectives, the two-stage schedule and the optimizer.

Stage 1 aligns images with captions (symmetric in-batch InfoNCE, masked
patches for the first part of the run).  Stage 2 trains composed
query/candidate matching with in-batch plus hard negatives.  Both stages
update only the vision tokenizer; ``finetune`` unfreezes everything.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .config import TrainConfig
from .model import TEXT, ModelParams, SequenceBatch, backward_batch, encode_batch
from .seeding import stream

log = logging.getLogger(__name__)


class BatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# losses

def info_nce(Q, C, targets, tau: float, form: str = "log"):
    """Softmax cross-entropy of each query against all rows of ``C``.

    ``targets[i]`` is the column of query i's positive.  Returns
    ``(loss, dQ, dC)``; everything is accumulated in float64.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    Q64 = np.asarray(Q, dtype=np.float64)
    C64 = np.asarray(C, dtype=np.float64)
    targets = np.asarray(targets)
    n = len(Q64)
    if n == 0 or len(targets) != n:
        raise ValueError("need one target per query")
    logits = Q64 @ C64.T / tau
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    log_p = shifted[rows, targets] - lse
    probs = np.exp(shifted - lse[:, None])
    if form == "log":
        loss = -log_p.mean()
        dlogits = probs.copy()
        dlogits[rows, targets] -= 1.0
        dlogits /= n
    elif form == "negative_probability":
        p_pos = np.exp(log_p)
        loss = -p_pos.mean()
        onehot = np.zeros_like(probs)
        onehot[rows, targets] = 1.0
        dlogits = -(p_pos[:, None] * (onehot - probs)) / n
    else:
        raise ValueError(f"unknown loss form {form!r}")
    dQ = dlogits @ C64 / tau
    dC = dlogits.T @ Q64 / tau
    return float(loss), dQ.astype(np.asarray(Q).dtype), dC.astype(np.asarray(C).dtype)


def contrastive_loss(U, V, tau: float, form: str = "log"):
    """In-batch InfoNCE with row i of ``V`` as the positive for row i of ``U``."""
    U = np.asarray(U)
    V = np.asarray(V)
    if U.shape != V.shape:
        raise ValueError(f"size mismatch: {U.shape} vs {V.shape}")
    return info_nce(U, V, np.arange(len(U)), tau, form)


# ---------------------------------------------------------------------------
# schedule and optimizer

def lr_at(step: int, cfg: TrainConfig) -> float:
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    return max(0.0, cfg.lr_init * (1.0 - step / cfg.total_steps))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / total
        for name in grads:
            grads[name] = (grads[name] * scale).astype(grads[name].dtype)
    return total


@dataclass
class AdamW:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "AdamW":
        return cls(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)

    def step(self, params: ModelParams, grads: dict[str, np.ndarray], lr: float) -> None:
        for name in grads:
            if not params.trainable.get(name, False):
                raise ValueError(f"gradient supplied for frozen array {name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            p = params.arrays[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = lr * (m / c1 / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p)
            if not np.isfinite(update).all():
                raise nn.NumericError(f"optimizer update of {name}")
            p -= update.astype(p.dtype)


# ---------------------------------------------------------------------------
# batches

@dataclass(frozen=True)
class Item:
    """Something encodable: text, image, or both (interleaved)."""

    id: str
    tokens: np.ndarray | None = None
    image: np.ndarray | None = None

    @property
    def kind(self) -> str:
        if self.image is None:
            return "text"
        return "image" if self.tokens is None else "image_text"


def add_item(batch: SequenceBatch, item: Item, order: str) -> int:
    if item.kind == "text":
        return batch.add_text(item.tokens)
    img = batch.add_image_array(item.image)
    if item.kind == "image":
        return batch.add_image(img)
    return batch.add_interleaved(img, item.tokens, order)


@dataclass(frozen=True)
class Example:
    """One training query, its positive, and the pool its hard negatives come from."""

    query: Item
    positive: Item
    negative_pool: tuple[Item, ...] = ()
    group_id: str = ""


@dataclass
class TrainingBatch:
    queries: list[Item]
    candidates: list[Item]
    hard_negative_groups: list[list[Item]]
    task_tag: str

    def __post_init__(self):
        if len(self.queries) != len(self.candidates):
            raise BatchError("queries and candidates must align by index")
        if len(self.hard_negative_groups) not in (0, len(self.queries)):
            raise BatchError("one hard-negative group per query")
        for pos, group in zip(self.candidates, self.hard_negative_groups):
            for neg in group:
                if neg.id == pos.id:
                    raise BatchError(f"hard negative {neg.id} equals the positive")

    def candidate_pool(self) -> tuple[list[Item], np.ndarray]:
        """Unique candidates (positives first, then hard negatives) and positive columns."""
        pool: list[Item] = []
        index: dict[str, int] = {}
        for item in list(self.candidates) + [n for g in self.hard_negative_groups for n in g]:
            if item.id not in index:
                index[item.id] = len(pool)
                pool.append(item)
        return pool, np.array([index[c.id] for c in self.candidates])


def _encode_items(params: ModelParams, items: Sequence[Item], order: str, *, grad: bool,
                  mask_ratio: float = 0.0, rng=None):
    batch = SequenceBatch()
    for item in items:
        add_item(batch, item, order)
    return encode_batch(params, batch, mask_ratio=mask_ratio, rng=rng, keep_cache=grad)


def _needs_grad(params: ModelParams, item: Item) -> bool:
    return item.kind != "text" or params.any_trainable(TEXT)


def _encode_split(params, items, order, mask_ratio=0.0, rng=None):
    """Encode items, keeping backward caches only for rows that depend on trainable arrays."""
    need = [i for i, it in enumerate(items) if _needs_grad(params, it)]
    rest = [i for i, it in enumerate(items) if not _needs_grad(params, it)]
    emb = np.zeros((len(items), params.config.d_model), dtype=params.dtype)
    fwd = None
    if need:
        fwd = _encode_items(params, [items[i] for i in need], order, grad=True,
                            mask_ratio=mask_ratio, rng=rng)
        emb[need] = fwd.emb
    if rest:
        emb[rest] = _encode_items(params, [items[i] for i in rest], order, grad=False).emb
    return emb, (need, fwd)


def _backward_split(params, handle, demb):
    need, fwd = handle
    if fwd is None:
        return {}
    grads, _ = backward_batch(params, fwd, demb[need])
    return grads


def _encode_composed(params, items, order, composition):
    """Like ``_encode_split`` but image_text items may use score fusion."""
    if composition == "interleaved" or all(it.kind != "image_text" for it in items):
        emb, handle = _encode_split(params, items, order)
        return emb, ("plain", handle)
    parts: list[Item] = []
    where = []
    for it in items:
        if it.kind == "image_text":
            where.append((len(parts), len(parts) + 1))
            parts += [Item(it.id + "#t", tokens=it.tokens), Item(it.id + "#i", image=it.image)]
        else:
            where.append((len(parts), None))
            parts.append(it)
    emb, handle = _encode_split(params, parts, order)
    a = np.array([w[0] for w in where])
    fused_rows = [r for r, w in enumerate(where) if w[1] is not None]
    b = np.array([where[r][1] for r in fused_rows], dtype=np.int64)
    out = emb[a].copy()
    out[fused_rows], norm_cache = nn.l2_normalize_forward(emb[a[fused_rows]] + emb[b])
    return out, ("fused", handle, a, fused_rows, b, norm_cache, len(parts))


def _backward_composed(params, handle, demb):
    if handle[0] == "plain":
        return _backward_split(params, handle[1], demb)
    _, inner, a, fused_rows, b, norm_cache, n_parts = handle
    dparts = np.zeros((n_parts, demb.shape[1]), dtype=demb.dtype)
    dsum = nn.l2_normalize_backward(demb[fused_rows], norm_cache)
    plain_rows = [r for r in range(len(a)) if r not in set(fused_rows)]
    dparts[a[plain_rows]] = demb[plain_rows]
    dparts[a[fused_rows]] = dsum
    dparts[b] = dsum
    return _backward_split(params, inner, dparts)


def _merge(into: dict, grads: dict) -> dict:
    for k, g in grads.items():
        into[k] = into[k] + g if k in into else g
    return into


# ---------------------------------------------------------------------------
# heads: forward + gradients for one batch

def stage1_loss(params: ModelParams, texts: Sequence[Item], images: Sequence[Item],
                cfg: TrainConfig, mask_ratio: float, rng, want_grads: bool = True):
    """Symmetric caption/image InfoNCE.  Returns ``(loss, grads)``."""
    if len(texts) != len(images):
        raise BatchError("texts and images must be paired by index")
    if len(texts) < 2:
        raise BatchError("stage-1 batches need at least two pairs")
    order = params.config.token_order
    et, th = _encode_split(params, texts, order)
    ei, ih = _encode_split(params, images, order, mask_ratio=mask_ratio, rng=rng)
    l1, dt1, di1 = contrastive_loss(et, ei, cfg.tau, cfg.loss_form)
    l2, di2, dt2 = contrastive_loss(ei, et, cfg.tau, cfg.loss_form)
    loss = l1 + l2
    if not np.isfinite(loss):
        raise nn.NumericError("stage-1 loss")
    if not want_grads:
        return loss, {}
    grads = _backward_split(params, th, dt1 + dt2)
    _merge(grads, _backward_split(params, ih, di1 + di2))
    return loss, grads


def stage2_loss(params: ModelParams, batch: TrainingBatch, cfg: TrainConfig,
                want_grads: bool = True):
    """Query-to-candidate InfoNCE over in-batch positives plus all hard negatives."""
    if not batch.hard_negative_groups and len(batch.queries) < 2:
        raise BatchError("need at least two queries when no hard negatives are given")
    order = params.config.token_order
    pool, targets = batch.candidate_pool()
    eq, qh = _encode_composed(params, batch.queries, order, cfg.composition)
    ec, ch = _encode_composed(params, pool, order, cfg.composition)
    loss, dq, dc = info_nce(eq, ec, targets, cfg.tau, cfg.loss_form)
    if cfg.bidirectional:
        l2, dcp, dq2 = info_nce(ec[targets], eq, np.arange(len(eq)), cfg.tau, cfg.loss_form)
        loss += l2
        dq = dq + dq2
        np.add.at(dc, targets, dcp)
    if not np.isfinite(loss):
        raise nn.NumericError("stage-2 loss")
    if not want_grads:
        return loss, {}
    grads = _backward_composed(params, qh, dq)
    _merge(grads, _backward_composed(params, ch, dc))
    return loss, grads


# ---------------------------------------------------------------------------
# data sources

class Stage1Source:
    """Caption/image pairs sampled per step from a derived stream."""

    def __init__(self, pairs: Sequence[tuple[Item, Item]], batch_size: int, seed: int):
        if len(pairs) < 2:
            raise BatchError("stage 1 needs at least two pairs")
        self.pairs = list(pairs)
        self.batch_size = min(batch_size, len(self.pairs))
        self.seed = seed

    def batch(self, step: int):
        rng = stream(self.seed, "batching", step)
        idx = rng.choice(len(self.pairs), size=self.batch_size, replace=False)
        texts = [self.pairs[i][0] for i in idx]
        images = [self.pairs[i][1] for i in idx]
        return "cross_modal", (texts, images)


class TextViewSource:
    """A short window of a text and a token-dropout copy of it form a positive pair.

    Used to give the text encoder some lexical structure before it is frozen,
    standing in for a pretrained language model.  Matching a window against
    its whole text rewards embeddings that reflect which words a text holds.
    """

    def __init__(self, texts: Sequence[np.ndarray], batch_size: int, seed: int,
                 drop: float = 0.2, window: tuple[int, int] = (4, 12)):
        texts = [np.asarray(t) for t in texts if len(t)]
        if len(texts) < 2:
            raise BatchError("text pretraining needs at least two texts")
        if not 1 <= window[0] <= window[1]:
            raise BatchError(f"bad window {window}")
        self.texts = texts
        self.batch_size = min(batch_size, len(texts))
        self.seed = seed
        self.drop = drop
        self.window = window

    def _view(self, ids: np.ndarray, rng) -> np.ndarray:
        keep = rng.random(len(ids)) >= self.drop
        if not keep.any():
            keep[rng.integers(len(ids))] = True
        return ids[keep]

    def _crop(self, ids: np.ndarray, rng) -> np.ndarray:
        lo, hi = self.window
        if len(ids) <= lo:
            return ids
        n = int(rng.integers(lo, min(hi, len(ids)) + 1))
        start = int(rng.integers(0, len(ids) - n + 1))
        return ids[start:start + n]

    def batch(self, step: int):
        rng = stream(self.seed, "batching", step)
        idx = rng.choice(len(self.texts), size=self.batch_size, replace=False)
        views = stream(self.seed, "views", step)
        a = [Item(f"{i}a", self._crop(self.texts[i], views)) for i in idx]
        b = [Item(f"{i}b", self._view(self.texts[i], views)) for i in idx]
        return "text_views", (a, b)


class Stage2Source:
    """Round-robin over tasks; hard negatives drawn from each example's pool."""

    def __init__(self, tasks: dict[str, Sequence[Example]], batch_size: int,
                 hard_negatives: int, seed: int, order: Sequence[str] | None = None):
        self.tasks = {k: list(v) for k, v in tasks.items() if len(v)}
        self.order = [t for t in (order or sorted(self.tasks)) if t in self.tasks]
        if not self.order:
            raise BatchError("no stage-2 training examples")
        self.batch_size = batch_size
        self.hard_negatives = hard_negatives
        self.seed = seed

    def batch(self, step: int):
        tag = self.order[step % len(self.order)]
        examples = self.tasks[tag]
        rng = stream(self.seed, "batching", step)
        idx = rng.choice(len(examples), size=min(self.batch_size, len(examples)), replace=False)
        chosen = [examples[i] for i in idx]
        groups = []
        if self.hard_negatives > 0:
            for ex in chosen:
                pool = [n for n in ex.negative_pool if n.id != ex.positive.id]
                take = min(self.hard_negatives, len(pool))
                pick = rng.choice(len(pool), size=take, replace=False) if take else []
                groups.append([pool[j] for j in sorted(pick)])
        return tag, TrainingBatch([e.query for e in chosen], [e.positive for e in chosen],
                                  groups, tag)


# ---------------------------------------------------------------------------
# the loop

class Trainer:
    """Runs one stage.  All per-step randomness derives from ``(seed, step)``,
    so resuming from a checkpoint continues bit-identically."""

    def __init__(self, params: ModelParams, cfg: TrainConfig, source,
                 log_path: str | Path | None = None,
                 checkpoint_fn: Callable[[int], None] | None = None):
        self.params = params
        self.cfg = cfg
        self.source = source
        self.opt = AdamW.from_config(cfg)
        self.step_index = 0
        self.log_path = Path(log_path) if log_path else None
        self.checkpoint_fn = checkpoint_fn
        self.history: list[tuple[int, str, float, float]] = []
        params.set_stage(cfg.stage)

    def mask_ratio(self, step: int) -> float:
        if self.cfg.stage != "stage1":
            return 0.0
        return self.cfg.mask_ratio_stage1 if step < self.cfg.masked_steps else 0.0

    def loss_and_grads(self, step: int, want_grads: bool = True):
        tag, batch = self.source.batch(step)
        if self.cfg.stage in ("stage1", "text_pretrain"):
            texts, images = batch
            rng = stream(self.cfg.seed, "masking", step)
            loss, grads = stage1_loss(self.params, texts, images, self.cfg,
                                      self.mask_ratio(step), rng, want_grads)
        else:
            loss, grads = stage2_loss(self.params, batch, self.cfg, want_grads)
        return tag, loss, grads

    def step(self) -> float:
        step = self.step_index
        lr = lr_at(step, self.cfg)
        tag, loss, grads = self.loss_and_grads(step)
        clip_by_global_norm(grads, self.cfg.grad_clip)
        self.opt.step(self.params, grads, lr)
        self.step_index += 1
        self.history.append((step, tag, lr, loss))
        if self.log_path is not None and (step % max(self.cfg.log_every, 1) == 0):
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(f"{step}\t{tag}\t{lr:.9g}\t{loss:.9g}\n")
        return loss

    def run(self, until: int | None = None) -> list[tuple[int, str, float, float]]:
        until = self.cfg.total_steps if until is None else min(until, self.cfg.total_steps)
        every = self.cfg.checkpoint_every
        while self.step_index < until:
            self.step()
            if self.checkpoint_fn and every and self.step_index % every == 0:
                self.checkpoint_fn(self.step_index)
            if self.step_index % 100 == 0:
                log.info("step %d loss %.4f", self.step_index, self.history[-1][3])
        if self.checkpoint_fn:
            self.checkpoint_fn(self.step_index)
        return self.history
