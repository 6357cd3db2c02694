"""Baseline ways of embedding an (image, text) pair.

Score fusion adds the independent text and image embeddings.  Pseudo-token
fusion maps the image embedding to one token vector and encodes the prompt
``"a photo of [*]"`` followed by the text.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .config import TrainConfig
from .model import ModelParams, SequenceBatch, backward_batch, encode_batch
from .seeding import stream
from .tokenizer import TokenSequence, Vocab
from .training import AdamW, clip_by_global_norm, contrastive_loss, lr_at

PROMPT = ("a", "photo", "of")


class FusionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# score fusion

def fuse_scores(text_emb: np.ndarray, image_emb: np.ndarray, raw_sum: bool = False) -> np.ndarray:
    """Element-wise sum of the two embeddings, renormalised unless ``raw_sum``."""
    total = np.asarray(text_emb, dtype=np.float64) + np.asarray(image_emb, dtype=np.float64)
    if raw_sum:
        return total.astype(np.asarray(text_emb).dtype)
    norm = np.linalg.norm(total, axis=-1, keepdims=True)
    if np.any(norm <= 1e-12):
        raise FusionError("text and image embeddings cancel; fused direction undefined")
    return (total / norm).astype(np.asarray(text_emb).dtype)


def score_fusion_encode(tokens, image: np.ndarray, params: ModelParams,
                        raw_sum: bool = False) -> np.ndarray:
    batch = SequenceBatch()
    batch.add_text(tokens)
    batch.add_image(batch.add_image_array(image))
    emb = encode_batch(params, batch).emb
    return fuse_scores(emb[0], emb[1], raw_sum)


def score_fusion_records(encoder, records, raw_sum: bool = False) -> np.ndarray:
    batch = SequenceBatch()
    rows = []
    for rec in records:
        if rec.kind == "text":
            rows.append((batch.add_text(encoder.tokens(rec.text)), None))
        elif rec.kind == "image":
            rows.append((batch.add_image(batch.add_image_array(encoder.pixels(rec.image))), None))
        else:
            t = batch.add_text(encoder.tokens(rec.text))
            i = batch.add_image(batch.add_image_array(encoder.pixels(rec.image)))
            rows.append((t, i))
    emb = encode_batch(encoder.params, batch).emb
    out = np.zeros((len(records), emb.shape[1]), dtype=emb.dtype)
    for r, (a, b) in enumerate(rows):
        out[r] = emb[a] if b is None else fuse_scores(emb[a], emb[b], raw_sum)
    return out


# ---------------------------------------------------------------------------
# pseudo-token fusion

@dataclass
class PseudoTokenMap:
    """Image embedding -> one token vector.  ``depth`` linear layers with GELU between."""

    arrays: dict[str, np.ndarray]
    prompt_ids: tuple[int, ...]
    depth: int = 1
    trainable: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        for name in self.arrays:
            self.trainable.setdefault(name, True)
        for name, arr in self.arrays.items():
            nn.check_finite(arr, name)

    @property
    def width(self) -> tuple[int, int]:
        return self.arrays["p2w.l0.w"].shape[0], self.arrays[f"p2w.l{self.depth - 1}.w"].shape[1]

    def copy(self) -> "PseudoTokenMap":
        return PseudoTokenMap({k: v.copy() for k, v in self.arrays.items()}, self.prompt_ids,
                              self.depth, dict(self.trainable))

    def forward(self, x: np.ndarray):
        caches = []
        h = x
        for layer in range(self.depth):
            w, b = self.arrays[f"p2w.l{layer}.w"], self.arrays[f"p2w.l{layer}.b"]
            pre, inp = nn.linear_forward(h, w, b)
            gelu_cache = None
            if layer < self.depth - 1:
                h, gelu_cache = nn.gelu_forward(pre)
            else:
                h = pre
            caches.append((inp, gelu_cache))
        return h, caches

    def backward(self, dy: np.ndarray, caches) -> dict[str, np.ndarray]:
        grads = {}
        for layer in reversed(range(self.depth)):
            inp, gelu_cache = caches[layer]
            if gelu_cache is not None:
                dy = nn.gelu_backward(dy, gelu_cache)
            dy, dw, db = nn.linear_backward(dy, inp, self.arrays[f"p2w.l{layer}.w"])
            grads[f"p2w.l{layer}.w"], grads[f"p2w.l{layer}.b"] = dw, db
        return grads


def prompt_ids(vocab: Vocab) -> tuple[int, ...]:
    missing = [w for w in PROMPT if w not in vocab.stoi]
    if missing:
        raise FusionError(f"vocabulary lacks prompt word(s): {missing}")
    return tuple(vocab.stoi[w] for w in PROMPT)


def init_pseudo_map(params: ModelParams, vocab: Vocab, depth: int = 1, seed: int = 0,
                    identity: bool = False) -> PseudoTokenMap:
    d = params.config.d_model
    rng = stream(seed, "pseudo-map")
    arrays = {}
    for layer in range(depth):
        if identity:
            w = np.eye(d)
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
        arrays[f"p2w.l{layer}.w"] = w.astype(params.dtype)
        arrays[f"p2w.l{layer}.b"] = np.zeros(d, dtype=params.dtype)
    return PseudoTokenMap(arrays, prompt_ids(vocab), depth)


def _frozen(params: ModelParams) -> ModelParams:
    return ModelParams(params.config, params.arrays, {k: False for k in params.arrays})


def _pseudo_forward(params, pmap, images, token_lists, keep_cache=False):
    """Image embeddings -> pseudo tokens -> ``[CLS; prompt; [*]; text]`` embeddings."""
    d = params.config.d_model
    if pmap.width != (d, d):
        raise FusionError(f"pseudo-token map is {pmap.width}, model width is {d}")
    first = SequenceBatch()
    for img in images:
        first.add_image(first.add_image_array(img))
    image_emb = encode_batch(params, first).emb
    pseudo, map_cache = pmap.forward(image_emb)
    second = SequenceBatch()
    prompt = np.asarray(pmap.prompt_ids, dtype=np.int64)
    for j, ids in enumerate(token_lists):
        segments = [("tokens", prompt), ("vector", j)]
        if ids is not None:
            segments.append(("tokens", ids.ids if isinstance(ids, TokenSequence) else ids))
        second.add(segments)
    fwd = encode_batch(params, second, extra=pseudo, keep_cache=keep_cache)
    return fwd, image_emb, map_cache


def pseudo_token_encode(tokens, image: np.ndarray, params: ModelParams,
                        pmap: PseudoTokenMap) -> np.ndarray:
    fwd, _, _ = _pseudo_forward(params, pmap, [image], [tokens])
    return fwd.emb[0]


def pseudo_token_records(encoder, records, pmap: PseudoTokenMap) -> np.ndarray:
    d = encoder.params.config.d_model
    out = np.zeros((len(records), d), dtype=encoder.params.dtype)
    composed = [i for i, r in enumerate(records) if r.kind == "image_text"]
    plain = [i for i, r in enumerate(records) if r.kind != "image_text"]
    if composed:
        fwd, _, _ = _pseudo_forward(
            encoder.params, pmap, [encoder.pixels(records[i].image) for i in composed],
            [encoder.tokens(records[i].text) for i in composed])
        out[composed] = fwd.emb
    if plain:
        batch = SequenceBatch()
        for i in plain:
            rec = records[i]
            if rec.kind == "text":
                batch.add_text(encoder.tokens(rec.text))
            else:
                batch.add_image(batch.add_image_array(encoder.pixels(rec.image)))
        out[plain] = encode_batch(encoder.params, batch).emb
    return out


def pseudo_map_loss(params: ModelParams, pmap: PseudoTokenMap, images: Sequence[np.ndarray],
                    tau: float, want_grads: bool = True):
    """Symmetric InfoNCE between ``"a photo of [*]"`` and the image's own embedding.

    Only the map receives gradients; the model is treated as frozen.
    """
    if len(images) < 2:
        raise FusionError("need at least two images per batch")
    frozen = _frozen(params)
    fwd, image_emb, map_cache = _pseudo_forward(frozen, pmap, images, [None] * len(images),
                                                keep_cache=want_grads)
    l1, du1, _ = contrastive_loss(fwd.emb, image_emb, tau)
    l2, _, du2 = contrastive_loss(image_emb, fwd.emb, tau)
    loss = l1 + l2
    if not want_grads:
        return loss, {}
    _, dpseudo = backward_batch(frozen, fwd, du1 + du2)
    grads = pmap.backward(dpseudo, map_cache)
    for name, g in grads.items():
        nn.check_finite(g, f"gradient of {name}")
    return loss, grads


def train_pseudo_token_map(params: ModelParams, pmap: PseudoTokenMap,
                           images: Sequence[np.ndarray], cfg: TrainConfig,
                           steps: int | None = None) -> PseudoTokenMap:
    """Fit the map with the model frozen; returns a new map."""
    pmap = pmap.copy()
    steps = cfg.total_steps if steps is None else steps
    opt = AdamW.from_config(cfg)
    bs = min(cfg.batch_size, len(images))
    for step in range(steps):
        rng = stream(cfg.seed, "pseudo-batching", step)
        idx = rng.choice(len(images), size=bs, replace=False)
        _, grads = pseudo_map_loss(params, pmap, [images[i] for i in idx], cfg.tau)
        clip_by_global_norm(grads, cfg.grad_clip)
        opt.step(pmap, grads, lr_at(step, cfg))
    return pmap
