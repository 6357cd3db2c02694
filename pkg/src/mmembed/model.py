"""Text encoder with a vision tokenizer in front of it.

Images are cut into patches, run through a small ViT, and the resulting
per-patch states are fed to the text encoder exactly like word embeddings.
Every encode path (text, image, interleaved, pseudo-token) is a sequence
``[CLS; segment; segment; ...]`` through the same text stack; the output is
the L2-normalised final CLS state.

All batched work goes through :func:`encode_batch` / :func:`backward_batch`.
The single-item functions (:func:`encode_text` etc.) are thin wrappers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .config import ModelConfig
from .seeding import stream
from .tokenizer import CLS, PAD, TokenSequence

TEXT = "text."
VIT = "vit."


class SequenceOverflowError(ValueError):
    pass


class ShapeError(ValueError):
    pass


def _block_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {
        prefix + "ln1.g": (d,), prefix + "ln1.b": (d,),
        prefix + "attn.wqkv": (d, 3 * d), prefix + "attn.bqkv": (3 * d,),
        prefix + "attn.wo": (d, d), prefix + "attn.bo": (d,),
        prefix + "ln2.g": (d,), prefix + "ln2.b": (d,),
        prefix + "ffn.w1": (d, 4 * d), prefix + "ffn.b1": (4 * d,),
        prefix + "ffn.w2": (4 * d, d), prefix + "ffn.b2": (d,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d_model
    shapes = {
        TEXT + "tok_emb": (cfg.vocab_size, d),
        TEXT + "pos_emb": (cfg.max_seq_len, d),
    }
    for i in range(cfg.n_text_layers):
        shapes.update(_block_shapes(f"{TEXT}layer{i}.", d))
    shapes.update({TEXT + "lnf.g": (d,), TEXT + "lnf.b": (d,)})
    shapes.update({
        VIT + "patch.w": (cfg.patch_dim, d),
        VIT + "patch.b": (d,),
        VIT + "pos_emb": (cfg.n_patches, d),
    })
    for i in range(cfg.n_vit_layers):
        shapes.update(_block_shapes(f"{VIT}layer{i}.", d))
    shapes.update({VIT + "lnf.g": (d,), VIT + "lnf.b": (d,)})
    if cfg.use_projector:
        shapes.update({VIT + "proj.w": (d, d), VIT + "proj.b": (d,)})
    return shapes


@dataclass
class ModelParams:
    """All learnable arrays plus a per-array trainable flag.

    ``text.*`` arrays form the text encoder, ``vit.*`` the vision tokenizer.
    """

    config: ModelConfig
    arrays: dict[str, np.ndarray]
    trainable: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        for name in self.arrays:
            self.trainable.setdefault(name, name.startswith(VIT))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @property
    def dtype(self):
        return self.arrays[TEXT + "tok_emb"].dtype

    @property
    def text_names(self) -> list[str]:
        return [n for n in self.arrays if n.startswith(TEXT)]

    @property
    def vision_names(self) -> list[str]:
        return [n for n in self.arrays if n.startswith(VIT)]

    def set_stage(self, stage: str) -> None:
        """stage1/stage2 train the vision tokenizer only; finetune trains everything;
        text_pretrain trains the text encoder only."""
        for name in self.arrays:
            if stage == "text_pretrain":
                self.trainable[name] = name.startswith(TEXT)
            else:
                self.trainable[name] = stage == "finetune" or name.startswith(VIT)

    def any_trainable(self, prefix: str) -> bool:
        return any(t for n, t in self.trainable.items() if n.startswith(prefix))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()},
                           dict(self.trainable))

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()},
                           dict(self.trainable))


def init_params(cfg: ModelConfig, dtype=np.float32) -> ModelParams:
    rng = stream(cfg.seed, "init")
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, cfg.init_std, size=shape)
        arrays[name] = arr.astype(dtype)
    return ModelParams(cfg, arrays)


# ---------------------------------------------------------------------------
# vision tokenizer

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(N, H, W, C) -> (N, n_patches, patch*patch*C), row-major patch order."""
    N, H, W, C = images.shape
    g_h, g_w = H // patch, W // patch
    x = images.reshape(N, g_h, patch, g_w, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(N, g_h * g_w, patch * patch * C)


def sample_kept(n_images: int, cfg: ModelConfig, mask_ratio: float, rng) -> np.ndarray:
    """Indices of surviving patches per image, sorted; uniform without replacement."""
    if not 0.0 <= mask_ratio < 1.0:
        raise ValueError("mask_ratio must lie in [0, 1)")
    n = cfg.n_patches
    keep = cfg.kept_count(mask_ratio)
    if keep == n:
        return np.tile(np.arange(n), (n_images, 1))
    if rng is None:
        raise ValueError("masking needs a random stream")
    return np.stack([np.sort(rng.choice(n, size=keep, replace=False)) for _ in range(n_images)])


def _check_images(images: np.ndarray, cfg: ModelConfig) -> None:
    want = (cfg.image_size, cfg.image_size, cfg.channels)
    if images.ndim != 4 or images.shape[1:] != want:
        raise ShapeError(f"image shape {images.shape[1:]} does not match config {want}")
    nn.check_finite(images, "input image")


def vit_forward(params: ModelParams, images: np.ndarray, kept: np.ndarray):
    cfg = params.config
    p = params.arrays
    patches = patchify(images, cfg.patch_size)
    x_in = np.take_along_axis(patches, kept[..., None], axis=1)
    x, _ = nn.linear_forward(x_in, p[VIT + "patch.w"], p[VIT + "patch.b"])
    x = x + p[VIT + "pos_emb"][kept]
    caches = []
    for i in range(cfg.n_vit_layers):
        x, c = nn.block_forward(x, p, f"{VIT}layer{i}.", cfg.n_heads, None)
        nn.check_finite(x, f"{VIT}layer{i}")
        caches.append(c)
    y, lnf = nn.layer_norm_forward(x, p[VIT + "lnf.g"], p[VIT + "lnf.b"])
    proj_in = None
    if cfg.use_projector:
        proj_in = y
        y, _ = nn.linear_forward(y, p[VIT + "proj.w"], p[VIT + "proj.b"])
    return y, (x_in, kept, caches, lnf, proj_in)


def vit_backward(params: ModelParams, cache, dy) -> dict[str, np.ndarray]:
    cfg = params.config
    p = params.arrays
    x_in, kept, caches, lnf, proj_in = cache
    grads = {}
    if proj_in is not None:
        dy, dw, db = nn.linear_backward(dy, proj_in, p[VIT + "proj.w"])
        grads[VIT + "proj.w"], grads[VIT + "proj.b"] = dw, db
    dx, dg, db = nn.layer_norm_backward(dy, lnf)
    grads[VIT + "lnf.g"], grads[VIT + "lnf.b"] = dg, db
    for i in reversed(range(cfg.n_vit_layers)):
        dx, g = nn.block_backward(dx, caches[i], p, f"{VIT}layer{i}.", cfg.n_heads)
        grads.update(g)
    dpos = np.zeros_like(p[VIT + "pos_emb"])
    np.add.at(dpos, kept.ravel(), dx.reshape(-1, dx.shape[-1]))
    grads[VIT + "pos_emb"] = dpos
    _, dw, db = nn.linear_backward(dx, x_in, p[VIT + "patch.w"])
    grads[VIT + "patch.w"], grads[VIT + "patch.b"] = dw, db
    return {k: v for k, v in grads.items() if params.trainable.get(k, False)}


# ---------------------------------------------------------------------------
# sequence assembly

@dataclass
class SequenceBatch:
    """Sequences to push through the text stack in one call.

    Each sequence is a list of segments ``(kind, ref)``: ``("tokens", ids)``,
    ``("visual", image_index)`` or ``("vector", extra_row)``.  CLS is
    prepended at assembly time and is always position 0.
    """

    images: list = field(default_factory=list)
    seqs: list = field(default_factory=list)

    def add_image_array(self, pixels: np.ndarray) -> int:
        self.images.append(pixels)
        return len(self.images) - 1

    def add(self, segments) -> int:
        self.seqs.append(list(segments))
        return len(self.seqs) - 1

    def add_text(self, tokens) -> int:
        return self.add([("tokens", _ids(tokens))])

    def add_image(self, image_index: int) -> int:
        return self.add([("visual", image_index)])

    def add_interleaved(self, image_index: int, tokens, order: str = "visual_first") -> int:
        vis, txt = ("visual", image_index), ("tokens", _ids(tokens))
        if order == "visual_first":
            return self.add([vis, txt])
        if order == "text_first":
            return self.add([txt, vis])
        raise ValueError(f"unknown token order {order!r}")

    def __len__(self):
        return len(self.seqs)


def _ids(tokens) -> np.ndarray:
    if isinstance(tokens, TokenSequence):
        return tokens.ids
    return np.asarray(tokens, dtype=np.int64)


def sequence_length(segments, n_kept: int) -> int:
    n = 1
    for kind, ref in segments:
        n += len(ref) if kind == "tokens" else (n_kept if kind == "visual" else 1)
    return n


@dataclass
class Forward:
    emb: np.ndarray
    kept: np.ndarray | None
    visual: np.ndarray | None
    cache: tuple | None = None


def encode_batch(params: ModelParams, batch: SequenceBatch, *, mask_ratio: float = 0.0,
                 rng=None, extra: np.ndarray | None = None, keep_cache: bool = False) -> Forward:
    """Encode every sequence of ``batch``; returns unit-norm rows in batch order."""
    cfg = params.config
    p = params.arrays
    dtype = params.dtype
    d = cfg.d_model
    if not batch.seqs:
        raise ValueError("empty batch")

    visual = kept = vit_cache = None
    if batch.images:
        images = np.stack([np.asarray(im) for im in batch.images]).astype(dtype)
        _check_images(images, cfg)
        kept = sample_kept(len(images), cfg, mask_ratio, rng)
        visual, vit_cache = vit_forward(params, images, kept)
    n_kept = cfg.kept_count(mask_ratio)

    lengths = [sequence_length(s, n_kept) for s in batch.seqs]
    L = max(lengths)
    if L > cfg.max_seq_len:
        bad = int(np.argmax(lengths))
        raise SequenceOverflowError(
            f"sequence {bad} needs {lengths[bad]} positions; max_seq_len is {cfg.max_seq_len}")
    B = len(batch.seqs)
    tok_ids = np.full((B, L), PAD, dtype=np.int64)
    is_tok = np.zeros((B, L), dtype=bool)
    vis_src = np.full((B, L), -1, dtype=np.int64)
    vec_src = np.full((B, L), -1, dtype=np.int64)
    valid = np.zeros((B, L), dtype=bool)
    for b, segments in enumerate(batch.seqs):
        tok_ids[b, 0] = CLS
        is_tok[b, 0] = True
        pos = 1
        for kind, ref in segments:
            if kind == "tokens":
                ids = np.asarray(ref)
                if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
                    raise ValueError("token id outside the vocabulary")
                tok_ids[b, pos:pos + len(ids)] = ids
                is_tok[b, pos:pos + len(ids)] = True
                pos += len(ids)
            elif kind == "visual":
                vis_src[b, pos:pos + n_kept] = ref * n_kept + np.arange(n_kept)
                pos += n_kept
            elif kind == "vector":
                vec_src[b, pos] = ref
                pos += 1
            else:
                raise ValueError(f"unknown segment kind {kind!r}")
        valid[b, :pos] = True

    X = np.zeros((B, L, d), dtype=dtype)
    X[is_tok] = p[TEXT + "tok_emb"][tok_ids[is_tok]]
    is_vis = vis_src >= 0
    if is_vis.any():
        X[is_vis] = visual.reshape(-1, d)[vis_src[is_vis]]
    is_vec = vec_src >= 0
    if is_vec.any():
        if extra is None:
            raise ValueError("sequence references extra vectors but none were given")
        if extra.shape[-1] != d:
            raise ShapeError(f"extra vectors have width {extra.shape[-1]}, expected {d}")
        X[is_vec] = extra[vec_src[is_vec]].astype(dtype)
    X = X + p[TEXT + "pos_emb"][:L][None] * valid[..., None]

    caches = []
    h = X
    for i in range(cfg.n_text_layers):
        h, c = nn.block_forward(h, p, f"{TEXT}layer{i}.", cfg.n_heads, valid)
        nn.check_finite(h, f"{TEXT}layer{i}")
        caches.append(c)
    cls_state, lnf = nn.layer_norm_forward(h[:, 0], p[TEXT + "lnf.g"], p[TEXT + "lnf.b"])
    nn.check_finite(cls_state, TEXT + "lnf")
    emb, norm_cache = nn.l2_normalize_forward(cls_state)

    cache = None
    if keep_cache:
        cache = (vit_cache, tok_ids, is_tok, vis_src, vec_src, valid, caches, lnf, norm_cache,
                 h.shape, None if extra is None else extra.shape)
    return Forward(emb, kept, visual, cache)


def backward_batch(params: ModelParams, fwd: Forward, demb: np.ndarray):
    """Gradients of a scalar w.r.t. trainable arrays given ``d loss / d emb``.

    Returns ``(grads, dextra)``; ``grads`` holds only arrays whose trainable
    flag is set, ``dextra`` is the gradient for extra vectors (or None).
    """
    if fwd.cache is None:
        raise ValueError("forward pass was run without keep_cache=True")
    cfg = params.config
    p = params.arrays
    (vit_cache, tok_ids, is_tok, vis_src, vec_src, valid, caches, lnf, norm_cache,
     hshape, extra_shape) = fwd.cache
    text_train = params.any_trainable(TEXT)
    grads: dict[str, np.ndarray] = {}

    dcls = nn.l2_normalize_backward(demb.astype(params.dtype), norm_cache)
    dcls, dg, db = nn.layer_norm_backward(dcls, lnf, text_train)
    if text_train:
        grads[TEXT + "lnf.g"], grads[TEXT + "lnf.b"] = dg, db
    dh = np.zeros(hshape, dtype=params.dtype)
    dh[:, 0] = dcls
    for i in reversed(range(cfg.n_text_layers)):
        dh, g = nn.block_backward(dh, caches[i], p, f"{TEXT}layer{i}.", cfg.n_heads, text_train)
        grads.update(g)
    dX = dh * valid[..., None]
    d = cfg.d_model
    L = hshape[1]

    if text_train:
        dpos = np.zeros_like(p[TEXT + "pos_emb"])
        dpos[:L] = dX.sum(axis=0, dtype=np.float64).astype(params.dtype)
        grads[TEXT + "pos_emb"] = dpos
        dtok = np.zeros_like(p[TEXT + "tok_emb"])
        np.add.at(dtok, tok_ids[is_tok], dX[is_tok])
        grads[TEXT + "tok_emb"] = dtok

    dextra = None
    is_vec = vec_src >= 0
    if extra_shape is not None:
        dextra = np.zeros(extra_shape, dtype=params.dtype)
        if is_vec.any():
            np.add.at(dextra, vec_src[is_vec], dX[is_vec])

    is_vis = vis_src >= 0
    if vit_cache is not None and params.any_trainable(VIT):
        dvis = np.zeros((fwd.visual.shape[0] * fwd.visual.shape[1], d), dtype=params.dtype)
        if is_vis.any():
            np.add.at(dvis, vis_src[is_vis], dX[is_vis])
        grads.update(vit_backward(params, vit_cache, dvis.reshape(fwd.visual.shape)))

    grads = {k: v for k, v in grads.items() if params.trainable.get(k, False)}
    for name, g in grads.items():
        nn.check_finite(g, f"gradient of {name}")
    return grads, dextra


# ---------------------------------------------------------------------------
# single-item conveniences

@dataclass(frozen=True)
class VisualTokenStates:
    states: np.ndarray
    kept_indices: np.ndarray


def image_to_visual_tokens(image: np.ndarray, params: ModelParams, mask_ratio: float = 0.0,
                           rng=None) -> VisualTokenStates:
    cfg = params.config
    images = np.asarray(image, dtype=params.dtype)[None]
    _check_images(images, cfg)
    kept = sample_kept(1, cfg, mask_ratio, rng)
    states, _ = vit_forward(params, images, kept)
    return VisualTokenStates(states[0], kept[0])


def encode_text(tokens, params: ModelParams) -> np.ndarray:
    batch = SequenceBatch()
    batch.add_text(tokens)
    return encode_batch(params, batch).emb[0]


def encode_image(image: np.ndarray, params: ModelParams) -> np.ndarray:
    batch = SequenceBatch()
    batch.add_image(batch.add_image_array(image))
    return encode_batch(params, batch).emb[0]


def encode_interleaved(image: np.ndarray, tokens, params: ModelParams,
                       order: str | None = None) -> np.ndarray:
    batch = SequenceBatch()
    img = batch.add_image_array(image)
    batch.add_interleaved(img, tokens, order or params.config.token_order)
    return encode_batch(params, batch).emb[0]
