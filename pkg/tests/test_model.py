import math

import numpy as np
import pytest

from conftest import finite_difference_error, tiny_config
from mmembed import nn
from mmembed.config import ConfigError, ModelConfig
from mmembed.model import (SequenceBatch, SequenceOverflowError, ShapeError, backward_batch,
                           encode_batch, encode_image, encode_interleaved, encode_text,
                           image_to_visual_tokens, init_params, param_shapes, sequence_length)
from mmembed.seeding import stream
from mmembed.tokenizer import CLS, UNK, EmptyInputError, Vocab, tokenize_text


# ---------------------------------------------------------------------------
# tokenizer

def test_tokenize_lookup():
    vocab = Vocab.from_mapping({"red": 5, "circle": 9})
    seq = tokenize_text("red circle", vocab, 64)
    assert seq.ids.tolist() == [5, 9]
    assert not seq.truncated


def test_tokenize_unknown_and_case():
    vocab = Vocab.from_mapping({"red": 5})
    assert tokenize_text("RED, zebra!", vocab, 64).ids.tolist() == [5, UNK]


@pytest.mark.parametrize("text", ["", "   ", "!!"])
def test_tokenize_empty(text):
    with pytest.raises(EmptyInputError):
        tokenize_text(text, Vocab.from_mapping({"red": 5}), 8)


def test_tokenize_truncation():
    vocab = Vocab.from_mapping({"w": 3})
    seq = tokenize_text(" ".join(["w"] * 300), vocab, 64)
    assert len(seq.ids) == 64 and seq.truncated


def test_vocab_build_reserves_prompt_words():
    vocab = Vocab.build(["red red circle", "blue square"], max_size=16)
    assert vocab.itos[:3] == ["[PAD]", "[UNK]", "[CLS]"]
    for w in ("a", "photo", "of", "red"):
        assert w in vocab.stoi
    assert vocab.stoi["red"] < vocab.stoi["blue"]


# ---------------------------------------------------------------------------
# config

def test_config_invariants():
    with pytest.raises(ConfigError):
        ModelConfig(patch_size=7)
    with pytest.raises(ConfigError):
        ModelConfig(n_heads=3)
    with pytest.raises(ConfigError):
        ModelConfig(max_seq_len=60)   # 1 + 16 patches + 64 text > 60
    with pytest.raises(ConfigError):
        ModelConfig(token_order="sideways")


def test_default_shapes():
    cfg = ModelConfig()
    assert cfg.n_patches == 16
    shapes = param_shapes(cfg)
    assert shapes["text.tok_emb"] == (512, 64)
    assert shapes["vit.patch.w"] == (8 * 8 * 3, 64)
    assert "vit.proj.w" not in shapes


# ---------------------------------------------------------------------------
# encoders

def _image(rng, cfg):
    return rng.random((cfg.image_size, cfg.image_size, cfg.channels)).astype(np.float32)


def test_unit_norm_everywhere(rng):
    cfg = ModelConfig()
    params = init_params(cfg)
    img = _image(rng, cfg)
    for e in (encode_text([5, 9, 11], params), encode_image(img, params),
              encode_interleaved(img, [5, 9], params)):
        assert abs(np.linalg.norm(e.astype(np.float64)) - 1.0) < 1e-6


def test_encoding_is_deterministic(rng):
    cfg = ModelConfig()
    img = _image(rng, cfg)
    a, b = init_params(cfg), init_params(cfg)
    assert np.array_equal(encode_text([5, 9], a), encode_text([5, 9], b))
    assert np.array_equal(encode_image(img, a), encode_image(img, a))


def test_zero_vs_one_image_differ():
    cfg = ModelConfig()
    params = init_params(cfg)
    shape = (cfg.image_size, cfg.image_size, cfg.channels)
    e0 = encode_image(np.zeros(shape, np.float32), params)
    e1 = encode_image(np.ones(shape, np.float32), params)
    assert float(e0 @ e1) < 1 - 1e-6


def test_token_order_changes_embedding(rng):
    cfg = ModelConfig()
    params = init_params(cfg)
    img = _image(rng, cfg)
    a = encode_interleaved(img, [5, 9, 12], params, "visual_first")
    b = encode_interleaved(img, [5, 9, 12], params, "text_first")
    assert not np.allclose(a, b)


def test_visual_token_counts(rng):
    cfg = ModelConfig()
    params = init_params(cfg)
    img = _image(rng, cfg)
    full = image_to_visual_tokens(img, params)
    assert full.states.shape == (16, 64)
    half = image_to_visual_tokens(img, params, 0.5, stream(0, "masking", 0))
    assert half.states.shape == (8, 64)
    assert np.all(np.diff(half.kept_indices) > 0)
    again = image_to_visual_tokens(img, params, 0.5, stream(0, "masking", 0))
    assert np.array_equal(half.kept_indices, again.kept_indices)


@pytest.mark.parametrize("ratio", [0.0, 0.1, 0.25, 0.5, 0.6, 0.9, 0.99])
def test_masking_count_rule(ratio):
    cfg = ModelConfig()
    assert cfg.kept_count(ratio) == math.ceil((1 - ratio) * 16)


def test_interleaved_overflow_boundary(rng):
    cfg = ModelConfig(max_seq_len=128, max_text_len=64)
    params = init_params(cfg)
    img = _image(rng, cfg)
    ok = list(range(3, 3 + 111))    # 1 + 16 + 111 = 128
    encode_interleaved(img, ok, params)
    with pytest.raises(SequenceOverflowError):
        encode_interleaved(img, ok + [3], params)


def test_sequence_length_accounting():
    segs = [("visual", 0), ("tokens", np.arange(5))]
    assert sequence_length(segs, 16) == 1 + 16 + 5
    assert sequence_length(segs, 8) == 1 + 8 + 5


def test_image_shape_mismatch():
    params = init_params(ModelConfig())
    with pytest.raises(ShapeError):
        encode_image(np.zeros((16, 16, 3), np.float32), params)


def test_non_finite_input_is_reported():
    params = init_params(ModelConfig())
    img = np.zeros((32, 32, 3), np.float32)
    img[0, 0, 0] = np.nan
    with pytest.raises(nn.NumericError):
        encode_image(img, params)


# ---------------------------------------------------------------------------
# straight-line oracle for a hand-set d=4 model

def _scripted_text_forward(arrays, ids):
    """Independent loop-based re-implementation of the text path for one sequence."""
    seq = [CLS] + list(ids)
    d = arrays["text.tok_emb"].shape[1]
    x = [arrays["text.tok_emb"][t].astype(np.float64) + arrays["text.pos_emb"][i]
         for i, t in enumerate(seq)]

    def ln(v, g, b):
        mu = sum(v) / len(v)
        var = sum((vi - mu) ** 2 for vi in v) / len(v)
        return np.array([(vi - mu) / math.sqrt(var + 1e-5) * g[j] + b[j] for j, vi in enumerate(v)])

    def gelu(z):
        return 0.5 * z * (1 + math.tanh(math.sqrt(2 / math.pi) * (z + 0.044715 * z ** 3)))

    pre = "text.layer0."
    a = [ln(v, arrays[pre + "ln1.g"], arrays[pre + "ln1.b"]) for v in x]
    qkv = [v @ arrays[pre + "attn.wqkv"] + arrays[pre + "attn.bqkv"] for v in a]
    q = [r[:d] for r in qkv]
    k = [r[d:2 * d] for r in qkv]
    v_ = [r[2 * d:] for r in qkv]
    out = []
    for i in range(len(seq)):
        logits = [float(q[i] @ k[j]) / math.sqrt(d) for j in range(len(seq))]
        m = max(logits)
        w = [math.exp(l - m) for l in logits]
        s = sum(w)
        ctx = sum((w[j] / s) * v_[j] for j in range(len(seq)))
        out.append(ctx @ arrays[pre + "attn.wo"] + arrays[pre + "attn.bo"])
    h = [x[i] + out[i] for i in range(len(seq))]
    a2 = [ln(v, arrays[pre + "ln2.g"], arrays[pre + "ln2.b"]) for v in h]
    y = []
    for i in range(len(seq)):
        f = a2[i] @ arrays[pre + "ffn.w1"] + arrays[pre + "ffn.b1"]
        f = np.array([gelu(z) for z in f])
        y.append(h[i] + f @ arrays[pre + "ffn.w2"] + arrays[pre + "ffn.b2"])
    cls = ln(y[0], arrays["text.lnf.g"], arrays["text.lnf.b"])
    return cls / math.sqrt(sum(c * c for c in cls))


def test_text_forward_matches_scripted_oracle():
    cfg = ModelConfig(d_model=4, n_text_layers=1, n_vit_layers=1, n_heads=1, max_seq_len=24,
                      vocab_size=12, image_size=8, patch_size=4, max_text_len=8)
    params = init_params(cfg, np.float64)
    r = np.random.default_rng(7)
    for name, arr in params.arrays.items():
        arr[...] = r.normal(0.0, 0.5, size=arr.shape)
    got = encode_text([5, 9], params)
    want = _scripted_text_forward(params.arrays, [5, 9])
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


# ---------------------------------------------------------------------------
# gradients

def _mixed_batch(imgs):
    b = SequenceBatch()
    i0, i1 = b.add_image_array(imgs[0]), b.add_image_array(imgs[1])
    b.add_text([5, 6, 7])
    b.add_image(i0)
    b.add_interleaved(i1, [3, 4], "visual_first")
    b.add_interleaved(i0, [9], "text_first")
    b.add([("tokens", [4]), ("vector", 0)])
    return b


def test_backward_matches_finite_differences(rng):
    cfg = tiny_config()
    params = init_params(cfg, np.float64)
    params.set_stage("finetune")
    imgs = rng.random((2, 8, 8, 3))
    extra = rng.normal(size=(1, 8))
    W = rng.normal(size=(5, 8))

    def loss():
        return float((encode_batch(params, _mixed_batch(imgs), extra=extra).emb * W).sum())

    fwd = encode_batch(params, _mixed_batch(imgs), extra=extra, keep_cache=True)
    grads, dextra = backward_batch(params, fwd, W)
    assert set(grads) == set(params.arrays)
    assert finite_difference_error(loss, params.arrays, grads) < 1e-4
    assert finite_difference_error(loss, {"x": extra}, {"x": dextra}) < 1e-4


def test_frozen_text_gets_no_gradients(rng):
    cfg = tiny_config()
    params = init_params(cfg, np.float64)
    params.set_stage("stage2")
    imgs = rng.random((2, 8, 8, 3))
    fwd = encode_batch(params, _mixed_batch(imgs), extra=np.ones((1, 8)), keep_cache=True)
    grads, _ = backward_batch(params, fwd, np.ones((5, 8)))
    assert grads and all(name.startswith("vit.") for name in grads)


def test_masked_forward_gradients(rng):
    cfg = tiny_config()
    params = init_params(cfg, np.float64)
    imgs = rng.random((3, 8, 8, 3))
    W = rng.normal(size=(3, 8))

    def build():
        b = SequenceBatch()
        for i in range(3):
            b.add_image(b.add_image_array(imgs[i]))
        return b

    def loss():
        return float((encode_batch(params, build(), mask_ratio=0.5,
                                   rng=stream(3, "masking", 0)).emb * W).sum())

    fwd = encode_batch(params, build(), mask_ratio=0.5, rng=stream(3, "masking", 0),
                       keep_cache=True)
    assert fwd.kept.shape == (3, 2)
    grads, _ = backward_batch(params, fwd, W)
    assert finite_difference_error(loss, params.arrays, grads) < 1e-4
