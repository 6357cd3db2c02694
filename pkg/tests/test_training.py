import math
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import finite_difference_error, tiny_config
from mmembed import nn
from mmembed.config import ConfigError, TrainConfig
from mmembed.model import init_params
from mmembed.seeding import stream
from mmembed.training import (AdamW, BatchError, Example, Item, Stage1Source, Stage2Source,
                              Trainer, TrainingBatch, clip_by_global_norm, contrastive_loss,
                              info_nce, lr_at, stage1_loss, stage2_loss)


def _unit(rows):
    rows = np.asarray(rows, dtype=np.float64)
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# loss identities

@pytest.mark.parametrize("n", [2, 3, 8])
@pytest.mark.parametrize("tau", [0.02, 0.5, 3.0])
def test_identical_rows_give_log_batch(n, tau):
    U = np.tile(_unit([[0.3, -0.2, 0.9]]), (n, 1))
    loss, _, _ = contrastive_loss(U, U, tau)
    assert abs(loss - math.log(n)) <= 1e-12


def test_single_self_pair_is_zero():
    u = _unit([[1.0, 2.0]])
    assert contrastive_loss(u, u, 0.02)[0] == 0.0


def test_orthogonal_positives_vanish():
    U = np.eye(3)
    loss, _, _ = contrastive_loss(U, U, 0.02)
    assert loss <= 1e-12
    # closed form: log(1 + 2 e^{-50})
    assert abs(loss - math.log1p(2 * math.exp(-50))) < 1e-20


def test_loss_rejects_bad_inputs():
    U = np.eye(2)
    with pytest.raises(ValueError):
        contrastive_loss(U, U, 0.0)
    with pytest.raises(ValueError):
        contrastive_loss(U, np.eye(3), 0.1)


def test_negative_probability_form_differs():
    r = np.random.default_rng(0)
    U, V = _unit(r.normal(size=(4, 5))), _unit(r.normal(size=(4, 5)))
    a = contrastive_loss(U, V, 0.5, "log")[0]
    b = contrastive_loss(U, V, 0.5, "negative_probability")[0]
    assert a > 0 and -1 <= b < 0


@pytest.mark.parametrize("form", ["log", "negative_probability"])
def test_info_nce_gradient(form):
    r = np.random.default_rng(1)
    Q, C = r.normal(size=(3, 4)), r.normal(size=(5, 4))
    targets = np.array([0, 2, 4])
    _, dQ, dC = info_nce(Q, C, targets, 0.7, form)
    f = lambda: info_nce(Q, C, targets, 0.7, form)[0]
    assert finite_difference_error(f, {"q": Q, "c": C}, {"q": dQ, "c": dC}) < 1e-6


def test_temperature_scaling_keeps_argmax():
    r = np.random.default_rng(2)
    Q, C = _unit(r.normal(size=(6, 5))), _unit(r.normal(size=(9, 5)))
    logits = Q @ C.T
    for c in (0.1, 3.0):
        assert np.array_equal(np.argmax(logits / (0.02 * c), 1), np.argmax(logits / 0.02, 1))


# ---------------------------------------------------------------------------
# schedule / optimizer

def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 2e-5
    assert lr_at(cfg.total_steps, cfg) == 0.0
    assert abs(lr_at(cfg.total_steps // 2, cfg) - 1e-5) < 1e-20
    with pytest.raises(ValueError):
        lr_at(cfg.total_steps + 1, cfg)
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_train_config_defaults():
    cfg = TrainConfig()
    assert (cfg.tau, cfg.lr_init, cfg.mask_ratio_stage1, cfg.hard_negatives_per_query) == \
        (0.02, 2e-5, 0.5, 3)
    assert cfg.total_steps == 600
    assert TrainConfig(stage="stage1", total_steps=1000).masked_steps == 700
    with pytest.raises(ConfigError):
        TrainConfig(tau=0.0)


def _scalar_params(value, trainable=True):
    return SimpleNamespace(arrays={"w": np.array([value], dtype=np.float64)},
                           trainable={"w": trainable})


def test_adamw_matches_manual_recurrence():
    p = _scalar_params(0.5)
    opt = AdamW()
    lr = 0.1
    for _ in range(2):
        opt.step(p, {"w": np.array([1.0])}, lr)
    # manual recurrence, 64-bit scalars
    w, m, v = 0.5, 0.0, 0.0
    for t in (1, 2):
        m = 0.9 * m + 0.1 * 1.0
        v = 0.999 * v + 0.001 * 1.0
        mhat, vhat = m / (1 - 0.9 ** t), v / (1 - 0.999 ** t)
        w = w - lr * (mhat / (math.sqrt(vhat) + 1e-8) + 0.01 * w)
    assert abs(p.arrays["w"][0] - w) < 1e-15


def test_adamw_zero_gradient_is_pure_decay():
    p = _scalar_params(2.0)
    AdamW().step(p, {"w": np.array([0.0])}, 0.1)
    assert abs(p.arrays["w"][0] - (2.0 - 0.1 * 0.01 * 2.0)) < 1e-15


def test_adamw_rejects_frozen_gradient():
    p = _scalar_params(1.0, trainable=False)
    with pytest.raises(ValueError, match="frozen"):
        AdamW().step(p, {"w": np.array([1.0])}, 0.1)


def test_adamw_non_finite_update():
    p = _scalar_params(1.0)
    with pytest.raises(nn.NumericError, match="w"):
        AdamW().step(p, {"w": np.array([np.nan])}, 0.1)


def test_clip_by_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_by_global_norm(grads, 1.0) == 5.0
    assert abs(np.sqrt(grads["a"][0] ** 2 + grads["b"][0] ** 2) - 1.0) < 1e-12


# ---------------------------------------------------------------------------
# batches

def _items(r, n, kind, prefix, size=8):
    out = []
    for i in range(n):
        tokens = r.integers(3, 16, size=int(r.integers(1, 4))) if kind != "image" else None
        image = r.random((size, size, 3)) if kind != "text" else None
        out.append(Item(f"{prefix}{i}", tokens, image))
    return out


def test_candidate_pool_sizes(rng):
    q = _items(rng, 2, "image_text", "q")
    c = _items(rng, 2, "image", "c")
    none = TrainingBatch(q, c, [], "it2i")
    assert len(none.candidate_pool()[0]) == 2
    three = TrainingBatch(q, c, [_items(rng, 3, "image", f"n{i}-") for i in range(2)], "it2i")
    assert len(three.candidate_pool()[0]) == 2 + 6
    nine = TrainingBatch(q, c, [_items(rng, 9, "image", f"m{i}-") for i in range(2)], "it2i")
    assert len(nine.candidate_pool()[0]) == 2 + 18
    fewer = TrainingBatch(q, c, [g[:1] for g in three.hard_negative_groups], "it2i")
    assert len(fewer.candidate_pool()[0]) <= len(three.candidate_pool()[0])


def test_hard_negative_equal_to_positive_rejected(rng):
    q = _items(rng, 2, "image_text", "q")
    c = _items(rng, 2, "image", "c")
    with pytest.raises(BatchError):
        TrainingBatch(q, c, [[c[0]], []], "it2i")


def _constant_output(params):
    """Force every encoding to the same unit vector via the final layer norm."""
    params.arrays["text.lnf.g"][:] = 0.0
    params.arrays["text.lnf.b"][:] = np.linspace(-1, 1, params.config.d_model)


def test_stage1_uniform_loss(rng):
    params = init_params(tiny_config(), np.float64)
    _constant_output(params)
    texts = _items(rng, 4, "text", "t")
    images = _items(rng, 4, "image", "i")
    loss, _ = stage1_loss(params, texts, images, TrainConfig(stage="stage1"), 0.0, None, False)
    assert abs(loss - 2 * math.log(4)) < 1e-12


def test_stage1_rejects_single_pair(rng):
    params = init_params(tiny_config(), np.float64)
    with pytest.raises(BatchError):
        stage1_loss(params, _items(rng, 1, "text", "t"), _items(rng, 1, "image", "i"),
                    TrainConfig(stage="stage1"), 0.0, None)


def test_stage2_uniform_loss(rng):
    params = init_params(tiny_config(), np.float64)
    _constant_output(params)
    batch = TrainingBatch(_items(rng, 2, "image_text", "q"), _items(rng, 2, "image", "c"), [],
                          "it2i")
    loss, _ = stage2_loss(params, batch, TrainConfig(), False)
    assert abs(loss - math.log(2)) < 1e-12


def test_stage2_rejects_single_query_without_negatives(rng):
    params = init_params(tiny_config(), np.float64)
    batch = TrainingBatch(_items(rng, 1, "text", "q"), _items(rng, 1, "image", "c"), [], "t2it")
    with pytest.raises(BatchError):
        stage2_loss(params, batch, TrainConfig())


def test_stage2_orthogonal_query_closed_form():
    Q = np.array([[1.0, 0, 0, 0]])
    C = np.eye(4)
    loss, _, _ = info_nce(Q, C, [0], 0.02)
    assert loss <= 1e-12


# ---------------------------------------------------------------------------
# gradient oracles on the heads

def test_stage1_gradients(rng):
    params = init_params(tiny_config(), np.float64)
    texts, images = _items(rng, 3, "text", "t"), _items(rng, 3, "image", "i")
    cfg = TrainConfig(stage="stage1", tau=0.5)

    def f():
        return stage1_loss(params, texts, images, cfg, 0.5, stream(0, "masking", 1), False)[0]

    _, grads = stage1_loss(params, texts, images, cfg, 0.5, stream(0, "masking", 1))
    assert grads and all(k.startswith("vit.") for k in grads)
    assert finite_difference_error(f, params.arrays, grads) < 1e-4


@pytest.mark.parametrize("composition", ["interleaved", "score_fusion"])
@pytest.mark.parametrize("bidirectional", [False, True])
def test_stage2_gradients(rng, composition, bidirectional):
    params = init_params(tiny_config(), np.float64)
    q = _items(rng, 2, "image_text", "q")
    c = [Item("c0", image=rng.random((8, 8, 3))), Item("c1", np.array([3, 4]), rng.random((8, 8, 3)))]
    hn = [[Item("n0", np.array([9]), rng.random((8, 8, 3)))], [Item("n1", image=rng.random((8, 8, 3)))]]
    batch = TrainingBatch(q, c, hn, "it2i")
    cfg = TrainConfig(tau=0.5, composition=composition, bidirectional=bidirectional)
    _, grads = stage2_loss(params, batch, cfg)
    f = lambda: stage2_loss(params, batch, cfg, False)[0]
    assert finite_difference_error(f, params.arrays, grads) < 1e-4


def test_finetune_gradients_reach_text(rng):
    params = init_params(tiny_config(), np.float64)
    params.set_stage("finetune")
    batch = TrainingBatch(_items(rng, 2, "text", "q"), _items(rng, 2, "image_text", "c"), [], "t2it")
    cfg = TrainConfig(stage="finetune", tau=0.5)
    _, grads = stage2_loss(params, batch, cfg)
    assert any(k.startswith("text.") for k in grads)
    f = lambda: stage2_loss(params, batch, cfg, False)[0]
    assert finite_difference_error(f, params.arrays, grads) < 1e-4


# ---------------------------------------------------------------------------
# trainer

def test_one_step_descends():
    wins = 0
    for seed in range(5):
        r = np.random.default_rng(seed)
        params = init_params(tiny_config(seed=seed), np.float64)
        texts, images = _items(r, 2, "text", "t"), _items(r, 2, "image", "i")
        cfg = TrainConfig(stage="stage1", tau=0.5, lr_init=1e-3)
        before, grads = stage1_loss(params, texts, images, cfg, 0.0, None)
        AdamW.from_config(cfg).step(params, grads, 1e-3)
        after, _ = stage1_loss(params, texts, images, cfg, 0.0, None, False)
        wins += after < before
    assert wins >= 4


def _stage2_source(r, hn=2):
    examples = []
    for g in range(6):
        pool = tuple(_items(r, 3, "image", f"g{g}-"))
        examples.append(Example(_items(r, 1, "image_text", f"q{g}-")[0], pool[0], pool, f"g{g}"))
    t2it = [Example(q, c) for q, c in zip(_items(r, 6, "text", "tq"), _items(r, 6, "image_text", "d"))]
    return Stage2Source({"it2i": examples, "t2it": t2it}, 3, hn, seed=0, order=["it2i", "t2it"])


def test_stage2_keeps_text_frozen(tmp_path):
    r = np.random.default_rng(0)
    params = init_params(tiny_config())
    before = {k: v.copy() for k, v in params.arrays.items()}
    cfg = TrainConfig(stage="stage2", total_steps=4, lr_init=1e-2, batch_size=3)
    trainer = Trainer(params, cfg, _stage2_source(r), log_path=tmp_path / "log")
    trainer.run()
    assert [h[1] for h in trainer.history] == ["it2i", "t2it", "it2i", "t2it"]
    for name in params.text_names:
        assert np.array_equal(params.arrays[name], before[name])
    assert any(not np.array_equal(params.arrays[n], before[n]) for n in params.vision_names)
    lines = (tmp_path / "log").read_text().splitlines()
    assert len(lines) == 4
    step, tag, lr, loss = lines[1].split("\t")
    assert (step, tag) == ("1", "t2it") and float(lr) == pytest.approx(7.5e-3)


def test_finetune_unfreezes_text():
    r = np.random.default_rng(0)
    params = init_params(tiny_config())
    before = params.arrays["text.layer0.ffn.w1"].copy()
    cfg = TrainConfig(stage="finetune", total_steps=1, lr_init=1e-2, batch_size=3,
                      hard_negatives_per_query=2)
    Trainer(params, cfg, _stage2_source(r)).run()
    assert not np.array_equal(params.arrays["text.layer0.ffn.w1"], before)


def test_stage1_source_deterministic():
    r = np.random.default_rng(0)
    pairs = list(zip(_items(r, 10, "text", "t"), _items(r, 10, "image", "i")))
    a, b = Stage1Source(pairs, 4, 7), Stage1Source(pairs, 4, 7)
    for step in range(3):
        ta, _ = a.batch(step)[1]
        tb, _ = b.batch(step)[1]
        assert [t.id for t in ta] == [t.id for t in tb]


def test_stage2_source_hard_negatives_exclude_positive():
    src = _stage2_source(np.random.default_rng(0), hn=2)
    for step in range(0, 10, 2):
        tag, batch = src.batch(step)
        assert tag == "it2i"
        for pos, group in zip(batch.candidates, batch.hard_negative_groups):
            assert len(group) == 2 and pos.id not in {g.id for g in group}


def test_run_config_stage_defaults():
    from mmembed.config import RunConfig

    cfg = RunConfig()
    assert cfg.stage1.lr_init == 1e-3 and cfg.stage1.total_steps == 1000
    assert cfg.stage2.lr_init == 5e-4 and cfg.stage2.total_steps == 600
    assert cfg.stage2.hard_negatives_per_query == 3 and cfg.stage2.tau == 0.02
    assert cfg.finetune.lr_init == 2e-5
    assert (cfg.model.d_model, cfg.model.n_text_layers, cfg.model.n_vit_layers) == (64, 2, 2)
