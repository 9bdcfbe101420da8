from __future__ import annotations

import math

import numpy as np
import pytest

from genkie import autograd as ag
from genkie.corpus import generate_corpus
from genkie.net import (
    Batch,
    CheckpointError,
    Model,
    ModelConfig,
    NumericalError,
    TrainConfig,
    forward,
    load_checkpoint,
    read_checkpoint_header,
    save_checkpoint,
    train,
)
from genkie.pipeline import ImageCache, build_instances, collate, predict
from genkie.tokenizer import BEG_ID, PAD_ID, train_bpe
from oracles import gradient_check, param_group

SCHEMA = ("company", "address", "date", "total")


@pytest.fixture(scope="module")
def data():
    docs = generate_corpus(SCHEMA, 8, 0)
    vocab = train_bpe([" " + s for d in docs for s in d.transcript], 400)
    images = ImageCache()
    images.add(docs)
    return docs, vocab, images


def small_config(vocab_size: int, **kw) -> ModelConfig:
    base = dict(vocab_size=vocab_size, d=24, heads=2, enc_layers=1, dec_layers=1, d_ff=48, dropout=0.0,
                max_enc_len=512, max_dec_len=64, conv_channels=(2, 4, 4))
    base.update(kw)
    return ModelConfig(**base)


def _batch(data, n=3, style="template", use_visual=True):
    docs, vocab, images = data
    inst = build_instances(docs[:2], vocab, "entity-extraction", style, SCHEMA)[:n]
    return collate(inst, images, use_visual)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d=100)
    with pytest.raises(ValueError):
        ModelConfig(d=96, heads=5)
    with pytest.raises(ValueError):
        ModelConfig(conv_channels=(4, 4))
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    assert ModelConfig.from_dict({"d": 12, "heads": 2, "bogus": 1}).d == 12


def test_weight_tying_single_storage(data):
    m = Model(small_config(len(data[1])), seed=0)
    assert not any(k in m.params for k in ("out_w", "lm_head", "proj_out"))
    b = _batch(data)
    e, mask = m.embed(b)
    before = m.forward(e, mask, b.target[:, :-1]).data.copy()
    # bumping one token row moves that token's logit even with the encoder input fixed
    tok = int(b.target[0, 1])
    m.params["tok"].data[tok] += 0.5
    after = m.forward(e, mask, b.target[:, :-1]).data
    assert not np.allclose(before[..., tok], after[..., tok])
    # ... and changes the encoder input through the same table
    e2, _ = m.embed(b)
    assert not np.allclose(e.data, e2.data)


def test_causality(data):
    m = Model(small_config(len(data[1])), seed=1)
    b = _batch(data, n=1)
    with ag.no_grad():
        e, mask = m.embed(b)
    seq = list(b.target[0, :8])
    base = forward(m, e, mask[0], seq)
    for t in range(1, 8):
        alt = list(seq)
        alt[t] = (alt[t] + 7) % m.config.vocab_size
        out = forward(m, e, mask[0], alt)
        np.testing.assert_array_equal(out[:t], base[:t])
        assert not np.allclose(out[t], base[t])


def test_padding_invariance(data):
    m = Model(small_config(len(data[1]), use_visual=False), seed=2)
    b = _batch(data, n=1, use_visual=False)
    L = b.ids.shape[1]
    padded = Batch(
        np.concatenate([b.ids, np.full((1, 9), PAD_ID)], axis=1),
        np.concatenate([b.layout, np.zeros((1, 9, 6), dtype=np.int64)], axis=1),
        np.concatenate([b.mask, np.zeros((1, 9), dtype=bool)], axis=1),
        None,
    )
    with ag.no_grad():
        e1, m1 = m.embed(b)
        e2, m2 = m.embed(padded)
    tgt = list(b.target[0, :6])
    a = forward(m, e1, m1[0], tgt)
    c = forward(m, e2, m2[0], tgt)
    np.testing.assert_allclose(a, c, atol=1e-6)
    assert e2.shape[1] == L + 9


def test_logits_bit_reproducible(data):
    b = _batch(data)
    outs = []
    for _ in range(2):
        m = Model(small_config(len(data[1])), seed=5)
        with ag.no_grad():
            e, mask = m.embed(b)
            outs.append(m.forward(e, mask, b.target[:, :-1]).data)
    assert np.array_equal(outs[0], outs[1])


def test_length_overflow(data):
    m = Model(small_config(len(data[1]), max_dec_len=4), seed=0)
    b = _batch(data, n=1)
    with ag.no_grad():
        e, mask = m.embed(b)
    with pytest.raises(ValueError):
        forward(m, e, mask[0], [BEG_ID] * 5)
    with pytest.raises(ValueError):
        forward(m, e, mask[0], [5, 6])


def test_loss_masking(data):
    m = Model(small_config(len(data[1])), seed=3)
    b = _batch(data)
    base = float(m.loss(b).data)
    lengths = (b.target != PAD_ID).sum(axis=1)
    assert lengths.min() < b.target.shape[1]  # some rows are padded
    changed = b.target.copy()
    for i, n in enumerate(lengths):
        changed[i, n:] = (np.arange(b.target.shape[1] - n) % 5) + 7  # overwrite PAD targets
    assert float(m.loss(Batch(b.ids, b.layout, b.mask, b.pooled, changed, b.weight)).data) == base


def test_prefix_tokens_not_supervised_by_default(data):
    docs, vocab, images = data
    inst = build_instances(docs[:1], vocab, "entity-extraction", "template", SCHEMA)
    b = collate(inst, images, True)
    on = collate(inst, images, True, loss_on_prefix=True)
    for i, it in enumerate(inst):
        assert it.prefix_len > 0
        assert b.weight[i, :it.prefix_len].sum() == 0 and on.weight[i, :it.prefix_len].sum() == it.prefix_len


def test_initial_loss_near_uniform(data):
    b = _batch(data)
    V = len(data[1])
    # with small embedding tables the initial predictions are ~uniform
    m = Model(small_config(V, embed_std=0.02), seed=0)
    assert abs(float(m.loss(b).data) - math.log(V)) < 0.05
    # the default, larger tables start above ln V by roughly the logit variance d * std^2
    cfg = ModelConfig(vocab_size=V, dropout=0.0)
    loss = float(Model(cfg, seed=0).loss(b).data)
    assert math.log(V) < loss < math.log(V) + 1.5 * cfg.d * cfg.embed_std ** 2


def test_same_seed_same_loss_curve(data):
    b = _batch(data)
    curves = []
    for _ in range(2):
        m = Model(small_config(len(data[1]), dropout=0.1), seed=0)
        res = train(m, lambda e, r: [b, b], TrainConfig(epochs=3, batch_size=3, lr=1e-3, seed=4, log_every=0))
        curves.append(res.losses)
    assert curves[0] == curves[1] and len(curves[0]) == 6


def test_overfit_sixteen_examples(data):
    docs, vocab, images = data
    inst = build_instances(docs, vocab, "entity-extraction", "question", SCHEMA)[:16]
    assert len(inst) == 16
    m = Model(ModelConfig(vocab_size=len(vocab), dropout=0.0), seed=0)
    b = collate(inst, images, True)
    res = train(m, lambda e, r: [b], TrainConfig(epochs=500, batch_size=16, lr=1e-3, log_every=0), max_steps=500)
    assert min(res.losses[-5:]) < 0.05, res.losses[-5:]
    preds = predict(m, inst, vocab, images, width=1)
    assert all(set(p.pairs) == set(p.instance.gold) for p in preds)


def test_non_finite_loss_aborts(data):
    m = Model(small_config(len(data[1])), seed=0)
    m.params["enc0.ff1_w"].data[:] = np.nan
    b = _batch(data)
    with pytest.raises(NumericalError, match="non-finite loss"):
        train(m, lambda e, r: [b], TrainConfig(epochs=1, batch_size=3, lr=1e-3, log_every=0))


def test_gradient_check_small_model(data):
    m = Model(small_config(len(data[1])), seed=0)
    rows = gradient_check(m, _batch(data), per_tensor=1)
    groups = {param_group(r[0]) for r in rows}
    assert {"tok", "vis_proj", "conv", "enc0", "dec0", "lay_x0", "lay_h"} <= groups
    worst = max(rows, key=lambda r: r[4])
    assert worst[4] < 1e-3, worst


def test_checkpoint_roundtrip(tmp_path, data):
    m = Model(small_config(len(data[1])), seed=0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path, "abc", extra={"note": 1})
    head = read_checkpoint_header(path)
    assert head["vocab_hash"] == "abc" and head["config"]["d"] == 24 and head["extra"] == {"note": 1}
    back, meta = load_checkpoint(path, vocab_hash="abc")
    assert back.config == m.config
    for k, t in m.params.items():
        assert back.params[k].data.dtype == t.data.dtype
        assert np.array_equal(back.params[k].data, t.data)
    b = _batch(data)
    with ag.no_grad():
        e, mask = m.embed(b)
        e2, _ = back.embed(b)
        assert np.array_equal(m.forward(e, mask, b.target[:, :-1]).data, back.forward(e2, mask, b.target[:, :-1]).data)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, vocab_hash="other")
    with pytest.raises(CheckpointError):
        load_checkpoint(path, config=small_config(len(data[1]), d=12))
    (tmp_path / "junk").write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk")
