import math

import numpy as np
import pytest

from smith import diffcore as dc
from smith.corpus import CLS_ID, MASK_ID, NUM_SPECIAL
from smith.encoder import DocBatch, ModelConfig, SmithModel, encode
from smith.pretrain import (
    BlockMasks,
    WordMasks,
    apply_block_masks,
    block_similarity,
    mask_words,
    masked_block_loss,
    masked_forward,
    pretrain,
    pretrain_step,
    sample_block_positions,
)
from smith.segmenter import greedy_fill
from smith.training import TrainConfig

V = 40


def config(**kw):
    base = dict(vocab_size=V, L1=1, L2=1, H=8, A=2, Ls=8, Ld=4, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def docs(n, seed=0, Ls=8, Ld=4):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        sents = [rng.integers(4, V, size=int(rng.integers(2, Ls))).tolist() for _ in range(int(rng.integers(2, 10)))]
        out.append(greedy_fill(sents, Ls, Ld, f"d{i}"))
    return out


class TestMaskedBlockLoss:
    def test_single_block_is_zero(self):
        assert masked_block_loss(dc.Tensor(np.array([[0.3, 0.4]])), np.array([[1.0, 0.0]])).item() == 0.0

    @pytest.mark.parametrize("B", [1, 2, 5])
    def test_uniform_similarity_gives_log_b(self, B):
        pred = dc.Tensor(np.zeros((B, 3)))
        assert masked_block_loss(pred, np.ones((B, 3))).item() == pytest.approx(math.log(B), abs=1e-6)

    def test_diagonal_two(self):
        # Sim = [[2, 0], [0, 2]] -> ln(1 + e^-2)
        loss = masked_block_loss(dc.Tensor(2.0 * np.eye(2)), np.eye(2)).item()
        assert loss == pytest.approx(0.126928, abs=1e-6)
        assert loss == pytest.approx(math.log1p(math.exp(-2)), abs=1e-12)

    def test_empty(self):
        assert masked_block_loss(dc.Tensor(np.zeros((0, 3))), np.zeros((0, 3))).item() == 0.0

    def test_similarity_is_pairwise_dot(self):
        p, h = np.arange(6.0).reshape(2, 3), np.arange(9.0).reshape(3, 3)
        np.testing.assert_allclose(block_similarity(dc.Tensor(p), h).data, p @ h.T)

    def test_detached_targets_get_no_gradient(self):
        pred, orig = dc.parameter(np.eye(2)), dc.parameter(np.eye(2))
        with dc.Tape() as tape:
            loss = masked_block_loss(pred, orig)
        dc.backward(tape, loss)
        assert orig.grad is None and pred.grad is not None
        with dc.Tape() as tape:
            loss = masked_block_loss(pred, orig, detach=False)
        dc.backward(tape, loss)
        assert orig.grad is not None


class TestMaskWords:
    def batch(self, n=16):
        return DocBatch.from_documents(docs(n))

    def test_never_touches_cls_pad_or_excluded(self):
        batch = self.batch()
        exclude = np.zeros(batch.block_mask.shape, dtype=bool)
        exclude[:, 1] = True
        w = mask_words(batch, 0.5, V, np.random.default_rng(0), exclude)
        d, b, o = w.positions.T
        assert np.all(o > 0)
        assert np.all(batch.token_mask[d, b, o] == 1)
        assert not np.any(b == 1)
        np.testing.assert_array_equal(w.targets, batch.token_ids[d, b, o])

    def test_unselected_tokens_unchanged(self):
        batch = self.batch()
        w = mask_words(batch, 0.3, V, np.random.default_rng(1))
        changed = w.batch.token_ids != batch.token_ids
        sel = np.zeros_like(changed)
        sel[tuple(w.positions.T)] = True
        assert not np.any(changed & ~sel)
        assert np.all(w.batch.token_ids[:, :, 0] == batch.token_ids[:, :, 0])

    def test_80_10_10(self):
        batch = DocBatch.from_documents(docs(400, seed=3))
        w = mask_words(batch, 0.5, V, np.random.default_rng(2))
        new = w.batch.token_ids[tuple(w.positions.T)]
        n = len(new)
        assert n > 3000
        masked = np.mean(new == MASK_ID)
        kept = np.mean(new == w.targets)
        assert masked == pytest.approx(0.8, abs=0.03)
        # a random replacement can coincide with the original token
        assert kept == pytest.approx(0.1 + 0.1 / (V - NUM_SPECIAL), abs=0.03)
        assert np.all((new == MASK_ID) | (new >= NUM_SPECIAL))

    def test_rate_zero(self):
        w = mask_words(self.batch(), 0.0, V, np.random.default_rng(0))
        assert len(w.positions) == 0

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            mask_words(self.batch(), 1.0, V, np.random.default_rng(0))


class TestBlockMasks:
    def test_distinct_nonempty(self):
        block_mask = np.array([[1, 1, 1, 0], [1, 0, 0, 0], [1, 1, 0, 0]])
        for seed in range(50):
            m = sample_block_positions(block_mask, 2, np.random.default_rng(seed))
            assert np.all(block_mask[m.docs, m.blocks] == 1)
            assert np.bincount(m.docs, minlength=3).tolist() == [2, 1, 2]
            assert len({(d, b) for d, b in zip(m.docs, m.blocks)}) == len(m)

    def test_m_zero(self):
        assert len(sample_block_positions(np.ones((2, 3)), 0, np.random.default_rng(0))) == 0

    def test_apply_replaces_only_selected(self):
        reps = dc.Tensor(np.arange(24.0).reshape(2, 3, 4))
        masks = BlockMasks(np.array([0, 1]), np.array([2, 0]))
        out = apply_block_masks(reps, masks, dc.Tensor(np.full(4, -1.0))).data
        assert np.all(out[0, 2] == -1) and np.all(out[1, 0] == -1)
        np.testing.assert_array_equal(out[0, :2], reps.data[0, :2])


class TestMaskedForward:
    def test_masks_off_equals_plain_encode(self):
        model = SmithModel(config(), seed=0)
        batch = DocBatch.from_documents(docs(3))
        words = WordMasks(batch, np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64))
        blocks = BlockMasks(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
        out, wl, bl, acc = masked_forward(model, words, blocks)
        np.testing.assert_array_equal(out.embedding.data, encode(model, batch).embedding.data)
        assert wl.item() == 0.0 and bl.item() == 0.0 and acc is None

    def test_word_loss_matches_explicit_loop(self):
        """L_wp recomputed position by position from the plain encoder outputs."""
        model = SmithModel(config(), seed=0)
        batch = DocBatch.from_documents(docs(4, seed=6))
        w = mask_words(batch, 0.4, V, np.random.default_rng(0))
        none = BlockMasks(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
        _, wl, _, _ = masked_forward(model, w, none)
        out = encode(model, w.batch)
        table, bias = model["embeddings/token"].data, model["pretrain/word_bias"].data
        Ld = model.config.Ld
        nll = []
        for (d, b, o), target in zip(w.positions, w.targets):
            row = int(np.where(out.block_index == d * Ld + b)[0][0])
            logits = out.token_reps.data[row, o] @ table.T + bias
            nll.append(np.log(np.exp(logits - logits.max()).sum()) + logits.max() - logits[target])
        assert len(nll) > 0
        assert wl.item() == pytest.approx(np.mean(nll), abs=1e-12)

    def test_initial_word_loss_near_log_vocab(self):
        model = SmithModel(config(H=32, A=4), seed=0)
        batch = DocBatch.from_documents(docs(16, seed=7))
        w = mask_words(batch, 0.15, V, np.random.default_rng(0))
        _, wl, _, _ = masked_forward(model, w, sample_block_positions(batch.block_mask, 0, np.random.default_rng(0)))
        assert abs(wl.item() - math.log(V)) <= 0.5


class TestPretrainStep:
    def test_wp_mode_masks_no_blocks(self):
        model = SmithModel(config(), seed=0)
        opt = dc.Adam(model.params, lr=1e-3)
        loss = pretrain_step(model, DocBatch.from_documents(docs(4)), opt, np.random.default_rng(0), mode="wp")
        assert loss.masked_blocks == 0 and loss.sp == 0.0 and loss.total == loss.wp

    def test_joint_loss_is_sum(self):
        model = SmithModel(config(), seed=0)
        opt = dc.Adam(model.params, lr=1e-3)
        corpus = docs(4)
        loss = pretrain_step(model, DocBatch.from_documents(corpus), opt, np.random.default_rng(0))
        assert loss.total == pytest.approx(loss.sp + loss.wp)
        assert loss.masked_blocks == sum(min(2, d.num_blocks) for d in corpus)

    def test_unknown_mode(self):
        model = SmithModel(config(), seed=0)
        with pytest.raises(ValueError, match="loss mode"):
            pretrain_step(model, DocBatch.from_documents(docs(2)), dc.Adam(model.params), np.random.default_rng(0), mode="sp")

    def test_parameters_move(self):
        model = SmithModel(config(), seed=0)
        before = model.state()
        pretrain_step(model, DocBatch.from_documents(docs(4)), dc.Adam(model.params, lr=1e-3), np.random.default_rng(0))
        after = model.state()
        for name in ("embeddings/token", "pretrain/masked_block", "document/layer_0/ffn/inner/w"):
            assert not np.array_equal(before[name], after[name]), name
        # the matching head takes no part in pretraining
        assert np.array_equal(before["match/scale"], after["match/scale"])

    def test_seeded_runs_repeat_exactly(self):
        corpus = docs(12, seed=8)
        cfg = TrainConfig(lr=1e-3, warmup_steps=2, steps=5, batch_size=4, seed=11)
        runs = []
        for _ in range(2):
            model = SmithModel(config(dropout=0.1), seed=2)
            runs.append([(l.wp, l.sp) for l in pretrain(model, corpus, cfg)])
        assert runs[0] == runs[1]

    def test_callback_sees_every_step(self):
        seen = []
        pretrain(SmithModel(config(), seed=0), docs(6), TrainConfig(lr=1e-3, warmup_steps=0, steps=3, batch_size=2), callback=lambda s, l: seen.append(s))
        assert seen == [1, 2, 3]


def test_mask_token_is_reserved():
    assert MASK_ID < NUM_SPECIAL and CLS_ID < NUM_SPECIAL
