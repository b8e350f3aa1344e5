import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smith.corpus import CLS_ID, PAD_ID, RawDocument, build_vocab
from smith.segmenter import greedy_fill, naive_pad_count, pad_count, segment_document


def sentences_of(lengths, start=10):
    """Distinct token ids per sentence so assignments are traceable."""
    out, nxt = [], start
    for n in lengths:
        out.append(list(range(nxt, nxt + n)))
        nxt += n
    return out


def reference_assignment(lengths, Ls, Ld):
    """Per sentence: (block, tokens kept) or None when dropped."""
    cap = Ls - 1
    block, used, out = 0, 0, []
    for n in lengths:
        if used > 0 and used + n > cap:
            block, used = block + 1, 0
        if block >= Ld:
            out.append(None)
            continue
        kept = min(n, cap)
        out.append((block, kept))
        used += kept
    return out


def reference_blocks(sentences, Ls, Ld):
    blocks = [[] for _ in range(Ld)]
    for sent, where in zip(sentences, reference_assignment([len(s) for s in sentences], Ls, Ld)):
        if where is not None:
            blocks[where[0]].extend(sent[: where[1]])
    return blocks


def block_contents(doc):
    return [row[1:m.sum()].tolist() for row, m in zip(doc.token_ids, doc.token_mask)]


class TestGreedyFill:
    def test_worked_example(self):
        sents = sentences_of([5, 3, 4, 9, 2])
        doc = greedy_fill(sents, Ls=9, Ld=5)
        blocks = block_contents(doc)
        assert blocks[0] == sents[0] + sents[1]
        assert blocks[1] == sents[2]
        assert blocks[2] == sents[3][:8]
        assert blocks[3] == sents[4]
        assert doc.block_mask.tolist() == [1, 1, 1, 1, 0]
        pads = [9 - int(m.sum()) for m in doc.token_mask[:4]]
        assert pads == [0, 4, 0, 6]

    def test_single_sentence(self):
        doc = greedy_fill([[7, 8, 9]], Ls=8, Ld=2)
        assert doc.blocks[0].real_count == 4
        assert doc.block_mask.tolist() == [1, 0]
        assert doc.token_ids[0].tolist() == [CLS_ID, 7, 8, 9, PAD_ID, PAD_ID, PAD_ID, PAD_ID]

    def test_overflow_dropped_at_ld(self):
        sents = sentences_of([4, 4, 4])
        doc = greedy_fill(sents, Ls=9, Ld=1)
        assert block_contents(doc)[0] == sents[0] + sents[1]

    def test_empty_document(self):
        doc = greedy_fill([], Ls=6, Ld=3)
        assert doc.block_mask.tolist() == [1, 0, 0]
        assert doc.token_mask[0].tolist() == [1, 0, 0, 0, 0, 0]
        assert doc.token_ids[0, 0] == CLS_ID

    def test_empty_blocks_are_all_pad(self):
        doc = greedy_fill([[5, 6]], Ls=4, Ld=3)
        assert (doc.token_ids[1:] == PAD_ID).all() and (doc.token_mask[1:] == 0).all()

    @pytest.mark.parametrize("Ls,Ld", [(1, 2), (0, 2), (4, 0)])
    def test_bad_shape(self, Ls, Ld):
        with pytest.raises(ValueError):
            greedy_fill([[5]], Ls, Ld)

    def test_matches_reference_on_random_sequences(self):
        rng = np.random.default_rng(20240611)
        for _ in range(1000):
            Ls = int(rng.integers(2, 20))
            Ld = int(rng.integers(1, 8))
            lengths = rng.integers(0, 2 * Ls, size=int(rng.integers(0, 15))).tolist()
            sents = sentences_of(lengths)
            doc = greedy_fill(sents, Ls, Ld)
            expected = reference_blocks(sents, Ls, Ld)
            got = block_contents(doc)
            n = int(doc.block_mask.sum())
            assert got[:n] == expected[:n]
            assert all(not b for b in expected[n:])
            assert pad_count(doc) <= naive_pad_count(sents, Ls, Ld)

    @settings(max_examples=200)
    @given(
        st.lists(st.integers(0, 30), max_size=20),
        st.integers(2, 16),
        st.integers(1, 6),
    )
    def test_structural_invariants(self, lengths, Ls, Ld):
        sents = sentences_of(lengths)
        doc = greedy_fill(sents, Ls, Ld)
        bm = doc.block_mask.tolist()
        n = sum(bm)
        assert n >= 1 and bm == [1] * n + [0] * (Ld - n)
        for i in range(n):
            assert doc.token_ids[i, 0] == CLS_ID
            real = int(doc.token_mask[i].sum())
            assert doc.token_mask[i].tolist() == [1] * real + [0] * (Ls - real)
        # document order preserved across blocks
        flat = [t for b in block_contents(doc) for t in b]
        assert flat == sorted(flat)
        # a sentence that fits a block is never split
        cap = Ls - 1
        where = {}
        for b, content in enumerate(block_contents(doc)):
            for t in content:
                where[t] = b
        for s in sents:
            placed = {where[t] for t in s if t in where}
            if len(s) <= cap:
                assert len(placed) <= 1
        assert pad_count(doc) <= naive_pad_count(sents, Ls, Ld)


class TestSegmentDocument:
    vocab = build_vocab([RawDocument("v", "a b c d")], 10)

    def test_two_sentences_share_a_block(self):
        doc = segment_document(RawDocument("x", "A b. C d."), self.vocab, Ls=8, Ld=2)
        assert doc.block_mask.tolist() == [1, 0]
        assert doc.token_ids[0, :5].tolist() == [CLS_ID, 4, 5, 6, 7]
        assert doc.doc_id == "x"

    def test_empty_text(self):
        doc = segment_document(RawDocument("e", ""), self.vocab, Ls=8, Ld=2)
        assert doc.block_mask.tolist() == [1, 0]
        assert doc.token_mask[0].sum() == 1

    def test_capacity_arithmetic(self):
        text = " ".join(["a b c."] * 100)
        doc = segment_document(RawDocument("r", text), self.vocab, Ls=9, Ld=4)
        assert doc.block_mask.tolist() == [1, 1, 1, 1]
        assert [int(m.sum()) - 1 for m in doc.token_mask] == [6, 6, 6, 6]

    def test_short_text_is_one_block(self):
        doc = segment_document(RawDocument("s", "a b. c."), self.vocab, Ls=16, Ld=3)
        assert doc.num_blocks == 1

    def test_json_view(self):
        doc = segment_document(RawDocument("j", "a b. c d."), self.vocab, Ls=4, Ld=3)
        rec = doc.to_json()
        assert rec["doc_id"] == "j"
        assert rec["blocks"] == [[CLS_ID, 4, 5], [CLS_ID, 6, 7]]
        assert rec["block_mask"] == [1, 1, 0]
