import numpy as np
import pytest

from smith.corpus import words, write_pairs
from smith.fixtures import (
    FILLER_WORDS,
    FUNCTION_WORDS,
    bag_of_words_cosine,
    generate_corpus,
    generate_fixture,
    make_document,
    topic_vocabulary,
)


class TestFixture:
    def test_seed_gives_identical_file(self, tmp_path):
        write_pairs(generate_fixture(20, 3, 60, seed=4), tmp_path / "a.jsonl")
        write_pairs(generate_fixture(20, 3, 60, seed=4), tmp_path / "b.jsonl")
        write_pairs(generate_fixture(20, 3, 60, seed=5), tmp_path / "c.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        assert (tmp_path / "a.jsonl").read_bytes() != (tmp_path / "c.jsonl").read_bytes()

    @pytest.mark.parametrize("n", [10, 11, 64])
    def test_label_balance(self, n):
        labels = [p.label for p in generate_fixture(n, 3, 30, seed=0)]
        assert abs(sum(labels) - n / 2) <= 1

    def test_needs_two_topics(self):
        with pytest.raises(ValueError):
            generate_fixture(4, 1, 30, seed=0)

    def test_topic_vocabularies_disjoint(self):
        vocabs = [set(topic_vocabulary(t)) for t in range(6)]
        for i in range(6):
            for j in range(i + 1, 6):
                assert not vocabs[i] & vocabs[j]
            assert not vocabs[i] & set(FUNCTION_WORDS)

    def test_positive_pairs_share_topic_words(self):
        topics = [set(topic_vocabulary(t)) for t in range(3)]

        def topic_of(text):
            present = set(words(text))
            return [i for i, v in enumerate(topics) if v & present]

        for p in generate_fixture(30, 3, 40, seed=2):
            s, t = topic_of(p.source.text), topic_of(p.target.text)
            assert len(s) == len(t) == 1
            assert (s == t) == bool(p.label)

    def test_bag_of_words_baseline(self):
        pairs = generate_fixture(64, 3, 60, seed=1)
        scores = np.array([bag_of_words_cosine(p.source.text, p.target.text) for p in pairs])
        labels = np.array([p.label for p in pairs])
        assert np.mean((scores >= 0.5) == labels) >= 0.9


class TestDocuments:
    def test_length(self):
        doc = make_document("x", 0, 100, np.random.default_rng(0))
        assert 100 <= len(doc.text.split()) < 100 + 8

    def test_lead_in_is_topic_neutral(self):
        doc = make_document("x", 1, 200, np.random.default_rng(0), lead_in=64)
        head = words(doc.text)[:64]
        assert set(head) <= set(FILLER_WORDS) | set(FUNCTION_WORDS)
        assert set(words(doc.text)) & set(topic_vocabulary(1))

    def test_corpus_ids_unique(self):
        docs = generate_corpus(30, 4, 40, seed=0)
        assert len({d.id for d in docs}) == 30

    def test_bag_of_words_cosine(self):
        assert bag_of_words_cosine("a b", "a b") == pytest.approx(1.0)
        assert bag_of_words_cosine("a", "b") == 0.0
        assert bag_of_words_cosine("", "b") == 0.0
