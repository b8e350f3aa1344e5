"""Synthetic topic-templated corpora and pair datasets.

Each topic owns a small vocabulary of pseudo-words and a fixed set of
sentence templates; both depend only on the topic index, so a pretraining
corpus and a pair dataset generated with different seeds share structure.
A document walks its topic's templates in a fixed cyclic order from a
random starting point, so neighbouring sentences predict each other; it may
be preceded by topic-neutral filler sentences.
"""

from __future__ import annotations

from collections import Counter

import numpy as np

from .corpus import PairRecord, RawDocument, words

FUNCTION_WORDS = ("the", "a", "of", "and", "to", "in", "is", "was", "for", "on")
FILLER_WORDS = ("report", "note", "item", "section", "page", "text", "entry", "record")
_ONSETS = "bdfgklmnprstvz"
_VOWELS = "aeiou"

TOPIC_WORDS = 8
TEMPLATES_PER_TOPIC = 6


def _pseudo_word(rng: np.random.Generator) -> str:
    return "".join(rng.choice(list(_ONSETS)) + rng.choice(list(_VOWELS)) for _ in range(3))


def topic_vocabulary(topic: int, size: int = TOPIC_WORDS) -> list[str]:
    """Pseudo-words owned by ``topic``; disjoint across topics."""
    taken: set[str] = set()
    for t in range(topic + 1):
        rng = np.random.default_rng(10_007 + t)
        owned: list[str] = []
        while len(owned) < size:
            w = _pseudo_word(rng)
            if w not in taken and w not in FUNCTION_WORDS:
                taken.add(w)
                owned.append(w)
    return owned


def _templates(vocab: list[str], shared: tuple[str, ...], seed: int, n: int) -> list[str]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        length = int(rng.integers(4, 8))
        picks = zip(rng.integers(0, len(vocab), size=length), rng.integers(0, len(shared), size=length))
        toks = [vocab[i] if rng.random() < 0.6 else shared[j] for i, j in picks]
        out.append(" ".join(toks).capitalize() + ".")
    return out


def topic_templates(topic: int) -> list[str]:
    return _templates(topic_vocabulary(topic), FUNCTION_WORDS, 20_011 + topic, TEMPLATES_PER_TOPIC)


def filler_templates() -> list[str]:
    return _templates(list(FILLER_WORDS), FUNCTION_WORDS, 30_011, TEMPLATES_PER_TOPIC)


def _fill(templates: list[str], n_tokens: int, rng: np.random.Generator) -> list[str]:
    out, count = [], 0
    while count < n_tokens:
        s = templates[int(rng.integers(len(templates)))]
        out.append(s)
        count += len(s.split())
    return out


def make_document(
    doc_id: str,
    topic: int,
    doc_len: int,
    rng: np.random.Generator,
    lead_in: int = 0,
    noise: float = 0.0,
) -> RawDocument:
    """About ``doc_len`` words: ``lead_in`` filler words, then topic sentences.

    ``noise`` is the probability that a body sentence is filler instead of
    topical.
    """
    topical, filler = topic_templates(topic), filler_templates()
    sentences = _fill(filler, lead_in, rng) if lead_in else []
    count = sum(len(s.split()) for s in sentences)
    cursor = int(rng.integers(len(topical)))
    while count < doc_len:
        if noise and rng.random() < noise:
            s = filler[int(rng.integers(len(filler)))]
        else:
            s = topical[cursor % len(topical)]
            cursor += 1
        sentences.append(s)
        count += len(s.split())
    return RawDocument(doc_id, " ".join(sentences))


def generate_corpus(n_docs: int, topics: int, doc_len: int, seed: int, lead_in: int = 0, noise: float = 0.0):
    rng = np.random.default_rng(seed)
    return [
        make_document(f"doc{i}", int(rng.integers(topics)), doc_len, rng, lead_in, noise)
        for i in range(n_docs)
    ]


def generate_fixture(
    n_pairs: int,
    topics: int,
    doc_len: int,
    seed: int,
    lead_in: int = 0,
    noise: float = 0.0,
    prefix: str = "",
) -> list[PairRecord]:
    """Balanced pairs: positives share a topic, negatives cross topics."""
    if topics < 2:
        raise ValueError("need at least two topics for negative pairs")
    rng = np.random.default_rng(seed)
    labels = np.array([1] * (n_pairs // 2) + [0] * (n_pairs - n_pairs // 2))
    if n_pairs % 2 and rng.random() < 0.5:
        labels[-1] = 1
    rng.shuffle(labels)
    pairs = []
    for i, label in enumerate(labels):
        t_src = int(rng.integers(topics))
        t_tgt = t_src if label else int((t_src + rng.integers(1, topics)) % topics)
        src = make_document(f"{prefix}p{i}s", t_src, doc_len, rng, lead_in, noise)
        tgt = make_document(f"{prefix}p{i}t", t_tgt, doc_len, rng, lead_in, noise)
        pairs.append(PairRecord(src, tgt, int(label)))
    return pairs


def bag_of_words_cosine(a: str, b: str) -> float:
    ca, cb = Counter(words(a)), Counter(words(b))
    dot = sum(ca[w] * cb[w] for w in ca)
    na = np.sqrt(sum(v * v for v in ca.values()))
    nb = np.sqrt(sum(v * v for v in cb.values()))
    return float(dot / (na * nb)) if na and nb else 0.0
