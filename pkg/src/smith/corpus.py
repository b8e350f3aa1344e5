"""Text ingestion: sentence splitting, vocabulary building and tokenization.

Records on disk are line-delimited JSON. Corpus lines look like
``{"id": ..., "text": ...}`` and pair lines like
``{"source_id", "source_text", "target_id", "target_text", "label"}``.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .fileio import atomic_open, write_text

PAD, UNK, CLS, MASK = "[PAD]", "[UNK]", "[CLS]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, MASK)
PAD_ID, UNK_ID, CLS_ID, MASK_ID = 0, 1, 2, 3
NUM_SPECIAL = len(SPECIAL_TOKENS)

_SENTENCE_BREAK = re.compile(r"(?<=[.!?])\s+")
_WORD = re.compile(r"\w+")


@dataclass(frozen=True)
class RawDocument:
    id: str
    text: str


@dataclass(frozen=True)
class PairRecord:
    source: RawDocument
    target: RawDocument
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")


@dataclass
class Vocabulary:
    """Token <-> id bijection. Ids 0-3 are always PAD, UNK, CLS, MASK."""

    tokens: list[str]
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if tuple(self.tokens[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def lookup(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def save(self, path: str | Path) -> None:
        write_text(path, "\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line for line in lines if line])


def split_sentences(text: str) -> list[str]:
    """Split after '.', '!' or '?' when followed by whitespace.

    No abbreviation handling: ``"Dr. Smith"`` becomes two sentences.
    """
    text = text.strip()
    if not text:
        return []
    return _SENTENCE_BREAK.split(text)


def words(text: str) -> list[str]:
    """Lowercased word tokens; whitespace and punctuation both separate."""
    return _WORD.findall(text.lower())


def build_vocab(docs: Iterable[RawDocument], max_size: int, min_count: int = 1) -> Vocabulary:
    if max_size < NUM_SPECIAL + 1:
        raise ValueError(f"max_size must be >= {NUM_SPECIAL + 1}, got {max_size}")
    counts: Counter[str] = Counter()
    for doc in docs:
        counts.update(words(doc.text))
    return vocab_from_counts(counts, max_size, min_count)


def vocab_from_counts(counts: Counter[str], max_size: int, min_count: int = 1) -> Vocabulary:
    """Deterministic selection: frequency descending, then lexicographic.

    Counters from sharded corpora can be summed before calling this, so the
    result does not depend on shard order.
    """
    kept = sorted(
        ((tok, n) for tok, n in counts.items() if n >= min_count),
        key=lambda item: (-item[1], item[0]),
    )
    return Vocabulary(list(SPECIAL_TOKENS) + [tok for tok, _ in kept[: max_size - NUM_SPECIAL]])


def tokenize(sentence: str, vocab: Vocabulary) -> list[int]:
    return [vocab.lookup(tok) for tok in words(sentence)]


# --- line-delimited JSON I/O -------------------------------------------------


def _iter_json_lines(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None


def read_documents(path: str | Path) -> list[RawDocument]:
    docs, seen = [], set()
    for rec in _iter_json_lines(path):
        doc = RawDocument(str(rec["id"]), rec["text"])
        if not doc.id:
            raise ValueError(f"{path}: empty document id")
        if doc.id in seen:
            raise ValueError(f"{path}: duplicate document id {doc.id!r}")
        seen.add(doc.id)
        docs.append(doc)
    return docs


def write_documents(docs: Iterable[RawDocument], path: str | Path) -> None:
    with atomic_open(path) as fh:
        for doc in docs:
            fh.write(json.dumps({"id": doc.id, "text": doc.text}) + "\n")


def read_pairs(path: str | Path) -> list[PairRecord]:
    pairs = []
    for rec in _iter_json_lines(path):
        pairs.append(
            PairRecord(
                RawDocument(str(rec["source_id"]), rec["source_text"]),
                RawDocument(str(rec["target_id"]), rec["target_text"]),
                int(rec["label"]),
            )
        )
    return pairs


def write_pairs(pairs: Iterable[PairRecord], path: str | Path) -> None:
    with atomic_open(path) as fh:
        for p in pairs:
            rec = {
                "source_id": p.source.id,
                "source_text": p.source.text,
                "target_id": p.target.id,
                "target_text": p.target.text,
                "label": p.label,
            }
            fh.write(json.dumps(rec) + "\n")


def pair_documents(pairs: Iterable[PairRecord]) -> list[RawDocument]:
    """Unique documents referenced by a pair file, first occurrence wins."""
    seen: dict[str, RawDocument] = {}
    for p in pairs:
        for doc in (p.source, p.target):
            seen.setdefault(doc.id, doc)
    return list(seen.values())
