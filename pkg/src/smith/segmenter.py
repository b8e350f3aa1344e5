"""Greedy sentence filling into fixed-capacity sentence blocks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import CLS_ID, PAD_ID, RawDocument, Vocabulary, split_sentences, tokenize


@dataclass
class SentenceBlock:
    token_ids: np.ndarray  # [Ls] int64, PAD-filled
    token_mask: np.ndarray  # [Ls] int8, 1 for real tokens (CLS included)
    real_count: int


@dataclass
class SegmentedDocument:
    token_ids: np.ndarray  # [Ld, Ls]
    token_mask: np.ndarray  # [Ld, Ls]
    block_mask: np.ndarray  # [Ld], prefix of ones
    doc_id: str = ""

    @property
    def num_blocks(self) -> int:
        return int(self.block_mask.sum())

    @property
    def blocks(self) -> list[SentenceBlock]:
        return [
            SentenceBlock(self.token_ids[i], self.token_mask[i], int(self.token_mask[i].sum()))
            for i in range(len(self.block_mask))
        ]

    def to_json(self) -> dict:
        n = self.num_blocks
        return {
            "doc_id": self.doc_id,
            "blocks": [row[mask.astype(bool)].tolist() for row, mask in zip(self.token_ids[:n], self.token_mask[:n])],
            "block_mask": self.block_mask.tolist(),
        }


def pack_sentences(sentences: Sequence[Sequence[int]], Ls: int, Ld: int) -> list[list[int]]:
    """Assign token ids to blocks, CLS excluded. Returns at most ``Ld`` lists.

    A sentence joins the current block only if it fits whole; otherwise it
    opens the next block. A sentence longer than the block capacity keeps
    its head and fills an empty block on its own.
    """
    return _pack(sentences, Ls, Ld)[0]


def _pack(sentences, Ls, Ld):
    if Ls < 2:
        raise ValueError(f"Ls must be >= 2 (CLS plus one token), got {Ls}")
    if Ld < 1:
        raise ValueError(f"Ld must be >= 1, got {Ld}")
    capacity = Ls - 1
    blocks: list[list[int]] = [[]]
    used = 0
    for sent in sentences:
        current = blocks[-1]
        if len(current) + len(sent) > capacity and current:
            if len(blocks) == Ld:
                break
            current = []
            blocks.append(current)
        current.extend(sent[:capacity])
        used += 1
    return blocks, used


def greedy_fill(sentences: Sequence[Sequence[int]], Ls: int, Ld: int, doc_id: str = "") -> SegmentedDocument:
    blocks = pack_sentences(sentences, Ls, Ld)
    token_ids = np.full((Ld, Ls), PAD_ID, dtype=np.int64)
    token_mask = np.zeros((Ld, Ls), dtype=np.int8)
    block_mask = np.zeros(Ld, dtype=np.int8)
    for i, content in enumerate(blocks):
        n = len(content) + 1
        token_ids[i, 0] = CLS_ID
        token_ids[i, 1:n] = content
        token_mask[i, :n] = 1
        block_mask[i] = 1
    return SegmentedDocument(token_ids, token_mask, block_mask, doc_id)


def segment_document(doc: RawDocument, vocab: Vocabulary, Ls: int, Ld: int) -> SegmentedDocument:
    sentences = [tokenize(s, vocab) for s in split_sentences(doc.text)]
    return greedy_fill(sentences, Ls, Ld, doc_id=doc.id)


def naive_pad_count(sentences: Sequence[Sequence[int]], Ls: int, Ld: int) -> int:
    """PAD tokens if each retained sentence got its own block."""
    _, used = _pack(sentences, Ls, Ld)
    if used == 0:
        return Ls - 1  # a lone CLS block
    return sum(Ls - 1 - min(len(s), Ls - 1) for s in sentences[:used])


def pad_count(doc: SegmentedDocument) -> int:
    return int(doc.block_mask.sum() * doc.token_ids.shape[1] - doc.token_mask.sum())
