"""Attention memory accounting for flat versus two-level encoders.

Counts score-matrix entries (QK^T elements). For ``N`` tokens split into
``N / Ls`` blocks, with batch ``b``, ``A`` heads and ``L`` layers per level:

    flat         = b * A * N^2 * L
    sentence     = b * A * Ls^2 * (N / Ls) * L
    document     = b * A * (N / Ls)^2 * L
    hierarchical = (Ls * N + (N / Ls)^2) * b * A * L

When ``Ls`` does not divide ``N`` the hierarchy is costed on ``N`` rounded
up to a whole number of blocks; the flat encoder needs no padding.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .corpus import CLS_ID, NUM_SPECIAL
from .encoder import DocBatch, ModelConfig, SmithModel, encode

BYTES_PER_ENTRY = 4
# skip an instrumented pass whose single-document, single-layer score tensor exceeds this
DEFAULT_INSTRUMENT_LIMIT = 1 << 22


@dataclass
class AttentionBudget:
    n: int
    ls: int
    b: int
    a: int
    l: int  # noqa: E741
    padded_n: int
    pad_tokens: int
    flat_entries: int
    sentence_level_entries: int
    document_level_entries: int
    hierarchical_total: int
    reduction_factor: float
    flat_bytes: int
    hierarchical_bytes: int
    instrumented: dict[str, bool] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def first_line_form(n: int, ls: int, b: int, a: int, l: int) -> int:  # noqa: E741
    """b*A*Ls^2*L*(N/Ls) + b*A*(N/Ls)^2*L."""
    blocks = n // ls
    return b * a * ls**2 * l * blocks + b * a * blocks**2 * l


def simplified_form(n: int, ls: int, b: int, a: int, l: int) -> int:  # noqa: E741
    """(Ls*N + N^2/Ls^2) * b*A*L."""
    return (ls * n + (n // ls) ** 2) * b * a * l


def _full_batch(b: int, n_blocks: int, ls: int, real_tokens: int) -> DocBatch:
    ids = np.full((b, n_blocks, ls), NUM_SPECIAL, dtype=np.int64)
    ids[:, :, 0] = CLS_ID
    mask = (np.arange(n_blocks * ls) < real_tokens).reshape(n_blocks, ls).astype(np.int8)
    return DocBatch(ids, np.broadcast_to(mask, (b, n_blocks, ls)).copy(), np.ones((b, n_blocks), dtype=np.int8), [""] * b)


def instrumented_counts(n_blocks: int, ls: int, b: int, a: int, l: int, real_tokens: int) -> dict[str, int]:  # noqa: E741
    """Run a toy forward (H = A) document by document and tally attention entries per scope."""
    model = SmithModel(ModelConfig(vocab_size=NUM_SPECIAL + 1, L1=l, L2=l, H=a, A=a, Ls=ls, Ld=n_blocks, dropout=0.0))
    batch = _full_batch(1, n_blocks, ls, real_tokens)
    with dc.count_attention() as counts:
        for _ in range(b):
            encode(model, batch)
    return dict(counts)


def count_attention_entries(
    n: int,
    ls: int,
    b: int = 1,
    a: int = 1,
    l: int = 1,  # noqa: E741
    instrument: bool = True,
    instrument_limit: int = DEFAULT_INSTRUMENT_LIMIT,
) -> AttentionBudget:
    if min(n, ls, b, a, l) < 1:
        raise ValueError("n, ls, b, a and l must all be positive")
    if ls < 2:
        raise ValueError(f"ls must be >= 2, got {ls}")
    n_blocks = -(-n // ls)
    padded = n_blocks * ls
    flat = b * a * n * n * l
    sentence = b * a * ls**2 * n_blocks * l
    document = b * a * n_blocks**2 * l
    total = sentence + document
    first, simple = first_line_form(padded, ls, b, a, l), simplified_form(padded, ls, b, a, l)
    if not first == simple == total:
        raise AssertionError(f"closed forms disagree: {first} vs {simple} vs {total}")

    verified = {"hierarchical": False, "flat": False}
    if instrument and a * max(ls * padded, n_blocks**2) <= instrument_limit:
        counts = instrumented_counts(n_blocks, ls, b, a, l, n)
        got = (counts.get("sentence", 0), counts.get("document", 0))
        if got != (sentence, document):
            raise AssertionError(f"instrumented counts {got} differ from closed form {(sentence, document)}")
        verified["hierarchical"] = True
    if instrument and n >= 2 and a * n * n <= instrument_limit:
        # a flat encoder is a single block holding the whole sequence
        counts = instrumented_counts(1, n, b, a, l, n)
        if counts.get("sentence", 0) != flat:
            raise AssertionError(f"instrumented flat count {counts.get('sentence', 0)} differs from {flat}")
        verified["flat"] = True

    return AttentionBudget(
        n=n,
        ls=ls,
        b=b,
        a=a,
        l=l,
        padded_n=padded,
        pad_tokens=padded - n,
        flat_entries=flat,
        sentence_level_entries=sentence,
        document_level_entries=document,
        hierarchical_total=total,
        reduction_factor=flat / total,
        flat_bytes=flat * BYTES_PER_ENTRY,
        hierarchical_bytes=total * BYTES_PER_ENTRY,
        instrumented=verified,
    )
