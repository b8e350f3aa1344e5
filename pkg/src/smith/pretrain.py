"""Masked word prediction plus dynamic masked sentence-block prediction.

Each step samples ``m`` non-empty blocks per document, replaces their
sentence-level vectors with one shared learnable mask vector before the
document-level layers, and asks each masked position's contextual output to
pick its own original block out of every block masked in the batch. Word
masking (BERT 80/10/10) skips CLS, PAD and tokens inside masked blocks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .corpus import MASK_ID, NUM_SPECIAL
from .diffcore import Tensor
from .encoder import DocBatch, EncoderOutput, SmithModel, encode
from .segmenter import SegmentedDocument
from .training import TrainConfig, minibatches

LOSS_MODES = ("wp", "wp+sp")


@dataclass
class WordMasks:
    batch: DocBatch  # token ids after corruption
    positions: np.ndarray  # [M, 3] (doc, block, offset)
    targets: np.ndarray  # [M] original ids


@dataclass
class BlockMasks:
    docs: np.ndarray  # [B]
    blocks: np.ndarray  # [B]

    def __len__(self) -> int:
        return len(self.docs)

    def as_grid(self, shape: tuple[int, int]) -> np.ndarray:
        grid = np.zeros(shape, dtype=bool)
        grid[self.docs, self.blocks] = True
        return grid


@dataclass
class PretrainLoss:
    sp: float
    wp: float
    total: float
    sp_accuracy: float | None = None
    masked_words: int = 0
    masked_blocks: int = 0


def mask_words(
    batch: DocBatch,
    rate: float,
    vocab_size: int,
    rng: np.random.Generator,
    exclude_blocks: np.ndarray | None = None,
) -> WordMasks:
    """Select real, non-CLS tokens with probability ``rate``.

    Selected tokens become MASK (80%), a random non-special token (10%) or
    stay unchanged (10%).
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"word mask rate must be in [0, 1), got {rate}")
    ids = batch.token_ids
    eligible = batch.token_mask.astype(bool).copy()
    eligible[..., 0] = False
    if exclude_blocks is not None:
        eligible &= ~np.asarray(exclude_blocks, dtype=bool)[..., None]
    selected = eligible & (rng.random(ids.shape) < rate)
    action = rng.random(ids.shape)
    random_ids = rng.integers(NUM_SPECIAL, vocab_size, size=ids.shape)
    corrupted = ids.copy()
    corrupted[selected & (action < 0.8)] = MASK_ID
    swap = selected & (action >= 0.8) & (action < 0.9)
    corrupted[swap] = random_ids[swap]
    positions = np.argwhere(selected)
    masked = DocBatch(corrupted, batch.token_mask, batch.block_mask, batch.doc_ids)
    return WordMasks(masked, positions, ids[selected])


def sample_block_positions(block_mask: np.ndarray, m: int, rng: np.random.Generator) -> BlockMasks:
    """``m`` distinct non-empty blocks per document (fewer if the document is short)."""
    docs, blocks = [], []
    for d, row in enumerate(np.asarray(block_mask)):
        candidates = np.flatnonzero(row)
        k = min(m, len(candidates))
        if k == 0:
            continue
        chosen = np.sort(rng.choice(candidates, size=k, replace=False))
        docs.extend([d] * k)
        blocks.extend(chosen.tolist())
    return BlockMasks(np.array(docs, dtype=np.int64), np.array(blocks, dtype=np.int64))


def apply_block_masks(block_reps: Tensor, masks: BlockMasks, masked_vector: Tensor) -> Tensor:
    if len(masks) == 0:
        return block_reps
    grid = masks.as_grid(block_reps.shape[:2])[..., None]
    return dc.where(grid, masked_vector, block_reps)


def mask_sentence_blocks(
    block_reps: Tensor,
    block_mask: np.ndarray,
    m: int,
    masked_vector: Tensor,
    rng: np.random.Generator,
) -> tuple[Tensor, BlockMasks]:
    masks = sample_block_positions(block_mask, m, rng)
    return apply_block_masks(block_reps, masks, masked_vector), masks


def block_similarity(predicted: Tensor, originals, detach: bool = True) -> Tensor:
    """Pairwise scores predicted @ originals^T.

    With ``detach`` the originals are constants, so no gradient reaches the
    sentence-level path through the targets.
    """
    if detach or not isinstance(originals, Tensor):
        h = originals.data if isinstance(originals, Tensor) else np.asarray(originals, dtype=np.float64)
        return dc.matmul(predicted, h.T)
    return dc.matmul(predicted, dc.transpose(originals))


def masked_block_loss(predicted: Tensor, originals, detach: bool = True) -> Tensor:
    """In-batch softmax cross-entropy with the diagonal as the positive class."""
    B = predicted.shape[0]
    if B == 0:
        return Tensor(0.0)
    return dc.cross_entropy(block_similarity(predicted, originals, detach), np.arange(B))


def masked_forward(
    model: SmithModel,
    words: WordMasks,
    blocks: BlockMasks,
    training: bool = False,
    rng: np.random.Generator | None = None,
    detach_targets: bool = True,
) -> tuple[EncoderOutput, Tensor, Tensor, float | None]:
    """Forward with both mask kinds applied; returns (output, L_wp, L_sp, block top-1 accuracy)."""
    hook = None
    if len(blocks):
        masked_vector = model["pretrain/masked_block"]
        hook = lambda reps: apply_block_masks(reps, blocks, masked_vector)  # noqa: E731
    out = encode(model, words.batch, training, rng, block_hook=hook)
    cfg = model.config

    if len(words.positions):
        d, blk, off = words.positions.T
        rows = np.searchsorted(out.block_index, d * cfg.Ld + blk)
        reps = dc.reshape(out.token_reps, (-1, cfg.H))[rows * cfg.Ls + off]
        table = model["embeddings/token"]
        logits = dc.matmul(reps, dc.transpose(table)) + model["pretrain/word_bias"]
        word_loss = dc.cross_entropy(logits, words.targets)
    else:
        word_loss = Tensor(0.0)

    accuracy = None
    if len(blocks):
        predicted = out.doc_context[blocks.docs, blocks.blocks]
        originals = out.block_reps[blocks.docs, blocks.blocks]
        block_loss = masked_block_loss(predicted, originals, detach_targets)
        sim = block_similarity(predicted, originals).data
        accuracy = float(np.mean(sim.argmax(axis=1) == np.arange(len(blocks))))
    else:
        block_loss = Tensor(0.0)
    return out, word_loss, block_loss, accuracy


def pretrain_step(
    model: SmithModel,
    batch: DocBatch,
    optimizer: dc.Adam,
    rng: np.random.Generator,
    mode: str = "wp+sp",
    word_rate: float = 0.15,
    m: int = 2,
    training: bool = True,
) -> PretrainLoss:
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")
    use_sp = mode == "wp+sp"
    blocks = sample_block_positions(batch.block_mask, m if use_sp else 0, rng)
    words = mask_words(batch, word_rate, model.config.vocab_size, rng, blocks.as_grid(batch.block_mask.shape))
    if len(words.positions) and len(blocks):
        overlap = blocks.as_grid(batch.block_mask.shape)[words.positions[:, 0], words.positions[:, 1]]
        assert not overlap.any(), "word mask inside a masked sentence block"

    optimizer.zero_grad()
    with dc.Tape() as tape:
        _, word_loss, block_loss, accuracy = masked_forward(model, words, blocks, training, rng)
        total = word_loss + block_loss
    values = (word_loss.item(), block_loss.item(), total.item())
    if not np.all(np.isfinite(values)):
        raise FloatingPointError(
            f"non-finite pretraining loss: L_wp={values[0]}, L_sp={values[1]}, "
            f"masked words={len(words.positions)}, masked blocks={len(blocks)}"
        )
    dc.backward(tape, total)
    optimizer.step()
    return PretrainLoss(values[1], values[0], values[2], accuracy, len(words.positions), len(blocks))


def pretrain(
    model: SmithModel,
    docs: Sequence[SegmentedDocument],
    cfg: TrainConfig,
    mode: str = "wp+sp",
    word_rate: float = 0.15,
    m: int = 2,
    callback: Callable[[int, PretrainLoss], None] | None = None,
) -> list[PretrainLoss]:
    rng = np.random.default_rng(cfg.seed)
    optimizer = cfg.optimizer(model)
    history = []
    batches = minibatches(len(docs), cfg.batch_size, rng)
    for step in range(1, cfg.steps + 1):
        batch = DocBatch.from_documents([docs[i] for i in next(batches)])
        loss = pretrain_step(model, batch, optimizer, rng, mode, word_rate, m)
        history.append(loss)
        if callback is not None:
            callback(step, loss)
    return history
