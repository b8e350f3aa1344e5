"""Siamese matching: cosine scores, calibrated BCE fine-tuning, metrics, inference."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .corpus import MASK_ID, PairRecord, Vocabulary
from .diffcore import Tensor
from .encoder import DocBatch, DocumentEmbedding, SmithModel, embed_documents, encode
from .segmenter import SegmentedDocument, segment_document
from .training import TrainConfig, minibatches

log = logging.getLogger(__name__)


@dataclass
class MatchExample:
    source: SegmentedDocument
    target: SegmentedDocument
    label: int


@dataclass
class EvalMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    threshold: float

    def to_dict(self) -> dict:
        return asdict(self)


def make_examples(pairs: Sequence[PairRecord], vocab: Vocabulary, Ls: int, Ld: int) -> list[MatchExample]:
    return [
        MatchExample(segment_document(p.source, vocab, Ls, Ld), segment_document(p.target, vocab, Ls, Ld), p.label)
        for p in pairs
    ]


def pair_similarity(e_s, e_c) -> float:
    a = np.asarray(e_s.vector if isinstance(e_s, DocumentEmbedding) else e_s, dtype=np.float64)
    b = np.asarray(e_c.vector if isinstance(e_c, DocumentEmbedding) else e_c, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"embedding dimensions differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def match_probability(cos: Tensor, scale: Tensor, bias: Tensor) -> Tensor:
    return dc.sigmoid(cos * scale + bias)


def matching_loss(cos, labels, scale, bias) -> Tensor:
    """Mean BCE between sigmoid(scale * cos + bias) and the 0/1 labels."""
    return dc.binary_cross_entropy(match_probability(dc.as_tensor(cos), dc.as_tensor(scale), dc.as_tensor(bias)), labels)


def pair_cosines(
    model: SmithModel,
    examples: Sequence[MatchExample],
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Both towers run in one batch through the shared parameters."""
    n = len(examples)
    batch = DocBatch.from_documents([e.source for e in examples] + [e.target for e in examples])
    emb = encode(model, batch, training, rng).embedding
    # embeddings are unit-norm, so the dot product is the cosine
    return dc.sum_(emb[:n] * emb[n:], axis=-1)


def finetune_step(
    model: SmithModel,
    examples: Sequence[MatchExample],
    optimizer: dc.Adam,
    rng: np.random.Generator | None = None,
    training: bool = True,
) -> float:
    for e in examples:
        if (e.source.token_ids == MASK_ID).any() or (e.target.token_ids == MASK_ID).any():
            raise ValueError("fine-tuning input carries [MASK] tokens; pretraining masks must be removed")
    labels = np.array([e.label for e in examples], dtype=np.float64)
    optimizer.zero_grad()
    with dc.Tape() as tape:
        cos = pair_cosines(model, examples, training, rng)
        loss = matching_loss(cos, labels, model["match/scale"], model["match/bias"])
    dc.backward(tape, loss)
    optimizer.step()
    return loss.item()


def predict(model: SmithModel, examples: Sequence[MatchExample], batch_size: int = 32) -> np.ndarray:
    """Calibrated match probabilities, dropout off."""
    out = []
    for start in range(0, len(examples), batch_size):
        cos = pair_cosines(model, examples[start : start + batch_size])
        out.append(match_probability(cos, model["match/scale"], model["match/bias"]).data)
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> EvalMetrics:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.size == 0:
        raise ValueError("cannot evaluate an empty prediction set")
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    pred = scores >= threshold
    truth = labels == 1
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return EvalMetrics(float(np.mean(pred == truth)), precision, recall, f1, threshold)


def infer_embeddings(
    model: SmithModel, docs: Sequence[SegmentedDocument], batch_size: int = 32
) -> list[DocumentEmbedding]:
    kept = []
    for d in docs:
        if d.num_blocks == 0:
            log.warning("skipping document %r: no non-empty sentence blocks", d.doc_id)
            continue
        kept.append(d)
    vectors = embed_documents(model, kept, batch_size)
    return [DocumentEmbedding(v, d.doc_id) for v, d in zip(vectors, kept)]


def finetune(
    model: SmithModel,
    examples: Sequence[MatchExample],
    cfg: TrainConfig,
    callback: Callable[[int, float], bool | None] | None = None,
) -> list[float]:
    """Run ``cfg.steps`` fine-tuning steps; ``callback(step, loss)`` returning True stops early."""
    rng = np.random.default_rng(cfg.seed)
    optimizer = cfg.optimizer(model)
    losses = []
    batches = minibatches(len(examples), cfg.batch_size, rng)
    for step in range(1, cfg.steps + 1):
        idx = next(batches)
        loss = finetune_step(model, [examples[i] for i in idx], optimizer, rng)
        losses.append(loss)
        if callback is not None and callback(step, loss):
            break
    return losses
