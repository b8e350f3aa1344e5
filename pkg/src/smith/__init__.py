"""Siamese hierarchical Transformer encoder for long-document matching."""

from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import PairRecord, RawDocument, Vocabulary, build_vocab, split_sentences, tokenize
from .encoder import DocBatch, ModelConfig, SmithModel, embed_documents, encode, smith_forward
from .matcher import evaluate, finetune, pair_similarity, predict
from .pretrain import masked_block_loss, pretrain
from .profiler import AttentionBudget, count_attention_entries
from .segmenter import SegmentedDocument, greedy_fill, segment_document

__version__ = "0.1.0"

__all__ = [
    "AttentionBudget",
    "DocBatch",
    "ModelConfig",
    "PairRecord",
    "RawDocument",
    "SegmentedDocument",
    "SmithModel",
    "Vocabulary",
    "build_vocab",
    "count_attention_entries",
    "embed_documents",
    "encode",
    "evaluate",
    "finetune",
    "greedy_fill",
    "load_checkpoint",
    "masked_block_loss",
    "pair_similarity",
    "predict",
    "pretrain",
    "save_checkpoint",
    "segment_document",
    "smith_forward",
    "split_sentences",
    "tokenize",
]
