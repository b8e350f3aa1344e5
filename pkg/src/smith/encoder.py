"""Two-level hierarchical Transformer encoder.

Sentence-level layers attend only within a block; each block is pooled at
its CLS position, projected and L2-normalised. Document-level layers then
attend across blocks (plus a sinusoidal block-position signal) and the first
contextual block, projected and normalised, represents the document.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .corpus import NUM_SPECIAL
from .diffcore import Tensor
from .fileio import write_text
from .segmenter import SegmentedDocument, SentenceBlock

COMBINE_MODES = ("normal", "sum_concat", "mean_concat", "attention")
INIT_GAIN = 1.0  # dense weights ~ N(0, gain^2 / fan_in)
# token table entries ~ N(0, (0.5 / sqrt(H))^2); scaled by sqrt(H) on input so
# content and the unit-amplitude sinusoid start at comparable magnitudes
TOKEN_INIT_SCALE = 0.5


@dataclass
class ModelConfig:
    vocab_size: int
    L1: int = 6
    L2: int = 3
    H: int = 256
    A: int = 4
    Ls: int = 32
    Ld: int = 48
    combine_mode: str = "normal"
    attn_combine_dim: int = 0  # 0 means "same as H"
    dropout: float = 0.1

    def __post_init__(self):
        if self.H % self.A:
            raise ValueError(f"hidden size H={self.H} is not divisible by heads A={self.A}")
        if self.Ls < 2:
            raise ValueError(f"Ls must be >= 2, got {self.Ls}")
        if self.Ld < 1:
            raise ValueError(f"Ld must be >= 1, got {self.Ld}")
        if self.L1 < 0 or self.L2 < 0:
            raise ValueError("layer counts must be non-negative")
        if self.vocab_size <= NUM_SPECIAL:
            raise ValueError(f"vocab_size must exceed {NUM_SPECIAL}, got {self.vocab_size}")
        if self.combine_mode not in COMBINE_MODES:
            raise ValueError(f"unknown combine_mode {self.combine_mode!r}; expected one of {COMBINE_MODES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def combine_dim(self) -> int:
        return self.attn_combine_dim or self.H

    @property
    def output_dim(self) -> int:
        return self.H if self.combine_mode == "normal" else 2 * self.H

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in types:
                raise ValueError(f"config line {lineno}: cannot parse {raw!r}")
            kind = types[key]
            values[key] = int(value) if kind == "int" else float(value) if kind == "float" else value
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def save(self, path: str | Path) -> None:
        write_text(path, self.to_text())


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    """pe[p, 2i] = sin(p / 10000^(2i/dim)), pe[p, 2i+1] = cos(same)."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    rates = 1.0 / 10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    pe = np.zeros((n, dim))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates)[:, : dim // 2]
    return pe


def _layer_shapes(prefix: str, H: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for proj in ("query", "key", "value", "output"):
        shapes[f"{prefix}/attention/{proj}/w"] = (H, H)
        shapes[f"{prefix}/attention/{proj}/b"] = (H,)
    shapes[f"{prefix}/attention_norm/gamma"] = (H,)
    shapes[f"{prefix}/attention_norm/beta"] = (H,)
    shapes[f"{prefix}/ffn/inner/w"] = (H, 4 * H)
    shapes[f"{prefix}/ffn/inner/b"] = (4 * H,)
    shapes[f"{prefix}/ffn/outer/w"] = (4 * H, H)
    shapes[f"{prefix}/ffn/outer/b"] = (H,)
    shapes[f"{prefix}/ffn_norm/gamma"] = (H,)
    shapes[f"{prefix}/ffn_norm/beta"] = (H,)
    return shapes


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable array, in checkpoint order."""
    H = config.H
    shapes: dict[str, tuple[int, ...]] = {"embeddings/token": (config.vocab_size, H)}
    for i in range(config.L1):
        shapes.update(_layer_shapes(f"sentence/layer_{i}", H))
    shapes["sentence/projection/w"] = (H, H)
    shapes["sentence/projection/b"] = (H,)
    for i in range(config.L2):
        shapes.update(_layer_shapes(f"document/layer_{i}", H))
    shapes["document/projection/w"] = (H, H)
    shapes["document/projection/b"] = (H,)
    if config.combine_mode == "attention":
        shapes["combine/w"] = (H, config.combine_dim)
        shapes["combine/v"] = (config.combine_dim,)
    # task heads: masked-block symbol, tied word-prediction bias, match calibration
    shapes["pretrain/masked_block"] = (H,)
    shapes["pretrain/word_bias"] = (config.vocab_size,)
    shapes["match/scale"] = ()
    shapes["match/bias"] = ()
    return shapes


HEAD_PREFIXES = ("pretrain/", "match/")


def _initial_value(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if name == "embeddings/token":
        return rng.normal(0.0, TOKEN_INIT_SCALE / math.sqrt(shape[1]), size=shape)
    if name.endswith("/gamma"):
        return np.ones(shape)
    if name == "match/scale":
        return np.full(shape, 5.0)
    if name.endswith("/b") or name.endswith("/beta") or name in ("pretrain/word_bias", "match/bias"):
        return np.zeros(shape)
    if name == "pretrain/masked_block":
        return rng.normal(0.0, 0.02, size=shape)
    return rng.normal(0.0, INIT_GAIN / math.sqrt(shape[0]), size=shape)


class SmithModel:
    """Configuration plus one shared parameter set for both Siamese towers."""

    def __init__(self, config: ModelConfig, seed: int = 0, params: Mapping[str, np.ndarray] | None = None):
        self.config = config
        shapes = parameter_shapes(config)
        if params is None:
            rng = np.random.default_rng(seed)
            params = {name: _initial_value(name, shape, rng) for name, shape in shapes.items()}
        missing = set(shapes) - set(params)
        unknown = set(params) - set(shapes)
        if missing or unknown:
            raise ValueError(f"parameter set mismatch: missing={sorted(missing)}, unknown={sorted(unknown)}")
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            value = np.asarray(params[name], dtype=np.float64)
            if value.shape != shape:
                raise ValueError(f"parameter {name!r} has shape {value.shape}, expected {shape}")
            self.params[name] = dc.parameter(value.copy(), name=name)
        self.token_positions = sinusoidal_positions(config.Ls, config.H)
        self.block_positions = sinusoidal_positions(config.Ld, config.H)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def encoder_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if not k.startswith(HEAD_PREFIXES)}

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def zero_grad(self) -> None:
        dc.zero_grad(self.params.values())


# --- batching -----------------------------------------------------------------


@dataclass
class DocBatch:
    token_ids: np.ndarray  # [b, Ld, Ls]
    token_mask: np.ndarray  # [b, Ld, Ls]
    block_mask: np.ndarray  # [b, Ld]
    doc_ids: list[str]

    @classmethod
    def from_documents(cls, docs: Sequence[SegmentedDocument]) -> "DocBatch":
        if not docs:
            raise ValueError("empty document batch")
        return cls(
            np.stack([d.token_ids for d in docs]),
            np.stack([d.token_mask for d in docs]),
            np.stack([d.block_mask for d in docs]),
            [d.doc_id for d in docs],
        )

    def __len__(self) -> int:
        return self.token_ids.shape[0]

    @property
    def nonempty(self) -> np.ndarray:
        """Flat indices (into ``b * Ld``) of blocks that hold tokens."""
        return np.flatnonzero(self.block_mask.reshape(-1))


@dataclass
class EncoderOutput:
    token_reps: Tensor  # [nnz, Ls, H], sentence-level outputs of non-empty blocks
    block_index: np.ndarray  # [nnz] flat block index of each token_reps row
    block_reps: Tensor  # [b, Ld, H], normalised block vectors, zero rows for empty blocks
    doc_context: Tensor  # [b, Ld, H], document-level outputs
    doc_rep: Tensor  # [b, H]
    embedding: Tensor  # [b, H] or [b, 2H]


# --- layers -------------------------------------------------------------------


def transformer_layer(
    x: Tensor,
    params: Mapping[str, Tensor],
    prefix: str,
    mask: np.ndarray,
    heads: int,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
    scope: str = "attention",
) -> Tensor:
    """Post-norm block: y = LN(x + MHA(x)); out = LN(y + FFN(y)).

    ``x`` is ``[n, L, H]`` and ``mask`` ``[n, L]``; masked positions still get
    outputs but are never attended to.
    """
    n, L, H = x.shape
    if H % heads:
        raise ValueError(f"hidden size {H} is not divisible by {heads} heads")
    d = H // heads
    p = lambda name: params[f"{prefix}/{name}"]  # noqa: E731

    def split_heads(t: Tensor) -> Tensor:
        return dc.transpose(dc.reshape(t, (n, L, heads, d)), (0, 2, 1, 3))

    q = split_heads(dc.linear(x, p("attention/query/w"), p("attention/query/b")))
    k = split_heads(dc.linear(x, p("attention/key/w"), p("attention/key/b")))
    v = split_heads(dc.linear(x, p("attention/value/w"), p("attention/value/b")))
    ctx = dc.scaled_dot_product_attention(q, k, v, np.asarray(mask)[:, None, :], scope=scope)
    ctx = dc.reshape(dc.transpose(ctx, (0, 2, 1, 3)), (n, L, H))
    attn = dc.dropout(dc.linear(ctx, p("attention/output/w"), p("attention/output/b")), dropout, rng, training)
    y = dc.layer_norm(x + attn, p("attention_norm/gamma"), p("attention_norm/beta"))
    hidden = dc.gelu(dc.linear(y, p("ffn/inner/w"), p("ffn/inner/b")))
    ffn = dc.dropout(dc.linear(hidden, p("ffn/outer/w"), p("ffn/outer/b")), dropout, rng, training)
    return dc.layer_norm(y + ffn, p("ffn_norm/gamma"), p("ffn_norm/beta"))


def embed_tokens(model: SmithModel, token_ids: np.ndarray) -> Tensor:
    """sqrt(H) * token embedding + sinusoidal position, for ids shaped ``[..., Ls]``."""
    token_ids = np.asarray(token_ids)
    table = model["embeddings/token"]
    scale = math.sqrt(model.config.H)
    return dc.embedding(table, token_ids) * scale + model.token_positions[: token_ids.shape[-1]]


def encode_blocks(
    model: SmithModel,
    token_ids: np.ndarray,
    token_mask: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Sentence-level stack over ``[n, Ls]`` blocks -> (token reps, unit block reps)."""
    cfg = model.config
    x = dc.dropout(embed_tokens(model, token_ids), cfg.dropout, rng, training)
    for i in range(cfg.L1):
        x = transformer_layer(
            x, model.params, f"sentence/layer_{i}", token_mask, cfg.A, cfg.dropout, rng, training, scope="sentence"
        )
    cls = x[:, 0, :]
    block_reps = dc.l2_normalize(dc.linear(cls, model["sentence/projection/w"], model["sentence/projection/b"]))
    return x, block_reps


def encode_document_blocks(
    model: SmithModel,
    block_reps: Tensor,
    block_mask: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Document-level stack over ``[b, Ld, H]`` -> (contextual blocks, unit doc reps).

    Inputs are sqrt(H) * block rep + sinusoidal block position.
    """
    cfg = model.config
    block_mask = np.asarray(block_mask)
    if np.any(block_mask.sum(axis=-1) == 0):
        raise ValueError("document with zero non-empty blocks")
    x = block_reps * math.sqrt(cfg.H) + model.block_positions[: block_reps.shape[1]]
    for i in range(cfg.L2):
        x = transformer_layer(
            x, model.params, f"document/layer_{i}", block_mask, cfg.A, cfg.dropout, rng, training, scope="document"
        )
    first = x[:, 0, :]
    doc_rep = dc.l2_normalize(dc.linear(first, model["document/projection/w"], model["document/projection/b"]))
    return x, doc_rep


def combine_weights(model: SmithModel, block_reps: Tensor, block_mask: np.ndarray) -> Tensor:
    """Softmax over unmasked blocks of h_i W v, shaped ``[b, Ld]``."""
    logits = dc.matmul(dc.matmul(block_reps, model["combine/w"]), model["combine/v"])
    logits = logits + (1.0 - np.asarray(block_mask, dtype=np.float64)) * dc.MASK_FILL
    return dc.softmax(logits, axis=-1)


def combine_representations(
    model: SmithModel,
    block_reps: Tensor,
    block_mask: np.ndarray,
    doc_rep: Tensor,
    mode: str | None = None,
) -> Tensor:
    mode = mode or model.config.combine_mode
    mask = np.asarray(block_mask, dtype=np.float64)[..., None]
    if mode == "normal":
        combined = doc_rep
    elif mode == "sum_concat":
        combined = dc.concat([dc.sum_(block_reps * mask, axis=1), doc_rep], axis=-1)
    elif mode == "mean_concat":
        mean = dc.sum_(block_reps * mask, axis=1) / mask.sum(axis=1)
        combined = dc.concat([mean, doc_rep], axis=-1)
    elif mode == "attention":
        weights = combine_weights(model, block_reps, block_mask)
        pooled = dc.sum_(block_reps * dc.reshape(weights, weights.shape + (1,)), axis=1)
        combined = dc.concat([pooled, doc_rep], axis=-1)
    else:
        raise ValueError(f"unknown combine mode {mode!r}; expected one of {COMBINE_MODES}")
    return dc.l2_normalize(combined)


BlockHook = Callable[[Tensor], Tensor]


def encode(
    model: SmithModel,
    batch: DocBatch,
    training: bool = False,
    rng: np.random.Generator | None = None,
    block_hook: BlockHook | None = None,
) -> EncoderOutput:
    """Full forward pass over a batch of segmented documents.

    ``block_hook`` may rewrite the block representations fed to the document
    level (masked block pretraining); the combine step always sees the
    original block representations.
    """
    cfg = model.config
    b, Ld, Ls = batch.token_ids.shape
    if (Ld, Ls) != (cfg.Ld, cfg.Ls):
        raise ValueError(f"batch segmented with Ld={Ld}, Ls={Ls}; model expects Ld={cfg.Ld}, Ls={cfg.Ls}")
    if np.any(batch.block_mask.sum(axis=1) == 0):
        raise ValueError("document with zero non-empty blocks")
    index = batch.nonempty
    ids = batch.token_ids.reshape(b * Ld, Ls)[index]
    mask = batch.token_mask.reshape(b * Ld, Ls)[index]
    token_reps, reps = encode_blocks(model, ids, mask, training, rng)
    block_reps = dc.reshape(dc.scatter_rows(reps, index, b * Ld), (b, Ld, cfg.H))
    doc_input = block_hook(block_reps) if block_hook is not None else block_reps
    ctx, doc_rep = encode_document_blocks(model, doc_input, batch.block_mask, training, rng)
    embedding = combine_representations(model, block_reps, batch.block_mask, doc_rep)
    return EncoderOutput(token_reps, index, block_reps, ctx, doc_rep, embedding)


# --- single-item conveniences -------------------------------------------------


@dataclass
class DocumentEmbedding:
    vector: np.ndarray
    doc_id: str


def encode_sentence_block(model: SmithModel, block: SentenceBlock) -> tuple[Tensor, Tensor]:
    token_reps, rep = encode_blocks(model, block.token_ids[None], block.token_mask[None])
    return token_reps[0], rep[0]


def encode_document(model: SmithModel, block_reps: Tensor, block_mask: np.ndarray) -> tuple[Tensor, Tensor]:
    ctx, doc = encode_document_blocks(model, dc.reshape(block_reps, (1,) + block_reps.shape), np.asarray(block_mask)[None])
    return ctx[0], doc[0]


def smith_forward(model: SmithModel, doc: SegmentedDocument) -> DocumentEmbedding:
    out = encode(model, DocBatch.from_documents([doc]))
    return DocumentEmbedding(out.embedding.data[0].copy(), doc.doc_id)


def embed_documents(model: SmithModel, docs: Sequence[SegmentedDocument], batch_size: int = 32) -> np.ndarray:
    """Inference-mode embeddings ``[len(docs), output_dim]``."""
    rows = []
    for start in range(0, len(docs), batch_size):
        out = encode(model, DocBatch.from_documents(docs[start : start + batch_size]))
        rows.append(out.embedding.data)
    if not rows:
        return np.zeros((0, model.config.output_dim))
    return np.concatenate(rows, axis=0)


def count_parameters(model: SmithModel, encoder_only: bool = True) -> int:
    params = model.encoder_parameters() if encoder_only else model.params
    return int(sum(math.prod(p.shape) for p in params.values()))
