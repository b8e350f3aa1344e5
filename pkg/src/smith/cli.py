"""Command-line entry point: ``smith <subcommand> [flags]``.

Progress logs go to stdout as line-delimited JSON; diagnostics go to stderr.
Every output file is written atomically.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .corpus import Vocabulary, build_vocab, pair_documents, read_documents, read_pairs, write_documents, write_pairs
from .encoder import ModelConfig, SmithModel, parameter_shapes
from .fileio import atomic_open
from .fixtures import generate_fixture
from .matcher import evaluate, finetune, infer_embeddings, make_examples, predict
from .pretrain import LOSS_MODES, pretrain
from .profiler import count_attention_entries
from .segmenter import segment_document
from .training import TrainConfig

log = logging.getLogger("smith")


class CommandError(Exception):
    """A user-facing failure reported as one line on stderr."""


def emit(record: dict) -> None:
    print(json.dumps(record), flush=True)


def load_config(path: str, vocab: Vocabulary | None = None) -> ModelConfig:
    """Read key=value config; ``vocab_size`` may be omitted when a vocabulary is given."""
    text = Path(path).read_text(encoding="utf-8")
    keys = {line.split("#", 1)[0].partition("=")[0].strip() for line in text.splitlines()}
    if "vocab_size" not in keys:
        if vocab is None:
            raise CommandError(f"{path}: vocab_size missing and no vocabulary to infer it from")
        text += f"\nvocab_size={len(vocab)}\n"
    config = ModelConfig.from_text(text)
    if vocab is not None and config.vocab_size != len(vocab):
        raise CommandError(f"{path}: vocab_size={config.vocab_size} but the vocabulary has {len(vocab)} tokens")
    return config


def _resolve_vocab(flag: str | None, checkpoint: Checkpoint | None) -> Vocabulary:
    if flag is not None:
        vocab = Vocabulary.load(flag)
        if checkpoint is not None and checkpoint.vocab is not None and checkpoint.vocab.tokens != vocab.tokens:
            raise CommandError(f"{flag}: vocabulary differs from the one stored in the checkpoint")
        return vocab
    if checkpoint is not None and checkpoint.vocab is not None:
        return checkpoint.vocab
    raise CommandError("no vocabulary: pass --vocab or use a checkpoint that stores one")


def _train_config(args, steps: int) -> TrainConfig:
    return TrainConfig(
        lr=args.lr, warmup_steps=args.warmup_steps, steps=steps, batch_size=args.batch_size, seed=args.seed, log_every=args.log_every
    )


# --- subcommands --------------------------------------------------------------


def cmd_build_vocab(args) -> None:
    docs = []
    for path in args.corpus or []:
        docs.extend(read_documents(path))
    for path in args.pairs or []:
        docs.extend(pair_documents(read_pairs(path)))
    if not docs:
        raise CommandError("build-vocab needs at least one --corpus or --pairs file")
    vocab = build_vocab(docs, args.max_size, args.min_count)
    vocab.save(args.out)
    log.info("wrote %d tokens to %s", len(vocab), args.out)


def cmd_segment(args) -> None:
    vocab = Vocabulary.load(args.vocab)
    config = load_config(args.config, vocab)
    docs = read_documents(args.docs)
    with atomic_open(args.out) as fh:
        for doc in docs:
            fh.write(json.dumps(segment_document(doc, vocab, config.Ls, config.Ld).to_json()) + "\n")


def cmd_pretrain(args) -> None:
    vocab = Vocabulary.load(args.vocab)
    config = load_config(args.config, vocab)
    docs = [segment_document(d, vocab, config.Ls, config.Ld) for d in read_documents(args.corpus)]
    if not docs:
        raise CommandError(f"{args.corpus}: empty corpus")
    model = SmithModel(config, seed=args.seed)
    cfg = _train_config(args, args.steps)
    started = time.monotonic()

    def report(step, loss):
        if (cfg.log_every and step % cfg.log_every == 0) or step == cfg.steps:
            emit({"step": step, "L_wp": loss.wp, "L_sp": loss.sp, "total": loss.total, "sp_accuracy": loss.sp_accuracy})

    pretrain(model, docs, cfg, args.loss, args.word_rate, args.m, report)
    save_checkpoint(model, config, args.checkpoint_out, vocab)
    log.info("pretrained %d steps in %.1fs; checkpoint %s", cfg.steps, time.monotonic() - started, args.checkpoint_out)


def _finetune_model(args, vocab: Vocabulary, init: Checkpoint | None) -> SmithModel:
    if args.config is not None:
        config = load_config(args.config, vocab)
    elif init is not None:
        config = init.config
    else:
        raise CommandError("finetune needs --config or --init-checkpoint")
    model = SmithModel(config, seed=args.seed)
    if init is not None:
        shapes = parameter_shapes(config)
        for name, value in init.params.items():
            if name not in shapes:
                log.warning("ignoring checkpoint parameter %r absent from this config", name)
                continue
            if value.shape != shapes[name]:
                raise CommandError(f"parameter {name!r}: checkpoint shape {value.shape}, config needs {shapes[name]}")
            model[name].data = value.copy()
    return model


def cmd_finetune(args) -> None:
    init = load_checkpoint(args.init_checkpoint) if args.init_checkpoint else None
    vocab = _resolve_vocab(args.vocab, init)
    model = _finetune_model(args, vocab, init)
    config = model.config
    examples = make_examples(read_pairs(args.pairs), vocab, config.Ls, config.Ld)
    if not examples:
        raise CommandError(f"{args.pairs}: no pairs")
    cfg = _train_config(args, args.steps)

    def report(step, loss):
        if (cfg.log_every and step % cfg.log_every == 0) or step == cfg.steps:
            emit({"step": step, "loss": loss})

    finetune(model, examples, cfg, report)
    save_checkpoint(model, config, args.checkpoint_out, vocab)
    log.info("fine-tuned %d steps; checkpoint %s", cfg.steps, args.checkpoint_out)


def cmd_embed(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    vocab = _resolve_vocab(args.vocab, ckpt)
    config = ckpt.config
    docs = [segment_document(d, vocab, config.Ls, config.Ld) for d in read_documents(args.docs)]
    embeddings = infer_embeddings(ckpt.model(), docs, args.batch_size)
    with atomic_open(args.out) as fh:
        for e in embeddings:
            fh.write(json.dumps({"id": e.doc_id, "vector": e.vector.tolist()}) + "\n")


def cmd_eval(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    vocab = _resolve_vocab(args.vocab, ckpt)
    examples = make_examples(read_pairs(args.pairs), vocab, ckpt.config.Ls, ckpt.config.Ld)
    if not examples:
        raise CommandError(f"{args.pairs}: no pairs")
    scores = predict(ckpt.model(), examples, args.batch_size)
    emit(evaluate(scores, [e.label for e in examples], args.threshold).to_dict())


def cmd_profile_attention(args) -> None:
    budget = count_attention_entries(args.n, args.ls, args.b, args.a, args.l, instrument=not args.no_instrument)
    emit(budget.to_dict())


def cmd_generate_fixture(args) -> None:
    pairs = generate_fixture(args.n_pairs, args.topics, args.doc_len, args.seed, args.lead_in, args.noise, args.prefix)
    write_pairs(pairs, args.out)
    if args.docs_out:
        write_documents(pair_documents(pairs), args.docs_out)


# --- parser -------------------------------------------------------------------


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _train_flags(p: argparse.ArgumentParser, lr: float, warmup: int) -> None:
    p.add_argument("--steps", type=_positive, required=True)
    p.add_argument("--batch-size", type=_positive, default=32)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--warmup-steps", type=int, default=warmup)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--checkpoint-out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smith", description="Hierarchical Siamese encoder for long-document matching.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug diagnostics on stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("build-vocab", help="count tokens and write a vocabulary file")
    p.add_argument("--corpus", action="append", help="documents JSONL (repeatable)")
    p.add_argument("--pairs", action="append", help="pairs JSONL (repeatable)")
    p.add_argument("--max-size", type=int, default=30000)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("segment", help="greedy sentence filling, one JSON record per document")
    p.add_argument("--docs", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("pretrain", help="masked word and masked sentence-block pretraining")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--loss", choices=LOSS_MODES, default="wp+sp")
    p.add_argument("--word-rate", type=float, default=0.15)
    p.add_argument("--m", type=int, default=2, help="sentence blocks masked per document")
    _train_flags(p, lr=5e-5, warmup=10000)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="Siamese fine-tuning on labelled pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--vocab")
    p.add_argument("--config")
    p.add_argument("--init-checkpoint")
    _train_flags(p, lr=5e-5, warmup=0)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("embed", help="write one embedding per document")
    p.add_argument("--docs", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab")
    p.add_argument("--batch-size", type=_positive, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="score pairs and print accuracy / precision / recall / F1")
    p.add_argument("--pairs", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--batch-size", type=_positive, default=32)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile-attention", help="attention score-matrix entries, flat vs hierarchical")
    p.add_argument("--n", type=_positive, required=True, help="tokens per document")
    p.add_argument("--ls", type=int, required=True, help="sentence block length")
    p.add_argument("--b", type=_positive, default=1)
    p.add_argument("--a", type=_positive, default=1)
    p.add_argument("--l", type=_positive, default=1)
    p.add_argument("--no-instrument", action="store_true", help="closed forms only")
    p.set_defaults(func=cmd_profile_attention)

    p = sub.add_parser("generate-fixture", help="synthetic topic-templated pair dataset")
    p.add_argument("--n-pairs", type=_positive, required=True)
    p.add_argument("--topics", type=int, default=3)
    p.add_argument("--doc-len", type=_positive, default=60, help="tokens per document")
    p.add_argument("--lead-in", type=int, default=0, help="filler tokens before the topical text")
    p.add_argument("--noise", type=float, default=0.0, help="probability of a filler sentence")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prefix", default="")
    p.add_argument("--out", required=True)
    p.add_argument("--docs-out", help="also write the unique documents as a corpus file")
    p.set_defaults(func=cmd_generate_fixture)
    return parser


def run_command(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="smith: %(levelname)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        args.func(args)
    except (CommandError, CheckpointError, ValueError, KeyError, OSError, FloatingPointError, IndexError) as exc:
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"smith {args.command}: error: {message}", file=sys.stderr)
        return 1
    return 0


def main() -> int:
    return run_command()
