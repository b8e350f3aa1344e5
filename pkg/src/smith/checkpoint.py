"""Single-file checkpoints: a text manifest followed by a float32 blob.

Layout::

    smith-checkpoint 1
    [config]
    vocab_size=...
    ...
    [params]
    embeddings/token 40,32 0
    match/scale - 5120
    ...
    [vocab]
    [PAD]
    ...
    blob 20488
    <little-endian float32 bytes>

Each parameter row gives name, comma-separated shape (``-`` for a scalar)
and byte offset. Rows appear in model order and their extents must tile
the blob exactly. The ``[vocab]`` section is optional and, when present,
runs verbatim up to the blob line.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .corpus import Vocabulary
from .encoder import ModelConfig, SmithModel, parameter_shapes
from .fileio import atomic_open

MAGIC = "smith-checkpoint 1"
DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]  # float64 values of float32 precision
    vocab: Vocabulary | None = None

    def model(self) -> SmithModel:
        return SmithModel(self.config, params=self.params)


def quantize(params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Round every value through float32, the precision stored on disk."""
    return {k: np.asarray(v, dtype=np.float64).astype(DTYPE).astype(np.float64) for k, v in params.items()}


def _format_shape(shape: tuple[int, ...]) -> str:
    return ",".join(map(str, shape)) if shape else "-"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "-" else tuple(int(n) for n in text.split(","))


def save_checkpoint(
    params: Mapping[str, np.ndarray] | SmithModel,
    config: ModelConfig,
    path: str | Path,
    vocab: Vocabulary | None = None,
) -> None:
    if isinstance(params, SmithModel):
        params = params.state()
    shapes = parameter_shapes(config)
    if set(params) != set(shapes):
        missing, unknown = sorted(set(shapes) - set(params)), sorted(set(params) - set(shapes))
        raise CheckpointError(f"parameters do not match config: missing={missing}, unknown={unknown}")

    rows, chunks, offset = [], [], 0
    for name, shape in shapes.items():
        value = np.asarray(params[name])
        if value.shape != shape:
            raise CheckpointError(f"parameter {name!r} has shape {value.shape}, config expects {shape}")
        if any(c.isspace() for c in name):
            raise CheckpointError(f"parameter name {name!r} contains whitespace")
        data = value.astype(DTYPE).tobytes()
        rows.append(f"{name} {_format_shape(shape)} {offset}\n")
        chunks.append(data)
        offset += len(data)

    lines = [MAGIC + "\n", "[config]\n", config.to_text(), "[params]\n", *rows]
    if vocab is not None:
        lines += ["[vocab]\n", *(t + "\n" for t in vocab.tokens)]
    lines.append(f"blob {offset}\n")
    with atomic_open(path, "wb") as fh:
        fh.write("".join(lines).encode("utf-8"))
        for chunk in chunks:
            fh.write(chunk)


def _split_manifest(raw: bytes, path) -> tuple[list[str], bytes, int]:
    pos = 0
    lines = []
    while True:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"{path}: manifest has no 'blob' line")
        line = raw[pos:end].decode("utf-8")
        pos = end + 1
        if line.startswith("blob "):
            try:
                size = int(line[5:])
            except ValueError:
                raise CheckpointError(f"{path}: bad blob line {line!r}") from None
            return lines, raw[pos:], size
        lines.append(line)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    lines, blob, size = _split_manifest(raw, path)
    if not lines or lines[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (expected {MAGIC!r} header)")
    if len(blob) < size:
        raise CheckpointError(f"{path}: truncated blob ({len(blob)} of {size} bytes)")
    if len(blob) > size:
        raise CheckpointError(f"{path}: {len(blob) - size} trailing bytes after the blob")

    sections: dict[str, list[str]] = {}
    current, in_vocab = None, False
    for line in lines[1:]:
        # [vocab] is last and its tokens ("[PAD]", ...) may look like headers
        if not in_vocab and line.startswith("[") and line.endswith("]"):
            current = sections.setdefault(line[1:-1], [])
            in_vocab = line == "[vocab]"
        elif current is None:
            raise CheckpointError(f"{path}: manifest line outside a section: {line!r}")
        else:
            current.append(line)
    for required in ("config", "params"):
        if required not in sections:
            raise CheckpointError(f"{path}: manifest lacks a [{required}] section")

    try:
        config = ModelConfig.from_text("\n".join(sections["config"]))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad config section: {exc}") from None
    expected = parameter_shapes(config)

    params: dict[str, np.ndarray] = {}
    cursor = 0
    for row in sections["params"]:
        parts = row.split()
        if len(parts) != 3:
            raise CheckpointError(f"{path}: bad parameter row {row!r}")
        name, shape_text, offset_text = parts
        if name not in expected:
            raise CheckpointError(f"{path}: unknown parameter {name!r}")
        if name in params:
            raise CheckpointError(f"{path}: parameter {name!r} listed twice")
        try:
            shape, offset = _parse_shape(shape_text), int(offset_text)
        except ValueError:
            raise CheckpointError(f"{path}: bad parameter row {row!r}") from None
        if shape != expected[name]:
            raise CheckpointError(f"{path}: parameter {name!r} has shape {shape}, config implies {expected[name]}")
        if offset != cursor:
            raise CheckpointError(f"{path}: parameter {name!r} starts at byte {offset}, expected {cursor}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * DTYPE.itemsize
        if offset + nbytes > size:
            raise CheckpointError(f"{path}: parameter {name!r} runs past the end of the blob")
        params[name] = np.frombuffer(blob, DTYPE, count=nbytes // DTYPE.itemsize, offset=offset).astype(np.float64).reshape(shape)
        cursor = offset + nbytes
    missing = sorted(set(expected) - set(params))
    if missing:
        raise CheckpointError(f"{path}: missing parameters {missing}")
    if cursor != size:
        raise CheckpointError(f"{path}: parameters cover {cursor} bytes but the blob holds {size}")

    vocab = None
    if "vocab" in sections:
        try:
            vocab = Vocabulary(sections["vocab"])
        except ValueError as exc:
            raise CheckpointError(f"{path}: bad vocab section: {exc}") from None
        if len(vocab) != config.vocab_size:
            raise CheckpointError(f"{path}: vocab has {len(vocab)} tokens but config says {config.vocab_size}")
    return Checkpoint(config, params, vocab)
