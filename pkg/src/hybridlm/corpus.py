"""Tiny-corpus ingestion: tokenization, packing, and dataset files.

Char-level tokenization is the default so the vocabulary stays small and
the uniform-model closed forms are sharp. Documents are concatenated
with a separator id between them and chunked into exact context-length
windows; the trailing remainder is dropped (there is no padding token).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PreconditionError
from .masking import Vocab

DATASET_MAGIC = b"HYBRIDLM-DATA\n"
DATASET_VERSION = 1


@dataclass(frozen=True)
class Tokenizer:
    """Frequency-ranked symbol table plus the separator and mask specials.

    Ids 0..n-1 are the regular symbols; an unknown id follows when the
    table was truncated; the separator and mask ids sit at the top.
    """

    symbols: tuple[str, ...]
    mode: str
    unk_id: int | None
    vocab: Vocab

    def encode(self, text: str) -> list[int]:
        pieces = list(text) if self.mode == "char" else text.split()
        index = {s: i for i, s in enumerate(self.symbols)}
        out = []
        for piece in pieces:
            if piece in index:
                out.append(index[piece])
            elif self.unk_id is not None:
                out.append(self.unk_id)
            else:
                raise PreconditionError(f"symbol {piece!r} not in vocabulary")
        return out

    def decode(self, ids) -> str:
        parts = []
        for i in ids:
            i = int(i)
            if i == self.vocab.mask_id:
                raise PreconditionError("mask id has no text form")
            if i == self.vocab.separator_id:
                parts.append("\n")
            elif self.unk_id is not None and i == self.unk_id:
                parts.append("\ufffd")
            else:
                parts.append(self.symbols[i])
        joiner = "" if self.mode == "char" else " "
        return joiner.join(parts)


def build_vocab(corpus: str, mode: str = "char", max_size: int | None = None) -> Tokenizer:
    """Frequency-ranked vocabulary; ties break by symbol so builds are stable.

    `max_size` caps the total id count including specials; overflowing
    symbols map to a shared unknown id.
    """
    if mode not in ("char", "word"):
        raise PreconditionError(f"mode must be char or word, got {mode!r}")
    pieces = list(corpus) if mode == "char" else corpus.split()
    if not pieces:
        raise PreconditionError("empty corpus")
    counts: dict[str, int] = {}
    for piece in pieces:
        counts[piece] = counts.get(piece, 0) + 1
    ranked = sorted(counts, key=lambda s: (-counts[s], s))
    need_unk = max_size is not None and len(ranked) + 2 > max_size
    if need_unk:
        if max_size < 4:
            raise PreconditionError("max_size must leave room for one symbol plus specials")
        ranked = ranked[: max_size - 3]
    symbols = tuple(ranked)
    unk_id = len(symbols) if need_unk else None
    n_regular = len(symbols) + (1 if need_unk else 0)
    vocab = Vocab.with_specials(n_regular)
    return Tokenizer(symbols=symbols, mode=mode, unk_id=unk_id, vocab=vocab)


@dataclass(frozen=True)
class PackedDataset:
    examples: np.ndarray
    context_length: int
    vocab: Vocab

    def __post_init__(self) -> None:
        ex = np.asarray(self.examples, dtype=np.int64)
        if ex.ndim != 2 or ex.shape[1] != self.context_length:
            raise PreconditionError("examples must be (N, context_length)")
        if ex.size and (ex.min() < 0 or ex.max() >= self.vocab.size):
            raise PreconditionError("token id outside the vocabulary")
        if np.any(ex == self.vocab.mask_id):
            raise PreconditionError("packed data must not contain the mask id")
        object.__setattr__(self, "examples", ex)

    def __len__(self) -> int:
        return len(self.examples)


def pack(documents: list[list[int]], context_length: int, vocab: Vocab) -> PackedDataset:
    """Concatenate documents with separators and chunk; remainder dropped."""
    if context_length < 2:
        raise PreconditionError("context_length must be at least 2")
    flat: list[int] = []
    for d, doc in enumerate(documents):
        if d:
            flat.append(vocab.separator_id)
        flat.extend(int(t) for t in doc)
    n = len(flat) // context_length
    arr = np.asarray(flat[: n * context_length], dtype=np.int64).reshape(n, context_length)
    return PackedDataset(arr, context_length, vocab)


def split_documents(text: str) -> list[str]:
    """Blank-line separated documents, surrounding whitespace trimmed."""
    docs = [d.strip() for d in re.split(r"\n\s*\n", text)]
    return [d for d in docs if d]


def load_corpus_text(path: str | Path) -> str:
    """Read one UTF-8 file, or every *.txt under a directory (sorted)."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.txt"))
        if not files:
            raise PreconditionError(f"no .txt files under {path}")
        return "\n\n".join(f.read_text(encoding="utf-8") for f in files)
    return path.read_text(encoding="utf-8")


def build_dataset(
    text: str,
    context_length: int,
    mode: str = "char",
    max_size: int | None = None,
) -> tuple[PackedDataset, Tokenizer]:
    tokenizer = build_vocab(text, mode=mode, max_size=max_size)
    docs = [tokenizer.encode(doc) for doc in split_documents(text)]
    return pack(docs, context_length, tokenizer.vocab), tokenizer


def save_dataset(dataset: PackedDataset, path: str | Path) -> None:
    header = np.array(
        [
            DATASET_VERSION,
            dataset.context_length,
            dataset.vocab.size,
            dataset.vocab.mask_id,
            dataset.vocab.separator_id,
            len(dataset.examples),
        ],
        dtype="<i4",
    )
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(header.tobytes())
        f.write(dataset.examples.astype("<i4").tobytes())


def load_dataset(path: str | Path) -> PackedDataset:
    with open(path, "rb") as f:
        magic = f.read(len(DATASET_MAGIC))
        if magic != DATASET_MAGIC:
            raise PreconditionError(f"{path}: not a dataset file")
        header = np.frombuffer(f.read(24), dtype="<i4")
        version, ctx, size, mask_id, sep_id, n = (int(v) for v in header)
        if version != DATASET_VERSION:
            raise PreconditionError(f"{path}: unsupported dataset version {version}")
        body = np.frombuffer(f.read(4 * n * ctx), dtype="<i4")
    vocab = Vocab(size=size, mask_id=mask_id, separator_id=sep_id)
    return PackedDataset(body.reshape(n, ctx).astype(np.int64), ctx, vocab)


def save_tokenizer(tokenizer: Tokenizer, path: str | Path) -> None:
    record = {
        "mode": tokenizer.mode,
        "symbols": list(tokenizer.symbols),
        "has_unk": tokenizer.unk_id is not None,
    }
    Path(path).write_text(json.dumps(record, ensure_ascii=False, indent=1), encoding="utf-8")


def load_tokenizer(path: str | Path) -> Tokenizer:
    record = json.loads(Path(path).read_text(encoding="utf-8"))
    symbols = tuple(record["symbols"])
    has_unk = bool(record["has_unk"])
    n_regular = len(symbols) + (1 if has_unk else 0)
    return Tokenizer(
        symbols=symbols,
        mode=record["mode"],
        unk_id=len(symbols) if has_unk else None,
        vocab=Vocab.with_specials(n_regular),
    )
