"""Data pipeline: binary token shards, the byte-level tokenizer, corpus
preparation, deterministic batch sampling, and labeled evaluation sets.

Shard file layout (all integers little-endian):

    offset  field
    0       magic, 8 bytes: "MOEDAT01"
    8       vocab_size, u32
    12      token_width, u8 (2 or 4 bytes per token id)
    13      padding, 3 zero bytes
    16      n_tokens, u64
    24      n_documents, u32
    28      n_labels, u32
    32      label_table_offset, u64 (absolute; 0 when there are no labels)
    40      token stream, n_tokens * token_width bytes
    ...     document index, n_documents records of (start u64, length u64,
            label_id u32); label_id 0xFFFFFFFF marks an unlabeled document
    ...     label table at label_table_offset: per label, u16 byte-length
            followed by the UTF-8 code

Document spans are disjoint and cover the whole token stream. Pre-tokenized
streams can be ingested by constructing a TokenShard directly and writing it,
which is how external vocabularies (e.g. a 50257-entry BPE) enter the lab
without bundling their tokenizer.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import UNLABELED
from .errors import DataError

SHARD_MAGIC = b"MOEDAT01"
_HEADER = struct.Struct("<8sIB3xQIIQ")


class ByteTokenizer:
    """Identity tokenizer over raw UTF-8 bytes; vocab is the 256 byte values."""

    vocab_size = 256

    def encode(self, text: str) -> np.ndarray:
        return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.uint16)

    def decode(self, ids: np.ndarray) -> str:
        return bytes(np.asarray(ids, dtype=np.uint8)).decode("utf-8")


def tokenize(text: str, tokenizer=None) -> np.ndarray:
    """Encode text with the given tokenizer (byte-level by default)."""
    return (tokenizer or ByteTokenizer()).encode(text)


@dataclass
class TokenShard:
    """An immutable tokenized corpus with per-document labels."""

    vocab_size: int
    tokens: np.ndarray            # 1-D uint16/uint32
    documents: np.ndarray         # [n_docs, 3] int64: start, length, label_id
    labels: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.tokens = np.asarray(self.tokens)
        self.documents = np.asarray(self.documents, dtype=np.int64).reshape(-1, 3)
        self.validate()

    def validate(self) -> None:
        if self.tokens.ndim != 1:
            raise DataError("token stream must be one-dimensional")
        if self.tokens.size and int(self.tokens.max()) >= self.vocab_size:
            raise DataError("token id out of range for vocab_size")
        cursor = 0
        for start, length, label_id in self.documents:
            if start != cursor or length <= 0:
                raise DataError("document spans must be disjoint and cover the stream")
            if label_id != UNLABELED and not 0 <= label_id < len(self.labels):
                raise DataError("document label id out of range")
            cursor += length
        if cursor != self.tokens.size:
            raise DataError("document spans must cover the whole token stream")

    @property
    def n_tokens(self) -> int:
        return int(self.tokens.size)

    @property
    def n_documents(self) -> int:
        return int(self.documents.shape[0])

    def document_label(self, doc: int) -> str | None:
        label_id = int(self.documents[doc, 2])
        return None if label_id == UNLABELED else self.labels[label_id]

    def write(self, path: str | Path) -> None:
        path = Path(path)
        width = 2 if self.vocab_size <= 0x10000 else 4
        dtype = np.dtype("<u2") if width == 2 else np.dtype("<u4")
        stream = np.ascontiguousarray(self.tokens, dtype=dtype)
        doc_block = b"".join(
            struct.pack("<QQI", int(s), int(l), int(lab) & 0xFFFFFFFF)
            for s, l, lab in self.documents)
        label_block = b"".join(
            struct.pack("<H", len(lab.encode("utf-8"))) + lab.encode("utf-8")
            for lab in self.labels)
        label_offset = (_HEADER.size + stream.nbytes + len(doc_block)
                        if self.labels else 0)
        header = _HEADER.pack(SHARD_MAGIC, self.vocab_size, width,
                              self.n_tokens, self.n_documents,
                              len(self.labels), label_offset)
        path.write_bytes(header + stream.tobytes() + doc_block + label_block)

    @classmethod
    def read(cls, path: str | Path, mmap: bool = True) -> "TokenShard":
        path = Path(path)
        raw = path.read_bytes() if not mmap else None
        with open(path, "rb") as fh:
            head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise DataError(f"{path}: truncated shard header")
        magic, vocab, width, n_tokens, n_docs, n_labels, label_off = _HEADER.unpack(head)
        if magic != SHARD_MAGIC:
            raise DataError(f"{path}: bad shard magic {magic!r}")
        if width not in (2, 4):
            raise DataError(f"{path}: unsupported token width {width}")
        dtype = np.dtype("<u2") if width == 2 else np.dtype("<u4")
        stream_bytes = n_tokens * width
        doc_off = _HEADER.size + stream_bytes
        if mmap:
            tokens = np.memmap(path, dtype=dtype, mode="r",
                               offset=_HEADER.size, shape=(n_tokens,))
            with open(path, "rb") as fh:
                fh.seek(doc_off)
                tail = fh.read()
        else:
            tokens = np.frombuffer(raw, dtype=dtype, offset=_HEADER.size,
                                   count=n_tokens)
            tail = raw[doc_off:]
        doc_block_size = n_docs * 20
        if len(tail) < doc_block_size:
            raise DataError(f"{path}: truncated document index")
        docs = np.zeros((n_docs, 3), dtype=np.int64)
        for i in range(n_docs):
            s, l, lab = struct.unpack_from("<QQI", tail, i * 20)
            docs[i] = (s, l, lab if lab != 0xFFFFFFFF else UNLABELED)
        labels = []
        cursor = doc_block_size
        for _ in range(n_labels):
            (length,) = struct.unpack_from("<H", tail, cursor)
            cursor += 2
            labels.append(tail[cursor:cursor + length].decode("utf-8"))
            cursor += length
        return cls(vocab_size=vocab, tokens=tokens, documents=docs, labels=labels)


def build_shard(docs: list[np.ndarray], labels: list[str | None],
                vocab_size: int) -> TokenShard:
    """Assemble a shard from per-document token arrays and optional labels."""
    if not docs:
        raise DataError("cannot build a shard from an empty corpus")
    table = sorted({lab for lab in labels if lab is not None})
    index = {lab: i for i, lab in enumerate(table)}
    spans = np.zeros((len(docs), 3), dtype=np.int64)
    cursor = 0
    for i, (doc, lab) in enumerate(zip(docs, labels)):
        spans[i] = (cursor, doc.size, index[lab] if lab is not None else UNLABELED)
        cursor += doc.size
    tokens = np.concatenate(docs) if docs else np.zeros(0, dtype=np.uint16)
    return TokenShard(vocab_size=vocab_size, tokens=tokens,
                      documents=spans, labels=table)


def _collect_documents(corpus_dir: Path, labeled: bool):
    """Yield (text, label) per .txt file, in sorted-path order."""
    if labeled:
        subdirs = sorted(p for p in corpus_dir.iterdir() if p.is_dir())
        if not subdirs:
            raise DataError(f"{corpus_dir}: labeled corpus needs one subdirectory per language")
        files = [(f, d.name) for d in subdirs for f in sorted(d.glob("*.txt"))]
    else:
        files = [(f, None) for f in sorted(corpus_dir.rglob("*.txt"))]
    if not files:
        raise DataError(f"{corpus_dir}: no .txt files found")
    for path, label in files:
        try:
            text = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise DataError(f"{path}: {exc}") from exc
        yield text, label


def prepare(corpus_dir: str | Path, tokenizer=None, split_fraction: float = 0.9,
            labeled: bool = False) -> tuple[TokenShard, TokenShard]:
    """Tokenize a directory of UTF-8 text files into train/val shards.

    One file is one document. With `labeled`, the corpus root must contain
    one subdirectory per language code holding that language's files. The
    train/val split orders documents by content hash and cuts at
    round(split_fraction * n): deterministic, exact ratio, no positional
    leakage.
    """
    if not 0.0 < split_fraction < 1.0:
        raise DataError("split_fraction must lie strictly between 0 and 1")
    tokenizer = tokenizer or ByteTokenizer()
    entries = []
    for text, label in _collect_documents(Path(corpus_dir), labeled):
        ids = tokenizer.encode(text)
        if ids.size == 0:
            continue
        digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
        entries.append((digest, ids, label))
    if not entries:
        raise DataError(f"{corpus_dir}: corpus contains no non-empty documents")
    entries.sort(key=lambda e: e[0])
    n = len(entries)
    n_train = int(n * split_fraction + 0.5)
    if n >= 2:
        n_train = min(max(n_train, 1), n - 1)
    train, val = entries[:n_train], entries[n_train:]
    vocab = tokenizer.vocab_size
    return (build_shard([e[1] for e in train], [e[2] for e in train], vocab),
            build_shard([e[1] for e in val], [e[2] for e in val], vocab))


@dataclass
class Batch:
    inputs: np.ndarray             # [B, T] int64
    targets: np.ndarray            # [B, T] int64, inputs shifted by one
    labels: list[str] | None       # per-sequence language codes (labeled mode)


def sample_batch(shard: TokenShard, batch_size: int, sequence_length: int,
                 rng: np.random.Generator, labeled: bool = False) -> Batch:
    """Draw B independent uniform windows of length T+1 from the shard.

    Unlabeled windows treat the stream as circular, so every position is
    covered uniformly. Labeled windows stay inside a single document and
    carry that document's label; documents are weighted by their number of
    valid window starts. Windows are drawn one at a time from `rng`, so
    splitting a batch across micro-batches consumes the identical stream.
    """
    T = sequence_length
    if shard.n_tokens <= T:
        raise DataError(f"shard too small: {shard.n_tokens} tokens for windows of {T + 1}")
    inputs = np.zeros((batch_size, T), dtype=np.int64)
    targets = np.zeros((batch_size, T), dtype=np.int64)
    labels: list[str] | None = [] if labeled else None
    starts_per_doc = cum = None
    if labeled:
        lengths = shard.documents[:, 1]
        starts_per_doc = np.maximum(lengths - T, 0)
        cum = np.cumsum(starts_per_doc)
        if cum[-1] == 0:
            raise DataError("no document long enough for a labeled window")
    for b in range(batch_size):
        if labeled:
            r = int(rng.integers(int(cum[-1])))
            doc = int(np.searchsorted(cum, r, side="right"))
            prior = int(cum[doc - 1]) if doc > 0 else 0
            start = int(shard.documents[doc, 0]) + (r - prior)
            window = np.asarray(shard.tokens[start:start + T + 1], dtype=np.int64)
            label = shard.document_label(doc)
            if label is None:
                raise DataError(f"document {doc} has no label")
            labels.append(label)
        else:
            start = int(rng.integers(shard.n_tokens))
            idx = (start + np.arange(T + 1)) % shard.n_tokens
            window = np.asarray(shard.tokens[idx], dtype=np.int64)
        inputs[b] = window[:-1]
        targets[b] = window[1:]
    return Batch(inputs=inputs, targets=targets, labels=labels)


@dataclass
class EvalCategorySet:
    """Labeled evaluation categories for expert-assignment analysis."""

    name: str
    categories: list[tuple[str, list[np.ndarray]]]

    def validate(self) -> None:
        if not self.categories:
            raise DataError("evaluation set has no categories")
        for label, seqs in self.categories:
            if not seqs:
                raise DataError(f"evaluation category {label!r} is empty")


def load_eval_set(path: str | Path, tokenizer=None, context_length: int = 1024,
                  min_tokens: int = 2) -> EvalCategorySet:
    """Load a `setname/category/*.txt` tree into token sequences.

    Files longer than the context are chunked into consecutive windows of at
    most context_length tokens; chunks shorter than min_tokens are dropped.
    """
    path = Path(path)
    tokenizer = tokenizer or ByteTokenizer()
    categories = []
    for cat_dir in sorted(p for p in path.iterdir() if p.is_dir()):
        seqs: list[np.ndarray] = []
        for txt in sorted(cat_dir.glob("*.txt")):
            ids = tokenizer.encode(txt.read_text(encoding="utf-8"))
            for i in range(0, ids.size, context_length):
                chunk = ids[i:i + context_length].astype(np.int64)
                if chunk.size >= min_tokens:
                    seqs.append(chunk)
        categories.append((cat_dir.name, seqs))
    eval_set = EvalCategorySet(name=path.name, categories=categories)
    eval_set.validate()
    return eval_set
