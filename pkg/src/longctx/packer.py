"""Long-context training data preparation.

Long documents are upsampled, short documents of domains that end up
over-represented are thinned so each domain keeps its original token share,
and the result is packed greedily into fixed-length BOS-separated sequences.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

# Continued-pretraining recipe. Recorded for reference; nothing here trains.
TRAINING_CONTEXT = 224_000
TRAINING_TOKENS = 900_000_000
LEARNING_RATE = 1e-5
BATCH_TOKENS = 1_000_000
TRAINING_STEPS = 1000
LONG_DOC_THRESHOLD = 4096


@dataclass(frozen=True)
class Document:
    id: str
    domain: str
    tokens: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not self.tokens:
            raise ValueError(f"document {self.id!r} has no tokens")

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class PackingConfig:
    target_len: int
    bos_id: int = 0
    long_threshold: int = LONG_DOC_THRESHOLD
    upsample_factor: float = 1.0
    split_documents: bool = True

    def __post_init__(self):
        if self.target_len <= 1:
            raise ValueError("target_len must be > 1")
        if self.long_threshold < 1:
            raise ValueError("long_threshold must be >= 1")
        if not self.upsample_factor > 0:
            raise ValueError("upsample_factor must be positive")


@dataclass(frozen=True)
class DocSpan:
    doc_index: int      # position in the packed document list
    doc_id: str
    start: int          # [start, end) inside the packed sequence
    end: int
    doc_offset: int     # where this piece starts inside the source document


@dataclass
class PackedSequence:
    tokens: list[int]
    doc_spans: list[DocSpan] = field(default_factory=list)
    padding: int = 0

    @property
    def padded(self) -> bool:
        return self.padding > 0


def domain_shares(docs: Iterable[Document]) -> dict[str, float]:
    totals: dict[str, int] = defaultdict(int)
    for d in docs:
        totals[d.domain] += len(d)
    grand = sum(totals.values())
    return {k: v / grand for k, v in sorted(totals.items())}


def upsample(corpus: Sequence[Document], config: PackingConfig, seed: int = 0) -> list[Document]:
    """Repeat long documents and rebalance domains.

    Documents longer than ``long_threshold`` appear ``floor(f)`` or ``ceil(f)``
    times (stochastic rounding, mean ``f``). Short documents from domains whose
    share grew are then dropped at random until every domain is back at its
    original share. Output keeps corpus order with copies adjacent.
    """
    if not corpus:
        raise ValueError("cannot upsample an empty corpus")
    f = config.upsample_factor
    if f < 1:
        raise ValueError("upsample_factor must be >= 1")
    rng = np.random.default_rng(seed)

    counts = []
    for doc in corpus:
        if len(doc) > config.long_threshold:
            lo = math.floor(f)
            counts.append(lo + int(rng.random() < f - lo))
        else:
            counts.append(1)

    target = domain_shares(corpus)
    after: dict[str, int] = defaultdict(int)
    floor_tokens: dict[str, int] = defaultdict(int)
    for doc, n in zip(corpus, counts):
        after[doc.domain] += n * len(doc)
        if len(doc) > config.long_threshold:
            floor_tokens[doc.domain] += n * len(doc)

    # The domain that grew least fixes the new total; the others shed short docs.
    total = min(after[d] / s for d, s in target.items())
    for dom, share in target.items():
        excess = after[dom] - share * total
        if excess < 0.5:
            continue
        if after[dom] - floor_tokens[dom] < excess:
            log.warning("domain %r lacks short documents to restore its share", dom)
        short = [i for i, d in enumerate(corpus) if d.domain == dom and len(d) <= config.long_threshold]
        for i in rng.permutation(short):
            if excess < 0.5:
                break
            if len(corpus[i]) <= excess + 0.5 * len(corpus[i]):
                counts[i] = 0
                excess -= len(corpus[i])

    out = []
    for doc, n in zip(corpus, counts):
        out.extend([doc] * n)
    return out


def shuffle(docs: Sequence[Document], seed: int) -> list[Document]:
    rng = np.random.default_rng(seed)
    return [docs[i] for i in rng.permutation(len(docs))]


def pack(docs: Sequence[Document], config: PackingConfig) -> list[PackedSequence]:
    """Greedy BOS-separated packing in the given order.

    Each document is written as ``BOS`` followed by its tokens. A document
    that runs past the end of a sequence continues after a fresh ``BOS`` in
    the next one. A tail too short to hold ``BOS`` plus one token, and the
    end of the final sequence, are filled with ``bos_id`` and counted in
    ``padding``.
    """
    T, bos = config.target_len, config.bos_id
    out: list[PackedSequence] = []
    cur = PackedSequence([])

    def close():
        nonlocal cur
        pad = T - len(cur.tokens)
        cur.tokens.extend([bos] * pad)
        cur.padding += pad
        out.append(cur)
        cur = PackedSequence([])

    for idx, doc in enumerate(docs):
        if not config.split_documents and len(doc) > T - 1:
            raise ValueError(f"document {doc.id!r} ({len(doc)} tokens) does not fit and splitting is off")
        if not config.split_documents and cur.tokens and T - len(cur.tokens) < len(doc) + 1:
            close()
        offset = 0
        while offset < len(doc):
            if T - len(cur.tokens) < 2:
                close()
            cur.tokens.append(bos)
            take = min(len(doc) - offset, T - len(cur.tokens))
            start = len(cur.tokens)
            cur.tokens.extend(doc.tokens[offset:offset + take])
            cur.doc_spans.append(DocSpan(idx, doc.id, start, start + take, offset))
            offset += take
            if len(cur.tokens) == T:
                out.append(cur)
                cur = PackedSequence([])
    if cur.tokens:
        close()
    return out


def content_tokens(seqs: Iterable[PackedSequence]) -> int:
    return sum(s.end - s.start for seq in seqs for s in seq.doc_spans)


# -- file formats -----------------------------------------------------------

_HEADER = struct.Struct("<II")


def read_documents(path) -> list[Document]:
    """Newline-delimited JSON, one ``{"id", "domain", "tokens"}`` object per line."""
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                docs.append(Document(str(rec["id"]), str(rec.get("domain", "default")), rec["tokens"]))
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing field {exc}") from None
    return docs


def write_documents(path, docs: Iterable[Document]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(json.dumps({"id": d.id, "domain": d.domain, "tokens": list(d.tokens)}) + "\n")


def write_packed(out_dir, seqs: Sequence[PackedSequence], config: PackingConfig) -> dict:
    """Write ``tokens.bin`` (8-byte ``<u4 rows, <u4 cols`` header, ``<u4`` ids) and ``manifest.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arr = np.asarray([s.tokens for s in seqs], dtype="<u4").reshape(len(seqs), config.target_len)
    (out_dir / "tokens.bin").write_bytes(_HEADER.pack(*arr.shape) + arr.tobytes())
    manifest = {
        "target_len": config.target_len,
        "bos_id": config.bos_id,
        "num_sequences": len(seqs),
        "content_tokens": content_tokens(seqs),
        "sequences": [
            {
                "padding": s.padding,
                "doc_spans": [
                    {"doc_index": d.doc_index, "doc_id": d.doc_id, "start": d.start,
                     "end": d.end, "doc_offset": d.doc_offset}
                    for d in s.doc_spans
                ],
            }
            for s in seqs
        ],
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return manifest


def read_packed(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    rows, cols = _HEADER.unpack_from(raw)
    return np.frombuffer(raw, dtype="<u4", offset=_HEADER.size).reshape(rows, cols)


def synthetic_corpus(n_docs: int, seed: int, domains: Sequence[str] = ("web", "books", "code"),
                     vocab: int = 32000, long_fraction: float = 0.2,
                     long_threshold: int = LONG_DOC_THRESHOLD) -> list[Document]:
    """Seeded corpus with a mix of short and over-threshold documents."""
    rng = np.random.default_rng(seed)
    docs = []
    for i in range(n_docs):
        dom = domains[int(rng.integers(len(domains)))]
        if rng.random() < long_fraction:
            n = int(rng.integers(long_threshold + 1, 2 * long_threshold))
        else:
            n = int(rng.integers(1, max(2, long_threshold // 4)))
        docs.append(Document(f"doc{i:05d}", dom, rng.integers(1, vocab, size=n)))
    return docs
