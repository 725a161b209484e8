"""Domain types, corpus store, privacy parameters and seeded randomness.

The corpus holds exactly one document per privacy unit. Every stochastic
step in the pipeline draws from an explicitly seeded stream so that a
query is exactly replayable from (seed, index, question, params).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    BudgetExhausted,
    DuplicatePrivacyUnit,
    EmptyRecord,
    IndexFormatError,
)

# Token ids are plain ints indexing the active backend's vocabulary.
TokenId = int

INDEX_MAGIC = b"DPRAGIDX"
INDEX_VERSION = 1


@dataclass
class Document:
    doc_id: str
    privacy_unit: str
    text: str
    embedding: np.ndarray | None = None


@dataclass
class Corpus:
    """Immutable after ingestion; documents keyed by privacy unit."""

    documents: dict[str, Document] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.documents)

    def privacy_units(self) -> list[str]:
        return sorted(self.documents)

    def iter_documents(self) -> Iterator[Document]:
        """Documents in sorted privacy-unit order (deterministic)."""
        for pu in self.privacy_units():
            yield self.documents[pu]

    @property
    def embedding_dim(self) -> int | None:
        for doc in self.documents.values():
            if doc.embedding is not None:
                return int(doc.embedding.shape[0])
        return None


@dataclass(frozen=True)
class TopK:
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"top-k requires k >= 1, got {self.k}")


@dataclass(frozen=True)
class TopP:
    p: float

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"top-p requires p in (0, 1], got {self.p}")


@dataclass(frozen=True)
class PrivacyParams:
    """Per-query privacy configuration.

    The budget relation epsilon_retrieval + max_tokens * epsilon_per_token
    <= epsilon_budget is enforced at query admission, not at construction:
    generation may stop early and only the actual spend is kept.
    """

    epsilon_retrieval: float = 0.5
    epsilon_per_token: float = 0.5
    epsilon_budget: float = 5.0
    delta: float = 1e-3
    clip_c: float = 0.2
    theta: float = 0.0
    alpha_icl: float = 1.0
    alpha_retrieval: float = 1.0
    mode: TopK | TopP = TopK(10)
    max_tokens: int = 9

    def __post_init__(self):
        for name in ("epsilon_retrieval", "epsilon_per_token", "epsilon_budget",
                     "clip_c", "alpha_icl", "alpha_retrieval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.delta < 1.0:
            raise ValueError("delta must lie in [0, 1)")
        if self.theta < 0:
            raise ValueError("theta must be non-negative")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if not isinstance(self.mode, (TopK, TopP)):
            raise ValueError("mode must be TopK or TopP")

    def requested_epsilon(self) -> float:
        """Worst-case spend of one query (pessimistic: full max_tokens)."""
        return self.epsilon_retrieval + self.max_tokens * self.epsilon_per_token


@dataclass
class RngState:
    """Seeded deterministic stream; one per query, never shared.

    Derivation rule for sub-streams (eval trials etc.): the child stream for
    index i is seeded with SeedSequence((seed, i)), so (seed, trial index)
    fully determines each trial.
    """

    seed: int
    stream: np.random.Generator = field(repr=False, default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.stream is None:
            self.stream = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    @classmethod
    def from_entropy(cls) -> "RngState":
        seed = int(np.random.SeedSequence().entropy % (2**63))
        return cls(seed)

    def derive(self, index: int) -> "RngState":
        child = RngState.__new__(RngState)
        child.seed = self.seed
        child.stream = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((self.seed, index)))
        )
        return child


def ingest(
    records: Sequence[tuple[str, str, str]] | Iterable[tuple[str, str, str]],
    policy: str = "reject",
) -> Corpus:
    """Build a corpus from (doc_id, privacy_unit, text) records.

    policy="reject" aborts on a duplicate privacy unit; policy="concatenate"
    joins all texts of one unit in input order with a blank-line separator.
    """
    if policy not in ("reject", "concatenate"):
        raise ValueError(f"unknown duplicate-PU policy {policy!r}")
    records = list(records)
    if not records:
        raise ValueError("records must be non-empty")

    documents: dict[str, Document] = {}
    for doc_id, privacy_unit, text in records:
        if not privacy_unit:
            raise EmptyRecord(f"record {doc_id!r} has an empty privacy unit")
        if not text:
            raise EmptyRecord(f"record {doc_id!r} has empty text")
        if privacy_unit in documents:
            if policy == "reject":
                raise DuplicatePrivacyUnit(privacy_unit)
            existing = documents[privacy_unit]
            existing.text = existing.text + "\n\n" + text
        else:
            documents[privacy_unit] = Document(doc_id=doc_id, privacy_unit=privacy_unit, text=text)
    return Corpus(documents=documents)


def read_corpus_records(path: str | Path) -> list[tuple[str, str, str]]:
    """Read newline-delimited JSON records: doc_id, privacy_unit, text."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out.append((str(obj["doc_id"]), str(obj["privacy_unit"]), str(obj["text"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise IndexFormatError(f"{path}:{lineno}: bad corpus record: {exc}") from exc
    return out


def admit_query(params: PrivacyParams, accountant) -> float:
    """Budget gate in front of a query's worst-case spend.

    Returns the pessimistic epsilon the query may consume, or raises
    BudgetExhausted with the shortfall. Monotone in remaining budget.
    """
    request = params.requested_epsilon()
    spent = accountant.spent()
    if spent + request <= accountant.budget:
        return request
    raise BudgetExhausted(shortfall=spent + request - accountant.budget)


def write_index(path: str | Path, corpus: Corpus) -> None:
    """Persist documents plus embeddings as a single versioned file.

    Layout: 8-byte magic, uint32 LE version, uint64 LE payload length,
    UTF-8 JSON payload. Documents are sorted by privacy unit so the file
    bytes are a pure function of corpus content.
    """
    docs = []
    dim = corpus.embedding_dim
    for doc in corpus.iter_documents():
        entry = {"doc_id": doc.doc_id, "privacy_unit": doc.privacy_unit, "text": doc.text}
        if doc.embedding is not None:
            entry["embedding"] = [float(x) for x in doc.embedding]
        docs.append(entry)
    payload = json.dumps(
        {"embedding_dim": dim, "documents": docs},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<I", INDEX_VERSION))
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)


def read_index(path: str | Path) -> Corpus:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != INDEX_MAGIC:
            raise IndexFormatError(f"{path}: not an index file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != INDEX_VERSION:
            raise IndexFormatError(f"{path}: unsupported index version {version}")
        (length,) = struct.unpack("<Q", fh.read(8))
        payload = fh.read(length)
        if len(payload) != length:
            raise IndexFormatError(f"{path}: truncated payload")
    obj = json.loads(payload.decode("utf-8"))
    documents = {}
    for entry in obj["documents"]:
        emb = entry.get("embedding")
        documents[entry["privacy_unit"]] = Document(
            doc_id=entry["doc_id"],
            privacy_unit=entry["privacy_unit"],
            text=entry["text"],
            embedding=None if emb is None else np.asarray(emb, dtype=float),
        )
    corpus = Corpus(documents=documents)
    dim = obj.get("embedding_dim")
    if dim is not None and corpus.embedding_dim not in (None, dim):
        raise IndexFormatError(f"{path}: embedding dim mismatch")
    return corpus


INFINITE_BUDGET = math.inf
