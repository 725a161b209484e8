"""Embedding providers, cosine similarity and score preparation.

Raw cosines live in [-1, 1]; the threshold mechanisms integrate a
threshold over [0, 1], so scores are affinely rescaled to [0, 1]
((c + 1) / 2, order preserving) before they reach retrieval.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np
import requests

from .core import Corpus
from .errors import DimensionMismatch, EmptyText, ProviderUnavailable


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=float)
        if v.ndim != 1:
            raise ValueError("embedding must be a 1-D vector")
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding has non-finite entries")
        if not np.any(v):
            raise ValueError("zero-norm embedding")
        object.__setattr__(self, "vector", v)

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])


def cosine_similarity(a: Embedding, b: Embedding) -> float:
    """<a,b> / (|a||b|), clamped to [-1, 1] against rounding overshoot."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"dimensions differ: {a.dim} vs {b.dim}")
    va, vb = a.vector, b.vector
    c = float(np.dot(va, vb) / (np.linalg.norm(va) * np.linalg.norm(vb)))
    return max(-1.0, min(1.0, c))


@dataclass
class SimilarityScores:
    """Per-privacy-unit query similarity, raw and rescaled to [0, 1]."""

    per_pu: dict[str, float]
    rescaled: dict[str, float] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.rescaled is None:
            self.rescaled = {pu: (c + 1.0) / 2.0 for pu, c in self.per_pu.items()}
        if set(self.rescaled) != set(self.per_pu):
            raise ValueError("raw and rescaled key sets differ")


class HashingEmbedder:
    """Deterministic test embedder: bag-of-words feature hashing.

    Each whitespace token is hashed (stable across runs and platforms) into
    one of `dim` buckets with a +/-1 sign; the bucket sums are L2-normalized.
    Word order does not matter.
    """

    def __init__(self, dim: int = 256):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self.dim = dim

    def _features(self, text: str) -> np.ndarray:
        words = text.split()
        if not words:
            raise EmptyText("cannot embed empty text")
        v = np.zeros(self.dim)
        for w in words:
            digest = hashlib.sha256(w.encode("utf-8")).digest()
            bucket = int.from_bytes(digest[:8], "little") % self.dim
            sign = 1.0 if digest[8] % 2 == 0 else -1.0
            v[bucket] += sign
        if not np.any(v):
            # signs cancelled exactly; fall back to a deterministic unit vector
            digest = hashlib.sha256(text.encode("utf-8")).digest()
            v[int.from_bytes(digest[:8], "little") % self.dim] = 1.0
        return v / np.linalg.norm(v)

    def embed_texts(self, texts: list[str]) -> list[np.ndarray]:
        return [self._features(t) for t in texts]


def toy_embed(text: str, dim: int = 256) -> Embedding:
    """One-off deterministic embedding (see HashingEmbedder)."""
    return Embedding(HashingEmbedder(dim).embed_texts([text])[0])


class RemoteEmbedder:
    """Client for the HTTP embedding protocol.

    POST {base_url}/embed with {"texts": [...]} returns
    {"embeddings": [[float,...],...]} in the same order. Transport failures
    are retried `retries` times with exponential backoff before the query
    fails as a whole (retrieval needs a complete score set).
    """

    def __init__(self, base_url: str, retries: int = 3, backoff: float = 0.2,
                 timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self._dim: int | None = None

    def embed_texts(self, texts: list[str]) -> list[np.ndarray]:
        payload = {"texts": texts}
        last_exc: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = requests.post(f"{self.base_url}/embed", json=payload,
                                     timeout=self.timeout)
                resp.raise_for_status()
                rows = resp.json()["embeddings"]
                break
            except (requests.RequestException, KeyError, ValueError) as exc:
                last_exc = exc
        else:
            raise ProviderUnavailable(
                f"embedding backend failed after {self.retries} retries: {last_exc}"
            )
        if len(rows) != len(texts):
            raise ProviderUnavailable("embedding backend returned wrong row count")
        out = [np.asarray(r, dtype=float) for r in rows]
        for v in out:
            if self._dim is None:
                self._dim = int(v.shape[0])
            elif v.shape[0] != self._dim:
                raise DimensionMismatch("embedding backend changed dimension mid-stream")
        return out


def attach_embeddings(corpus: Corpus, provider) -> None:
    """Embed every document that does not yet carry an embedding."""
    missing = [doc for doc in corpus.iter_documents() if doc.embedding is None]
    if not missing:
        return
    vectors = provider.embed_texts([doc.text for doc in missing])
    for doc, vec in zip(missing, vectors):
        doc.embedding = np.asarray(vec, dtype=float)


def score_corpus(query: str, corpus: Corpus, provider) -> SimilarityScores:
    """Cosine of the query against every document, one score per PU."""
    attach_embeddings(corpus, provider)
    (qvec,) = provider.embed_texts([query])
    q = Embedding(np.asarray(qvec, dtype=float))
    raw = {}
    for doc in corpus.iter_documents():
        raw[doc.privacy_unit] = cosine_similarity(q, Embedding(doc.embedding))
    return SimilarityScores(per_pu=raw)
