"""Next-token providers, prompt assembly and the deterministic toy LM.

Providers expose a full-vocabulary log-probability vector per call; the
DP aggregation needs the whole vector, so top-n-only backends are
unsupported by design. The toy LM is a pure function of (rules, context)
and stands in for a real model in tests and the desk-scale eval.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import requests

from .errors import (
    ContextTooLong,
    ProviderUnavailable,
    TemplateMalformed,
    UnknownTargetToken,
    VocabMismatch,
)
from .numerics import logsumexp

NORMALIZATION_TOL = 1e-6


@dataclass(frozen=True)
class TokenDistribution:
    """Normalized next-token log probabilities over the full vocabulary."""

    log_probs: np.ndarray

    def __post_init__(self):
        lp = np.asarray(self.log_probs, dtype=float)
        if lp.ndim != 1:
            raise ValueError("log_probs must be 1-D")
        if np.any(np.isnan(lp)) or np.any(lp == np.inf):
            raise ValueError("log_probs entries must be finite or -inf")
        total = logsumexp(lp)
        if abs(total) > NORMALIZATION_TOL:
            raise ValueError(f"distribution not normalized (logsumexp={total:.3g})")
        object.__setattr__(self, "log_probs", lp)

    @property
    def vocab_size(self) -> int:
        return int(self.log_probs.shape[0])

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "TokenDistribution":
        p = np.asarray(probs, dtype=float)
        with np.errstate(divide="ignore"):
            return cls(np.log(p))


@dataclass(frozen=True)
class PromptTemplate:
    """Prompt skeleton; both placeholders must appear exactly once."""

    system_preamble: str = "You answer questions using only the provided context."
    document_slot: str = "Context: {document}"
    question_slot: str = "Question: {question} Answer:"

    def __post_init__(self):
        if self.document_slot.count("{document}") != 1:
            raise TemplateMalformed("document_slot needs exactly one {document}")
        if self.question_slot.count("{question}") != 1:
            raise TemplateMalformed("question_slot needs exactly one {question}")


# Default public context; used when a query retrieves nothing private.
DEFAULT_PUBLIC_CONTEXT = "(no private context)"


def assemble_prompt_text(
    template: PromptTemplate,
    question: str,
    document: str | None = None,
    public_context: str | None = None,
) -> str:
    """Deterministic concatenation: preamble, document slot, question slot.

    With document=None the public context fills the slot; if that is also
    absent the slot is omitted entirely.
    """
    if not question:
        raise ValueError("question must be non-empty")
    parts = []
    if template.system_preamble:
        parts.append(template.system_preamble)
    doc = document if document is not None else public_context
    if doc is not None:
        parts.append(template.document_slot.format(document=doc))
    parts.append(template.question_slot.format(question=question))
    return " ".join(parts)


def assemble_prompt(
    template: PromptTemplate,
    question: str,
    document: str | None,
    provider,
    public_context: str | None = None,
) -> list[int]:
    """Assembled prompt tokenized by the active backend."""
    text = assemble_prompt_text(template, question, document, public_context)
    return provider.tokenize(text)


def next_token_distribution(provider, context: list[int]) -> TokenDistribution:
    """Query a provider and validate the returned vector.

    Raises ContextTooLong before calling out, VocabMismatch when the
    provider returns a wrong-length vector, and normalization errors via
    TokenDistribution itself.
    """
    if not context:
        raise ValueError("context must be non-empty")
    if len(context) > provider.max_context:
        raise ContextTooLong(f"{len(context)} tokens > limit {provider.max_context}")
    lp = np.asarray(provider.next_token_log_probs(list(context)), dtype=float)
    if lp.shape != (provider.vocab_size,):
        raise VocabMismatch(
            f"provider returned {lp.shape[0]} log-probs for vocab of {provider.vocab_size}"
        )
    return TokenDistribution(lp)


def build_word_vocab(texts, extra=(), eos_token: str = "</s>",
                     unk_token: str = "<unk>") -> list[str]:
    """Fixed word-level vocabulary: specials first, then sorted unique words."""
    words = set()
    for t in texts:
        words.update(t.split())
    for t in extra:
        words.update(t.split())
    words.discard(eos_token)
    words.discard(unk_token)
    return [eos_token, unk_token] + sorted(words)


class ToyLanguageModel:
    """Whitespace-token LM driven by a substring-trigger rule table.

    A rule (trigger, target, m) fires when `trigger` occurs in the
    detokenized context; a firing rule puts mass m on its target and
    spreads the rest uniformly. Multiple firing rules split their mass
    equally. No firing rule means the uniform distribution. `smoothing`
    mixes the result with uniform (0 = pure rule table).
    """

    def __init__(self, vocab: list[str], rules=(), smoothing: float = 0.0,
                 eos_token: str = "</s>", unk_token: str = "<unk>",
                 max_context: int = 8192):
        if len(set(vocab)) != len(vocab):
            raise ValueError("vocabulary has duplicate tokens")
        if not 0.0 <= smoothing <= 1.0:
            raise ValueError("smoothing must lie in [0, 1]")
        self._vocab = list(vocab)
        self._index = {w: i for i, w in enumerate(self._vocab)}
        self.smoothing = smoothing
        self.max_context = max_context
        self.eos_id = self._index.get(eos_token)
        self.unk_id = self._index.get(unk_token)
        self.rules = []
        for trigger, target, mass in rules:
            if target not in self._index:
                raise UnknownTargetToken(f"rule target {target!r} not in vocabulary")
            if not 0.0 < mass < 1.0:
                raise ValueError("rule mass must lie in (0, 1)")
            self.rules.append((trigger, self._index[target], float(mass)))

    @property
    def vocab(self) -> list[str]:
        return self._vocab

    @property
    def vocab_size(self) -> int:
        return len(self._vocab)

    def tokenize(self, text: str) -> list[int]:
        ids = []
        for w in text.split():
            i = self._index.get(w)
            if i is None:
                if self.unk_id is None:
                    raise UnknownTargetToken(f"word {w!r} not in vocabulary")
                i = self.unk_id
            ids.append(i)
        return ids

    def detokenize(self, ids: list[int]) -> str:
        return " ".join(self._vocab[i] for i in ids)

    def next_token_log_probs(self, context: list[int]) -> np.ndarray:
        text = self.detokenize(context)
        v = self.vocab_size
        fired = [(tid, m) for trigger, tid, m in self.rules if trigger in text]
        if fired:
            probs = np.zeros(v)
            share = 1.0 / len(fired)
            target_mass = 0.0
            targets = set()
            for tid, m in fired:
                probs[tid] += m * share
                target_mass += m * share
                targets.add(tid)
            rest = v - len(targets)
            if rest:
                leftover = (1.0 - target_mass) / rest
                for i in range(v):
                    if i not in targets:
                        probs[i] = leftover
        else:
            probs = np.full(v, 1.0 / v)
        if self.smoothing:
            probs = (1.0 - self.smoothing) * probs + self.smoothing / v
        with np.errstate(divide="ignore"):
            return np.log(probs)


def toy_lm(vocab: list[str], rules=(), smoothing: float = 0.0, **kwargs) -> ToyLanguageModel:
    return ToyLanguageModel(vocab, rules=rules, smoothing=smoothing, **kwargs)


class RemoteLanguageModel:
    """Client for the HTTP logits protocol.

    GET {base}/vocab returns {"tokens": [...]}; POST {base}/next_token_logprobs
    with {"tokens": [int,...]} returns {"log_probs": [...]} of vocabulary
    length. Word-level detokenization (space join) mirrors the toy backend;
    servers with richer tokenizers can be queried with {"text": ...} via
    next_token_log_probs_for_text.
    """

    def __init__(self, base_url: str, retries: int = 3, backoff: float = 0.2,
                 timeout: float = 60.0, max_context: int = 32768):
        self.base_url = base_url.rstrip("/")
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self.max_context = max_context
        self._vocab: list[str] | None = None
        self._index: dict[str, int] | None = None

    def _request(self, method: str, path: str, **kwargs):
        last_exc: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = requests.request(method, f"{self.base_url}{path}",
                                        timeout=self.timeout, **kwargs)
                resp.raise_for_status()
                return resp.json()
            except (requests.RequestException, ValueError) as exc:
                last_exc = exc
        raise ProviderUnavailable(
            f"LM backend failed after {self.retries} retries: {last_exc}"
        )

    @property
    def vocab(self) -> list[str]:
        if self._vocab is None:
            self._vocab = [str(t) for t in self._request("GET", "/vocab")["tokens"]]
            self._index = {w: i for i, w in enumerate(self._vocab)}
        return self._vocab

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def eos_id(self) -> int | None:
        for marker in ("</s>", "<eos>", "<|endoftext|>"):
            if marker in self._vocab_index():
                return self._vocab_index()[marker]
        return None

    def _vocab_index(self) -> dict[str, int]:
        self.vocab
        return self._index  # type: ignore[return-value]

    def tokenize(self, text: str) -> list[int]:
        index = self._vocab_index()
        unk = index.get("<unk>")
        ids = []
        for w in text.split():
            i = index.get(w, unk)
            if i is None:
                raise UnknownTargetToken(f"word {w!r} not in remote vocabulary")
            ids.append(i)
        return ids

    def detokenize(self, ids: list[int]) -> str:
        vocab = self.vocab
        return " ".join(vocab[i] for i in ids)

    def next_token_log_probs(self, context: list[int]) -> np.ndarray:
        data = self._request("POST", "/next_token_logprobs", json={"tokens": context})
        return np.asarray(data["log_probs"], dtype=float)

    def next_token_log_probs_for_text(self, text: str) -> np.ndarray:
        data = self._request("POST", "/next_token_logprobs", json={"text": text})
        return np.asarray(data["log_probs"], dtype=float)


def sample_plain_token(dist: TokenDistribution, temperature: float = 0.0,
                       rng: np.random.Generator | None = None) -> int:
    """Non-DP baseline sampling: greedy at T=0, else probs to the power 1/T."""
    lp = dist.log_probs
    if temperature <= 0.0:
        return int(np.argmax(lp))
    if rng is None:
        raise ValueError("temperature sampling needs an rng")
    scaled = lp / temperature
    p = np.exp(scaled - logsumexp(scaled))
    return int(rng.choice(len(p), p=p / p.sum()))
