"""Desk-scale accuracy-vs-specificity evaluation on a synthetic corpus.

The corpus invents disease/symptom/treatment vocabulary from scratch so
the toy LM cannot know any answer a priori; everything it can say about a
disease it must read from a retrieved document. Each focus disease
appears in exactly `frequency` patient records, which makes accuracy as a
function of frequency measure how much shared evidence the DP mechanisms
need before the answer survives aggregation.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .accountant import Accountant
from .core import Corpus, PrivacyParams, RngState, TopK, ingest
from .embed import HashingEmbedder, attach_embeddings
from .engine import answer_query
from .lm import DEFAULT_PUBLIC_CONTEXT, PromptTemplate, ToyLanguageModel, build_word_vocab

logger = logging.getLogger(__name__)

EVAL_EMBED_DIM = 256
SYMPTOMS_PER_DISEASE = 5
FILLER_DISEASES = 8
NAME_POOL = 100
GENERIC_POOL = 40
EXTRA_WORDS_MAX = 30
RULE_MASS = 0.9

# Budget split for the headline run: 2.5 retrieval + 2 tokens * 1.25 = 5.0.
DEFAULT_EVAL_PARAMS = PrivacyParams(
    epsilon_retrieval=2.5,
    epsilon_per_token=1.25,
    epsilon_budget=5.0,
    delta=1e-3,
    clip_c=0.2,
    theta=0.0,
    alpha_icl=1.0,
    alpha_retrieval=1.0,
    mode=TopK(10),
    max_tokens=2,
)


@dataclass(frozen=True)
class Disease:
    name: str
    symptoms: tuple[str, ...]
    treatment: str


@dataclass
class EvalSpec:
    frequencies: list[int]
    corpus_size: int
    trials_per_frequency: int
    params: PrivacyParams
    seed: int

    def __post_init__(self):
        if len(set(self.frequencies)) != len(self.frequencies):
            raise ValueError("frequencies must be distinct")
        if any(f < 1 for f in self.frequencies):
            raise ValueError("frequencies must be positive")
        if sum(self.frequencies) > self.corpus_size:
            raise ValueError("sum of frequencies exceeds corpus size")
        if self.trials_per_frequency < 1:
            raise ValueError("trials_per_frequency must be >= 1")


@dataclass
class EvalResult:
    per_frequency: dict[int, float]
    per_query_epsilon: float
    failures: list[str] = field(default_factory=list)

    def plot_rows(self) -> list[tuple[int, float]]:
        return sorted(self.per_frequency.items())


_CONSONANTS = "bdfglkmnprstvz"
_VOWELS = "aeiou"


def _pseudo_word(rng, syllables: int) -> str:
    parts = []
    for _ in range(syllables):
        parts.append(_CONSONANTS[rng.integers(len(_CONSONANTS))])
        parts.append(_VOWELS[rng.integers(len(_VOWELS))])
    return "".join(parts)


def _word_pool(rng, count: int, syllables: int, taken: set[str]) -> list[str]:
    pool: list[str] = []
    while len(pool) < count:
        w = _pseudo_word(rng, syllables)
        if w not in taken:
            taken.add(w)
            pool.append(w)
    return pool


def _disease_table(rng, count: int, taken: set[str]) -> list[Disease]:
    names = _word_pool(rng, count, 4, taken)
    treatments = _word_pool(rng, count, 4, taken)
    out = []
    for name, treatment in zip(names, treatments):
        symptoms = tuple(_word_pool(rng, SYMPTOMS_PER_DISEASE, 3, taken))
        out.append(Disease(name.capitalize(), symptoms, treatment.capitalize()))
    return out


def build_specificity_corpus(
    frequencies: list[int],
    corpus_size: int,
    seed: int,
    kind: str = "diagnosis",
) -> tuple[list[tuple[str, str, str]], list[Disease]]:
    """Synthetic patient records; focus disease i appears in exactly
    frequencies[i] documents, fillers pad the rest.

    kind="diagnosis" records state the disease ("diagnosed as X"),
    kind="treatment" records state the treatment ("treated with Y"). Record
    lengths vary (random generic-note words) so similarity scores spread
    instead of collapsing into one breakpoint.
    """
    rng = RngState(seed).derive(0).stream
    taken: set[str] = set()
    diseases = _disease_table(rng, len(frequencies) + FILLER_DISEASES, taken)
    focus = diseases[: len(frequencies)]
    fillers = diseases[len(frequencies):]
    names = [w.capitalize() for w in _word_pool(rng, NAME_POOL, 3, taken)]
    generic = _word_pool(rng, GENERIC_POOL, 3, taken)

    slots: list[Disease] = []
    for disease, freq in zip(focus, frequencies):
        slots.extend([disease] * freq)
    for i in range(corpus_size - len(slots)):
        slots.append(fillers[i % len(fillers)])
    order = rng.permutation(len(slots))

    records = []
    for pos, slot_idx in enumerate(order):
        disease = slots[slot_idx]
        name = names[rng.integers(len(names))]
        extras = [generic[rng.integers(len(generic))]
                  for _ in range(rng.integers(0, EXTRA_WORDS_MAX + 1))]
        if kind == "diagnosis":
            statement = f"diagnosed as {disease.name}"
        elif kind == "treatment":
            statement = f"treated with {disease.treatment}"
        else:
            raise ValueError(f"unknown corpus kind {kind!r}")
        text = (f"Patient {name} reports " + " ".join(disease.symptoms)
                + f" {statement}")
        if extras:
            text += " notes " + " ".join(extras)
        records.append((f"doc-{pos:05d}", f"pu-{pos:05d}", text))
    return records, focus


def disease_question(disease: Disease) -> str:
    return ("I am experiencing " + " ".join(disease.symptoms)
            + " What is my disease")


def treatment_question(disease: Disease) -> str:
    return ("I am experiencing " + " ".join(disease.symptoms)
            + " What is my treatment")


def rules_for_corpus(texts, eos_token: str = "</s>", mass: float = RULE_MASS):
    """Derive toy-LM rules from the synthetic record conventions.

    Every "diagnosed as X" / "treated with Y" phrase yields an answer rule
    keyed on the phrase (fires only for prompts carrying that document)
    plus a stop rule keyed on "Answer: X" (fires once the answer token
    opens the response).
    """
    answers: dict[str, str] = {}
    for text in texts:
        for phrase, token in re.findall(r"((?:diagnosed as|treated with) (\S+))", text):
            answers.setdefault(token, phrase)
    rules = []
    for token in sorted(answers):
        rules.append((answers[token], token, mass))
        rules.append((f"Answer: {token}", eos_token, mass))
    return rules


def toy_backends_for_corpus(
    corpus: Corpus,
    questions,
    template: PromptTemplate | None = None,
    embed_dim: int = EVAL_EMBED_DIM,
) -> tuple[HashingEmbedder, ToyLanguageModel]:
    """Deterministic embedder + toy LM whose vocabulary covers every word
    any prompt in this corpus can contain (triggers need exact round-trips)."""
    template = template or PromptTemplate()
    texts = [doc.text for doc in corpus.iter_documents()]
    extra = list(questions) + [
        template.system_preamble,
        template.document_slot.format(document=""),
        template.question_slot.format(question=""),
        DEFAULT_PUBLIC_CONTEXT,
    ]
    vocab = build_word_vocab(texts, extra=extra)
    lm = ToyLanguageModel(vocab, rules=rules_for_corpus(texts))
    return HashingEmbedder(embed_dim), lm


def run_eval(spec: EvalSpec, jobs: int = 1) -> EvalResult:
    """Accuracy per frequency over seeded trials.

    Trial i of frequency index f uses the stream derived from
    (spec.seed, 1 + f * trials + i); stream 0 built the corpus. A trial is
    correct when the generated answer contains the focus disease token.
    Failed trials count as incorrect and are logged.
    """
    records, focus = build_specificity_corpus(
        spec.frequencies, spec.corpus_size, spec.seed)
    corpus = ingest(records)
    questions = [disease_question(d) for d in focus]
    embedder, lm = toy_backends_for_corpus(corpus, questions)
    attach_embeddings(corpus, embedder)

    trials = spec.trials_per_frequency
    failures: list[str] = []

    def one_trial(f_idx: int, trial: int) -> bool:
        disease = focus[f_idx]
        rng = RngState(spec.seed).derive(1 + f_idx * trials + trial)
        accountant = Accountant(budget=spec.params.epsilon_budget,
                                delta_report=spec.params.delta)
        try:
            result = answer_query(corpus, questions[f_idx], spec.params,
                                  embedder, lm, accountant, rng)
        except Exception as exc:  # failed trial counts as incorrect
            msg = f"frequency={spec.frequencies[f_idx]} trial={trial}: {exc}"
            logger.warning("eval trial failed: %s", msg)
            failures.append(msg)
            return False
        return disease.name in result.generation.text.split()

    per_frequency: dict[int, float] = {}
    for f_idx, freq in enumerate(spec.frequencies):
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                outcomes = list(pool.map(lambda t: one_trial(f_idx, t), range(trials)))
        else:
            outcomes = [one_trial(f_idx, t) for t in range(trials)]
        per_frequency[freq] = sum(outcomes) / trials

    return EvalResult(
        per_frequency=per_frequency,
        per_query_epsilon=spec.params.requested_epsilon(),
        failures=failures,
    )


def write_plot_csv(path, result: EvalResult) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("frequency,accuracy\n")
        for freq, acc in result.plot_rows():
            fh.write(f"{freq},{acc}\n")
