"""End-to-end query pipeline: admit, score, DP-select, DP-generate.

The retrieval draw is paid for before it happens and generation
pre-charges its worst case, so at no point can an interrupted query leave
the ledger short of what was actually revealed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .accountant import Accountant, Report
from .core import Corpus, PrivacyParams, RngState, TopK, TopP, admit_query
from .dpicl import GenerationResult, generate
from .embed import score_corpus
from .lm import DEFAULT_PUBLIC_CONTEXT, PromptTemplate, sample_plain_token
from .retrieval import ThresholdDraw, build_topk_utility, build_topp_utility, sample_threshold

RETRIEVAL_SPEND_LABEL = "retrieval"


@dataclass
class QueryResult:
    generation: GenerationResult
    threshold: ThresholdDraw
    report: Report


def answer_query(
    corpus: Corpus,
    question: str,
    params: PrivacyParams,
    embedder,
    lm,
    accountant: Accountant,
    rng: RngState,
    template: PromptTemplate | None = None,
    public_context: str | None = DEFAULT_PUBLIC_CONTEXT,
    jobs: int = 1,
    trace=None,
) -> QueryResult:
    """Run one DP query end to end. Raises BudgetExhausted before any
    provider call when the pessimistic cost does not fit the budget."""
    admit_query(params, accountant)

    scores = score_corpus(question, corpus, embedder)
    if isinstance(params.mode, TopK):
        utility = build_topk_utility(scores, params.mode.k)
    elif isinstance(params.mode, TopP):
        utility = build_topp_utility(scores, params.mode.p, params.alpha_retrieval)
    else:
        raise ValueError(f"unknown retrieval mode {params.mode!r}")

    accountant.spend(RETRIEVAL_SPEND_LABEL, params.epsilon_retrieval)
    draw = sample_threshold(utility, params.epsilon_retrieval, rng)
    selected = [corpus.documents[pu] for pu in sorted(draw.selected)]

    result = generate(
        question,
        selected,
        params,
        lm,
        accountant,
        rng,
        template=template,
        public_context=public_context,
        jobs=jobs,
        trace=trace,
    )
    return QueryResult(generation=result, threshold=draw, report=accountant.report())


def answer_query_plain(
    corpus: Corpus,
    question: str,
    k: int,
    embedder,
    lm,
    max_tokens: int,
    template: PromptTemplate | None = None,
    temperature: float = 0.0,
    rng: RngState | None = None,
) -> str:
    """Non-DP baseline for comparison: one prompt stuffed with the top-k
    documents by raw similarity, decoded greedily (or at temperature T)."""
    from .lm import assemble_prompt, next_token_distribution

    template = template or PromptTemplate()
    scores = score_corpus(question, corpus, embedder)
    ranked = sorted(scores.rescaled, key=lambda pu: (-scores.rescaled[pu], pu))
    docs = [corpus.documents[pu].text for pu in ranked[:k]]
    context = assemble_prompt(template, question, "\n".join(docs), lm)
    response: list[int] = []
    gen = rng.stream if rng is not None else None
    for _ in range(max_tokens):
        dist = next_token_distribution(lm, context + response)
        token = sample_plain_token(dist, temperature=temperature,
                                   rng=gen if temperature > 0 else None)
        response.append(token)
        if lm.eos_id is not None and token == lm.eos_id:
            response.pop()
            break
    return lm.detokenize(response)
