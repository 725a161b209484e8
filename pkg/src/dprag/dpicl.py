"""DP in-context token generation.

Per token step the engine fans out one prompt per selected document plus
one public prompt, all sharing the response prefix. Each private
distribution runs through a three-stage transform (emphasis, centering,
clipping) that bounds its infinity-norm contribution by the clip bound,
which is what makes the exponential-mechanism token draw epsilon-DP.
"""

from __future__ import annotations

import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .accountant import Accountant
from .core import Document, PrivacyParams, RngState, TokenId
from .errors import BudgetExhausted, VocabMismatch, WrongStage
from .lm import (
    DEFAULT_PUBLIC_CONTEXT,
    PromptTemplate,
    TokenDistribution,
    assemble_prompt,
    next_token_distribution,
)
from .numerics import log_softmax

STAGE_NORM = "norm"
STAGE_CENTERED = "centered"
STAGE_CLIPPED = "clipped"

# Data-independent floor applied to the public prior's log-probs so that
# zero-probability tokens keep finite utilities.
PUBLIC_LOGPROB_FLOOR = math.log(sys.float_info.min)

TOKEN_SPEND_LABEL = "token"


@dataclass
class TransformedScores:
    values: np.ndarray
    stage: str


def transform_norm(dist: TokenDistribution, alpha_icl: float) -> TransformedScores:
    """Emphasis transform (expm1((log p - log p_max) * alpha) / alpha).

    Output lies in [-1/alpha, 0] with 0 exactly at the argmax; tokens with
    zero probability land on the finite infimum -1/alpha. At alpha=1 this
    is p/p_max - 1; small alpha approaches the log-ratio, large alpha the
    (-1/alpha)-scaled indicator of the argmax.
    """
    if alpha_icl <= 0:
        raise ValueError("alpha_icl must be positive")
    lp = dist.log_probs
    shifted = alpha_icl * (lp - np.max(lp))
    values = np.expm1(shifted) / alpha_icl
    return TransformedScores(values=values, stage=STAGE_NORM)


def transform_center(scores: TransformedScores) -> TransformedScores:
    """Subtract the midrange so max = -min; halves the infinity-norm."""
    if scores.stage != STAGE_NORM:
        raise WrongStage(f"center expects stage {STAGE_NORM!r}, got {scores.stage!r}")
    v = scores.values
    mid = (np.max(v) + np.min(v)) / 2.0
    return TransformedScores(values=v - mid, stage=STAGE_CENTERED)


def transform_clip(scores: TransformedScores, c: float) -> TransformedScores:
    """Uniform rescale so the infinity-norm never exceeds the clip bound."""
    if scores.stage != STAGE_CENTERED:
        raise WrongStage(f"clip expects stage {STAGE_CENTERED!r}, got {scores.stage!r}")
    if c <= 0:
        raise ValueError("clip bound must be positive")
    v = scores.values
    max_abs = float(np.max(np.abs(v)))
    scale = 1.0 if max_abs <= c or max_abs == 0.0 else c / max_abs
    return TransformedScores(values=v * scale, stage=STAGE_CLIPPED)


def transform_chain(dist: TokenDistribution, alpha_icl: float,
                    c: float) -> TransformedScores:
    return transform_clip(transform_center(transform_norm(dist, alpha_icl)), c)


def icl_utility(per_doc: Sequence[TransformedScores], public: TokenDistribution,
                theta: float) -> np.ndarray:
    """theta * public log-probs plus the sum of clipped per-document scores.

    The public term is data independent (post-processing of the public
    prompt), hence exempt from clipping; its log-probs are floored at
    ln(float min) so the utility stays finite everywhere.
    """
    if theta < 0:
        raise ValueError("theta must be non-negative")
    v = public.vocab_size
    utility = np.zeros(v)
    if theta > 0:
        utility += theta * np.maximum(public.log_probs, PUBLIC_LOGPROB_FLOOR)
    for scores in per_doc:
        if scores.stage != STAGE_CLIPPED:
            raise WrongStage("per-document scores must be at the clipped stage")
        if scores.values.shape != (v,):
            raise VocabMismatch("per-document vector length differs from public vocabulary")
        utility += scores.values
    return utility


def token_log_probabilities(utility: np.ndarray, epsilon: float, c: float) -> np.ndarray:
    """Exact log sampling distribution: softmax(eps * utility / (2 c))."""
    if epsilon <= 0 or c <= 0:
        raise ValueError("epsilon and clip bound must be positive")
    return log_softmax(epsilon * np.asarray(utility, dtype=float) / (2.0 * c))


def token_probabilities(utility: np.ndarray, epsilon: float, c: float) -> np.ndarray:
    return np.exp(token_log_probabilities(utility, epsilon, c))


def sample_token(utility: np.ndarray, epsilon: float, c: float,
                 rng: RngState) -> TokenId:
    p = token_probabilities(utility, epsilon, c)
    return int(rng.stream.choice(p.shape[0], p=p))


@dataclass
class TokenStepReport:
    step: int
    chosen: TokenId
    utility: np.ndarray
    epsilon_spent: float
    num_documents: int
    public_logprob_of_chosen: float


@dataclass
class GenerationResult:
    tokens: list[TokenId]
    text: str
    total_epsilon: float
    stop_reason: str  # eos | max_tokens | budget


def _fan_out(lm, contexts: list[list[int]], jobs: int) -> list[TokenDistribution]:
    """k+1 provider calls for one step; any failure aborts before sampling."""
    if jobs > 1 and len(contexts) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(lambda ctx: next_token_distribution(lm, ctx), contexts))
    return [next_token_distribution(lm, ctx) for ctx in contexts]


def generate(
    question: str,
    selected_docs: Sequence[Document],
    params: PrivacyParams,
    lm,
    accountant: Accountant,
    rng: RngState,
    template: PromptTemplate | None = None,
    public_context: str | None = DEFAULT_PUBLIC_CONTEXT,
    jobs: int = 1,
    trace: Callable[[TokenStepReport], None] | None = None,
) -> GenerationResult:
    """Auto-regressive DP decoding over the selected documents.

    Token budget is pre-charged (one accountant event per potential step)
    and unspent steps are refunded afterwards, so a crash can only leave
    the ledger over-charged, never under-charged. A trailing EOS draw is a
    DP sample like any other and counts toward the spend; the returned
    text strips it.
    """
    template = template or PromptTemplate()
    docs = sorted(selected_docs, key=lambda d: d.privacy_unit)
    doc_prompts = [
        assemble_prompt(template, question, d.text, lm) for d in docs
    ]
    public_prompt = assemble_prompt(template, question, None, lm,
                                    public_context=public_context)

    # Pre-charge as many steps as the budget affords, capped at max_tokens.
    n_charged = 0
    for _ in range(params.max_tokens):
        try:
            accountant.spend(TOKEN_SPEND_LABEL, params.epsilon_per_token)
            n_charged += 1
        except BudgetExhausted:
            break
    if n_charged == 0:
        raise BudgetExhausted(
            shortfall=accountant.spent() + params.epsilon_per_token - accountant.budget,
            message="no budget left for even one token",
        )

    response: list[TokenId] = []
    stop_reason = "budget" if n_charged < params.max_tokens else "max_tokens"
    try:
        for step in range(n_charged):
            contexts = [ids + response for ids in doc_prompts]
            contexts.append(public_prompt + response)
            dists = _fan_out(lm, contexts, jobs)
            public_dist = dists[-1]
            per_doc = [
                transform_chain(d, params.alpha_icl, params.clip_c)
                for d in dists[:-1]
            ]
            utility = icl_utility(per_doc, public_dist, params.theta)
            token = sample_token(utility, params.epsilon_per_token, params.clip_c, rng)
            response.append(token)
            if trace is not None:
                trace(TokenStepReport(
                    step=step,
                    chosen=token,
                    utility=utility,
                    epsilon_spent=params.epsilon_per_token,
                    num_documents=len(docs),
                    public_logprob_of_chosen=float(public_dist.log_probs[token]),
                ))
            if lm.eos_id is not None and token == lm.eos_id:
                stop_reason = "eos"
                break
    finally:
        unused = n_charged - len(response)
        if unused > 0:
            accountant.refund(TOKEN_SPEND_LABEL, unused * params.epsilon_per_token)

    display = list(response)
    if stop_reason == "eos":
        display = display[:-1]
    return GenerationResult(
        tokens=response,
        text=lm.detokenize(display),
        total_epsilon=params.epsilon_retrieval + len(response) * params.epsilon_per_token,
        stop_reason=stop_reason,
    )
