"""Differentially private retrieval-augmented generation.

Answers natural-language questions over a privacy-sensitive corpus while
guaranteeing that no single privacy unit's document measurably influences
the generated answer. Selection uses an exponential mechanism over a
similarity threshold; generation aggregates per-document next-token
distributions under a clipped exponential mechanism; all losses compose
in a pure-epsilon accountant.
"""

from .accountant import Accountant, Report, load_ledger
from .core import (
    Corpus,
    Document,
    PrivacyParams,
    RngState,
    TopK,
    TopP,
    admit_query,
    ingest,
    read_index,
    write_index,
)
from .dpicl import (
    GenerationResult,
    TokenStepReport,
    TransformedScores,
    generate,
    icl_utility,
    sample_token,
    token_probabilities,
    transform_center,
    transform_chain,
    transform_clip,
    transform_norm,
)
from .embed import (
    Embedding,
    HashingEmbedder,
    RemoteEmbedder,
    SimilarityScores,
    cosine_similarity,
    score_corpus,
    toy_embed,
)
from .engine import QueryResult, answer_query
from .lm import (
    PromptTemplate,
    RemoteLanguageModel,
    TokenDistribution,
    ToyLanguageModel,
    assemble_prompt,
    assemble_prompt_text,
    build_word_vocab,
    next_token_distribution,
    toy_lm,
)
from .retrieval import (
    ThresholdDraw,
    ThresholdUtility,
    build_topk_utility,
    build_topp_utility,
    piece_probabilities,
    sample_threshold,
)

__version__ = "0.1.0"
