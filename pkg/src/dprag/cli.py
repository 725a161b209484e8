"""Command-line surface: ingest / query / eval / serve-check.

Backends come from the environment: DPRAG_EMBED_URL and DPRAG_LM_URL
select remote providers, absence selects the deterministic toy backends.
Privacy parameters merge as defaults < config file < flags. Exit codes:
0 ok, 1 I/O or provider failure, 2 duplicate privacy unit, 3 budget.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import requests

from . import evalharness
from .accountant import Accountant
from .core import (
    PrivacyParams,
    RngState,
    TopK,
    TopP,
    ingest,
    read_corpus_records,
    read_index,
    write_index,
)
from .embed import HashingEmbedder, RemoteEmbedder, attach_embeddings
from .engine import answer_query
from .errors import BudgetExhausted, DPRagError, DuplicatePrivacyUnit, ProviderUnavailable
from .lm import RemoteLanguageModel

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_DUPLICATE_PU = 2
EXIT_BUDGET = 3

PARAM_KEYS = (
    "epsilon_retrieval", "epsilon_per_token", "epsilon_budget", "delta",
    "clip_c", "theta", "alpha_icl", "alpha_retrieval", "max_tokens",
    "top_k", "top_p",
)


def load_config(path: str | Path) -> dict[str, str]:
    """Flat key=value lines; '#' starts a comment; keys mirror PrivacyParams."""
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in PARAM_KEYS and key not in ("seed",):
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = value
    return values


def build_params(args, config: dict[str, str]) -> PrivacyParams:
    def pick(key, cast, default):
        flag = getattr(args, key, None)
        if flag is not None:
            return cast(flag)
        if key in config:
            return cast(config[key])
        return default

    budget = pick("epsilon_budget", float, 5.0)
    max_tokens = pick("max_tokens", int, 9)
    retrieval = pick("epsilon_retrieval", float, 0.5)
    # default split: whatever the budget leaves after retrieval, per token
    default_per_token = (budget - retrieval) / max_tokens if budget > retrieval else 0.5
    per_token = pick("epsilon_per_token", float, default_per_token)

    top_k = pick("top_k", int, None)
    top_p = pick("top_p", float, None)
    if top_k is not None and top_p is not None:
        raise ValueError("top_k and top_p are mutually exclusive")
    mode = TopP(top_p) if top_p is not None else TopK(top_k if top_k is not None else 10)

    return PrivacyParams(
        epsilon_retrieval=retrieval,
        epsilon_per_token=per_token,
        epsilon_budget=budget,
        delta=pick("delta", float, 1e-3),
        clip_c=pick("clip_c", float, 0.2),
        theta=pick("theta", float, 0.0),
        alpha_icl=pick("alpha_icl", float, 1.0),
        alpha_retrieval=pick("alpha_retrieval", float, 1.0),
        mode=mode,
        max_tokens=max_tokens,
    )


def make_embedder(dim: int = 256):
    url = os.environ.get("DPRAG_EMBED_URL")
    return RemoteEmbedder(url) if url else HashingEmbedder(dim)


def make_lm(corpus, question: str):
    url = os.environ.get("DPRAG_LM_URL")
    if url:
        return RemoteLanguageModel(url)
    _, lm = evalharness.toy_backends_for_corpus(corpus, [question])
    return lm


def _add_param_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--epsilon-budget", dest="epsilon_budget", type=float)
    parser.add_argument("--epsilon-retrieval", dest="epsilon_retrieval", type=float)
    parser.add_argument("--epsilon-per-token", dest="epsilon_per_token", type=float)
    parser.add_argument("--delta", dest="delta", type=float)
    parser.add_argument("--clip-c", dest="clip_c", type=float)
    parser.add_argument("--theta", dest="theta", type=float)
    parser.add_argument("--alpha-icl", dest="alpha_icl", type=float)
    parser.add_argument("--alpha-retrieval", dest="alpha_retrieval", type=float)
    parser.add_argument("--top-k", dest="top_k", type=int)
    parser.add_argument("--top-p", dest="top_p", type=float)
    parser.add_argument("--max-tokens", dest="max_tokens", type=int)


def cmd_ingest(args) -> int:
    try:
        records = read_corpus_records(args.corpus)
        corpus = ingest(records, policy=args.policy)
    except DuplicatePrivacyUnit as exc:
        print(f"error: duplicate privacy unit {exc.privacy_unit!r}", file=sys.stderr)
        return EXIT_DUPLICATE_PU
    except (OSError, DPRagError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    try:
        attach_embeddings(corpus, make_embedder())
        write_index(args.index, corpus)
    except (OSError, ProviderUnavailable) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"documents: {len(corpus)}")
    print(f"embedding_dim: {corpus.embedding_dim}")
    print(f"privacy_units: {len(corpus.privacy_units())}")
    return EXIT_OK


def cmd_query(args) -> int:
    try:
        corpus = read_index(args.index)
        config = load_config(args.config) if args.config else {}
        params = build_params(args, config)
    except (OSError, DPRagError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE

    seed = args.seed
    if seed is None and "seed" in config:
        seed = int(config["seed"])
    rng = RngState(seed) if seed is not None else RngState.from_entropy()
    accountant = Accountant(budget=params.epsilon_budget, delta_report=params.delta,
                            ledger_path=args.ledger)

    trace = None
    if args.unsafe_trace:
        def trace(report):  # noqa: ANN001 - shape documented in dpicl
            record = {
                "step": report.step,
                "chosen": report.chosen,
                "epsilon_spent": report.epsilon_spent,
                "num_documents": report.num_documents,
                "public_logprob_of_chosen": report.public_logprob_of_chosen,
                "utility": [float(u) for u in report.utility],
            }
            print(json.dumps(record, sort_keys=True), file=sys.stderr)

    try:
        embedder = make_embedder()
        lm = make_lm(corpus, args.question)
        result = answer_query(corpus, args.question, params, embedder, lm,
                              accountant, rng, jobs=args.jobs, trace=trace)
    except BudgetExhausted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (ProviderUnavailable, DPRagError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE

    print(f"answer: {result.generation.text}")
    print(f"stop_reason: {result.generation.stop_reason}")
    print("privacy_report: " + json.dumps(result.report.to_dict(), sort_keys=True))
    return EXIT_OK


def _parse_eval_spec(path: str) -> evalharness.EvalSpec:
    raw: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, value = (part.strip() for part in line.split("=", 1))
            raw[key] = value

    class _Args:
        pass

    args = _Args()
    for key in PARAM_KEYS:
        setattr(args, key, None)
    params = build_params(args, {k: v for k, v in raw.items() if k in PARAM_KEYS})
    return evalharness.EvalSpec(
        frequencies=[int(x) for x in raw.get("frequencies", "1,3,10,30,100").split(",")],
        corpus_size=int(raw.get("corpus_size", "1000")),
        trials_per_frequency=int(raw.get("trials_per_frequency", "50")),
        params=params,
        seed=int(raw.get("seed", "1")),
    )


def cmd_eval(args) -> int:
    try:
        spec = _parse_eval_spec(args.spec)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    result = evalharness.run_eval(spec, jobs=args.jobs)
    evalharness.write_plot_csv(args.out, result)
    print(json.dumps({
        "per_frequency": {str(k): v for k, v in result.plot_rows()},
        "per_query_epsilon": result.per_query_epsilon,
        "failed_trials": len(result.failures),
    }, sort_keys=True))
    return EXIT_OK


def cmd_serve_check(args) -> int:
    ok = True
    embed_url = os.environ.get("DPRAG_EMBED_URL")
    lm_url = os.environ.get("DPRAG_LM_URL")
    if not embed_url and not lm_url:
        print("no remote backends configured (toy backends active)")
        return EXIT_OK
    if embed_url:
        try:
            vecs = RemoteEmbedder(embed_url, retries=0).embed_texts(["ping"])
            print(f"embed backend ok: dim={len(vecs[0])}")
        except Exception as exc:
            print(f"embed backend FAILED: {exc}")
            ok = False
    if lm_url:
        try:
            lm = RemoteLanguageModel(lm_url, retries=0)
            v = lm.vocab_size
            lp = lm.next_token_log_probs(lm.tokenize("ping") or [0])
            if np.asarray(lp).shape != (v,):
                raise ValueError(f"log_probs length {len(lp)} != vocab {v}")
            print(f"lm backend ok: vocab={v}")
        except Exception as exc:
            print(f"lm backend FAILED: {exc}")
            ok = False
    return EXIT_OK if ok else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dprag",
        description="Differentially private retrieval-augmented generation engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="build an index from NDJSON records")
    p_ingest.add_argument("--corpus", required=True)
    p_ingest.add_argument("--index", required=True)
    p_ingest.add_argument("--policy", choices=("reject", "concatenate"), default="reject")
    p_ingest.set_defaults(func=cmd_ingest)

    p_query = sub.add_parser("query", help="answer a question with DP guarantees")
    p_query.add_argument("--index", required=True)
    p_query.add_argument("--question", required=True)
    p_query.add_argument("--seed", type=int)
    p_query.add_argument("--config")
    p_query.add_argument("--ledger", help="append spend/refund records to this NDJSON file")
    p_query.add_argument("--jobs", type=int, default=1)
    p_query.add_argument("--unsafe-trace", action="store_true", dest="unsafe_trace",
                         help="dump per-step internals to stderr (reveals non-DP state)")
    _add_param_flags(p_query)
    p_query.set_defaults(func=cmd_query)

    p_eval = sub.add_parser("eval", help="run the accuracy-vs-frequency harness")
    p_eval.add_argument("--spec", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--jobs", type=int, default=1)
    p_eval.set_defaults(func=cmd_eval)

    p_check = sub.add_parser("serve-check", help="probe configured remote backends")
    p_check.set_defaults(func=cmd_serve_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
