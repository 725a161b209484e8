"""Privacy-unit-preserving document selection via a DP similarity threshold.

Both selection utilities are piecewise constant in the threshold, so the
exponential mechanism admits exact inverse sampling: pick a piece with
probability proportional to width * exp(eps * U / 2) (log domain), then
draw uniformly inside the piece. No discretization, no privacy slop.

Documents with score exactly equal to the threshold are selected (closed
condition tau <= s), matching the indicator convention of the utilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import RngState
from .embed import SimilarityScores
from .errors import EmptyScores
from .numerics import log_softmax


@dataclass
class ThresholdUtility:
    """Piecewise-constant selection utility over thresholds in [0, 1].

    Piece i covers (lo[i], hi[i]] (piece 0 is [0, hi[0]]); breakpoints are
    the sorted distinct rescaled scores. Zero-width pieces (a score at 0,
    or duplicate handling artifacts) carry zero mass and are harmless.
    """

    kind: str
    breakpoints: np.ndarray
    piece_lo: np.ndarray
    piece_hi: np.ndarray
    piece_values: np.ndarray
    scores: SimilarityScores = field(repr=False, default=None)  # type: ignore[assignment]

    @property
    def num_pieces(self) -> int:
        return int(self.piece_values.shape[0])

    def piece_widths(self) -> np.ndarray:
        return self.piece_hi - self.piece_lo

    def value_at(self, tau: float) -> float:
        """Utility at a specific threshold (closed-left only for piece 0)."""
        idx = int(np.searchsorted(self.piece_hi, tau, side="left"))
        idx = min(idx, self.num_pieces - 1)
        return float(self.piece_values[idx])


@dataclass
class ThresholdDraw:
    tau: float
    epsilon_spent: float
    selected: set[str]


def _piece_edges(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lo = np.concatenate(([0.0], values))
    hi = np.concatenate((values, [1.0]))
    return lo, hi


def _sorted_distinct(scores: SimilarityScores) -> tuple[np.ndarray, np.ndarray]:
    """Distinct rescaled scores (ascending) and their multiplicities."""
    if not scores.rescaled:
        raise EmptyScores("no similarity scores")
    vals = np.asarray(sorted(scores.rescaled.values()), dtype=float)
    distinct, counts = np.unique(vals, return_counts=True)
    return distinct, counts


def _selected_counts(counts: np.ndarray) -> np.ndarray:
    """Documents selected on each piece: all of them on piece 0, none past
    the largest score."""
    suffix = np.concatenate((np.cumsum(counts[::-1])[::-1], [0]))
    return suffix


def build_topk_utility(scores: SimilarityScores, k: int) -> ThresholdUtility:
    """Utility -(|selected - k|): maximal (zero) where exactly k survive."""
    if k < 1:
        raise ValueError("k must be >= 1")
    distinct, counts = _sorted_distinct(scores)
    m = _selected_counts(counts)
    lo, hi = _piece_edges(distinct)
    values = -np.abs(m.astype(float) - k)
    return ThresholdUtility(kind="top_k", breakpoints=distinct, piece_lo=lo,
                            piece_hi=hi, piece_values=values, scores=scores)


def contrast_weights(values: np.ndarray, alpha: float) -> np.ndarray:
    """Score weights exp(alpha * (s - s_max) / (s_max - s_min)) in (0, 1].

    All-identical scores make the contrast undefined; the documented
    fallback is unit weights (the utility then reduces to a top-k-like
    form with k = p * N).
    """
    s_max = float(values.max())
    s_min = float(values.min())
    if s_max == s_min:
        return np.ones_like(values)
    return np.exp(alpha * (values - s_max) / (s_max - s_min))


def build_topp_utility(scores: SimilarityScores, p: float,
                       alpha_retrieval: float) -> ThresholdUtility:
    """Utility -(|selected weight - p * total weight|) with contrasted weights."""
    if not 0.0 < p <= 1.0:
        raise ValueError("p must lie in (0, 1]")
    if alpha_retrieval <= 0:
        raise ValueError("alpha_retrieval must be positive")
    distinct, counts = _sorted_distinct(scores)
    w = contrast_weights(distinct, alpha_retrieval) * counts
    total = float(w.sum())
    selected_w = np.concatenate((np.cumsum(w[::-1])[::-1], [0.0]))
    lo, hi = _piece_edges(distinct)
    values = -np.abs(selected_w - p * total)
    return ThresholdUtility(kind="top_p", breakpoints=distinct, piece_lo=lo,
                            piece_hi=hi, piece_values=values, scores=scores)


def piece_log_masses(utility: ThresholdUtility, epsilon: float) -> np.ndarray:
    """Unnormalized log mass per piece: log(width) + eps * U / 2."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    widths = utility.piece_widths()
    with np.errstate(divide="ignore"):
        return np.log(widths) + 0.5 * epsilon * utility.piece_values


def piece_probabilities(utility: ThresholdUtility, epsilon: float) -> np.ndarray:
    """Exact probability of the threshold landing in each piece."""
    return np.exp(log_softmax(piece_log_masses(utility, epsilon)))


def sample_threshold(utility: ThresholdUtility, epsilon: float,
                     rng: RngState) -> ThresholdDraw:
    """Draw tau from the density proportional to exp(eps * U(tau) / 2).

    Exact two-stage sampling: piece by its normalized mass, then uniform
    within the piece. The selected set is every privacy unit whose
    rescaled score is >= tau.
    """
    probs = piece_probabilities(utility, epsilon)
    idx = int(rng.stream.choice(utility.num_pieces, p=probs))
    lo = float(utility.piece_lo[idx])
    hi = float(utility.piece_hi[idx])
    tau = lo + float(rng.stream.random()) * (hi - lo)
    selected = {pu for pu, s in utility.scores.rescaled.items() if tau <= s}
    return ThresholdDraw(tau=tau, epsilon_spent=epsilon, selected=selected)


def piece_records(utility: ThresholdUtility, epsilon: float) -> list[dict]:
    """Diagnostic dump: one record per piece (lo, hi, utility, log_mass)."""
    masses = piece_log_masses(utility, epsilon)
    return [
        {"lo": float(lo), "hi": float(hi), "utility": float(u), "log_mass": float(lm)}
        for lo, hi, u, lm in zip(utility.piece_lo, utility.piece_hi,
                                 utility.piece_values, masses)
    ]
