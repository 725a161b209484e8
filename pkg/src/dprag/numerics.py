"""Log-domain helpers and compensated summation.

Both exponential-mechanism samplers work on log masses that can span
hundreds of orders of magnitude (epsilon up to 1e6 in the limit tests),
so everything is normalized with the usual max-shift trick.
"""

from __future__ import annotations

import numpy as np


def logsumexp(a: np.ndarray) -> float:
    """Stable log(sum(exp(a))). -inf entries contribute zero mass."""
    a = np.asarray(a, dtype=float)
    m = np.max(a)
    if not np.isfinite(m):
        # all -inf (no mass) stays -inf; +inf propagates
        return float(m)
    return float(m + np.log(np.sum(np.exp(a - m))))


def log_softmax(a: np.ndarray) -> np.ndarray:
    """Normalized log probabilities; -inf entries map to -inf (zero mass)."""
    a = np.asarray(a, dtype=float)
    return a - logsumexp(a)


def softmax(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    m = np.max(a)
    if not np.isfinite(m):
        raise ValueError("softmax of a mass-free vector")
    p = np.exp(a - m)
    return p / p.sum()


class NeumaierSum:
    """Compensated running sum.

    Keeps the accumulated error of a million small additions below 1e-12,
    which the budget ledger requires. Supports subtraction via add(-x).
    """

    __slots__ = ("_sum", "_comp")

    def __init__(self, value: float = 0.0):
        self._sum = float(value)
        self._comp = 0.0

    def add(self, x: float) -> None:
        t = self._sum + x
        if abs(self._sum) >= abs(x):
            self._comp += (self._sum - t) + x
        else:
            self._comp += (x - t) + self._sum
        self._sum = t

    @property
    def value(self) -> float:
        return self._sum + self._comp
