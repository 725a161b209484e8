"""Pure-DP composition accounting with budget enforcement.

Losses compose linearly (every mechanism here is pure epsilon-DP), so the
ledger is a compensated running sum over an append-only event list. delta
is carried as reported metadata only; no mechanism consumes it.
"""

from __future__ import annotations

import json
import math
import threading
import time
from array import array
from dataclasses import dataclass
from pathlib import Path

from .errors import BudgetExhausted, NoMatchingCharge
from .numerics import NeumaierSum

REFUND_TOL = 1e-9


@dataclass
class Report:
    epsilon_spent: float
    delta: float
    events: tuple[tuple[str, float], ...]

    def to_dict(self) -> dict:
        return {
            "epsilon_spent": self.epsilon_spent,
            "delta": self.delta,
            "events": [{"label": l, "epsilon": e} for l, e in self.events],
        }


class Accountant:
    """Budget ledger; spend/refund are serialized check-and-commit.

    Pre-charge/refund protocol: callers charge the worst case up front and
    refund what a finished (or crashed) generation did not use, so the
    ledger can only ever err on the over-charged side.
    """

    def __init__(self, budget: float = math.inf, delta_report: float = 0.0,
                 ledger_path: str | Path | None = None):
        if budget <= 0:
            raise ValueError("budget must be positive")
        self.budget = float(budget)
        self.delta_report = float(delta_report)
        self._labels: list[str] = []
        self._amounts = array("d")
        self._spent = NeumaierSum()
        self._lock = threading.Lock()
        self._ledger_path = Path(ledger_path) if ledger_path else None

    def spent(self) -> float:
        return self._spent.value

    def remaining(self) -> float:
        return self.budget - self.spent()

    def _append_ledger(self, label: str, epsilon: float) -> None:
        if self._ledger_path is None:
            return
        record = {"ts": time.time(), "label": label, "epsilon": epsilon}
        with open(self._ledger_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")

    def spend(self, label: str, epsilon: float) -> None:
        """Append an event iff it fits the budget; reject atomically otherwise."""
        if epsilon <= 0:
            raise ValueError("spend requires epsilon > 0")
        with self._lock:
            new_total = self.spent() + epsilon
            if new_total > self.budget:
                raise BudgetExhausted(shortfall=new_total - self.budget)
            self._labels.append(label)
            self._amounts.append(epsilon)
            self._spent.add(epsilon)
            self._append_ledger(label, epsilon)

    def refund(self, label: str, epsilon: float) -> None:
        """Return pre-charged budget, reducing the latest matching events.

        A refund may span several events with the same label. Refunding
        more than the label's remaining charge raises NoMatchingCharge and
        leaves the state unchanged; a zero refund is the identity.
        """
        if epsilon < 0:
            raise ValueError("refund requires epsilon >= 0")
        if epsilon == 0:
            return
        with self._lock:
            available = sum(a for l, a in zip(self._labels, self._amounts) if l == label)
            if epsilon > available + REFUND_TOL:
                raise NoMatchingCharge(
                    f"refund of {epsilon:.6g} exceeds remaining {available:.6g} "
                    f"charged under {label!r}"
                )
            remaining = epsilon
            for i in range(len(self._amounts) - 1, -1, -1):
                if remaining <= 0:
                    break
                if self._labels[i] != label or self._amounts[i] == 0.0:
                    continue
                take = min(self._amounts[i], remaining)
                self._amounts[i] -= take
                remaining -= take
            self._spent.add(-epsilon)
            # refunds keep the file append-only: negative epsilon records
            self._append_ledger(label, -epsilon)
            # drop fully refunded events so stored events keep epsilon > 0
            if any(a == 0.0 for a in self._amounts):
                kept = [(l, a) for l, a in zip(self._labels, self._amounts) if a != 0.0]
                self._labels = [l for l, _ in kept]
                self._amounts = array("d", (a for _, a in kept))

    def report(self) -> Report:
        with self._lock:
            return Report(
                epsilon_spent=self.spent(),
                delta=self.delta_report,
                events=tuple(zip(self._labels, self._amounts)),
            )


def load_ledger(path: str | Path, budget: float = math.inf,
                delta_report: float = 0.0) -> Accountant:
    """Rebuild an accountant by replaying a persisted NDJSON ledger."""
    acct = Accountant(budget=budget, delta_report=delta_report)
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            eps = float(record["epsilon"])
            if eps >= 0:
                acct.spend(record["label"], eps)
            else:
                acct.refund(record["label"], -eps)
    return acct
