"""Fixed aggregation rules over the raw per-iteration PDS union sets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_TAUS = (0.5, 0.75)


@dataclass
class UnionHistory:
    p: int
    sets: list[frozenset] = field(default_factory=list)

    def append(self, s) -> None:
        s = frozenset(int(j) for j in s)
        if any(j < 0 or j >= self.p for j in s):
            raise ValueError(f"index outside 0..{self.p - 1}")
        self.sets.append(s)

    def __len__(self) -> int:
        return len(self.sets)

    def counts(self, budget: int) -> np.ndarray:
        c = np.zeros(self.p, dtype=np.int64)
        for s in self.sets[:budget]:
            c[list(s)] += 1
        return c


def _check_budget(history: UnionHistory, budget: int) -> None:
    if not 1 <= budget <= len(history):
        raise ValueError(f"budget must lie in 1..{len(history)}, got {budget}")


def union_rule(history: UnionHistory, budget: int) -> frozenset:
    _check_budget(history, budget)
    return frozenset().union(*history.sets[:budget])


def frequency_threshold(history: UnionHistory, tau: float, budget: int) -> frozenset:
    """Variables whose share of appearances in the first ``budget`` sets is at least ``tau``."""
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    _check_budget(history, budget)
    counts = history.counts(budget)
    # integer comparison avoids float ties at the boundary
    need = np.ceil(tau * budget - 1e-9)
    return frozenset(int(j) for j in np.flatnonzero(counts >= need))


def fixed_budget_sets(history: UnionHistory, budget: int, taus=DEFAULT_TAUS) -> dict[str, frozenset]:
    out = {"union": union_rule(history, budget)}
    for tau in taus:
        out[f"freq{round(tau * 100)}"] = frequency_threshold(history, tau, budget)
    return out


def matched_budget_sets(history: UnionHistory, stop_iteration: int, taus=DEFAULT_TAUS) -> dict[str, frozenset]:
    """Benchmark sets using only the first ``stop_iteration`` sets of the shared stream."""
    return fixed_budget_sets(history, stop_iteration, taus)
