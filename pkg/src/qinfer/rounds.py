"""What the server is allowed to see of a round under secure aggregation.

Scoring, metrics and the estimator consume only these records: the
selected ids, the accuracy of the aggregated model, and its improvement.
"""

from __future__ import annotations

from dataclasses import dataclass

from qinfer.errors import DomainError


@dataclass(frozen=True)
class RoundLog:
    index: int
    selected: tuple[int, ...]
    accuracy: float
    omega: float

    def __post_init__(self):
        selected = tuple(sorted(int(n) for n in self.selected))
        if len(set(selected)) != len(selected):
            raise DomainError(f"round {self.index}: duplicate participant ids {selected}")
        if selected and selected[0] < 1:
            raise DomainError(f"round {self.index}: participant ids start at 1")
        object.__setattr__(self, "selected", selected)


def improvements(accuracies: list[float], baseline: float) -> list[float]:
    """Round-wise accuracy differences, starting from the round-0 baseline."""
    prev, out = baseline, []
    for acc in accuracies:
        out.append(acc - prev)
        prev = acc
    return out
