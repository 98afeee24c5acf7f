"""Exact accounting of velocity and score function evaluations (NFE)."""

from __future__ import annotations

from dataclasses import dataclass, field

PHASES = ("advance", "rollout", "final")


@dataclass
class BudgetLedger:
    """Counts of velocity/score evaluations partitioned by phase.

    Counters are monotone nondecreasing.  Ledgers merge associatively, so
    per-worker ledgers can be combined after parallel evaluation.
    """

    velocity: dict = field(default_factory=lambda: {p: 0 for p in PHASES})
    score: dict = field(default_factory=lambda: {p: 0 for p in PHASES})

    def charge_velocity(self, phase: str, n: int = 1) -> None:
        self._charge(self.velocity, phase, n)

    def charge_score(self, phase: str, n: int = 1) -> None:
        self._charge(self.score, phase, n)

    @staticmethod
    def _charge(table: dict, phase: str, n: int) -> None:
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}, expected one of {PHASES}")
        if n < 0:
            raise ValueError("charge must be nonnegative")
        table[phase] += n

    @property
    def velocity_total(self) -> int:
        return sum(self.velocity.values())

    @property
    def score_total(self) -> int:
        return sum(self.score.values())

    def merge(self, other: "BudgetLedger") -> "BudgetLedger":
        out = BudgetLedger()
        for p in PHASES:
            out.velocity[p] = self.velocity[p] + other.velocity[p]
            out.score[p] = self.score[p] + other.score[p]
        return out

    __add__ = merge

    def as_dict(self) -> dict:
        return {
            "velocity": dict(self.velocity),
            "score": dict(self.score),
            "velocity_total": self.velocity_total,
            "score_total": self.score_total,
        }
