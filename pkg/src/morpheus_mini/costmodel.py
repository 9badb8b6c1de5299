"""Deterministic per-instruction cost accounting.

Every executed instruction charges a fixed amount into one of the
breakdown categories below.  The numbers are the model, not a guess at
wall-clock time; both executors must agree on them bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

CAT_INSTR = "instr"
CAT_BRANCH = "branch"
CAT_GUARD = "guard"
CAT_LOOKUP = "lookup"
CAT_UPDATE = "update"
CAT_INSTRUMENTATION = "instrumentation"

CATEGORIES = (CAT_INSTR, CAT_BRANCH, CAT_GUARD, CAT_LOOKUP, CAT_UPDATE,
              CAT_INSTRUMENTATION)

BASE_INSTR = 1
BRANCH = 1
GUARD = 1
EXACT_LOOKUP = 10
LPM_BASE = 5
LPM_PER_LENGTH = 3
WILDCARD_PER_EXAMINED = 4
TABLE_UPDATE = 12
RECORD_SAMPLED = 2
RECORD_SKIPPED = 1
INLINED_CMP = 2  # charged once per fused compare-and-branch group


def lpm_cost(distinct_lengths: int) -> int:
    return LPM_BASE + LPM_PER_LENGTH * distinct_lengths


def wildcard_cost(examined: int) -> int:
    return WILDCARD_PER_EXAMINED * examined


@dataclass
class CostBreakdown:
    by_category: Dict[str, int] = field(default_factory=dict)

    def charge(self, category: str, amount: int) -> None:
        if amount:
            self.by_category[category] = self.by_category.get(category, 0) + amount

    def merge(self, other: "CostBreakdown") -> None:
        for k, v in other.by_category.items():
            self.by_category[k] = self.by_category.get(k, 0) + v

    @property
    def total(self) -> int:
        return sum(self.by_category.values())

    def get(self, category: str) -> int:
        return self.by_category.get(category, 0)

    def as_row(self) -> Dict[str, int]:
        return {c: self.by_category.get(c, 0) for c in CATEGORIES}
