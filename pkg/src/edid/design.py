"""Which (comparison cohort, baseline period) pairs identify each ATT(g, t)."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional

from .errors import EstimationError
from .panel import CohortIndex


class PtRegime(enum.Enum):
    PT_ALL = "pt-all"
    PT_POST = "pt-post"

    @classmethod
    def parse(cls, value) -> "PtRegime":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for member in cls:
            if member.value == key:
                return member
        raise ValueError(f"unknown parallel-trends regime {value!r}")


@dataclass(frozen=True)
class IfEntry:
    comp: int  # comparison cohort g'
    base: int  # baseline period t'
    own: bool  # g' == g


@dataclass(frozen=True)
class IfIndex:
    g: int
    t: int
    entries: tuple

    def __len__(self):
        return len(self.entries)

    def pairs(self) -> list:
        return [(e.comp, e.base) for e in self.entries]


EntryFilter = Callable[[IfEntry], bool]


def if_index(
    g: int,
    t: int,
    regime: PtRegime,
    idx: CohortIndex,
    entry_filter: Optional[EntryFilter] = None,
) -> IfIndex:
    """Stacked influence-function index for ATT(g, t).

    Under PT-All the own cohort contributes baselines ``1..g-1`` and every other
    treated cohort ``g'`` contributes ``2..g'-1`` (period 1 would duplicate the
    own-cohort entry). Under PT-Post only ``(g, g-1)`` remains.

    ``entry_filter`` drops entries not justified by an intermediate
    parallel-trends assumption; the own ``(g, g-1)`` entry is always kept.
    """
    g, t = int(g), int(t)
    if g not in idx.cohorts_treated:
        raise EstimationError("EMPTY_COHORT", f"cohort {g} is not a treated cohort in the data")
    if t < g:
        raise EstimationError("POST_TREATMENT_ONLY", f"ATT({g},{t}) requires t >= g")
    if t > idx.T:
        raise EstimationError("POST_TREATMENT_ONLY", f"period {t} beyond T={idx.T}")
    regime = PtRegime.parse(regime)
    if regime is PtRegime.PT_POST:
        return IfIndex(g, t, (IfEntry(g, g - 1, True),))
    entries = [IfEntry(g, tp, True) for tp in range(1, g)]
    for gp in idx.cohorts_treated:
        if gp != g:
            entries.extend(IfEntry(gp, tp, False) for tp in range(2, gp))
    if entry_filter is not None:
        entries = [e for e in entries if (e.own and e.base == g - 1) or entry_filter(e)]
    return IfIndex(g, t, tuple(entries))


def if_index_length(g: int, treated: tuple) -> int:
    return (g - 1) + sum(max(0, gp - 2) for gp in treated if gp != g)


def es_cohort_weights(e: int, idx: CohortIndex) -> dict:
    """Cohort-share weights ``q_{g,e}`` over cohorts observed at horizon ``e``."""
    cohorts = idx.treated_at(e)
    if not cohorts or e < 0:
        raise EstimationError("NO_COHORT_AT_HORIZON", f"no treated cohort is observed at event time {e}")
    total = sum(idx.counts[g] for g in cohorts)
    return {g: idx.counts[g] / total for g in cohorts}
