"""Dice similarity, aggregated Dice over a case set, and leaderboard ranking."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Mapping, Sequence

import numpy as np

from petseg.errors import DuplicatePair, EmptyList, ShapeMismatch, StructureSetMismatch
from petseg.volume import mask_array

STRUCTURES = ("GTVp", "GTVn", "TUMOR")
EMPTY_EMPTY_POLICIES = ("one", "zero", "exclude")


@dataclass(frozen=True)
class EvalPair:
    case_id: str
    truth: object
    pred: object
    structure: str = "TUMOR"


@dataclass(frozen=True)
class OverlapCounts:
    """Voxel counts ``|A ∩ B|``, ``|A|`` and ``|B|`` of one mask pair."""

    intersection: int
    truth: int
    pred: int

    def __add__(self, other: "OverlapCounts") -> "OverlapCounts":
        return OverlapCounts(
            self.intersection + other.intersection, self.truth + other.truth, self.pred + other.pred
        )


def overlap_counts(a, b) -> OverlapCounts:
    a = mask_array(a)
    b = mask_array(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    return OverlapCounts(
        intersection=int(np.count_nonzero(a & b)),
        truth=int(np.count_nonzero(a)),
        pred=int(np.count_nonzero(b)),
    )


def _empty_value(policy: str) -> float:
    if policy == "one":
        return 1.0
    if policy == "zero":
        return 0.0
    if policy == "exclude":
        return math.nan
    raise ValueError(f"empty_empty policy must be one of {EMPTY_EMPTY_POLICIES}, got {policy!r}")


def dice_from_counts(c: OverlapCounts, empty_empty: str = "one") -> float:
    denom = c.truth + c.pred
    if denom == 0:
        return _empty_value(empty_empty)
    return 2.0 * c.intersection / denom


def dsc(a, b, empty_empty: str = "one") -> float:
    """Dice coefficient ``2|A∩B| / (|A|+|B|)`` of two binary masks.

    Two empty masks score 1.0 by default; ``empty_empty="zero"`` scores them
    0.0 and ``"exclude"`` returns NaN so callers can drop the case.
    """
    return dice_from_counts(overlap_counts(a, b), empty_empty)


def dsc_agg(pairs: Sequence[EvalPair], empty_empty: str = "one") -> float:
    """Aggregated Dice: ``2 Σ|A_i∩B_i| / Σ(|A_i|+|B_i|)`` over one structure."""
    pairs = list(pairs)
    if not pairs:
        raise EmptyList("dsc_agg needs at least one pair")
    if len({p.structure for p in pairs}) > 1:
        raise StructureSetMismatch("dsc_agg pairs must share one structure")
    total = OverlapCounts(0, 0, 0)
    for p in pairs:
        total = total + overlap_counts(p.truth, p.pred)
    return dice_from_counts(total, empty_empty)


@dataclass(frozen=True)
class CaseScore:
    case_id: str
    structure: str
    dsc: float
    truth_voxels: int
    pred_voxels: int
    intersection: int


@dataclass
class EvalReport:
    per_case: list[CaseScore]
    dsc_agg_per_structure: dict[str, float]
    mean_dsc_agg: float
    n_cases: int
    # per-structure mean of per-case DSC, NaN cases skipped
    mean_dsc_per_structure: dict[str, float] = field(default_factory=dict)
    empty_empty: str = "one"

    def counts_by_structure(self) -> dict[str, OverlapCounts]:
        out: dict[str, OverlapCounts] = {}
        for c in self.per_case:
            cur = out.get(c.structure, OverlapCounts(0, 0, 0))
            out[c.structure] = cur + OverlapCounts(c.intersection, c.truth_voxels, c.pred_voxels)
        return out


def _structure_order(names: Iterable[str]) -> list[str]:
    names = set(names)
    known = [s for s in STRUCTURES if s in names]
    return known + sorted(names - set(known))


def report_from_scores(scores: Sequence[CaseScore], empty_empty: str = "one") -> EvalReport:
    """Assemble an EvalReport from per-case voxel counts."""
    seen = set()
    grouped: "OrderedDict[str, list[CaseScore]]" = OrderedDict()
    for s in scores:
        key = (s.case_id, s.structure)
        if key in seen:
            raise DuplicatePair(f"case {s.case_id!r} appears twice for {s.structure}")
        seen.add(key)
        grouped.setdefault(s.structure, []).append(s)
    if not grouped:
        raise EmptyList("no pairs to evaluate")
    agg, mean_case = {}, {}
    for structure in _structure_order(grouped):
        rows = grouped[structure]
        total = OverlapCounts(
            sum(r.intersection for r in rows), sum(r.truth_voxels for r in rows), sum(r.pred_voxels for r in rows)
        )
        agg[structure] = dice_from_counts(total, empty_empty)
        vals = [r.dsc for r in rows if not math.isnan(r.dsc)]
        mean_case[structure] = float(np.mean(vals)) if vals else math.nan
    present = [v for v in agg.values() if not math.isnan(v)]
    return EvalReport(
        per_case=list(scores),
        dsc_agg_per_structure=agg,
        mean_dsc_agg=float(np.mean(present)) if present else math.nan,
        n_cases=len({s.case_id for s in scores}),
        mean_dsc_per_structure=mean_case,
        empty_empty=empty_empty,
    )


def evaluate_set(pairs: Sequence[EvalPair], empty_empty: str = "one") -> EvalReport:
    scores = []
    for p in pairs:
        c = overlap_counts(p.truth, p.pred)
        scores.append(
            CaseScore(p.case_id, p.structure, dice_from_counts(c, empty_empty), c.truth, c.pred, c.intersection)
        )
    return report_from_scores(scores, empty_empty)


def round_half_up(x: float, places: int = 5) -> str:
    """Decimal string of ``x`` rounded half-up, using its shortest repr."""
    q = Decimal(1).scaleb(-places)
    return str(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class LeaderboardRow:
    rank: int
    name: str
    aggregates: dict[str, float]
    mean: float

    @property
    def mean_display(self) -> str:
        return round_half_up(self.mean)


def rank_leaderboard(entries: Sequence[tuple[str, Mapping[str, float]]]) -> list[LeaderboardRow]:
    """Sort entries by mean per-structure aggregate, best first.

    Ties on the unrounded mean fall back to the name.
    """
    entries = list(entries)
    if not entries:
        return []
    structures = set(entries[0][1])
    for name, agg in entries:
        if set(agg) != structures:
            raise StructureSetMismatch(f"entry {name!r} has structures {sorted(agg)}, expected {sorted(structures)}")
    order = _structure_order(structures)
    scored = [(name, dict(agg), math.fsum(agg[s] for s in order) / len(order)) for name, agg in entries]
    scored.sort(key=lambda r: (-r[2], r[0]))
    return [LeaderboardRow(i + 1, name, agg, mean) for i, (name, agg, mean) in enumerate(scored)]
