"""Wilcoxon signed-rank testing and paired bootstrap of aggregated Dice.

Per-case scores (e.g. Dice of two models on the same cases) are compared
directly with :func:`wilcoxon_signed_rank`.  A set-level metric such as
aggregated Dice has one value per test set, so :func:`bootstrap_dscagg`
first resamples the case set with replacement, giving paired score
distributions that :func:`pvalue_matrix` then feeds into the same test.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from petseg.errors import (
    AllZeroDifferences,
    BadConfig,
    CaseSetMismatch,
    DuplicatePair,
    EmptyList,
    TooFewPairs,
)
from petseg.metrics import EvalPair, _empty_value, _structure_order, dsc, overlap_counts

EXACT_MAX_N = 25
DISPLAY_ZERO_BELOW = 1e-5


@dataclass(frozen=True)
class StatConfig:
    alpha: float = 0.05
    n_bootstrap: int = 1000
    seed: int = 0
    zero_diff_policy: str = "wilcox-drop"  # or "pratt"
    mode: str = "auto"  # "exact" | "normal-approx" | "auto"
    empty_empty: str = "one"

    def validate(self):
        if not 0.0 < self.alpha < 1.0:
            raise BadConfig("alpha must lie in (0, 1)")
        if self.n_bootstrap < 100:
            raise BadConfig("n_bootstrap must be at least 100")
        if self.zero_diff_policy not in ("wilcox-drop", "pratt"):
            raise BadConfig(f"unknown zero_diff_policy {self.zero_diff_policy!r}")
        if self.mode not in ("exact", "normal-approx", "auto"):
            raise BadConfig(f"unknown mode {self.mode!r}")


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n_effective: int
    method: str


def signed_ranks(x, y, zero_diff_policy: str = "wilcox-drop") -> tuple[np.ndarray, np.ndarray]:
    """Midranks of ``|x - y|`` and the signs of the non-zero differences."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"paired samples must be 1-D and equally long, got {x.shape} and {y.shape}")
    d = x - y
    nonzero = d != 0
    if not nonzero.any():
        raise AllZeroDifferences("every paired difference is zero")
    if zero_diff_policy == "pratt":
        ranks = rankdata(np.abs(d))[nonzero]
    else:
        ranks = rankdata(np.abs(d[nonzero]))
    return ranks, np.sign(d[nonzero])


def exact_rank_sum_counts(ranks) -> tuple[np.ndarray, int]:
    """Number of sign assignments reaching each positive-rank sum.

    Ranks may be midranks, so sums are tracked on a half-integer grid: entry
    ``k`` counts assignments with ``W+ == k / 2``.  Returns the counts and
    the total ``2**n``.
    """
    doubled = np.rint(np.asarray(ranks) * 2).astype(np.int64)
    counts = np.zeros(int(doubled.sum()) + 1, dtype=object)
    counts[0] = 1
    top = 0
    for r in doubled:
        counts[r : top + r + 1] = counts[r : top + r + 1] + counts[: top + 1]
        top += r
    return counts, 2 ** len(doubled)


def _exact_p(ranks, w: float) -> float:
    counts, total = exact_rank_sum_counts(ranks)
    k = int(math.floor(w * 2 + 1e-9))
    tail = int(sum(counts[: k + 1]))
    return min(1.0, 2.0 * tail / total)


def _normal_p(ranks, w: float) -> float:
    ranks = np.asarray(ranks, dtype=np.float64)
    mean = ranks.sum() / 2.0
    # variance of W+ under random signs; reduces to the tie-corrected form
    sd = math.sqrt(float(np.sum(ranks**2)) / 4.0)
    if sd == 0:
        return 1.0
    z = max(abs(w - mean) - 0.5, 0.0) / sd
    return min(1.0, math.erfc(z / math.sqrt(2.0)))


def wilcoxon_signed_rank(x, y, cfg: StatConfig | None = None) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    The statistic is ``min(W+, W-)``.  The exact null distribution is used
    for up to 25 non-zero differences in ``auto`` mode (midrank ties
    included); otherwise a normal approximation with tie-corrected variance
    and a 0.5 continuity correction.
    """
    cfg = cfg or StatConfig()
    ranks, signs = signed_ranks(x, y, cfg.zero_diff_policy)
    n = len(ranks)
    if n < 2:
        raise TooFewPairs(f"only {n} non-zero difference(s); need at least 2")
    w_plus = float(ranks[signs > 0].sum())
    w_minus = float(ranks[signs < 0].sum())
    w = min(w_plus, w_minus)
    method = cfg.mode
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "normal-approx"
    p = _exact_p(ranks, w) if method == "exact" else _normal_p(ranks, w)
    return WilcoxonResult(statistic=w, p_value=p, n_effective=n, method=method)


def brute_force_p(ranks) -> float:
    """Fraction of all ``2**n`` sign assignments at least as extreme as observed.

    Reference enumeration for small ``n``; ``ranks`` are signed ranks.
    """
    ranks = np.asarray(ranks, dtype=np.float64)
    mags = np.abs(ranks)
    total = mags.sum()
    w_obs_plus = mags[ranks > 0].sum()
    w_obs = min(w_obs_plus, total - w_obs_plus)
    hits = 0
    for signs in itertools.product((0, 1), repeat=len(mags)):
        wp = float(np.dot(signs, mags))
        if min(wp, total - wp) <= w_obs + 1e-9:
            hits += 1
    return hits / 2 ** len(mags)


# bootstrap of the aggregated Dice


def _case_counts(pairs: Sequence[EvalPair]) -> tuple[list[str], list[str], np.ndarray]:
    """Overlap counts as an array ``(n_cases, n_structures, 3)``."""
    table: dict[tuple[str, str], tuple[int, int, int]] = {}
    for p in pairs:
        if (p.case_id, p.structure) in table:
            raise DuplicatePair(f"case {p.case_id!r} appears twice for {p.structure}")
        c = overlap_counts(p.truth, p.pred)
        table[(p.case_id, p.structure)] = (c.intersection, c.truth, c.pred)
    cases = sorted({k[0] for k in table})
    structures = _structure_order(k[1] for k in table)
    arr = np.zeros((len(cases), len(structures), 3), dtype=np.int64)
    for i, case in enumerate(cases):
        for j, s in enumerate(structures):
            if (case, s) not in table:
                raise CaseSetMismatch(f"case {case!r} lacks structure {s}")
            arr[i, j] = table[(case, s)]
    return cases, structures, arr


def bootstrap_draws(n_cases: int, cfg: StatConfig) -> np.ndarray:
    """Case indices for every bootstrap iteration, shape ``(n_bootstrap, n_cases)``.

    Row ``b`` comes from its own stream seeded by ``(cfg.seed, b)``.
    """
    rows = [
        np.random.default_rng(np.random.SeedSequence([cfg.seed & (2**64 - 1), b])).integers(0, n_cases, n_cases)
        for b in range(cfg.n_bootstrap)
    ]
    return np.asarray(rows, dtype=np.intp).reshape(cfg.n_bootstrap, n_cases)


def _agg_from_summed(summed: np.ndarray, empty_empty: str) -> np.ndarray:
    """Mean over structures of the pooled Dice, from summed ``(…, S, 3)`` counts."""
    inter, truth, pred = summed[..., 0], summed[..., 1], summed[..., 2]
    denom = truth + pred
    with np.errstate(invalid="ignore", divide="ignore"):
        dice = np.where(denom > 0, 2.0 * inter / np.where(denom > 0, denom, 1), _empty_value(empty_empty))
    return dice.mean(axis=-1)


def bootstrap_dscagg(
    pairs_a: Sequence[EvalPair], pairs_b: Sequence[EvalPair], cfg: StatConfig | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Paired bootstrap distributions of aggregated Dice for two models.

    Every iteration draws one multiset of case ids with replacement and
    scores both models on it.  With several structures the score is the
    mean of the per-structure aggregates.
    """
    cfg = cfg or StatConfig()
    cases_a, struct_a, counts_a = _case_counts(pairs_a)
    cases_b, struct_b, counts_b = _case_counts(pairs_b)
    if cases_a != cases_b or struct_a != struct_b:
        raise CaseSetMismatch("both models must cover the same cases and structures")
    if not cases_a:
        raise EmptyList("no cases to resample")
    draws = bootstrap_draws(len(cases_a), cfg)
    dist_a = _agg_from_summed(counts_a[draws].sum(axis=1), cfg.empty_empty)
    dist_b = _agg_from_summed(counts_b[draws].sum(axis=1), cfg.empty_empty)
    return dist_a, dist_b


# p-value tables


@dataclass(frozen=True)
class PairResult:
    model_a: str
    model_b: str
    p_value: float  # NaN when the comparison is degenerate
    n_effective: int
    method: str
    statistic: float = math.nan


DEGENERATE = "degenerate:all-zero-differences"


@dataclass
class StatReport:
    models: list[str]
    pairs: list[PairResult]
    config: StatConfig = field(default_factory=StatConfig)
    kind: str = "bootstrap"

    def lookup(self, a: str, b: str) -> PairResult:
        for r in self.pairs:
            if {r.model_a, r.model_b} == {a, b}:
                return r
        raise KeyError((a, b))

    def matrix(self) -> np.ndarray:
        n = len(self.models)
        out = np.full((n, n), np.nan)
        idx = {m: i for i, m in enumerate(self.models)}
        for r in self.pairs:
            i, j = idx[r.model_a], idx[r.model_b]
            out[i, j] = out[j, i] = r.p_value
        return out


def format_p(p: float) -> str:
    if math.isnan(p):
        return "n/a"
    if p < DISPLAY_ZERO_BELOW:
        return "~0"
    return f"{p:.5f}"


def render_matrix(report: StatReport) -> str:
    """Symmetric text matrix with ``-`` on the diagonal and ``~0`` for tiny p."""
    names = report.models
    width = max(8, *(len(n) for n in names)) + 2
    lines = ["".ljust(width) + "".join(n.rjust(width) for n in names)]
    mat = report.matrix()
    for i, a in enumerate(names):
        cells = ["-" if i == j else format_p(mat[i, j]) for j in range(len(names))]
        lines.append(a.ljust(width) + "".join(c.rjust(width) for c in cells))
    return "\n".join(lines)


def _compare(a: str, b: str, xa, xb, cfg: StatConfig) -> PairResult:
    try:
        res = wilcoxon_signed_rank(xa, xb, cfg)
    except AllZeroDifferences:
        return PairResult(a, b, math.nan, 0, DEGENERATE)
    return PairResult(a, b, res.p_value, res.n_effective, res.method, res.statistic)


def pvalue_matrix(models: Mapping[str, Sequence[EvalPair]], cfg: StatConfig | None = None) -> StatReport:
    """Bootstrap every model pair and test the paired DSC_agg distributions.

    ``models`` maps a model name to its (truth, prediction) pairs.  Two
    models with identical predictions yield a degenerate entry whose p-value
    is NaN, not 1.
    """
    cfg = cfg or StatConfig()
    cfg.validate()
    names = list(models)
    if len(names) < 2:
        raise ValueError("need at least two models")
    results = []
    for a, b in itertools.combinations(names, 2):
        dist_a, dist_b = bootstrap_dscagg(models[a], models[b], cfg)
        results.append(_compare(a, b, dist_a, dist_b, cfg))
    return StatReport(models=names, pairs=results, config=cfg, kind="bootstrap")


def per_case_scores(pairs: Sequence[EvalPair], empty_empty: str = "one") -> dict[tuple[str, str], float]:
    return {(p.case_id, p.structure): dsc(p.truth, p.pred, empty_empty) for p in pairs}


def per_case_pvalues(models: Mapping[str, Mapping[tuple[str, str], float]], cfg: StatConfig | None = None) -> StatReport:
    """Wilcoxon on per-case scores, paired by ``(case_id, structure)``.

    Keys whose score is NaN in either model (excluded empty cases) are dropped.
    """
    cfg = cfg or StatConfig()
    names = list(models)
    if len(names) < 2:
        raise ValueError("need at least two models")
    results = []
    for a, b in itertools.combinations(names, 2):
        sa, sb = models[a], models[b]
        if set(sa) != set(sb):
            raise CaseSetMismatch(f"models {a!r} and {b!r} score different cases")
        keys = sorted(k for k in sa if not (math.isnan(sa[k]) or math.isnan(sb[k])))
        results.append(_compare(a, b, [sa[k] for k in keys], [sb[k] for k in keys], cfg))
    return StatReport(models=names, pairs=results, config=cfg, kind="per-case")
