import math

import numpy as np
import pytest
from scipy import stats as sps

from oracles import dice_from, enumerate_two_sided_p, triple_loop_counts
from petseg.errors import AllZeroDifferences, BadConfig, CaseSetMismatch, DuplicatePair, TooFewPairs
from petseg.metrics import EvalPair
from petseg.stats import (
    DEGENERATE,
    StatConfig,
    bootstrap_draws,
    bootstrap_dscagg,
    brute_force_p,
    exact_rank_sum_counts,
    format_p,
    per_case_pvalues,
    per_case_scores,
    pvalue_matrix,
    render_matrix,
    wilcoxon_signed_rank,
)


def test_all_positive_five():
    res = wilcoxon_signed_rank([1, 2, 3, 4, 5], [0, 0, 0, 0, 0])
    assert res.p_value == 0.0625
    assert res.statistic == 0.0 and res.n_effective == 5 and res.method == "exact"


def test_ten_constant_shifts():
    x = np.linspace(0.5, 0.7, 10)
    res = wilcoxon_signed_rank(x + 0.2, x)
    assert res.p_value == 0.001953125


def test_identical_raises():
    with pytest.raises(AllZeroDifferences):
        wilcoxon_signed_rank([1, 2, 3], [1, 2, 3])
    with pytest.raises(TooFewPairs):
        wilcoxon_signed_rank([1, 2, 3], [1, 2, 2])


def test_antisymmetric(rng):
    x, y = rng.normal(size=12), rng.normal(size=12)
    assert wilcoxon_signed_rank(x, y).p_value == wilcoxon_signed_rank(y, x).p_value


@pytest.mark.parametrize("n", [5, 8, 11])
def test_exact_against_enumeration_with_ties(n, rng):
    d = rng.integers(-4, 5, n).astype(float)
    d[d == 0] = 1.0
    res = wilcoxon_signed_rank(d, np.zeros(n))
    assert res.p_value == pytest.approx(enumerate_two_sided_p(d), rel=1e-15, abs=0)


def test_library_enumerator_agrees(rng):
    d = rng.normal(size=9)
    ranks = sps.rankdata(np.abs(d)) * np.sign(d)
    assert brute_force_p(ranks) == pytest.approx(enumerate_two_sided_p(d), rel=1e-15)


def test_rank_sum_counts_total():
    counts, total = exact_rank_sum_counts([1, 2, 3])
    # doubled-sum grid: sums 0,1,2,3,3,4,5,6 -> at 0,2,4,6,6,8,10,12
    assert total == 8 and int(counts.sum()) == 8
    assert counts[6] == 2 and counts[12] == 1


def test_against_scipy_exact(rng):
    for _ in range(10):
        x, y = rng.normal(size=15), rng.normal(size=15)
        ours = wilcoxon_signed_rank(x, y).p_value
        ref = sps.wilcoxon(x, y, method="exact").pvalue
        assert ours == pytest.approx(ref, rel=1e-12)


def test_normal_mode_against_scipy(rng):
    x, y = rng.normal(size=60), rng.normal(size=60) + 0.2
    res = wilcoxon_signed_rank(x, y)
    assert res.method == "normal-approx"
    ref = sps.wilcoxon(x, y, method="approx", correction=True).pvalue
    assert res.p_value == pytest.approx(ref, rel=1e-10)


def test_zero_policies(rng):
    x = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0])
    y = np.array([1.0, 1.0, 4.0, 1.0, 1.0, 1.0, 1.0])
    drop = wilcoxon_signed_rank(x, y)
    assert drop.n_effective == 6
    pratt = wilcoxon_signed_rank(x, y, StatConfig(zero_diff_policy="pratt"))
    assert pratt.n_effective == 6
    # |d| = 0, 1, 1, 3, ...; Pratt ranks the zero, shifting the tied pair to 2.5
    assert drop.statistic == 1.5 and pratt.statistic == 2.5
    ref = sps.wilcoxon(x, y, zero_method="pratt", method="approx", correction=True)
    approx = wilcoxon_signed_rank(x, y, StatConfig(zero_diff_policy="pratt", mode="normal-approx"))
    assert approx.statistic == ref.statistic


def test_config_validation():
    for bad in (StatConfig(alpha=0), StatConfig(n_bootstrap=10), StatConfig(mode="fast"), StatConfig(zero_diff_policy="x")):
        with pytest.raises(BadConfig):
            bad.validate()


def test_format_p():
    assert format_p(3e-6) == "~0"
    assert format_p(1e-5) == "0.00001"
    assert format_p(0.0625) == "0.06250"
    assert format_p(math.nan) == "n/a"


# bootstrap


def toy_models(rng, n_cases=3, shape=(5, 5, 5)):
    a, b = [], []
    for i in range(n_cases):
        for s in ("GTVp", "GTVn"):
            t = rng.random(shape) < 0.3
            a.append(EvalPair(f"c{i}", t, rng.random(shape) < 0.3, s))
            b.append(EvalPair(f"c{i}", t, t & (rng.random(shape) < 0.8), s))
    return a, b


def recompute(pairs, drawn_cases):
    by_key = {(p.case_id, p.structure): p for p in pairs}
    scores = []
    for s in ("GTVp", "GTVn"):
        tot = [0, 0, 0]
        for case in drawn_cases:
            c = triple_loop_counts(by_key[(case, s)].truth, by_key[(case, s)].pred)
            tot = [u + v for u, v in zip(tot, c)]
        scores.append(dice_from(*tot))
    return sum(scores) / len(scores)


def test_bootstrap_matches_recomputation(rng):
    a, b = toy_models(rng)
    cfg = StatConfig(n_bootstrap=10, seed=4)
    da, db = bootstrap_dscagg(a, b, cfg)
    draws = bootstrap_draws(3, cfg)
    cases = ["c0", "c1", "c2"]
    for i in range(10):
        drawn = [cases[k] for k in draws[i]]
        assert da[i] == recompute(a, drawn)
        assert db[i] == recompute(b, drawn)


def test_bootstrap_identical_models(rng):
    a, _ = toy_models(rng)
    da, db = bootstrap_dscagg(a, a, StatConfig(n_bootstrap=50))
    np.testing.assert_array_equal(da, db)


def test_bootstrap_single_case(rng):
    a, b = toy_models(rng, n_cases=1)
    da, db = bootstrap_dscagg(a, b, StatConfig(n_bootstrap=20))
    assert len(set(da)) == 1 and len(set(db)) == 1


def test_bootstrap_draws_seeded():
    cfg = StatConfig(n_bootstrap=100, seed=9)
    d = bootstrap_draws(7, cfg)
    assert d.shape == (100, 7) and d.min() >= 0 and d.max() < 7
    np.testing.assert_array_equal(d, bootstrap_draws(7, cfg))
    assert not np.array_equal(d, bootstrap_draws(7, StatConfig(n_bootstrap=100, seed=10)))
    # a row does not depend on how many rows were requested
    np.testing.assert_array_equal(d[:10], bootstrap_draws(7, StatConfig(n_bootstrap=10, seed=9)))


def test_bootstrap_case_mismatch(rng):
    a, b = toy_models(rng)
    with pytest.raises(CaseSetMismatch):
        bootstrap_dscagg(a, b[:-2])
    with pytest.raises(CaseSetMismatch):
        bootstrap_dscagg(a, b[:-1])
    with pytest.raises(DuplicatePair):
        bootstrap_dscagg(a + a[:1], b)


def test_matrix_three_models(rng):
    a, b = toy_models(rng, n_cases=6)
    _, c = toy_models(rng, n_cases=6)
    rep = pvalue_matrix({"A": a, "B": b, "C": c}, StatConfig(n_bootstrap=200))
    assert len(rep.pairs) == 3
    m = rep.matrix()
    np.testing.assert_array_equal(m, m.T)
    assert np.all(np.isnan(np.diag(m)))
    text = render_matrix(rep)
    assert text.splitlines()[1].split()[1] == "-"


def test_matrix_identical_models_degenerate(rng):
    a, _ = toy_models(rng)
    rep = pvalue_matrix({"A": a, "A2": a}, StatConfig(n_bootstrap=100))
    r = rep.lookup("A", "A2")
    assert r.method == DEGENERATE and math.isnan(r.p_value)
    assert "n/a" in render_matrix(rep)


def test_matrix_large_shift_displays_zero():
    rng = np.random.default_rng(1)
    shape = (6, 6, 6)
    good, bad = [], []
    for i in range(8):
        t = rng.random(shape) < 0.4
        good.append(EvalPair(f"c{i}", t, t))
        bad.append(EvalPair(f"c{i}", t, np.zeros(shape, bool)))
    rep = pvalue_matrix({"good": good, "bad": bad}, StatConfig(n_bootstrap=1000))
    assert rep.lookup("good", "bad").p_value < 1e-5
    assert "~0" in render_matrix(rep)


def test_per_case_pvalues():
    rng = np.random.default_rng(3)
    shape = (5, 5, 5)
    truth = [rng.random(shape) < 0.4 for _ in range(10)]
    a = [EvalPair(f"c{i}", t, t) for i, t in enumerate(truth)]
    b = [EvalPair(f"c{i}", t, t & (rng.random(shape) < 0.7)) for i, t in enumerate(truth)]
    rep = per_case_pvalues({"a": per_case_scores(a), "b": per_case_scores(b)})
    assert rep.kind == "per-case"
    assert rep.lookup("a", "b").p_value == 0.001953125
    with pytest.raises(CaseSetMismatch):
        per_case_pvalues({"a": per_case_scores(a), "b": per_case_scores(b[:-1])})


def test_per_case_drops_excluded(rng):
    sa = {("c0", "TUMOR"): math.nan, **{(f"c{i}", "TUMOR"): 0.9 for i in range(1, 7)}}
    sb = {("c0", "TUMOR"): math.nan, **{(f"c{i}", "TUMOR"): 0.5 + i / 100 for i in range(1, 7)}}
    r = per_case_pvalues({"a": sa, "b": sb}).lookup("a", "b")
    assert r.n_effective == 6 and r.p_value == 2 / 64
