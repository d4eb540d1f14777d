import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from dualpilot.errors import (
    BadDistribution,
    BadWeights,
    DegenerateAgreement,
    DegenerateInput,
    EmptyReference,
    EmptyTE,
    LengthMismatch,
)
from dualpilot.evalkit import (
    DimensionScores,
    IsotonicMap,
    aggregate,
    apply_map,
    bca_interval,
    bootstrap_replicates,
    chi_square_gof,
    cohens_kappa,
    correlations,
    fleiss_kappa,
    jackknife,
    js_divergence,
    kendall,
    mean_pairwise_kappa,
    model_dimension_table,
    pareto_frontier,
    pava_fit,
    pearson,
    permutation_p,
    rouge_l,
    spearman,
    te_metrics,
    weight_sensitivity,
)
from dualpilot.synth import REFERENCE_PROFILES, calibration_dataset, synthetic_judge_scores
from oracles import (
    bca_enumerated,
    brute_pareto,
    exhaustive_permutation_p,
    grid_monotone_min_sse,
    js_by_hand,
    kappa_by_hand,
    rouge_oracle,
)

# -- aggregation -----------------------------------------------------------------


def test_aggregate_equal_sevens():
    assert aggregate(DimensionScores(7, 7, 7, 7, 7)) == pytest.approx(7.0)


def test_aggregate_reference_row():
    assert aggregate(DimensionScores(7.50, 6.57, 7.76, 7.33, 6.36)) == pytest.approx(7.104, abs=1e-12)


def test_aggregate_factual_only():
    assert aggregate(DimensionScores(3, 7, 7, 7, 7), (1, 0, 0, 0, 0)) == 3.0


@pytest.mark.parametrize("w", [(0.5, 0.5, 0.5, 0, 0), (-0.2, 0.3, 0.3, 0.3, 0.3), (1, 0, 0, 0)])
def test_bad_weights(w):
    with pytest.raises(BadWeights):
        aggregate(DimensionScores(7, 7, 7, 7, 7), w)


def test_dimension_range():
    with pytest.raises(ValueError):
        DimensionScores(0.5, 7, 7, 7, 7)


# -- isotonic --------------------------------------------------------------------

def test_pava_monotone_input_unchanged():
    m = pava_fit([1, 2, 3, 4], [1.0, 2.0, 2.0, 5.0])
    assert m.fitted == [1.0, 2.0, 2.0, 5.0]


def test_pava_small_example():
    assert pava_fit([1, 2, 3], [1, 3, 2]).fitted == pytest.approx([1, 2.5, 2.5])


def test_pava_ties_averaged():
    m = pava_fit([1, 1, 2], [4.0, 2.0, 5.0])
    assert m.breakpoints == [1.0, 2.0] and m.fitted == [3.0, 5.0]


def test_pava_length_checks():
    with pytest.raises(LengthMismatch):
        pava_fit([1, 2], [1])
    with pytest.raises(LengthMismatch):
        pava_fit([1], [1])


def sse(m, x, y):
    return float(((apply_map(m, np.asarray(x, float)) - np.asarray(y)) ** 2).sum())


@given(st.lists(st.tuples(st.integers(0, 5), st.floats(1, 10)), min_size=2, max_size=6))
@settings(max_examples=200, deadline=None)
def test_pava_beats_grid_oracle(pairs):
    x = [p[0] for p in pairs]
    y = [p[1] for p in pairs]
    if len(set(x)) < 1:
        return
    m = pava_fit(x, y)
    assert all(b >= a for a, b in zip(m.fitted, m.fitted[1:]))
    assert sse(m, x, y) <= grid_monotone_min_sse(x, y) + 1e-9


@given(st.lists(st.floats(1, 10), min_size=2, max_size=40))
@settings(max_examples=100, deadline=None)
def test_pava_matches_sklearn(y):
    from sklearn.isotonic import IsotonicRegression

    x = np.arange(len(y), dtype=float)
    ours = pava_fit(x, y).fitted
    ref = IsotonicRegression().fit_transform(x, y)
    assert ours == pytest.approx(ref, abs=1e-9)


def test_apply_map_clamp_and_interpolation():
    m = IsotonicMap([1.0, 3.0], [2.0, 4.0])
    assert apply_map(m, 0.0) == 2.0
    assert apply_map(m, 3.0) == 4.0
    assert apply_map(m, 2.0) == pytest.approx(3.0)
    assert apply_map(m, 99.0) == 4.0
    assert m.to_json() == IsotonicMap.from_json(m.to_json()).to_json()


def test_isotonic_map_rejects_decrease():
    with pytest.raises(ValueError):
        IsotonicMap([1, 2], [3, 2])


@given(st.lists(st.tuples(st.floats(1, 10), st.floats(1, 10)), min_size=2, max_size=30),
       st.lists(st.floats(0, 11), min_size=2, max_size=20))
@settings(max_examples=60, deadline=None)
def test_apply_map_monotone(pairs, probes):
    m = pava_fit([p[0] for p in pairs], [p[1] for p in pairs])
    xs = np.sort(probes)
    out = apply_map(m, xs)
    assert np.all(np.diff(out) >= -1e-12)


def test_calibration_is_rank_preserving_on_increasing_segments():
    auto, human = calibration_dataset(200, seed=3)
    m = pava_fit(auto, human)
    cal = apply_map(m, auto)
    order = np.argsort(auto)
    # restricted to points mapped to distinct levels, the order is unchanged
    _, first = np.unique(np.round(cal[order], 12), return_index=True)
    idx = order[first]
    assert kendall(auto[idx], cal[idx]) == pytest.approx(1.0)


def test_calibration_gain_on_synthetic_link():
    auto, human = calibration_dataset(400, seed=0)
    half = len(auto) // 2
    m = pava_fit(auto[:half], human[:half])
    raw = pearson(auto[half:], human[half:])
    cal = pearson(apply_map(m, auto[half:]), human[half:])
    assert cal - raw >= 0.03


# -- correlations ---------------------------------------------------------------

@pytest.mark.parametrize("sign", [1, -1])
def test_perfect_correlations(sign):
    x = np.array([1.0, 2.0, 4.0, 7.0, 11.0, 12.0])
    rep = correlations(x, sign * x, n_perm=200, n_boot=200)
    assert rep.pearson_r == pytest.approx(sign)
    assert rep.spearman_rho == pytest.approx(sign)
    assert rep.kendall_tau == pytest.approx(sign)


def test_closed_form_against_scipy():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=30), rng.normal(size=30)
    assert pearson(x, y) == pytest.approx(stats.pearsonr(x, y).statistic, abs=1e-12)
    assert spearman(x, y) == pytest.approx(stats.spearmanr(x, y).statistic, abs=1e-12)
    assert kendall(x, y) == pytest.approx(stats.kendalltau(x, y).statistic, abs=1e-12)


def test_pearson_small_closed_form():
    # x = (1,2,3), y = (1,3,2): cov 0.5, var 1 and 1 -> r = 0.5
    assert pearson(np.array([1., 2., 3.]), np.array([1., 3., 2.])) == pytest.approx(0.5, abs=1e-15)


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=20), st.floats(0.1, 10), st.floats(-50, 50))
def test_pearson_affine_invariant(vals, a, b):
    x = np.array(vals)
    y = np.sin(x) + 0.1 * x
    if np.ptp(x) < 1e-3 or np.ptp(y) < 1e-3:
        return
    assert pearson(a * x + b, y) == pytest.approx(pearson(x, y), abs=1e-12)


N5_X = np.array([1.0, 2.0, 3.5, 4.0, 6.0])
N5_Y = np.array([2.1, 1.9, 3.8, 3.2, 5.5])


@pytest.mark.parametrize("fn", [spearman, kendall, pearson])
def test_permutation_p_exhaustive(fn):
    assert permutation_p(N5_X, N5_Y, fn) == pytest.approx(exhaustive_permutation_p(N5_X, N5_Y, fn), abs=1e-15)


def test_bca_full_enumeration():
    reps = bootstrap_replicates(N5_X, N5_Y, pearson, n_boot=10_000)
    assert len(reps) <= 5 ** 5
    ci = bca_interval(pearson(N5_X, N5_Y), reps, jackknife(N5_X, N5_Y, pearson))
    assert ci == pytest.approx(bca_enumerated(N5_X, N5_Y), abs=1e-12)


def test_bca_percentile_fallback():
    ci = bca_interval(0.0, np.array([0.1, 0.2, 0.3]), np.array([0.1, 0.2]))
    assert ci == pytest.approx(tuple(np.quantile([0.1, 0.2, 0.3], [0.025, 0.975])))


def test_report_interval_contains_point():
    rng = np.random.default_rng(1)
    x = rng.normal(size=40)
    rep = correlations(x, x + rng.normal(size=40), n_perm=500, n_boot=2000)
    assert rep.ci95[0] <= rep.pearson_r <= rep.ci95[1]
    assert 0.0 <= rep.p_two_sided <= 1.0


def test_constant_vector_degenerate():
    with pytest.raises(DegenerateInput):
        correlations([1, 1, 1, 1], [1, 2, 3, 4])


# -- agreement ------------------------------------------------------------------

def test_kappa_identical():
    assert cohens_kappa([1, 2, 3, 1], [1, 2, 3, 1]) == 1.0


def test_kappa_worked_example():
    assert cohens_kappa([1, 1, 2, 2], [1, 2, 1, 2]) == pytest.approx(0.0, abs=1e-15)


def test_kappa_single_category():
    with pytest.raises(DegenerateAgreement):
        cohens_kappa([3, 3, 3], [3, 3, 3])


@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=2, max_size=40))
def test_kappa_matches_hand_formula(pairs):
    a, b = [p[0] for p in pairs], [p[1] for p in pairs]
    try:
        k = cohens_kappa(a, b)
    except DegenerateAgreement:
        return
    assert k == pytest.approx(kappa_by_hand(a, b), abs=1e-12)


def test_linear_weighted_kappa_against_sklearn():
    from sklearn.metrics import cohen_kappa_score

    rng = np.random.default_rng(0)
    a = rng.integers(1, 6, 100)
    b = np.clip(a + rng.integers(-1, 2, 100), 1, 5)
    assert cohens_kappa(a, b, "linear") == pytest.approx(cohen_kappa_score(a, b, weights="linear"), abs=1e-12)


def test_multi_rater_kappas():
    raters = [[1, 2, 3, 1, 2], [1, 2, 3, 1, 1], [1, 2, 2, 1, 2]]
    pairs = [cohens_kappa(raters[i], raters[j]) for i, j in ((0, 1), (0, 2), (1, 2))]
    assert mean_pairwise_kappa(raters) == pytest.approx(np.mean(pairs))
    assert -1.0 <= fleiss_kappa(raters) <= 1.0
    assert fleiss_kappa([[1, 2, 3], [1, 2, 3]]) == pytest.approx(1.0)


# -- weight sensitivity -----------------------------------------------------------

def test_uniform_profiles_are_stable():
    scores = np.array([[v] * 5 for v in (5.0, 6.0, 7.0, 8.0)])
    assert weight_sensitivity(scores) == 1.0


def test_identical_models_degenerate():
    with pytest.raises(DegenerateInput):
        weight_sensitivity(np.full((3, 5), 7.0))


def test_reference_rows_stay_stable():
    tau = weight_sensitivity(np.array(list(REFERENCE_PROFILES.values())))
    assert tau > 0.92


def test_model_table_from_scores():
    models, table = model_dimension_table(synthetic_judge_scores(n_per_model=5, seed=1))
    assert models == sorted(REFERENCE_PROFILES)
    assert table.shape == (12, 5)


# -- ROUGE ------------------------------------------------------------------------

def test_rouge_examples():
    assert rouge_l("the cat sat", "the cat sat")[2] == 1.0
    assert rouge_l("alpha beta", "gamma delta")[2] == 0.0
    p, r, f = rouge_l("the cat sat", "the cat lay down")
    assert (p, r, f) == pytest.approx((2 / 3, 1 / 2, 4 / 7))


def test_rouge_normalises_case_and_punctuation():
    assert rouge_l("The CAT, sat!", "the cat sat")[2] == 1.0


def test_rouge_empty_reference():
    with pytest.raises(EmptyReference):
        rouge_l("x", "")


@given(st.lists(st.sampled_from("abcde"), max_size=12), st.lists(st.sampled_from("abcde"), min_size=1, max_size=12))
def test_rouge_matches_lcs_oracle(cand, ref):
    assert rouge_l(cand, ref) == pytest.approx(rouge_oracle(cand, ref), abs=1e-15)


# -- distributions ---------------------------------------------------------------

def test_js_examples():
    assert js_divergence([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert js_divergence([1, 0], [0, 1]) == pytest.approx(math.log(2))


def vec(n):
    return st.lists(st.floats(0, 1), min_size=n, max_size=n).filter(lambda v: sum(v) > 0.1).map(
        lambda v: [x / sum(v) for x in v])


@given(st.integers(2, 6).flatmap(lambda n: st.tuples(vec(n), vec(n))))
def test_js_properties(pq):
    p, q = pq
    js = js_divergence(p, q)
    assert js == pytest.approx(js_divergence(q, p), abs=1e-12)
    assert js == pytest.approx(js_by_hand(p, q), abs=1e-12)
    assert 0.0 <= js <= math.log(2)
    if np.allclose(p, q, atol=0, rtol=0):
        assert js == pytest.approx(0.0, abs=1e-12)
    elif js < 1e-12:
        assert np.allclose(p, q, atol=1e-5)


@pytest.mark.parametrize("bad", [[0.5, 0.6], [-0.1, 1.1], [], [float("nan"), 1.0]])
def test_js_bad_distribution(bad):
    with pytest.raises(BadDistribution):
        js_divergence(bad, bad)


def test_chi_square():
    assert chi_square_gof([10, 20, 30], [10, 20, 30]) == (0.0, 1.0)
    stat, p = chi_square_gof([12, 18, 30], [10, 20, 30])
    ref = stats.chisquare([12, 18, 30], [10, 20, 30])
    assert stat == pytest.approx(ref.statistic) and p == pytest.approx(ref.pvalue)
    with pytest.raises(BadDistribution):
        chi_square_gof([1, 2], [0, 3])


# -- Pareto and TE ---------------------------------------------------------------

def test_pareto_single_and_dominated():
    assert pareto_frontier([(5, 1, 1)]) == [(5, 1, 1)]
    assert pareto_frontier([(5, 1, 1), (4, 2, 2), (6, 3, 0.5)]) == [(5, 1, 1), (6, 3, 0.5)]


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=50))
def test_pareto_matches_brute_force(points):
    assert pareto_frontier(points) == brute_pareto(points)


class T:
    def __init__(self, qid, tools, latency):
        self.query_id, self.tool_calls, self.latency_s = qid, tools, latency


def test_te_metrics_example():
    traces = [T(f"q{i}", ["KB_RETRIEVAL"], 10.0) for i in range(4)]
    m = te_metrics(traces, {f"q{i}": True for i in range(4)})
    assert (m.te_success_at_1, m.mean_chain_len, m.mean_exec_time_s) == (1.0, 1.0, 10.0)


def test_te_metrics_empty():
    with pytest.raises(EmptyTE):
        te_metrics([T("q", [], 1.0)], {})


def test_te_metrics_on_simulated_suite(world):
    from dualpilot.simulation import LabelPolicy, Simulator

    te = [sc for sc in world.scenarios() if sc.label.te.value == "high"][:40]
    sim = Simulator(world)
    outs = [sim.run(sc, LabelPolicy(), 0, i) for i, sc in enumerate(te)]
    m = te_metrics([o.trace for o in outs], {o.query_id: o.success for o in outs})
    assert set(m.to_json()) == {"te_success_at_1", "mean_chain_len", "mean_exec_time_s", "n"}
    assert 0.0 <= m.te_success_at_1 <= 1.0 and m.mean_exec_time_s > 0
