import csv
import io
import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrlshift.cluster import (ClusterSearch, StabilityWeights, SubsetInstance, dumps_reports,
                               one_se_rule, sample_candidates, select_cluster, solve_subset,
                               stability_weights, subset_objective)
from ctrlshift.dataset import SynthConfig, generate_synthetic
from ctrlshift.learners import LearnerSpec

RIDGE = LearnerSpec("ridge")
RIDGE_RES = LearnerSpec("ridge", ridge_penalty=1.0)


def inst2(rg, rm, n=(10, 10), R=(1.0, -1.0)):
    return SubsetInstance("g", ("g", "m"), np.array(R), np.column_stack([rg, rm]), np.array(n))


def test_objective_examples():
    i = inst2([0.9, -0.9], [0.0, 0.0])
    assert subset_objective(i, [1, 0]) == pytest.approx(0.02)
    assert subset_objective(i, [1, 1]) == pytest.approx(0.605)
    assert solve_subset(i).tolist() == [True, False]
    j = inst2([2.0, -2.0], [0.0, 0.0])
    assert subset_objective(j, [1, 0]) == pytest.approx(2.0)
    assert subset_objective(j, [1, 1]) == pytest.approx(0.0)
    assert solve_subset(j).tolist() == [True, True]


def test_objective_rejects_missing_target():
    i = inst2([0.9, -0.9], [0.0, 0.0])
    with pytest.raises(ValueError):
        subset_objective(i, [0, 1])
    with pytest.raises(ValueError):
        subset_objective(i, [0, 0])


def test_single_candidate():
    i = SubsetInstance("g", ("g",), np.array([1.0]), np.array([[0.0]]), np.array([3]))
    assert solve_subset(i).tolist() == [True]


def test_identical_columns_tie_prefers_smaller():
    col = np.array([0.3, -0.2, 0.1])
    i = SubsetInstance("b", ("a", "b", "c"), np.array([1.0, 0.0, 0.0]),
                       np.column_stack([col, col, col]), np.array([5, 7, 9]))
    for z in ([1, 1, 0], [0, 1, 1], [1, 1, 1]):
        assert subset_objective(i, z) == pytest.approx(subset_objective(i, [0, 1, 0]))
    assert solve_subset(i).tolist() == [False, True, False]


def test_tie_between_equal_size_sets_goes_lexicographic():
    # a and c give identical columns: {a,b} and {b,c} are exact, {a,b,c} overshoots
    i = SubsetInstance("b", ("a", "b", "c"), np.array([1.0, -1.0]),
                       np.array([[2.0, 0.0, 2.0], [-2.0, 0.0, -2.0]]), np.array([4, 4, 4]))
    assert solve_subset(i).tolist() == [True, True, False]


def test_guard():
    c = 21
    i = SubsetInstance("x0", tuple(f"x{j}" for j in range(c)), np.zeros(2), np.zeros((2, c)),
                       np.ones(c))
    with pytest.raises(ValueError, match="exceeds"):
        solve_subset(i)


def oracle(R, r, n, ids, t):
    """Plain-python enumeration returning (best value, best id set)."""
    best, best_key = None, None
    others = [j for j in range(len(ids)) if j != t]
    for k in range(len(others) + 1):
        for combo in itertools.combinations(others, k):
            sel = [t, *combo]
            tot = sum(n[j] for j in sel)
            val = 0.0
            for i in range(len(R)):
                p = sum(r[i][j] * n[j] for j in sel) / tot
                val += (R[i] - p) ** 2
            key = (len(sel), tuple(sorted(ids[j] for j in sel)))
            if best is None or val < best - 1e-12 * (best + 1e-12) or (
                    abs(val - best) <= 1e-12 * (best + 1e-12) and key < best_key):
                best, best_key = val, key
    return best, best_key


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 7), st.integers(1, 6))
def test_solver_matches_oracle(seed, c, v):
    rng = np.random.default_rng(seed)
    ids = [f"c{j}" for j in rng.permutation(c)]
    t = int(rng.integers(c))
    R = rng.standard_normal(v)
    r = rng.standard_normal((v, c))
    n = rng.integers(1, 50, size=c).astype(float)
    inst = SubsetInstance(ids[t], tuple(ids), R, r, n)
    z = solve_subset(inst)
    val, key = oracle(R.tolist(), r.tolist(), n.tolist(), ids, t)
    assert subset_objective(inst, z) == pytest.approx(val, rel=1e-10, abs=1e-14)
    assert (int(z.sum()), tuple(sorted(np.array(ids)[z]))) == key


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_scale_equivariance(seed, scale):
    rng = np.random.default_rng(seed)
    c = 5
    ids = tuple(f"s{j}" for j in range(c))
    R, r, n = rng.standard_normal(4), rng.standard_normal((4, c)), rng.integers(1, 30, c) * 1.0
    a = SubsetInstance("s0", ids, R, r, n)
    b = SubsetInstance("s0", ids, R, r, n * scale)
    za = solve_subset(a)
    assert np.array_equal(za, solve_subset(b))
    assert subset_objective(a, za) == pytest.approx(subset_objective(b, za), rel=1e-12)


@pytest.mark.parametrize("means,ses,expected", [
    ([0.50, 0.30, 0.29], [0.02, 0.02, 0.02], (3, 0.31, 2)),
    ([0.30, 0.40], [0.01, 0.01], (1, 0.31, 1)),
    ([0.4, 0.2, 0.3, 0.2], [0, 0, 0, 0], (2, 0.2, 2)),
    ([0.5], [0.1], (1, 0.6, 1)),
    ([0.30, 0.31, 0.305], [0.02, 0.0, 0.0], (1, 0.32, 1)),
])
def test_one_se_rule_examples(means, ses, expected):
    k_min, cutoff, k_star = one_se_rule(means, ses)
    assert (k_min, k_star) == (expected[0], expected[2])
    assert cutoff == pytest.approx(expected[1])


def test_one_se_rule_rejects_bad_input():
    with pytest.raises(ValueError):
        one_se_rule([], [])
    with pytest.raises(ValueError):
        one_se_rule([0.1, np.nan], [0, 0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 10), st.floats(0, 1)), min_size=1, max_size=12))
def test_one_se_rule_definition(pairs):
    means = [p[0] for p in pairs]
    ses = [p[1] for p in pairs]
    k_min, cutoff, k_star = one_se_rule(means, ses)
    assert means[k_min - 1] == min(means)
    assert all(m > min(means) for m in means[: k_min - 1])
    assert cutoff == means[k_min - 1] + ses[k_min - 1]
    assert means[k_star - 1] <= cutoff and all(m > cutoff for m in means[: k_star - 1])
    assert k_star <= k_min


def test_ranking_ties():
    w = StabilityWeights("g", {"g": 1.0, "b": 0.5, "a": 0.5, "c": 0.5, "d": 0.9},
                         {"g": (3, 3), "b": (2, 4), "a": (1, 2), "c": (2, 4), "d": (9, 10)})
    assert w.ranking() == ["g", "d", "b", "c", "a"]


def test_sample_candidates():
    uni = [f"s{i}" for i in range(10)]
    c = sample_candidates(uni, "s3", 6, seed=1, it=4)
    assert len(c) == 6 and "s3" in c and len(set(c)) == 6
    assert c == sample_candidates(uni, "s3", 6, seed=1, it=4)
    assert sample_candidates(uni[:3], "s0", 6, 0, 0) == uni[:3]


# ---------------------------------------------------------------- data-driven


def planted(seed, sizes=(60, 200, 200, 150, 200, 250, 150, 300), clusters=((0, 1, 2),)):
    cfg = SynthConfig(n_individuals=sum(sizes), n_sources=len(sizes), feature_dim=5,
                      source_sizes=sizes, planted_clusters=clusters, clustered_fraction=0.0)
    return generate_synthetic(cfg, seed)


def test_stability_weight_invariants_and_determinism():
    ds = planted(0)
    a = stability_weights(ds, "s0", RIDGE, RIDGE_RES, iters=20, candidate_count=5, seed=3)
    b = stability_weights(ds, "s0", RIDGE, RIDGE_RES, iters=20, candidate_count=5, seed=3)
    assert a == b
    assert a.weights["s0"] == 1.0
    assert all(0.0 <= v <= 1.0 for v in a.weights.values())
    assert all(sel <= cand for sel, cand in a.counts.values())
    assert a.counts["s0"] == (20, 20)


def test_stability_weights_parallel_identical():
    ds = planted(1)
    a = stability_weights(ds, "s0", RIDGE, RIDGE_RES, iters=6, seed=1, workers=1)
    b = stability_weights(ds, "s0", RIDGE, RIDGE_RES, iters=6, seed=1, workers=3)
    assert a == b


def test_stability_weights_favor_sibling():
    hits = 0
    for seed in range(10):
        ds = planted(seed, sizes=(60, 200, 150, 200, 250, 150, 300, 200), clusters=((0, 1),))
        w = stability_weights(ds, "s0", RIDGE, RIDGE_RES, iters=50, seed=seed).weights
        rest = [v for m, v in w.items() if m not in ("s0", "s1")]
        hits += w["s1"] > np.median(rest)
    assert hits >= 8


def test_stability_weight_errors():
    ds = planted(0)
    with pytest.raises(KeyError):
        stability_weights(ds, "nope", RIDGE, RIDGE_RES, iters=2)
    with pytest.raises(ValueError):
        stability_weights(ds, "s0", RIDGE, RIDGE_RES, iters=2, candidate_count=99)


def test_select_k_max_one():
    ds = planted(2)
    w = stability_weights(ds, "s0", RIDGE, RIDGE_RES, iters=5)
    rep = select_cluster(ds, "s0", w, RIDGE, RIDGE_RES, iters=5, k_max=1)
    assert rep.cluster == ["s0"] and rep.k_star == 1 and len(rep.means) == 1


def test_report_consistency_and_exports():
    ds = planted(3)
    search = ClusterSearch(RIDGE, RIDGE_RES, iters=15, k_max=5, seed=4)
    weights, reports = search.run(ds, ["s0", "s3"])
    for g, rep in reports.items():
        assert rep.ranked[0] == g and rep.ranked == weights[g].ranking()[:5]
        k_min, cutoff, k_star = one_se_rule(rep.means, rep.ses)
        assert (rep.k_min, rep.cutoff, rep.k_star) == (k_min, cutoff, k_star)
        assert rep.cluster == sorted(rep.ranked[:k_star]) and g in rep.cluster
        rows = list(csv.DictReader(io.StringIO(rep.curve_csv())))
        assert [int(r["k"]) for r in rows] == list(range(1, 6))
    doc = json.loads(dumps_reports(weights, reports))
    assert doc["s0"]["cluster"]["k_star"] == reports["s0"].k_star
    assert doc["s0"]["stability"]["weights"]["s0"] == 1.0


def test_batched_targets_match_single_runs():
    ds = planted(4)
    both = ClusterSearch(RIDGE, RIDGE_RES, iters=8, k_max=4, seed=2)
    both.run(ds, ["s0", "s5"])
    one = ClusterSearch(RIDGE, RIDGE_RES, iters=8, k_max=4, seed=2)
    one.run(ds, ["s5"])
    assert both.weights["s5"] == one.weights["s5"]
    assert both.reports["s5"] == one.reports["s5"]
