import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrlshift.dataset import Dataset, SynthConfig, generate_synthetic, stratified_split
from ctrlshift.learners import LearnerSpec
from ctrlshift.pipeline import (UnknownSourceError, predict_at, predict_own, predictor_from_dict,
                                predictor_to_dict, residuals, train_ctrl, train_global,
                                train_local, train_trl)

MEAN = LearnerSpec("tree", max_depth=0)
RIDGE = LearnerSpec("ridge")
TREE = LearnerSpec("tree", max_depth=3, min_leaf=5)


def small_synth(seed=0, n=600, M=6, **kw):
    cfg = SynthConfig(n_individuals=n, n_sources=M, min_source_size=30, max_source_size=300,
                      feature_dim=4, **kw)
    return generate_synthetic(cfg, seed)


def test_local_constant_outcomes():
    X = np.arange(8, dtype=float).reshape(-1, 1)
    ds = Dataset(X, [0, 0, 0, 0, 1, 1, 1, 1], ["A"] * 4 + ["B"] * 4)
    p = train_local(ds, MEAN)
    x = np.array([[100.0], [-3.0]])
    assert predict_at(p, x, "A").tolist() == [0.0, 0.0]
    assert predict_at(p, x, "B").tolist() == [1.0, 1.0]


def test_local_rejects_singleton_source():
    ds = Dataset(np.zeros((3, 1)), [0, 1, 2], ["A", "A", "B"])
    with pytest.raises(ValueError, match="'B'"):
        train_local(ds, MEAN)


def test_local_invariant_to_row_order():
    ds = small_synth(1)
    perm = np.random.default_rng(0).permutation(ds.n)
    shuffled = ds.subset(perm)
    a, b = train_local(ds, TREE), train_local(shuffled, TREE)
    Z = np.random.default_rng(1).standard_normal((20, ds.d))
    for g in ds.sources:
        assert np.allclose(predict_at(a, Z, g), predict_at(b, Z, g), atol=1e-12)


def test_global_single_source_equals_local():
    rng = np.random.default_rng(2)
    ds = Dataset(rng.standard_normal((30, 2)), rng.standard_normal(30), ["A"] * 30)
    g, l = train_global(ds, RIDGE), train_local(ds, RIDGE)
    assert np.allclose(predict_at(g, ds.features, "A"), predict_at(l, ds.features, "A"), atol=1e-10)


def test_unknown_source():
    ds = small_synth()
    for p in (train_global(ds, RIDGE), train_local(ds, RIDGE), train_trl(ds, RIDGE, RIDGE)):
        with pytest.raises(UnknownSourceError):
            predict_at(p, ds.features[:2], "nowhere")


def test_trl_recovers_source_offsets():
    rng = np.random.default_rng(3)
    n_per, ids = 40, ["a", "b", "c"]
    delta = {"a": -1.0, "b": 0.5, "c": 2.0}
    X = rng.standard_normal((3 * n_per, 2))
    src = np.repeat(ids, n_per)
    y = 3 * X[:, 0] + np.array([delta[s] for s in src]) + 0.1 * rng.standard_normal(len(src))
    ds = Dataset(X, y, src)
    # base without indicator knowledge of the offsets: a depth-0 tree
    p = train_trl(ds, LearnerSpec("ridge"), MEAN)
    base_res = residuals(p.base, ds, np.arange(ds.n), p.universe)
    for g in ids:
        rows = ds.rows(g)
        x0 = np.zeros((1, 2))
        got = predict_at(p, x0, g)[0] - p.base.predict(
            np.hstack([x0, np.eye(3)[[ids.index(g)]]]))[0]
        assert got == pytest.approx(base_res[rows].mean(), abs=1e-6)


def test_trl_with_zero_residual_mean():
    ds = small_synth(4)
    trl = train_trl(ds, TREE, MEAN)
    glob = train_global(ds, TREE)
    res = residuals(glob.base, ds, np.arange(ds.n), glob.universe)
    for g in ds.sources:
        shift = res[ds.rows(g)].mean()
        assert np.allclose(predict_at(trl, ds.features[:5], g),
                           predict_at(glob, ds.features[:5], g) + shift, atol=1e-12)


def test_ctrl_singletons_equal_trl_bit_exact():
    ds = small_synth(5)
    spec = LearnerSpec("forest", n_trees=4, max_depth=3)
    a = train_trl(ds, spec, spec, seed=7)
    b = train_ctrl(ds, spec, spec, {g: [g] for g in ds.sources}, seed=7)
    for g in ds.sources:
        assert np.array_equal(predict_at(a, ds.features, g), predict_at(b, ds.features, g))


def test_ctrl_full_cluster_residual_is_shared():
    ds = small_synth(6)
    everyone = {g: ds.sources for g in ds.sources}
    p = train_ctrl(ds, RIDGE, MEAN, everyone)
    res = residuals(p.base, ds, np.arange(ds.n), p.universe)
    for g in ds.sources:
        assert p.per_source[g].predict(ds.features[:1])[0] == pytest.approx(res.mean(), abs=1e-12)


@pytest.mark.parametrize("clusters,match", [
    ({}, "no cluster"),
    ({"s0": ("s1",)}, "does not contain"),
    ({"s0": ("s0", "zz")}, "unknown"),
])
def test_ctrl_cluster_validation(clusters, match):
    ds = small_synth(M=3, n=200)
    full = {g: (g,) for g in ds.sources}
    full.update(clusters)
    if not clusters:
        full = {}
    with pytest.raises(ValueError, match=match):
        train_ctrl(ds, RIDGE, RIDGE, full)


def test_pooling_helps_when_sources_identical():
    wins = 0
    for seed in range(10):
        cfg = SynthConfig(n_individuals=400, n_sources=2, min_source_size=200, max_source_size=200,
                          feature_dim=3, global_weight=1.0, local_weight=0.0,
                          feature_shift_scale=0.0, clustered_fraction=0.0)
        ds = generate_synthetic(cfg, seed)
        sp = stratified_split(ds, 0.5, seed)
        tr, te = ds.subset(sp.train), ds.subset(sp.validation)
        g = np.mean((predict_own(train_global(tr, RIDGE), te) - te.outcome) ** 2)
        l = np.mean((predict_own(train_local(tr, RIDGE), te) - te.outcome) ** 2)
        wins += g <= l
    assert wins >= 8


def test_local_overfits_tiny_source():
    gap = []
    for seed in range(10):
        cfg = SynthConfig(n_individuals=1020, n_sources=2, feature_dim=5, source_sizes=(40, 980),
                          global_weight=1.0, local_weight=0.0, feature_shift_scale=0.0,
                          clustered_fraction=0.0)
        ds = generate_synthetic(cfg, seed)
        sp = stratified_split(ds, 0.5, seed)
        tr, te = ds.subset(sp.train), ds.subset(sp.validation)
        rows = te.rows("s0")
        pg = predict_at(train_global(tr, RIDGE), te.features[rows], "s0")
        pl = predict_at(train_local(tr, RIDGE), te.features[rows], "s0")
        y = te.outcome[rows]
        gap.append(np.mean((pl - y) ** 2) - np.mean((pg - y) ** 2))
    assert np.mean(gap) > 0


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.sampled_from(["global", "local", "trl", "ctrl"]))
def test_predictor_json_round_trip(seed, family):
    ds = small_synth(seed, n=300, M=4)
    if family == "global":
        p = train_global(ds, TREE, seed)
    elif family == "local":
        p = train_local(ds, TREE, seed)
    elif family == "trl":
        p = train_trl(ds, TREE, TREE, seed)
    else:
        p = train_ctrl(ds, TREE, TREE, {g: ds.sources for g in ds.sources}, seed)
    back = predictor_from_dict(json.loads(json.dumps(predictor_to_dict(p))))
    for g in ds.sources:
        out = predict_at(p, ds.features, g)
        assert np.all(np.isfinite(out))
        assert np.array_equal(out, predict_at(back, ds.features, g))
