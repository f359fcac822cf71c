import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrlshift.dataset import Dataset
from ctrlshift.evaluation import (EmptyEligibleSetError, PredictionMatrix, average_ranks, evaluate,
                                  mse, prediction_matrix, rwa, rwa_detail, rwa_sweep,
                                  rwa_sweep_csv, small_mse, table1_csv, top_rows)
from ctrlshift.learners import LearnerSpec
from ctrlshift.pipeline import predict_own, train_local


def test_mse_examples():
    assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse([0, 0], [1, -1]) == 1.0
    with pytest.raises(ValueError):
        mse([], [])
    with pytest.raises(ValueError):
        mse([1.0], [1.0, 2.0])


def naive_mse(p, y):
    s = 0.0
    for a, b in zip(p, y):
        s += (a - b) * (a - b)
    return s / len(p)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_mse_matches_reference(seed):
    rng = np.random.default_rng(seed)
    p, y = rng.standard_normal(100), rng.standard_normal(100)
    assert abs(mse(p, y) - naive_mse(p.tolist(), y.tolist())) <= 1e-12


def matrix(pred, sources, row_source, y):
    return PredictionMatrix(np.asarray(pred, float), tuple(sources), np.array(row_source, dtype=object),
                            np.asarray(y, float))


def test_small_mse_example():
    m = matrix([[0.0, 9], [0.0, 9], [9, 1.0]], ["A", "B"], ["A", "A", "B"], [1, 0, 1])
    assert small_mse(m, {"A"}) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        small_mse(m, set())


def test_small_mse_all_small_equals_mse():
    rng = np.random.default_rng(0)
    src = rng.choice(["a", "b", "c"], 30)
    m = matrix(rng.random((30, 3)), ["a", "b", "c"], src, rng.random(30))
    assert small_mse(m, {"a", "b", "c"}) == pytest.approx(mse(m.own(), m.y), abs=1e-15)


def test_rwa_example():
    # six rows, two sources; top 50% at column A = rows 0,1,2 of which A owns 0,1
    pred = [[0.9, 0.1], [0.8, 0.2], [0.7, 0.9], [0.1, 0.8], [0.2, 0.7], [0.3, 0.0]]
    m = matrix(pred, ["A", "B"], ["A", "A", "B", "B", "B", "A"], [1, 0, 1, 1, 0, 1])
    res = rwa_detail({"m": m}, q=0.5, min_count=2)
    assert res.eligible_sources == ("A", "B")
    # A keeps rows 0,1 (y 1,0); B keeps rows 2,3,4 (y 1,1,0)
    assert res.values["m"] == pytest.approx(3 / 5)
    with pytest.raises(EmptyEligibleSetError):
        rwa({"m": m}, q=0.5, min_count=4)


def test_rwa_q_one_with_all_rows():
    rng = np.random.default_rng(1)
    src = np.repeat(["a", "b"], 5)
    m = matrix(rng.random((10, 2)), ["a", "b"], src, rng.random(10))
    assert rwa({"m": m}, q=1.0, min_count=1)["m"] == pytest.approx(m.y.mean())


def test_rwa_sweep_marks_absent():
    pred = [[0.9, 0.1], [0.1, 0.9], [0.5, 0.5], [0.2, 0.8]]
    m = matrix(pred, ["A", "B"], ["A", "B", "A", "B"], [1, 0, 1, 1])
    sweep = rwa_sweep({"x/tree": m}, [0.25, 1.0], min_count=2)
    assert sweep[0.25] is None and sweep[1.0] is not None
    text = rwa_sweep_csv(sweep, ["x/tree"])
    assert text.splitlines()[0] == "model,top25%,top100%"
    assert text.splitlines()[1].startswith("x/tree,absent,")


def test_top_rows_ties_lower_index():
    assert top_rows(np.array([1.0, 2.0, 2.0, 0.5]), 0.5).tolist() == [1, 2]
    assert top_rows(np.array([3.0, 3.0, 3.0]), 0.34).tolist() == [0, 1]


def test_average_ranks_examples():
    table = {"a": {"mse": 1.0, "rwa": 0.5}, "b": {"mse": 2.0, "rwa": 0.9}, "c": {"mse": 2.0, "rwa": 0.1}}
    r = average_ranks(table, {"mse": False, "rwa": True})
    assert r == {"a": 1.5, "b": 1.75, "c": 2.75}
    with pytest.raises(ValueError):
        average_ranks({"a": {"mse": 1.0}}, {"mse": False})
    with pytest.raises(ValueError, match="missing"):
        average_ranks({"a": {"mse": 1.0}, "b": {}}, {"mse": False})


def brute_ranks(table, orient):
    models = list(table)
    tot = {m: 0.0 for m in models}
    for k, higher in orient.items():
        for m in models:
            v = table[m][k]
            better = sum(1 for o in models if (table[o][k] > v if higher else table[o][k] < v))
            equal = sum(1 for o in models if table[o][k] == v)
            tot[m] += better + (equal + 1) / 2
    return {m: t / len(orient) for m, t in tot.items()}


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.integers(2, 7))
def test_average_ranks_matches_brute(seed, k):
    rng = np.random.default_rng(seed)
    table = {f"m{i}": {"mse": float(rng.integers(0, 4)), "small_mse": float(rng.random()),
                       "rwa": float(rng.integers(0, 3))} for i in range(k)}
    orient = {"mse": False, "small_mse": False, "rwa": True}
    assert average_ranks(table, orient) == brute_ranks(table, orient)


def test_matrix_csv_round_trip_and_validation():
    m = matrix([[0.1, 1 / 3], [2.5, -1e-17]], ["A", "B"], ["B", "A"], [1.0, 0.0])
    back = PredictionMatrix.from_csv(m.to_csv())
    assert np.array_equal(back.pred, m.pred) and back.sources == m.sources
    with pytest.raises(ValueError):
        matrix([[np.inf, 0.0]], ["A", "B"], ["A"], [0.0])
    with pytest.raises(ValueError):
        matrix([[0.0, 0.0]], ["A", "B"], ["C"], [0.0])


def test_prediction_matrix_and_evaluate_end_to_end():
    rng = np.random.default_rng(2)
    src = np.repeat(["a", "b", "c"], 40)
    ds = Dataset(rng.standard_normal((120, 2)), rng.random(120), src)
    p = train_local(ds, LearnerSpec("ridge"))
    pm = prediction_matrix(p, ds)
    assert pm.pred.shape == (120, 3)
    assert np.allclose(pm.own(), predict_own(p, ds))
    q = train_local(ds, LearnerSpec("tree", max_depth=0))
    mats = {"local/ridge": pm, "local/tree": prediction_matrix(q, ds),
            "global/ridge": prediction_matrix(q, ds)}
    rep = evaluate(mats, ["a"], q=0.3, min_count=2)
    assert set(rep.ranks) == {"ridge", "all"}  # one tree model: nothing to rank
    assert rep.metrics["local/tree"]["rwa"] is not None
    csv_text = table1_csv(rep, ["local", "global"], ["ridge", "tree"])
    head, loc, glob = csv_text.splitlines()
    assert head.split(",")[:3] == ["model", "MSE:ridge", "MSE:tree"]
    assert glob.split(",")[2] == ""  # global/tree was not run


def test_evaluate_without_eligible_sources():
    m = matrix([[0.9, 0.1], [0.1, 0.9]], ["A", "B"], ["A", "B"], [1, 0])
    rep = evaluate({"x/r": m, "y/r": m}, [], q=0.5, min_count=5)
    assert rep.eligible_sources == [] and rep.metrics["x/r"]["rwa"] is None
    assert rep.ranks["r"] == {"x/r": 1.5, "y/r": 1.5}
