"""Weighted squared-error base learners: ridge, CART tree, random forest, fixed-leaf means.

Every learner takes optional per-row weights. Weights are rescaled to sum to
``n`` before fitting so that multiplying them by a constant never changes
the fit (ridge would otherwise shift its effective penalty).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ._util import rng_for

MODEL_FORMAT = "ctrlshift.model"
MODEL_VERSION = 1

KINDS = ("ridge", "tree", "forest", "fixed_partition_mean")


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LeafPartition:
    """Axis-aligned half-open boxes ``lower <= x < upper`` covering feature space."""

    lower: np.ndarray  # (n_leaves, d)
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_2d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_2d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape:
            raise ValueError("lower/upper shape mismatch")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def intervals(cls, edges, feature: int = 0, d: int = 1) -> "LeafPartition":
        """1-d partition of one feature at ``edges`` (must start/end at +-inf)."""
        edges = np.asarray(edges, dtype=float)
        L = len(edges) - 1
        lo = np.full((L, d), -np.inf)
        hi = np.full((L, d), np.inf)
        lo[:, feature] = edges[:-1]
        hi[:, feature] = edges[1:]
        return cls(lo, hi)

    @property
    def n_leaves(self) -> int:
        return self.lower.shape[0]

    def locate(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.lower.shape[1]:
            raise ValueError(f"expected {self.lower.shape[1]} features, got {X.shape[1]}")
        inside = np.all((X[:, None, :] >= self.lower[None]) & (X[:, None, :] < self.upper[None]), axis=2)
        counts = inside.sum(axis=1)
        if np.any(counts == 0):
            raise ValueError(f"row {int(np.argmax(counts == 0))} falls outside every leaf")
        if np.any(counts > 1):
            raise ValueError(f"row {int(np.argmax(counts > 1))} falls in overlapping leaves")
        return np.argmax(inside, axis=1)

    def to_dict(self):
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}


@dataclass(frozen=True)
class LearnerSpec:
    kind: str = "tree"
    ridge_penalty: float = 1e-6
    max_depth: int = 6
    min_leaf: int = 5
    n_trees: int = 100
    feature_subsample: float | None = None  # None -> ceil(sqrt(d)) / d
    row_subsample: float = 1.0
    bootstrap: bool = True
    seed_salt: int = 0
    partition: LeafPartition | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}; expected one of {KINDS}")
        if self.ridge_penalty < 0:
            raise ValueError("ridge_penalty must be >= 0")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.feature_subsample is not None and not 0 < self.feature_subsample <= 1:
            raise ValueError("feature_subsample must lie in (0, 1]")
        if not 0 < self.row_subsample <= 1:
            raise ValueError("row_subsample must lie in (0, 1]")

    def with_seed(self, seed: int) -> "LearnerSpec":
        return replace(self, seed_salt=int(seed))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["partition"] = self.partition.to_dict() if self.partition is not None else None
        return d

    @classmethod
    def from_dict(cls, d) -> "LearnerSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"LearnerSpec: unknown field(s) {sorted(unknown)}")
        if d.get("partition") is not None:
            d["partition"] = LeafPartition(d["partition"]["lower"], d["partition"]["upper"])
        return cls(**d)


# ---------------------------------------------------------------- input checks


def _check_xy(X, y, weights):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("X must be a non-empty 2-d array")
    if y.shape[0] != X.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite values in X or y")
    n = X.shape[0]
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=float).reshape(-1)
        if w.shape[0] != n:
            raise ValueError(f"weights has {w.shape[0]} entries for {n} rows")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and nonnegative")
        total = w.sum()
        if total <= 0:
            raise ValueError("weights are all zero")
        w = w * (n / total)
    return X, y, w


def _check_predict_x(X, d):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, d) if X.size else X.reshape(0, d)
    if X.shape[1] != d:
        raise ValueError(f"model was trained on {d} features, got {X.shape[1]}")
    return X


# ---------------------------------------------------------------- ridge


@dataclass(frozen=True, eq=False)
class RidgeModel:
    coef: np.ndarray
    intercept: float
    kind = "ridge"

    @property
    def n_features(self) -> int:
        return self.coef.shape[0]

    def predict(self, X) -> np.ndarray:
        X = _check_predict_x(X, self.n_features)
        return X @ self.coef + self.intercept

    def params(self):
        return {"coef": self.coef.tolist(), "intercept": self.intercept}


def fit_ridge(X, y, w, penalty: float) -> RidgeModel:
    sw = w.sum()
    xm = (w @ X) / sw
    ym = float(w @ y) / sw
    Xc = X - xm
    yc = y - ym
    if penalty == 0.0:
        rw = np.sqrt(w)
        coef = np.linalg.lstsq(Xc * rw[:, None], yc * rw, rcond=None)[0]
    else:
        A = Xc.T @ (Xc * w[:, None])
        A[np.diag_indices_from(A)] += penalty
        b = Xc.T @ (w * yc)
        try:
            coef = np.linalg.solve(A, b)
        except np.linalg.LinAlgError:
            coef = np.linalg.lstsq(A, b, rcond=None)[0]
    return RidgeModel(coef, float(ym - xm @ coef))


# ---------------------------------------------------------------- tree


@dataclass(frozen=True, eq=False)
class TreeModel:
    """Binary tree in flat arrays; ``feature[i] == -1`` marks a leaf.

    A row goes left at node ``i`` when ``x[feature[i]] <= threshold[i]``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_features: int
    kind = "tree"

    @property
    def depth(self) -> int:
        depth = np.zeros(len(self.feature), dtype=int)
        for i in range(len(self.feature)):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def apply(self, X) -> np.ndarray:
        X = _check_predict_x(X, self.n_features)
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                return node
            r = rows[internal]
            n = node[internal]
            go_left = X[r, f[internal]] <= self.threshold[n]
            node[r] = np.where(go_left, self.left[n], self.right[n])

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    def params(self):
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "n_features": self.n_features,
        }


def _best_split(Xn, yn, wn, min_leaf, feats):
    """Best weighted-variance-reduction split over ``feats``.

    Returns (gain, feature, threshold) or None. Ties go to the lower feature
    index, then the lower threshold (np.argmax keeps the first maximum).
    """
    n = Xn.shape[0]
    if n < 2 * min_leaf:
        return None
    sub = Xn[:, feats]
    order = np.argsort(sub, axis=0, kind="stable")
    xs = np.take_along_axis(sub, order, axis=0)
    ws = wn[order]
    wys = (wn * yn)[order]
    cw = np.cumsum(ws, axis=0)[:-1]
    cs = np.cumsum(wys, axis=0)[:-1]
    W = cw[-1] + ws[-1]
    S = cs[-1] + wys[-1]
    rw = W - cw
    rs = S - cs
    valid = xs[1:] > xs[:-1]
    count_left = np.arange(1, n)[:, None]
    valid &= (count_left >= min_leaf) & (n - count_left >= min_leaf)
    valid &= (cw > 0) & (rw > 0)
    if not valid.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        score = np.where(valid, cs * cs / cw + rs * rs / rw, -np.inf)
    flat = score.T.reshape(-1)  # feature-major: lower feature first, then lower threshold
    top = flat.max()
    # scores equal up to rounding count as ties so the documented rule decides
    k = int(np.argmax(flat >= top - 1e-12 * abs(top)))
    j, i = divmod(k, n - 1)
    Wt, St = W[j], S[j]
    gain = flat[k] - St * St / Wt
    if not gain > 1e-12 * (float(wn @ (yn * yn)) + 1e-300):
        return None
    thr = 0.5 * (xs[i, j] + xs[i + 1, j])
    if thr >= xs[i + 1, j]:  # midpoint rounded up onto the right value
        thr = xs[i, j]
    return gain, int(feats[j]), float(thr)


def fit_tree(X, y, w, max_depth: int, min_leaf: int, max_features: int | None = None,
             rng: np.random.Generator | None = None) -> TreeModel:
    n, d = X.shape
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(v):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(v)
        return len(feature) - 1

    def leaf_value(idx, fallback):
        sw = w[idx].sum()
        return float(w[idx] @ y[idx] / sw) if sw > 0 else fallback

    root_val = leaf_value(np.arange(n), 0.0)
    stack = [(np.arange(n), 0, new_node(root_val))]
    while stack:
        idx, depth, node = stack.pop()
        if depth >= max_depth:
            continue
        if max_features is not None and max_features < d:
            feats = np.sort(rng.choice(d, size=max_features, replace=False))
        else:
            feats = np.arange(d)
        found = _best_split(X[idx], y[idx], w[idx], min_leaf, feats)
        if found is None:
            continue
        _, f, thr = found
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        lnode = new_node(leaf_value(li, value[node]))
        rnode = new_node(leaf_value(ri, value[node]))
        feature[node], threshold[node] = f, thr
        left[node], right[node] = lnode, rnode
        # right pushed first so the left subtree is expanded (and numbered) first
        stack.append((ri, depth + 1, rnode))
        stack.append((li, depth + 1, lnode))
    return TreeModel(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=float),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(value, dtype=float),
        d,
    )


# ---------------------------------------------------------------- forest


@dataclass(frozen=True, eq=False)
class ForestModel:
    trees: tuple
    kind = "forest"

    @property
    def n_features(self) -> int:
        return self.trees[0].n_features

    def predict(self, X) -> np.ndarray:
        X = _check_predict_x(X, self.n_features)
        out = np.zeros(X.shape[0])
        for t in self.trees:
            out += t.predict(X)
        return out / len(self.trees)

    def params(self):
        return {"trees": [t.params() for t in self.trees]}


def default_max_features(d: int, feature_subsample: float | None) -> int:
    if feature_subsample is None:
        return math.ceil(math.sqrt(d))
    return max(1, math.ceil(feature_subsample * d - 1e-9))


def fit_forest(X, y, w, spec: LearnerSpec) -> ForestModel:
    n, d = X.shape
    max_features = default_max_features(d, spec.feature_subsample)
    n_draw = max(1, int(round(spec.row_subsample * n)))
    trees = []
    for t in range(spec.n_trees):
        rng = rng_for(spec.seed_salt, "tree", t)
        if spec.bootstrap:
            rows = rng.integers(0, n, size=n_draw)
            if w[rows].sum() <= 0:
                rows = np.arange(n)
        else:
            rows = np.arange(n)
        trees.append(fit_tree(X[rows], y[rows], w[rows], spec.max_depth, spec.min_leaf,
                              max_features, rng))
    return ForestModel(tuple(trees))


# ---------------------------------------------------------------- fixed partition


@dataclass(frozen=True, eq=False)
class PartitionMeanModel:
    partition: LeafPartition
    value: np.ndarray
    kind = "fixed_partition_mean"

    @property
    def n_features(self) -> int:
        return self.partition.lower.shape[1]

    def predict(self, X) -> np.ndarray:
        X = _check_predict_x(X, self.n_features)
        if X.shape[0] == 0:
            return np.zeros(0)
        return self.value[self.partition.locate(X)]

    def params(self):
        return {"partition": self.partition.to_dict(), "value": self.value.tolist()}


def fit_fixed_partition_mean(partition: LeafPartition, X, y, weights=None) -> PartitionMeanModel:
    """Weighted mean of ``y`` per leaf; empty leaves get the overall weighted mean."""
    X, y, w = _check_xy(X, y, weights)
    leaf = partition.locate(X)
    L = partition.n_leaves
    sw = np.bincount(leaf, weights=w, minlength=L)
    swy = np.bincount(leaf, weights=w * y, minlength=L)
    overall = float(w @ y / w.sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        value = np.where(sw > 0, swy / np.where(sw > 0, sw, 1.0), overall)
    return PartitionMeanModel(partition, value)


# ---------------------------------------------------------------- public API


def fit(spec: LearnerSpec, X, y, weights=None):
    """Fit the learner described by ``spec``; deterministic in (spec, data)."""
    if spec.kind == "fixed_partition_mean":
        if spec.partition is None:
            raise ValueError("fixed_partition_mean requires spec.partition")
        return fit_fixed_partition_mean(spec.partition, X, y, weights)
    X, y, w = _check_xy(X, y, weights)
    if spec.kind == "ridge":
        return fit_ridge(X, y, w, spec.ridge_penalty)
    if spec.kind == "tree":
        return fit_tree(X, y, w, spec.max_depth, spec.min_leaf)
    return fit_forest(X, y, w, spec)


def predict(model, X) -> np.ndarray:
    return model.predict(X)


def model_to_dict(model, spec: LearnerSpec | None = None) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "kind": model.kind,
        "spec": spec.to_dict() if spec is not None else None,
        "params": model.params(),
    }


def _tree_from_params(p) -> TreeModel:
    return TreeModel(
        np.array(p["feature"], dtype=np.int64),
        np.array(p["threshold"], dtype=float),
        np.array(p["left"], dtype=np.int64),
        np.array(p["right"], dtype=np.int64),
        np.array(p["value"], dtype=float),
        int(p["n_features"]),
    )


def model_from_dict(doc: dict):
    if doc.get("format") != MODEL_FORMAT:
        raise ModelFormatError(f"not a {MODEL_FORMAT} document")
    if doc.get("version") != MODEL_VERSION:
        raise ModelFormatError(
            f"model document version {doc.get('version')!r}, this build reads {MODEL_VERSION}"
        )
    kind, p = doc["kind"], doc["params"]
    if kind == "ridge":
        return RidgeModel(np.array(p["coef"], dtype=float), float(p["intercept"]))
    if kind == "tree":
        return _tree_from_params(p)
    if kind == "forest":
        return ForestModel(tuple(_tree_from_params(t) for t in p["trees"]))
    if kind == "fixed_partition_mean":
        part = LeafPartition(p["partition"]["lower"], p["partition"]["upper"])
        return PartitionMeanModel(part, np.array(p["value"], dtype=float))
    raise ModelFormatError(f"unknown model kind {kind!r}")


def dumps_model(model, spec: LearnerSpec | None = None) -> str:
    return json.dumps(model_to_dict(model, spec), sort_keys=True)


def loads_model(text: str):
    return model_from_dict(json.loads(text))
