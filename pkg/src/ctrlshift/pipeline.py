"""Global, local, TRL and CTRL predictors built from the base learners.

The pooled base model sees the features plus a one-hot source indicator
(omitted when there is a single source). Residual models see features only.
Every internal fit draws its seed from ``derive_seed(seed, stage, unit)`` so
results do not depend on training order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import learners
from ._util import derive_seed
from .dataset import Dataset
from .learners import LearnerSpec

FAMILIES = ("global", "local", "trl", "ctrl", "rwg", "jtt")
GLOBAL_SHAPED = ("global", "rwg", "jtt")

PREDICTOR_FORMAT = "ctrlshift.predictor"
PREDICTOR_VERSION = 1


class UnknownSourceError(KeyError):
    pass


def indicator_block(universe, codes: np.ndarray) -> np.ndarray:
    """One-hot rows for integer source codes; empty block for a single source."""
    k = len(universe) if len(universe) >= 2 else 0
    out = np.zeros((len(codes), k))
    if k:
        out[np.arange(len(codes)), codes] = 1.0
    return out


def source_codes(universe, source) -> np.ndarray:
    pos = {g: i for i, g in enumerate(universe)}
    try:
        return np.array([pos[s] for s in source], dtype=np.int64)
    except KeyError as e:
        raise UnknownSourceError(f"source {e.args[0]!r} not in the training universe") from None


def base_design(ds: Dataset, rows, universe) -> np.ndarray:
    """Features of ``rows`` with each row's own source indicator appended."""
    rows = np.asarray(rows, dtype=np.int64)
    codes = source_codes(universe, ds.source[rows])
    return np.hstack([ds.features[rows], indicator_block(universe, codes)])


def design_at(X, g: str, universe) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if g not in universe:
        raise UnknownSourceError(f"source {g!r} not in the training universe")
    codes = np.full(X.shape[0], list(universe).index(g), dtype=np.int64)
    return np.hstack([X, indicator_block(universe, codes)])


def fit_base(ds: Dataset, rows, spec: LearnerSpec, seed: int, universe, weights=None):
    rows = np.asarray(rows, dtype=np.int64)
    return learners.fit(spec.with_seed(derive_seed(seed, "base")),
                        base_design(ds, rows, universe), ds.outcome[rows], weights)


def residuals(base, ds: Dataset, rows, universe) -> np.ndarray:
    """``Y_i - base(X_i, M_i)`` for each row, against the row's own source."""
    rows = np.asarray(rows, dtype=np.int64)
    return ds.outcome[rows] - base.predict(base_design(ds, rows, universe))


@dataclass(frozen=True, eq=False)
class Predictor:
    """A fitted model answering "prediction for x if it belonged to source g".

    ``per_source`` holds the local models (family local) or residual models
    keyed by target source (trl/ctrl). ``clusters`` is set for ctrl.
    """

    family: str
    universe: tuple[str, ...]
    n_features: int
    base: object = None
    per_source: Mapping[str, object] = field(default_factory=dict)
    clusters: Mapping[str, tuple[str, ...]] | None = None
    manifest: Mapping = field(default_factory=dict)

    def predict_at(self, X, g: str) -> np.ndarray:
        return predict_at(self, X, g)


def predict_at(p: Predictor, X, g: str) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, p.n_features) if X.size else X.reshape(0, p.n_features)
    if X.shape[1] != p.n_features:
        raise ValueError(f"predictor expects {p.n_features} features, got {X.shape[1]}")
    if g not in p.universe:
        raise UnknownSourceError(f"source {g!r} not in the training universe")
    if X.shape[0] == 0:
        return np.zeros(0)
    if p.family == "local":
        return p.per_source[g].predict(X)
    out = p.base.predict(design_at(X, g, p.universe))
    if p.family in ("trl", "ctrl"):
        out = out + p.per_source[g].predict(X)
    return out


def predict_own(p: Predictor, ds: Dataset) -> np.ndarray:
    """Prediction for every row at its own source."""
    out = np.empty(ds.n)
    for g, rows in ds.source_index.items():
        out[rows] = predict_at(p, ds.features[rows], g)
    return out


def _manifest(seed, **specs):
    return {"seed": int(seed), "specs": {k: v.to_dict() for k, v in specs.items()}}


def train_global(ds: Dataset, spec: LearnerSpec, seed: int = 0, weights=None,
                 family: str = "global") -> Predictor:
    universe = tuple(ds.sources)
    base = fit_base(ds, np.arange(ds.n), spec, seed, universe, weights)
    return Predictor(family, universe, ds.d, base=base, manifest=_manifest(seed, base=spec))


def train_local(ds: Dataset, spec: LearnerSpec, seed: int = 0) -> Predictor:
    models = {}
    for g, rows in ds.source_index.items():
        if len(rows) < 2:
            raise ValueError(f"source {g!r} has {len(rows)} row(s); local models need >= 2")
        models[g] = learners.fit(spec.with_seed(derive_seed(seed, "local", g)),
                                 ds.features[rows], ds.outcome[rows])
    return Predictor("local", tuple(ds.sources), ds.d, per_source=models,
                     manifest=_manifest(seed, local=spec))


def fit_residual(ds: Dataset, rows, resid, spec: LearnerSpec, seed: int, key: str):
    """Residual model on ``rows`` (``resid`` aligned with ``rows``), seeded by ``key``."""
    return learners.fit(spec.with_seed(derive_seed(seed, "residual", key)),
                        ds.features[rows], resid)


def train_trl(ds: Dataset, base_spec: LearnerSpec, resid_spec: LearnerSpec,
              seed: int = 0) -> Predictor:
    return train_ctrl(ds, base_spec, resid_spec, {g: (g,) for g in ds.sources}, seed,
                      family="trl")


def check_clusters(clusters: Mapping[str, object], universe) -> dict[str, tuple[str, ...]]:
    out = {}
    uni = set(universe)
    for g in universe:
        if g not in clusters:
            raise ValueError(f"no cluster given for source {g!r}")
    for g, members in clusters.items():
        members = tuple(sorted(set(members)))
        if not members:
            raise ValueError(f"cluster for {g!r} is empty")
        if g not in members:
            raise ValueError(f"cluster for {g!r} does not contain {g!r}")
        extra = set(members) - uni
        if extra:
            raise ValueError(f"cluster for {g!r} has unknown sources {sorted(extra)}")
        out[g] = members
    return out


def train_ctrl(ds: Dataset, base_spec: LearnerSpec, resid_spec: LearnerSpec,
               clusters: Mapping[str, object], seed: int = 0, family: str = "ctrl") -> Predictor:
    universe = tuple(ds.sources)
    clusters = check_clusters(clusters, universe)
    for g, rows in ds.source_index.items():
        if len(rows) < 2:
            raise ValueError(f"source {g!r} has {len(rows)} row(s); residual models need >= 2")
    all_rows = np.arange(ds.n)
    base = fit_base(ds, all_rows, base_spec, seed, universe)
    resid = residuals(base, ds, all_rows, universe)
    models = {}
    for g in universe:
        rows = np.sort(np.concatenate([ds.rows(m) for m in clusters[g]]))
        models[g] = fit_residual(ds, rows, resid[rows], resid_spec, seed, g)
    return Predictor(family, universe, ds.d, base=base, per_source=models,
                     clusters=clusters if family == "ctrl" else None,
                     manifest=_manifest(seed, base=base_spec, residual=resid_spec))


# ---------------------------------------------------------------- serialization


def predictor_to_dict(p: Predictor) -> dict:
    return {
        "format": PREDICTOR_FORMAT,
        "version": PREDICTOR_VERSION,
        "family": p.family,
        "universe": list(p.universe),
        "n_features": p.n_features,
        "base": learners.model_to_dict(p.base) if p.base is not None else None,
        "per_source": {g: learners.model_to_dict(m) for g, m in p.per_source.items()},
        "clusters": {g: list(c) for g, c in p.clusters.items()} if p.clusters else None,
        "manifest": dict(p.manifest),
    }


def predictor_from_dict(doc: dict) -> Predictor:
    if doc.get("format") != PREDICTOR_FORMAT or doc.get("version") != PREDICTOR_VERSION:
        raise learners.ModelFormatError("unsupported predictor document")
    return Predictor(
        doc["family"],
        tuple(doc["universe"]),
        int(doc["n_features"]),
        base=learners.model_from_dict(doc["base"]) if doc["base"] is not None else None,
        per_source={g: learners.model_from_dict(m) for g, m in doc["per_source"].items()},
        clusters={g: tuple(c) for g, c in doc["clusters"].items()} if doc["clusters"] else None,
        manifest=doc.get("manifest", {}),
    )
