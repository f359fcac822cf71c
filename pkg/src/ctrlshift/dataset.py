"""Multi-source datasets: container, CSV I/O, per-source splits, synthetic generator."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """Features ``X`` (n x d), outcome ``y`` and a source id per row.

    Source ids are opaque strings. ``sources`` lists them in lexicographic
    order; every ordering decision in the package follows that order.
    """

    features: np.ndarray
    outcome: np.ndarray
    source: np.ndarray
    feature_names: tuple[str, ...] = ()
    info: Mapping = field(default_factory=dict)

    def __post_init__(self):
        X = np.array(self.features, dtype=float, copy=True)
        y = np.array(self.outcome, dtype=float, copy=True).reshape(-1)
        src = np.array([str(s) for s in np.asarray(self.source).reshape(-1)], dtype=object)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise DatasetError(f"features must be a non-empty 2-d array, got shape {X.shape}")
        n = X.shape[0]
        if y.shape[0] != n or src.shape[0] != n:
            raise DatasetError(
                f"length mismatch: {n} feature rows, {y.shape[0]} outcomes, {src.shape[0]} source ids"
            )
        if not np.all(np.isfinite(X)):
            raise DatasetError("features contain non-finite values")
        if not np.all(np.isfinite(y)):
            raise DatasetError("outcome contains non-finite values")
        names = tuple(self.feature_names) or tuple(f"x{j}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise DatasetError("feature_names length does not match feature dimension")
        for a in (X, y, src):
            a.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "feature_names", names)
        index: dict[str, list[int]] = {}
        for i, s in enumerate(src):
            index.setdefault(s, []).append(i)
        object.__setattr__(
            self, "_index", {s: np.array(index[s], dtype=np.int64) for s in sorted(index)}
        )

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def sources(self) -> list[str]:
        return list(self._index)

    @property
    def source_index(self) -> dict[str, np.ndarray]:
        return dict(self._index)

    def rows(self, g: str) -> np.ndarray:
        try:
            return self._index[g]
        except KeyError:
            raise KeyError(f"unknown source {g!r}") from None

    def sizes(self) -> dict[str, int]:
        return {s: len(ix) for s, ix in self._index.items()}

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            self.features[rows], self.outcome[rows], self.source[rows], self.feature_names
        )

    def equals(self, other: "Dataset") -> bool:
        return (
            self.feature_names == other.feature_names
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.outcome, other.outcome)
            and np.array_equal(self.source, other.source)
        )


# ---------------------------------------------------------------- CSV


def load_csv(path, source_column: str = "source", outcome_column: str = "y") -> Dataset:
    """Read a headered CSV; every column other than source/outcome is a feature."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError(f"{path}: empty file")
        header = [h.strip() for h in header]
        for col in (source_column, outcome_column):
            if col not in header:
                raise DatasetError(f"{path}: missing column {col!r}")
        s_col = header.index(source_column)
        y_col = header.index(outcome_column)
        f_cols = [j for j in range(len(header)) if j not in (s_col, y_col)]
        if not f_cols:
            raise DatasetError(f"{path}: no feature columns")
        X, y, src = [], [], []
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(
                    f"{path}: row {row_no} has {len(row)} cells, expected {len(header)}"
                )
            vals = []
            for j in [y_col] + f_cols:
                try:
                    v = float(row[j])
                except ValueError:
                    raise DatasetError(
                        f"{path}: row {row_no}, column {header[j]!r}: cannot parse {row[j]!r}"
                    ) from None
                if not math.isfinite(v):
                    raise DatasetError(
                        f"{path}: row {row_no}, column {header[j]!r}: non-finite value {row[j]!r}"
                    )
                vals.append(v)
            y.append(vals[0])
            X.append(vals[1:])
            src.append(row[s_col])
    if not y:
        raise DatasetError(f"{path}: no data rows")
    return Dataset(np.array(X), np.array(y), np.array(src, dtype=object),
                   tuple(header[j] for j in f_cols))


def write_csv(ds: Dataset, path, source_column: str = "source", outcome_column: str = "y") -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([source_column, outcome_column, *ds.feature_names])
        for i in range(ds.n):
            w.writerow([ds.source[i], repr(float(ds.outcome[i])),
                        *(repr(float(v)) for v in ds.features[i])])


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitPair:
    train: np.ndarray
    validation: np.ndarray


def train_count(n_g: int, train_fraction: float) -> int:
    # small slack keeps 0.7 * 10 from rounding up to 8
    return max(1, min(n_g - 1, math.ceil(train_fraction * n_g - 1e-9)))


def stratified_split(ds: Dataset, train_fraction: float, seed: int) -> SplitPair:
    """Random per-source split with at least one row on each side."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train, val = [], []
    for g, rows in ds.source_index.items():
        if len(rows) < 2:
            raise DatasetError(f"source {g!r} has {len(rows)} row(s); splitting needs at least 2")
        perm = rows[rng.permutation(len(rows))]
        k = train_count(len(rows), train_fraction)
        train.append(perm[:k])
        val.append(perm[k:])
    return SplitPair(np.sort(np.concatenate(train)), np.sort(np.concatenate(val)))


def small_sources(ds: Dataset) -> set[str]:
    """Bottom third of sources by row count (ties by id)."""
    ranked = sorted(ds.sizes().items(), key=lambda kv: (kv[1], kv[0]))
    return {g for g, _ in ranked[: len(ranked) // 3]}


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SynthConfig:
    n_individuals: int = 40_000
    n_sources: int = 50
    feature_dim: int = 20
    global_weight: float = 0.3
    local_weight: float = 0.7
    min_source_size: int = 40
    max_source_size: int = 2000
    cluster_size_range: tuple[int, int] = (2, 7)
    pareto_shape: float = 1.5
    clustered_fraction: float = 0.5
    feature_shift_scale: float = 0.3
    weight_shift_scale: float = 0.1
    signal_scale: float = 4.0
    # explicit overrides (used to plant known structure in tests)
    source_sizes: tuple[int, ...] | None = None
    planted_clusters: tuple[tuple[int, ...], ...] | None = None

    def validate(self) -> None:
        def bad(name, why):
            raise ValueError(f"SynthConfig.{name}: {why}")

        for name in ("n_individuals", "n_sources", "feature_dim"):
            if getattr(self, name) < 1:
                bad(name, "must be >= 1")
        for name in ("global_weight", "local_weight"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                bad(name, "must lie in [0, 1]")
        if abs(self.global_weight + self.local_weight - 1.0) > 1e-9:
            bad("local_weight", "global_weight + local_weight must equal 1")
        if self.min_source_size < 2:
            bad("min_source_size", "must be >= 2")
        if self.max_source_size < self.min_source_size:
            bad("max_source_size", "must be >= min_source_size")
        lo, hi = self.cluster_size_range
        if not 2 <= lo <= hi:
            bad("cluster_size_range", "need 2 <= low <= high")
        if self.pareto_shape <= 0:
            bad("pareto_shape", "must be > 0")
        if not 0.0 <= self.clustered_fraction <= 1.0:
            bad("clustered_fraction", "must lie in [0, 1]")
        if self.source_sizes is not None:
            if len(self.source_sizes) != self.n_sources:
                bad("source_sizes", "length must equal n_sources")
            if sum(self.source_sizes) != self.n_individuals:
                bad("source_sizes", "must sum to n_individuals")
            if min(self.source_sizes) < 2:
                bad("source_sizes", "every source needs >= 2 rows")
        else:
            if self.n_sources * self.min_source_size > self.n_individuals:
                bad("n_individuals", "n_sources * min_source_size exceeds n_individuals")
            if self.n_sources * self.max_source_size < self.n_individuals:
                bad("n_individuals", "n_sources * max_source_size is below n_individuals")
        if self.planted_clusters is not None:
            seen = [m for c in self.planted_clusters for m in c]
            if len(seen) != len(set(seen)) or any(not 0 <= m < self.n_sources for m in seen):
                bad("planted_clusters", "clusters must be disjoint source indices")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"SynthConfig: unknown field(s) {sorted(unknown)}")
        if "cluster_size_range" in d:
            d["cluster_size_range"] = tuple(d["cluster_size_range"])
        if d.get("source_sizes") is not None:
            d["source_sizes"] = tuple(int(v) for v in d["source_sizes"])
        if d.get("planted_clusters") is not None:
            d["planted_clusters"] = tuple(tuple(int(v) for v in c) for c in d["planted_clusters"])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def _source_sizes(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Pareto draws, rescaled and clipped so they sum to n_individuals."""
    lo, hi, N = cfg.min_source_size, cfg.max_source_size, cfg.n_individuals
    raw = lo * (1.0 + rng.pareto(cfg.pareto_shape, cfg.n_sources))

    def total(s):
        return np.clip(s * raw, lo, hi).sum()

    a, b = 0.0, 1.0
    while total(b) < N:
        b *= 2.0
    for _ in range(200):
        mid = 0.5 * (a + b)
        if total(mid) < N:
            a = mid
        else:
            b = mid
    target = np.clip(b * raw, lo, hi)
    sizes = np.floor(target).astype(np.int64)
    short = N - int(sizes.sum())
    # largest-remainder rounding, never leaving [lo, hi]
    order = np.argsort(-(target - sizes), kind="stable")
    i = 0
    while short > 0:
        j = order[i % len(order)]
        if sizes[j] < hi:
            sizes[j] += 1
            short -= 1
        i += 1
    while short < 0:
        j = order[::-1][i % len(order)]
        if sizes[j] > lo:
            sizes[j] -= 1
            short += 1
        i += 1
    return sizes


def _latent_clusters(cfg: SynthConfig, rng: np.random.Generator) -> list[list[int]]:
    if cfg.planted_clusters is not None:
        return [list(c) for c in cfg.planted_clusters]
    lo, hi = cfg.cluster_size_range
    pool = list(rng.permutation(cfg.n_sources)[: int(round(cfg.clustered_fraction * cfg.n_sources))])
    clusters = []
    while len(pool) >= lo:
        k = int(rng.integers(lo, min(hi, len(pool)) + 1))
        clusters.append(sorted(int(m) for m in pool[:k]))
        pool = pool[k:]
    return clusters


def source_id(m: int, n_sources: int) -> str:
    return f"s{m:0{len(str(n_sources - 1))}d}"


def generate_synthetic(cfg: SynthConfig, seed: int) -> Dataset:
    """Binary-outcome multi-source data with latent source clusters.

    Ground truth (cluster membership, weight vectors, sizes) is attached as
    ``dataset.info``.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    M, d = cfg.n_sources, cfg.feature_dim
    sizes = (np.array(cfg.source_sizes, dtype=np.int64) if cfg.source_sizes is not None
             else _source_sizes(cfg, rng))
    clusters = _latent_clusters(cfg, rng)
    scale = cfg.signal_scale / math.sqrt(d)

    w_global = rng.standard_normal(d)
    w_local = np.empty((M, d))
    bases = []
    clustered = set()
    for c in clusters:
        base = rng.standard_normal(d)
        bases.append(base)
        for m in c:
            w_local[m] = base + cfg.weight_shift_scale * rng.standard_normal(d)
            clustered.add(m)
    mu = np.zeros((M, d))
    sd = np.ones((M, d))
    for m in range(M):
        if m in clustered:
            continue
        w_local[m] = rng.standard_normal(d)
        mu[m] = cfg.feature_shift_scale * rng.standard_normal(d)
        sd[m] = np.exp(cfg.feature_shift_scale * rng.standard_normal(d))

    ids = [source_id(m, M) for m in range(M)]
    X_parts, y_parts, s_parts = [], [], []
    for m in range(M):
        Xm = mu[m] + sd[m] * rng.standard_normal((int(sizes[m]), d))
        logit = scale * (cfg.global_weight * Xm @ w_global + cfg.local_weight * Xm @ w_local[m])
        p = 1.0 / (1.0 + np.exp(-logit))
        X_parts.append(Xm)
        y_parts.append((rng.random(len(p)) < p).astype(float))
        s_parts.append(np.full(len(p), ids[m], dtype=object))

    info = {
        "seed": int(seed),
        "config": cfg.to_dict(),
        "clusters": [[ids[m] for m in c] for c in clusters],
        "sizes": {ids[m]: int(sizes[m]) for m in range(M)},
        "cluster_bases": [b.tolist() for b in bases],
        "local_weights": {ids[m]: w_local[m].tolist() for m in range(M)},
        "global_weights": w_global.tolist(),
    }
    return Dataset(np.vstack(X_parts), np.concatenate(y_parts), np.concatenate(s_parts), (), info)


def write_synthetic(ds: Dataset, csv_path, sidecar_path=None) -> None:
    """CSV plus a JSON sidecar with config, seed and the latent clusters."""
    csv_path = Path(csv_path)
    write_csv(ds, csv_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else csv_path.with_suffix(".truth.json")
    keep = {k: ds.info[k] for k in ("config", "seed", "clusters", "sizes") if k in ds.info}
    sidecar_path.write_text(json.dumps(keep, indent=2, sort_keys=True) + "\n")
