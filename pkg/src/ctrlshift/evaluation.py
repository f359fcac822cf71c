"""Overall MSE, small-source MSE, rank-weighted average (RWA) and average ranks.

RWA: for every source column g take the top ``ceil(q * n)`` test rows by
predicted outcome at g, keep those actually observed at g, and average the
realized outcome over the kept rows of all sources that keep at least
``min_count`` rows under every compared model.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .dataset import Dataset
from .pipeline import Predictor, predict_at


class EmptyEligibleSetError(ValueError):
    """No source keeps ``min_count`` of its own rows in its top-q set under every model."""


@dataclass(frozen=True, eq=False)
class PredictionMatrix:
    """``pred[i, j]`` is the prediction for test row ``i`` placed at ``sources[j]``."""

    pred: np.ndarray
    sources: tuple[str, ...]
    row_source: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        pred = np.asarray(self.pred, dtype=float)
        src = np.asarray(self.row_source, dtype=object)
        y = np.asarray(self.y, dtype=float)
        if pred.ndim != 2 or pred.shape != (len(y), len(self.sources)) or len(src) != len(y):
            raise ValueError("prediction matrix must be (n_rows, n_sources) matching rows/sources")
        if not np.all(np.isfinite(pred)):
            raise ValueError("prediction matrix has non-finite entries")
        unknown = set(src) - set(self.sources)
        if unknown:
            raise ValueError(f"rows from sources outside the column set: {sorted(unknown)}")
        object.__setattr__(self, "pred", pred)
        object.__setattr__(self, "row_source", src)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "sources", tuple(self.sources))

    def own(self) -> np.ndarray:
        """Each row's prediction at its own source."""
        col = {g: j for j, g in enumerate(self.sources)}
        idx = np.array([col[s] for s in self.row_source], dtype=np.int64)
        return self.pred[np.arange(len(self.y)), idx]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "source", "y", *(f"pred:{g}" for g in self.sources)])
        for i in range(len(self.y)):
            w.writerow([i, self.row_source[i], repr(float(self.y[i])),
                        *(repr(float(v)) for v in self.pred[i])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "PredictionMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        header = rows[0]
        sources = tuple(h[len("pred:"):] for h in header[3:])
        body = rows[1:]
        return cls(np.array([[float(v) for v in r[3:]] for r in body]).reshape(len(body), len(sources)),
                   sources, np.array([r[1] for r in body], dtype=object),
                   np.array([float(r[2]) for r in body]))


def prediction_matrix(p: Predictor, test: Dataset) -> PredictionMatrix:
    pred = np.column_stack([predict_at(p, test.features, g) for g in p.universe])
    return PredictionMatrix(pred, p.universe, test.source, test.outcome)


def mse(pred, y) -> float:
    pred = np.asarray(pred, dtype=float)
    y = np.asarray(y, dtype=float)
    if pred.shape != y.shape:
        raise ValueError("pred and y lengths differ")
    if pred.size == 0:
        raise ValueError("mse of an empty vector")
    return float(np.mean((pred - y) ** 2))


def small_mse(matrix: PredictionMatrix, small) -> float:
    small = set(small)
    if not small:
        raise ValueError("empty small-source set")
    mask = np.array([s in small for s in matrix.row_source], dtype=bool)
    if not mask.any():
        raise ValueError("no test rows belong to the small sources")
    return mse(matrix.own()[mask], matrix.y[mask])


def top_rows(col: np.ndarray, q: float) -> np.ndarray:
    """Indices of the ``ceil(q * n)`` largest entries, ties to the lower index."""
    k = math.ceil(q * len(col) - 1e-9)
    return np.argsort(-col, kind="stable")[:k]


def _eligible(matrix: PredictionMatrix, q: float) -> dict[str, np.ndarray]:
    out = {}
    for j, g in enumerate(matrix.sources):
        top = top_rows(matrix.pred[:, j], q)
        out[g] = np.sort(top[matrix.row_source[top] == g])
    return out


@dataclass(frozen=True)
class RwaResult:
    values: dict[str, float]
    eligible_sources: tuple[str, ...]
    n_rows: dict[str, int]


def rwa_detail(matrices: Mapping[str, PredictionMatrix], q: float = 0.2,
               min_count: int = 10) -> RwaResult:
    if not 0.0 < q <= 1.0:
        raise ValueError("q must lie in (0, 1]")
    if not matrices:
        raise ValueError("no models given")
    first = next(iter(matrices.values()))
    for m in matrices.values():
        if m.sources != first.sources or not np.array_equal(m.row_source, first.row_source):
            raise ValueError("all prediction matrices must share rows and columns")
    elig = {name: _eligible(m, q) for name, m in matrices.items()}
    keep = tuple(g for g in first.sources
                 if all(len(e[g]) >= min_count for e in elig.values()))
    if not keep:
        raise EmptyEligibleSetError(
            f"no source has >= {min_count} own rows in its top {q:g} under every model"
        )
    values, counts = {}, {}
    for name, m in matrices.items():
        rows = np.concatenate([elig[name][g] for g in keep])
        values[name] = float(np.mean(m.y[rows]))
        counts[name] = int(len(rows))
    return RwaResult(values, keep, counts)


def rwa(matrices: Mapping[str, PredictionMatrix], q: float = 0.2, min_count: int = 10) -> dict[str, float]:
    return rwa_detail(matrices, q, min_count).values


DEFAULT_QS = (0.1, 0.2, 0.3, 0.4, 0.5)


def rwa_sweep(matrices: Mapping[str, PredictionMatrix], thresholds: Sequence[float] = DEFAULT_QS,
              min_count: int = 10) -> dict[float, dict[str, float] | None]:
    """RWA per threshold; ``None`` marks a threshold with no eligible source."""
    out = {}
    for q in thresholds:
        try:
            out[q] = rwa(matrices, q, min_count)
        except EmptyEligibleSetError:
            out[q] = None
    return out


def rwa_sweep_csv(sweep: Mapping[float, Mapping[str, float] | None], models: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    qs = list(sweep)
    w.writerow(["model", *(f"top{round(q * 100):d}%" for q in qs)])
    for name in models:
        w.writerow([name, *("absent" if sweep[q] is None else repr(sweep[q][name]) for q in qs)])
    return buf.getvalue()


def average_ranks(table: Mapping[str, Mapping[str, float]],
                  higher_is_better: Mapping[str, bool]) -> dict[str, float]:
    """Mean over metrics of each model's rank (1 = best, ties share the mean rank).

    ``table[model][metric]`` must be complete for every metric in
    ``higher_is_better``.
    """
    models = list(table)
    if len(models) < 2:
        raise ValueError("need at least two models to rank")
    total = np.zeros(len(models))
    for metric, higher in higher_is_better.items():
        try:
            vals = np.array([float(table[m][metric]) for m in models])
        except KeyError as e:
            raise ValueError(f"missing value for metric {metric!r}: {e}") from None
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"non-finite value for metric {metric!r}")
        total += rankdata(-vals if higher else vals, method="average")
    return {m: float(t / len(higher_is_better)) for m, t in zip(models, total)}


METRIC_ORIENTATION = {"mse": False, "small_mse": False, "rwa": True}


@dataclass
class EvalReport:
    """Per-model metrics plus average ranks (within each learner kind and overall)."""

    metrics: dict[str, dict[str, float | None]]
    eligible_sources: list[str]
    small_sources: list[str]
    rwa_sweep: dict[str, dict[str, float] | None]
    ranks: dict[str, dict[str, float]]

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics,
            "eligible_sources": self.eligible_sources,
            "small_sources": self.small_sources,
            "rwa_sweep": self.rwa_sweep,
            "average_ranks": self.ranks,
        }


def model_key(family: str, learner: str) -> str:
    return f"{family}/{learner}"


def evaluate(matrices: Mapping[str, PredictionMatrix], small, q: float = 0.2,
             min_count: int = 10, thresholds: Sequence[float] = DEFAULT_QS) -> EvalReport:
    """Score ``family/learner``-keyed matrices on all three metrics."""
    small = sorted(small)
    metrics = {}
    for name, m in matrices.items():
        metrics[name] = {"mse": mse(m.own(), m.y),
                         "small_mse": small_mse(m, small) if small else None}
    try:
        res = rwa_detail(matrices, q, min_count)
        eligible = list(res.eligible_sources)
        for name in matrices:
            metrics[name]["rwa"] = res.values[name]
    except EmptyEligibleSetError:
        eligible = []
        for name in matrices:
            metrics[name]["rwa"] = None
    sweep = rwa_sweep(matrices, thresholds, min_count)

    groups: dict[str, list[str]] = {}
    for name in matrices:
        groups.setdefault(name.split("/", 1)[-1], []).append(name)
    groups["all"] = list(matrices)
    orient = {k: v for k, v in METRIC_ORIENTATION.items()
              if all(metrics[n][k] is not None for n in matrices)}
    ranks = {}
    for label, names in groups.items():
        if len(names) >= 2 and orient:
            ranks[label] = average_ranks({n: metrics[n] for n in names}, orient)
    return EvalReport(metrics, eligible, small,
                      {f"{q_:g}": v for q_, v in sweep.items()}, ranks)


def table1_csv(report: EvalReport, families: Sequence[str], learner_kinds: Sequence[str]) -> str:
    """Rows = families; column groups = metric x learner kind."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = {"mse": "MSE", "small_mse": "SmallMSE", "rwa": "RWA"}
    w.writerow(["model", *(f"{names[k]}:{lk}" for k in names for lk in learner_kinds)])
    for fam in families:
        row = [fam]
        for k in names:
            for lk in learner_kinds:
                v = report.metrics.get(model_key(fam, lk), {}).get(k)
                row.append("" if v is None else repr(v))
        w.writerow(row)
    return buf.getvalue()
