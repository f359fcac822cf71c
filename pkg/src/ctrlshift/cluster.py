"""Cluster discovery for CTRL.

Three stages per target source ``g``:

1. ``solve_subset`` picks, among a handful of candidate sources, the subset
   whose size-weighted residual-model average best reproduces ``g``'s
   held-out residuals (exhaustive enumeration; ``g`` always included).
2. ``stability_weights`` repeats that on many random 80/20 splits with random
   candidate sets and records how often each source is picked.
3. ``select_cluster`` grows the cluster in order of those weights, scores
   each size on fresh splits, and keeps the smallest size within one
   standard error of the best.

Splits, base models and per-source residual models depend only on
(seed, stage, iteration), so they are shared by every target handled in the
same call and a batched run gives exactly the single-target answers.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from functools import partial
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._util import derive_seed, parallel_map, rng_for
from .dataset import Dataset, stratified_split
from .learners import LearnerSpec
from .pipeline import base_design, fit_base, fit_residual, residuals

MAX_CANDIDATES = 20
TIE_RTOL = 1e-12
SPLIT_FRACTION = 0.8


# ---------------------------------------------------------------- subset problem


@dataclass(frozen=True, eq=False)
class SubsetInstance:
    target: str
    candidates: tuple[str, ...]
    target_residuals: np.ndarray  # (v,)  actual residuals of g's validation rows
    residual_predictions: np.ndarray  # (v, c)  column j = residual model of candidates[j]
    sizes: np.ndarray  # (c,)  training rows behind each residual model

    def __post_init__(self):
        R = np.asarray(self.target_residuals, dtype=float).reshape(-1)
        r = np.asarray(self.residual_predictions, dtype=float)
        n = np.asarray(self.sizes, dtype=float).reshape(-1)
        cands = tuple(self.candidates)
        if r.ndim == 1:
            r = r.reshape(-1, 1)
        if R.shape[0] < 1:
            raise ValueError("need at least one validation residual")
        if r.shape != (R.shape[0], len(cands)) or n.shape[0] != len(cands):
            raise ValueError("residual_predictions must be (v, |candidates|), sizes (|candidates|,)")
        if np.any(n <= 0):
            raise ValueError("sizes must be strictly positive")
        if self.target not in cands:
            raise ValueError(f"target {self.target!r} missing from candidates")
        if len(set(cands)) != len(cands):
            raise ValueError("duplicate candidate ids")
        object.__setattr__(self, "target_residuals", R)
        object.__setattr__(self, "residual_predictions", r)
        object.__setattr__(self, "sizes", n)
        object.__setattr__(self, "candidates", cands)

    @property
    def target_pos(self) -> int:
        return self.candidates.index(self.target)


def subset_objective(inst: SubsetInstance, z) -> float:
    """Squared error of the size-weighted average of the selected residual models."""
    z = np.asarray(z).astype(bool).reshape(-1)
    if z.shape[0] != len(inst.candidates):
        raise ValueError("z must have one entry per candidate")
    if not z[inst.target_pos]:
        raise ValueError("the target source must be selected")
    wn = inst.sizes * z
    pred = inst.residual_predictions @ wn / wn.sum()
    return float(np.sum((inst.target_residuals - pred) ** 2))


def _tie_key(inst: SubsetInstance, z_row) -> tuple:
    ids = sorted(c for c, on in zip(inst.candidates, z_row) if on)
    return (len(ids), tuple(ids))


def solve_subset(inst: SubsetInstance, max_candidates: int = MAX_CANDIDATES) -> np.ndarray:
    """Exact minimizer of ``subset_objective`` over all subsets containing the target.

    Objective values within a relative 1e-12 of the minimum count as ties;
    ties go to the smaller subset, then the lexicographically smaller id set.
    """
    c = len(inst.candidates)
    if c > max_candidates:
        raise ValueError(f"{c} candidates exceeds the enumeration guard of {max_candidates}")
    t = inst.target_pos
    others = [j for j in range(c) if j != t]
    n_sub = 1 << len(others)
    R, r, n = inst.target_residuals, inst.residual_predictions, inst.sizes
    rn = r * n
    objs = np.empty(n_sub)
    bits = np.arange(len(others))
    for start in range(0, n_sub, 4096):
        masks = np.arange(start, min(start + 4096, n_sub))
        Z = np.zeros((len(masks), c))
        Z[:, t] = 1.0
        if others:
            Z[:, others] = (masks[:, None] >> bits) & 1
        pred = (rn @ Z.T) / (Z @ n)
        objs[masks] = np.sum((R[:, None] - pred) ** 2, axis=0)
    best = objs.min()
    tol = TIE_RTOL * (best + TIE_RTOL * float(R @ R))
    tied = np.flatnonzero(objs <= best + tol)

    def z_of(mask):
        z = np.zeros(c, dtype=bool)
        z[t] = True
        for b, j in enumerate(others):
            if (mask >> b) & 1:
                z[j] = True
        return z

    return min((z_of(int(m)) for m in tied), key=lambda z: _tie_key(inst, z))


# ---------------------------------------------------------------- 1-SE rule


def one_se_rule(means: Sequence[float], ses: Sequence[float]) -> tuple[int, float, int]:
    """(k_min, cutoff, k_star), with k counted from 1."""
    means = np.asarray(means, dtype=float)
    ses = np.asarray(ses, dtype=float)
    if means.ndim != 1 or means.shape[0] < 1 or ses.shape != means.shape:
        raise ValueError("means and ses must be equal-length, non-empty vectors")
    if not (np.all(np.isfinite(means)) and np.all(np.isfinite(ses))):
        raise ValueError("non-finite MSE curve")
    i_min = int(np.argmin(means))
    cutoff = float(means[i_min] + ses[i_min])
    k_star = int(np.flatnonzero(means <= cutoff)[0]) + 1
    return i_min + 1, cutoff, k_star


# ---------------------------------------------------------------- reports


@dataclass(frozen=True)
class StabilityWeights:
    target: str
    weights: dict[str, float]
    counts: dict[str, tuple[int, int]]  # source -> (times selected, times a candidate)
    iters: int = 0

    def ranking(self) -> list[str]:
        """Target first, then descending weight, more selections, lexicographic id."""
        rest = [m for m in self.weights if m != self.target]
        rest.sort(key=lambda m: (-self.weights[m], -self.counts[m][0], m))
        return [self.target] + rest

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "iters": self.iters,
            "weights": dict(sorted(self.weights.items())),
            "counts": {m: list(v) for m, v in sorted(self.counts.items())},
        }


@dataclass(frozen=True)
class ClusterReport:
    target: str
    ranked: list[str]
    means: list[float]
    ses: list[float]
    k_min: int
    cutoff: float
    k_star: int
    cluster: list[str]
    iters: int = 0

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "iters": self.iters,
            "ranked": list(self.ranked),
            "mse_mean": list(self.means),
            "mse_se": list(self.ses),
            "k_min": self.k_min,
            "cutoff": self.cutoff,
            "k_star": self.k_star,
            "cluster": list(self.cluster),
        }

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "added_source", "mse_mean", "mse_se", "within_cutoff"])
        for k, (m, s) in enumerate(zip(self.means, self.ses), start=1):
            w.writerow([k, self.ranked[k - 1], repr(m), repr(s), int(m <= self.cutoff)])
        return buf.getvalue()


# ---------------------------------------------------------------- stability selection


def sample_candidates(universe: Sequence[str], g: str, candidate_count: int, seed: int,
                      it: int) -> list[str]:
    """``g`` plus ``candidate_count - 1`` other sources drawn without replacement."""
    others = [m for m in universe if m != g]
    k = min(candidate_count - 1, len(others))
    pick = rng_for(seed, "candidates", g, it).choice(len(others), size=k, replace=False)
    return sorted([g] + [others[i] for i in pick])


def _stability_iteration(it: int, ds: Dataset, targets: Sequence[str], base_spec: LearnerSpec,
                         resid_spec: LearnerSpec, candidate_count: int, seed: int):
    universe = tuple(ds.sources)
    split = stratified_split(ds, SPLIT_FRACTION, derive_seed(seed, "stability-split", it))
    stage_seed = derive_seed(seed, "stability", it)
    base = fit_base(ds, split.train, base_spec, stage_seed, universe)
    is_train = np.zeros(ds.n, dtype=bool)
    is_train[split.train] = True
    resid = np.zeros(ds.n)
    resid[split.train] = residuals(base, ds, split.train, universe)

    cand = {g: sample_candidates(universe, g, candidate_count, seed, it) for g in targets}
    models, n_train = {}, {}
    for m in sorted(set().union(*cand.values())):
        rows = ds.rows(m)[is_train[ds.rows(m)]]
        models[m] = fit_residual(ds, rows, resid[rows], resid_spec, stage_seed, m)
        n_train[m] = len(rows)

    out = {}
    for g in targets:
        val = ds.rows(g)[~is_train[ds.rows(g)]]
        R = ds.outcome[val] - base.predict(base_design(ds, val, universe))
        Xv = ds.features[val]
        r = np.column_stack([models[m].predict(Xv) for m in cand[g]])
        inst = SubsetInstance(g, tuple(cand[g]), R, r, np.array([n_train[m] for m in cand[g]]))
        z = solve_subset(inst)
        out[g] = (cand[g], [m for m, on in zip(cand[g], z) if on])
    return out


def stability_weights_many(ds: Dataset, targets: Iterable[str], base_spec: LearnerSpec,
                           resid_spec: LearnerSpec, iters: int = 250, candidate_count: int = 6,
                           seed: int = 0, workers: int = 1) -> dict[str, StabilityWeights]:
    """Selection frequencies for several targets from one shared set of splits.

    ``w[m]`` is the fraction of iterations with ``m`` among the candidates in
    which it was selected (0 if it never was a candidate); ``w[g] = 1``.
    """
    targets = list(targets)
    universe = ds.sources
    for g in targets:
        if g not in universe:
            raise KeyError(f"unknown source {g!r}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not 1 <= candidate_count <= len(universe):
        raise ValueError(f"candidate_count must lie in [1, {len(universe)}]")
    fn = partial(_stability_iteration, ds=ds, targets=targets, base_spec=base_spec,
                 resid_spec=resid_spec, candidate_count=candidate_count, seed=seed)
    per_iter = parallel_map(fn, range(iters), workers)

    result = {}
    for g in targets:
        sel = dict.fromkeys(universe, 0)
        cnt = dict.fromkeys(universe, 0)
        for res in per_iter:
            cands, chosen = res[g]
            for m in cands:
                cnt[m] += 1
            for m in chosen:
                sel[m] += 1
        w = {m: (sel[m] / cnt[m] if cnt[m] else 0.0) for m in universe}
        w[g] = 1.0
        result[g] = StabilityWeights(g, w, {m: (sel[m], cnt[m]) for m in universe}, iters)
    return result


def stability_weights(ds: Dataset, g: str, base_spec: LearnerSpec, resid_spec: LearnerSpec,
                      iters: int = 250, candidate_count: int = 6, seed: int = 0,
                      workers: int = 1) -> StabilityWeights:
    return stability_weights_many(ds, [g], base_spec, resid_spec, iters, candidate_count,
                                  seed, workers)[g]


# ---------------------------------------------------------------- cluster size selection


def _select_iteration(it: int, ds: Dataset, ranked: Mapping[str, Sequence[str]],
                      base_spec: LearnerSpec, resid_spec: LearnerSpec, seed: int):
    universe = tuple(ds.sources)
    split = stratified_split(ds, SPLIT_FRACTION, derive_seed(seed, "select-split", it))
    stage_seed = derive_seed(seed, "select", it)
    base = fit_base(ds, split.train, base_spec, stage_seed, universe)
    is_train = np.zeros(ds.n, dtype=bool)
    is_train[split.train] = True
    resid = np.zeros(ds.n)
    resid[split.train] = residuals(base, ds, split.train, universe)

    out = {}
    for g, order in ranked.items():
        val = ds.rows(g)[~is_train[ds.rows(g)]]
        R = ds.outcome[val] - base.predict(base_design(ds, val, universe))
        Xv = ds.features[val]
        mses = np.empty(len(order))
        for k in range(1, len(order) + 1):
            rows = np.sort(np.concatenate([ds.rows(m) for m in order[:k]]))
            rows = rows[is_train[rows]]
            model = fit_residual(ds, rows, resid[rows], resid_spec, stage_seed, f"{g}|{k}")
            mses[k - 1] = np.mean((R - model.predict(Xv)) ** 2)
        out[g] = mses
    return out


def select_clusters_many(ds: Dataset, weights: Mapping[str, StabilityWeights],
                         base_spec: LearnerSpec, resid_spec: LearnerSpec, iters: int = 250,
                         k_max: int = 10, seed: int = 0,
                         workers: int = 1) -> dict[str, ClusterReport]:
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    universe = ds.sources
    ranked = {}
    for g, w in weights.items():
        missing = set(universe) - set(w.weights)
        if missing:
            raise ValueError(f"weights for {g!r} miss sources {sorted(missing)}")
        ranked[g] = w.ranking()[: min(k_max, len(universe))]
    fn = partial(_select_iteration, ds=ds, ranked=ranked, base_spec=base_spec,
                 resid_spec=resid_spec, seed=seed)
    per_iter = parallel_map(fn, range(iters), workers)

    reports = {}
    for g, order in ranked.items():
        curves = np.vstack([res[g] for res in per_iter])
        means = curves.mean(axis=0)
        ses = (curves.std(axis=0, ddof=1) / math.sqrt(iters) if iters > 1
               else np.zeros(len(order)))
        k_min, cutoff, k_star = one_se_rule(means, ses)
        reports[g] = ClusterReport(g, list(order), means.tolist(), ses.tolist(), k_min, cutoff,
                                   k_star, sorted(order[:k_star]), iters)
    return reports


def select_cluster(ds: Dataset, g: str, w: StabilityWeights, base_spec: LearnerSpec,
                   resid_spec: LearnerSpec, iters: int = 250, k_max: int = 10, seed: int = 0,
                   workers: int = 1) -> ClusterReport:
    return select_clusters_many(ds, {g: w}, base_spec, resid_spec, iters, k_max, seed,
                                workers)[g]


@dataclass
class ClusterSearch:
    """Settings for the full two-stage search; ``run`` returns weights and reports."""

    base_spec: LearnerSpec
    resid_spec: LearnerSpec
    iters: int = 250
    select_iters: int | None = None
    candidate_count: int = 6
    k_max: int = 10
    seed: int = 0
    workers: int = 1
    weights: dict = field(default_factory=dict, init=False)
    reports: dict = field(default_factory=dict, init=False)

    def run(self, ds: Dataset, targets: Iterable[str] | None = None):
        targets = list(ds.sources if targets is None else targets)
        cc = min(self.candidate_count, len(ds.sources))
        self.weights = stability_weights_many(ds, targets, self.base_spec, self.resid_spec,
                                              self.iters, cc, self.seed, self.workers)
        self.reports = select_clusters_many(ds, self.weights, self.base_spec, self.resid_spec,
                                            self.select_iters or self.iters, self.k_max,
                                            self.seed, self.workers)
        return self.weights, self.reports

    def clusters(self) -> dict[str, tuple[str, ...]]:
        return {g: tuple(r.cluster) for g, r in self.reports.items()}


def dumps_reports(weights: Mapping[str, StabilityWeights],
                  reports: Mapping[str, ClusterReport]) -> str:
    doc = {g: {"stability": weights[g].to_dict(), "cluster": reports[g].to_dict()}
           for g in sorted(reports)}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"

