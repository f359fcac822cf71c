"""Monte Carlo check of the excess-risk formula under random distribution shift.

Setup: the target distribution puts mass 1/K on each of K cells. Cells nest
in |L| leaves (K/|L| cells per leaf); cell k carries a fixed outcome value,
arranged so each leaf has the configured outcome mean and variance. A source
m reweights the cells by i.i.d. positive weights W_k^m (Gamma with mean 1 and
variance sigma_m^2; the target has sigma = 0). Each replicate draws the
weights, samples n_m rows from every source, forms the size-weighted pooled
leaf means over the cluster and records

    E_g = sum_L P_g(L) * (E_g[Y | L] - pooled_L)^2 .

The limit of K * E_g has mean
    (beta' Sigma_W beta + sum_m beta_m^2 K / n_m) * sum_L Var_g(Y | L),
with beta the cluster-restricted size proportions.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.stats import norm

from ._util import derive_seed


@dataclass(frozen=True)
class ShiftSimConfig:
    K: int = 2000
    n_leaves: int = 10
    sizes: tuple[int, ...] = (1000,)  # target first
    shift_var: tuple[float, ...] = (0.0,)  # per source; target must be 0
    leaf_means: tuple[float, ...] | None = None  # default 0 in every leaf
    leaf_vars: tuple[float, ...] | None = None  # default 1 in every leaf
    cluster: tuple[int, ...] = (0,)  # source indices; must contain 0 (the target)
    replicates: int = 500
    seed: int = 0

    def __post_init__(self):
        def bad(name, why):
            raise ValueError(f"ShiftSimConfig.{name}: {why}")

        if self.K < 1 or self.n_leaves < 1:
            bad("K", "K and n_leaves must be >= 1")
        if self.K % self.n_leaves:
            bad("K", f"K={self.K} is not divisible by n_leaves={self.n_leaves}")
        if len(self.sizes) < 1 or any(n < 1 for n in self.sizes):
            bad("sizes", "need at least the target and every size >= 1")
        if len(self.shift_var) != len(self.sizes):
            bad("shift_var", "one entry per source")
        if any(s < 0 for s in self.shift_var):
            bad("shift_var", "variances must be >= 0")
        if self.shift_var[0] != 0:
            bad("shift_var", "the target (index 0) is never shifted")
        for name in ("leaf_means", "leaf_vars"):
            v = getattr(self, name)
            if v is not None and len(v) != self.n_leaves:
                bad(name, "one entry per leaf")
        if self.leaf_vars is not None and any(v < 0 for v in self.leaf_vars):
            bad("leaf_vars", "variances must be >= 0")
        if 0 not in self.cluster:
            bad("cluster", "must contain the target (index 0)")
        if any(not 0 <= m < len(self.sizes) for m in self.cluster):
            bad("cluster", "index out of range")
        if self.replicates < 1:
            bad("replicates", "must be >= 1")

    @property
    def means(self) -> np.ndarray:
        return np.zeros(self.n_leaves) if self.leaf_means is None else np.asarray(self.leaf_means, float)

    @property
    def variances(self) -> np.ndarray:
        return np.ones(self.n_leaves) if self.leaf_vars is None else np.asarray(self.leaf_vars, float)

    @classmethod
    def from_dict(cls, d) -> "ShiftSimConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"ShiftSimConfig: unknown field(s) {sorted(unknown)}")
        for k in ("sizes", "shift_var", "leaf_means", "leaf_vars", "cluster"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


@dataclass(frozen=True)
class ExcessRiskEstimate:
    mean: float  # empirical mean of K * E_g
    se: float  # Monte Carlo standard error of that mean
    theory: float
    relative_gap: float
    shift_mean: float  # empirical mean of the population-level (no sampling noise) part
    shift_theory: float
    replicates: int

    def within(self, n_se: float = 3.0) -> bool:
        return abs(self.mean - self.theory) <= n_se * self.se

    def to_dict(self) -> dict:
        return asdict(self)


def cluster_beta(cluster: Sequence[int], n_star: Sequence[float]) -> np.ndarray:
    """Size proportions renormalized over the cluster, zero elsewhere."""
    n_star = np.asarray(n_star, dtype=float)
    idx = sorted(set(cluster))
    if not idx:
        raise ValueError("empty cluster")
    if np.any(n_star[idx] <= 0):
        raise ValueError("cluster members need positive proportions")
    beta = np.zeros(len(n_star))
    beta[idx] = n_star[idx] / n_star[idx].sum()
    return beta


def theoretical_excess_mean(cfg: ShiftSimConfig) -> float:
    """Limit mean of K * E_g (divide by K for the excess risk itself)."""
    n = np.asarray(cfg.sizes, dtype=float)
    beta = cluster_beta(cfg.cluster, n / n.sum())
    c = cfg.K / n
    sigma_w = np.asarray(cfg.shift_var, dtype=float)  # diagonal Sigma_W
    factor = float(beta @ (sigma_w * beta) + np.sum(beta ** 2 * c))
    return factor * float(cfg.variances.sum())


def theoretical_shift_mean(cfg: ShiftSimConfig) -> float:
    n = np.asarray(cfg.sizes, dtype=float)
    beta = cluster_beta(cfg.cluster, n / n.sum())
    return float(beta @ (np.asarray(cfg.shift_var) * beta)) * float(cfg.variances.sum())


def cell_values(cfg: ShiftSimConfig) -> np.ndarray:
    """(n_leaves, K / n_leaves) outcome values with exact per-leaf mean and variance."""
    per = cfg.K // cfg.n_leaves
    if per == 1:
        base = np.zeros(1)
    else:
        base = norm.ppf((np.arange(per) + 0.5) / per)
        base = (base - base.mean()) / base.std()
    return cfg.means[:, None] + np.sqrt(cfg.variances)[:, None] * base[None, :]


def draw_shift_weights(shift_var: float, K: int, rng: np.random.Generator) -> np.ndarray:
    if shift_var == 0:
        return np.ones(K)
    shape = 1.0 / shift_var
    return rng.gamma(shape, shift_var, size=K)


def _replicate(cfg: ShiftSimConfig, vals: np.ndarray, rng: np.random.Generator):
    L, per = vals.shape
    flat = vals.reshape(-1)
    leaf_of = np.repeat(np.arange(L), per)
    mu = cfg.means
    p_leaf = np.full(L, 1.0 / L)
    members = sorted(set(cfg.cluster))
    est = np.zeros((len(members), L))
    pop = np.zeros((len(members), L))
    have = np.zeros((len(members), L), dtype=bool)
    for a, m in enumerate(members):
        W = draw_shift_weights(cfg.shift_var[m], cfg.K, rng)
        prob = W / W.sum()
        counts = rng.multinomial(cfg.sizes[m], prob)
        n_leaf = np.bincount(leaf_of, weights=counts, minlength=L)
        s_leaf = np.bincount(leaf_of, weights=counts * flat, minlength=L)
        have[a] = n_leaf > 0
        est[a] = np.where(have[a], s_leaf / np.where(have[a], n_leaf, 1), 0.0)
        pop[a] = np.bincount(leaf_of, weights=W * flat, minlength=L) / np.bincount(
            leaf_of, weights=W, minlength=L)
    wn = np.array([cfg.sizes[m] for m in members], dtype=float)[:, None] * have
    tot = wn.sum(axis=0)
    # a leaf nobody sampled falls back to the target's overall mean
    pooled = np.where(tot > 0, (wn * est).sum(axis=0) / np.where(tot > 0, tot, 1),
                      float(p_leaf @ mu))
    size_w = np.array([cfg.sizes[m] for m in members], dtype=float)
    pooled_pop = (size_w[:, None] * pop).sum(axis=0) / size_w.sum()
    excess = float(p_leaf @ (mu - pooled) ** 2)
    shift = float(p_leaf @ (mu - pooled_pop) ** 2)
    return excess, shift


def simulate_excess_risk(cfg: ShiftSimConfig, seed: int | None = None) -> ExcessRiskEstimate:
    seed = cfg.seed if seed is None else seed
    vals = cell_values(cfg)
    ex = np.empty(cfg.replicates)
    sh = np.empty(cfg.replicates)
    for r in range(cfg.replicates):
        rng = np.random.default_rng(derive_seed(seed, "replicate", r))
        ex[r], sh[r] = _replicate(cfg, vals, rng)
    ex *= cfg.K
    sh *= cfg.K
    se = float(ex.std(ddof=1) / math.sqrt(cfg.replicates)) if cfg.replicates > 1 else 0.0
    theory = theoretical_excess_mean(cfg)
    mean = float(ex.mean())
    gap = abs(mean - theory) / theory if theory > 0 else (0.0 if mean == 0 else math.inf)
    return ExcessRiskEstimate(mean, se, theory, gap, float(sh.mean()),
                              theoretical_shift_mean(cfg), cfg.replicates)


SWEEP_COLUMNS = ("name", "K", "n_leaves", "sizes", "shift_var", "cluster", "replicates",
                 "empirical_mean", "mc_se", "theory", "relative_gap", "shift_empirical",
                 "shift_theory", "within_3se")


def sweep_csv(rows: Sequence[tuple[str, ShiftSimConfig, ExcessRiskEstimate]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for name, cfg, est in rows:
        w.writerow([name, cfg.K, cfg.n_leaves, " ".join(map(str, cfg.sizes)),
                    " ".join(map(repr, cfg.shift_var)), " ".join(map(str, cfg.cluster)),
                    cfg.replicates, repr(est.mean), repr(est.se), repr(est.theory),
                    repr(est.relative_gap), repr(est.shift_mean), repr(est.shift_theory),
                    int(est.within())])
    return buf.getvalue()
