"""Re-weighting baselines: equal-mass-per-source (RWG) and Just-Train-Twice (JTT)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .learners import LearnerSpec
from .pipeline import Predictor, predict_own, train_global


@dataclass(frozen=True)
class JttConfig:
    """Top ``error_fraction`` of rows by squared residual get weight ``upweight``."""

    error_fraction: float = 0.2
    upweight: float = 5.0

    def __post_init__(self):
        if not 0.0 < self.error_fraction <= 1.0:
            raise ValueError("error_fraction must lie in (0, 1]")
        if self.upweight < 1.0:
            raise ValueError("upweight must be >= 1")


def rwg_weights(ds: Dataset) -> np.ndarray:
    """Row weights ``n / (|M| * n_g)``: every source carries mass ``n / |M|``."""
    sizes = ds.sizes()
    M = len(sizes)
    w = np.empty(ds.n)
    for g, rows in ds.source_index.items():
        w[rows] = ds.n / (M * sizes[g])
    return w


def train_rwg(ds: Dataset, spec: LearnerSpec, seed: int = 0) -> Predictor:
    return train_global(ds, spec, seed, weights=rwg_weights(ds), family="rwg")


def jtt_error_set(sq_resid: np.ndarray, error_fraction: float) -> np.ndarray:
    """Indices of the ``ceil(tau * n)`` largest squared residuals (ties by row index)."""
    k = math.ceil(error_fraction * len(sq_resid) - 1e-9)
    order = np.argsort(-sq_resid, kind="stable")
    return np.sort(order[:k])


def train_jtt(ds: Dataset, spec: LearnerSpec, cfg: JttConfig = JttConfig(),
              seed: int = 0) -> Predictor:
    if cfg.error_fraction * ds.n < 1:
        raise ValueError("error_fraction * n must be >= 1")
    first = train_global(ds, spec, seed)
    sq = (ds.outcome - predict_own(first, ds)) ** 2
    w = np.ones(ds.n)
    w[jtt_error_set(sq, cfg.error_fraction)] = cfg.upweight
    p = train_global(ds, spec, seed, weights=w, family="jtt")
    p.manifest["jtt"] = {"error_fraction": cfg.error_fraction, "upweight": cfg.upweight}
    return p
