"""Run configuration and the end-to-end benchmark (train all families, score, write reports)."""

from __future__ import annotations

import contextlib
import json
import logging
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation
from ._util import derive_seed
from .baselines import JttConfig, train_jtt, train_rwg
from .cluster import ClusterSearch, dumps_reports
from .dataset import Dataset, SynthConfig, generate_synthetic, load_csv, small_sources, stratified_split
from .evaluation import model_key, prediction_matrix
from .learners import LearnerSpec
from .pipeline import FAMILIES, predictor_to_dict, train_ctrl, train_global, train_local, train_trl

log = logging.getLogger("ctrlshift")

DEFAULT_BASE = {
    "ridge": {"kind": "ridge", "ridge_penalty": 1e-6},
    "tree": {"kind": "tree", "max_depth": 3, "min_leaf": 50},
    "forest": {"kind": "forest", "n_trees": 50, "max_depth": 8, "min_leaf": 10},
}
DEFAULT_RESIDUAL = {
    "ridge": {"kind": "ridge", "ridge_penalty": 1.0},
    "tree": {"kind": "tree", "max_depth": 2, "min_leaf": 20},
    "forest": {"kind": "forest", "n_trees": 20, "max_depth": 3, "min_leaf": 5},
}


@dataclass
class CtrlSettings:
    iters: int = 250
    select_iters: int | None = None
    candidate_count: int = 6
    k_max: int = 10


@dataclass
class MetricSettings:
    q: float = 0.2
    thresholds: tuple[float, ...] = evaluation.DEFAULT_QS
    min_count: int = 10


@dataclass
class RunConfig:
    dataset: dict
    families: list[str] = field(default_factory=lambda: list(FAMILIES))
    learners: list[str] = field(default_factory=lambda: ["tree"])
    base_specs: dict = field(default_factory=dict)
    residual_specs: dict = field(default_factory=dict)
    train_fraction: float = 0.5
    ctrl: CtrlSettings = field(default_factory=CtrlSettings)
    jtt: JttConfig = field(default_factory=JttConfig)
    metrics: MetricSettings = field(default_factory=MetricSettings)
    seed: int = 0
    out: str | None = None
    workers: int = 1

    def __post_init__(self):
        if not self.families:
            raise ValueError("RunConfig.families: need at least one model family")
        bad = set(self.families) - set(FAMILIES)
        if bad:
            raise ValueError(f"RunConfig.families: unknown {sorted(bad)}")
        if not self.learners:
            raise ValueError("RunConfig.learners: need at least one learner kind")
        for k in self.learners:
            self.base_spec(k)
            self.residual_spec(k)
        if not 0 < self.train_fraction < 1:
            raise ValueError("RunConfig.train_fraction must lie in (0, 1)")
        if self.ctrl.iters < 1 or self.ctrl.k_max < 1 or self.ctrl.candidate_count < 1:
            raise ValueError("RunConfig.ctrl: iters, k_max and candidate_count must be >= 1")
        if "synthetic" not in self.dataset and "csv" not in self.dataset:
            raise ValueError("RunConfig.dataset needs a 'synthetic' or a 'csv' entry")

    def base_spec(self, kind: str) -> LearnerSpec:
        return LearnerSpec.from_dict({**DEFAULT_BASE.get(kind, {"kind": kind}),
                                      **self.base_specs.get(kind, {})})

    def residual_spec(self, kind: str) -> LearnerSpec:
        return LearnerSpec.from_dict({**DEFAULT_RESIDUAL.get(kind, {"kind": kind}),
                                      **self.residual_specs.get(kind, {})})

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"RunConfig: unknown field(s) {sorted(unknown)}")
        if "ctrl" in d:
            d["ctrl"] = CtrlSettings(**d["ctrl"])
        if "jtt" in d:
            d["jtt"] = JttConfig(**d["jtt"])
        if "metrics" in d:
            m = dict(d["metrics"])
            if "thresholds" in m:
                m["thresholds"] = tuple(m["thresholds"])
            d["metrics"] = MetricSettings(**m)
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def load_dataset(spec: dict, base_dir: Path | None = None) -> Dataset:
    if "synthetic" in spec:
        return generate_synthetic(SynthConfig.from_dict(spec["synthetic"]), int(spec.get("seed", 0)))
    path = Path(spec["csv"])
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    return load_csv(path, spec.get("source_column", "source"), spec.get("outcome_column", "y"))


def train_test(cfg: RunConfig, ds: Dataset) -> tuple[Dataset, Dataset]:
    split = stratified_split(ds, cfg.train_fraction, derive_seed(cfg.seed, "test-split"))
    return ds.subset(split.train), ds.subset(split.validation)


@dataclass
class BenchmarkResult:
    report: evaluation.EvalReport
    matrices: dict
    predictors: dict
    clusters: dict
    cluster_search: dict
    small: list


def cluster_search_for(cfg: RunConfig, kind: str) -> ClusterSearch:
    c = cfg.ctrl
    return ClusterSearch(cfg.base_spec(kind), cfg.residual_spec(kind), iters=c.iters,
                         select_iters=c.select_iters, candidate_count=c.candidate_count,
                         k_max=c.k_max, seed=derive_seed(cfg.seed, "clusters", kind),
                         workers=cfg.workers)


def run_benchmark(cfg: RunConfig, train: Dataset, test: Dataset) -> BenchmarkResult:
    small = sorted(small_sources(train))
    predictors, matrices, clusters, searches = {}, {}, {}, {}
    for kind in cfg.learners:
        base, resid = cfg.base_spec(kind), cfg.residual_spec(kind)
        seed = derive_seed(cfg.seed, "models", kind)
        for fam in cfg.families:
            t0 = time.perf_counter()
            if fam == "global":
                p = train_global(train, base, seed)
            elif fam == "local":
                p = train_local(train, base, seed)
            elif fam == "trl":
                p = train_trl(train, base, resid, seed)
            elif fam == "rwg":
                p = train_rwg(train, base, seed)
            elif fam == "jtt":
                p = train_jtt(train, base, cfg.jtt, seed)
            else:
                search = cluster_search_for(cfg, kind)
                search.run(train)
                searches[kind] = search
                clusters[kind] = search.clusters()
                p = train_ctrl(train, base, resid, clusters[kind], seed)
            key = model_key(fam, kind)
            predictors[key] = p
            matrices[key] = prediction_matrix(p, test)
            log.info("trained %s in %.1fs", key, time.perf_counter() - t0)
    m = cfg.metrics
    report = evaluation.evaluate(matrices, small, m.q, m.min_count, m.thresholds)
    return BenchmarkResult(report, matrices, predictors, clusters, searches, small)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_outputs(cfg: RunConfig, res: BenchmarkResult, out: Path) -> None:
    (out / "models").mkdir(parents=True, exist_ok=True)
    (out / "matrices").mkdir(exist_ok=True)
    # workers/out never change results; leaving them out keeps runs byte-comparable
    snapshot = {k: v for k, v in cfg.to_dict().items() if k not in ("workers", "out")}
    (out / "config.json").write_text(_dump(snapshot))
    for key, p in res.predictors.items():
        name = key.replace("/", "_")
        (out / "models" / f"{name}.json").write_text(json.dumps(predictor_to_dict(p), sort_keys=True))
        (out / "matrices" / f"{name}.csv").write_text(res.matrices[key].to_csv())
    if res.cluster_search:
        (out / "clusters").mkdir(exist_ok=True)
        for kind, s in res.cluster_search.items():
            (out / "clusters" / f"{kind}.json").write_text(dumps_reports(s.weights, s.reports))
    (out / "report.json").write_text(_dump(res.report.to_dict()))
    (out / "table1.csv").write_text(evaluation.table1_csv(res.report, cfg.families, cfg.learners))
    sweep = {float(q): v for q, v in res.report.rwa_sweep.items()}
    (out / "rwa_sweep.csv").write_text(evaluation.rwa_sweep_csv(sweep, list(res.matrices)))


@contextlib.contextmanager
def atomic_run_dir(out: Path):
    """Build into ``<out>.partial``; rename on success, delete on failure."""
    tmp = out.with_name(out.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    tmp.rename(out)


def evaluate_saved(run_dir: Path) -> evaluation.EvalReport:
    """Re-score the matrices of a finished run without retraining."""
    run_dir = Path(run_dir)
    cfg = RunConfig.from_dict(json.loads((run_dir / "config.json").read_text()))
    prior = json.loads((run_dir / "report.json").read_text())
    matrices = {}
    for kind in cfg.learners:
        for fam in cfg.families:
            path = run_dir / "matrices" / f"{fam}_{kind}.csv"
            matrices[model_key(fam, kind)] = evaluation.PredictionMatrix.from_csv(path.read_text())
    m = cfg.metrics
    return evaluation.evaluate(matrices, prior["small_sources"], m.q, m.min_count, m.thresholds)


def summarize_sizes(ds: Dataset) -> dict:
    sizes = np.array(sorted(ds.sizes().values()))
    q = np.quantile(sizes, [0.0, 0.25, 0.5, 0.75, 1.0])
    return {"n": ds.n, "sources": len(sizes), "size_quantiles": [float(v) for v in q]}
