"""Desk-scale synthetic benchmark over several master seeds.

Usage: python scripts/run_desk_benchmark.py [--seeds 5] [--workers N] [--out runs/desk_sweep]

Writes one run directory per seed plus summary.csv with the seed-averaged
metrics and the per-seed average ranks.
"""

import argparse
import csv
import json
import os
from pathlib import Path

import numpy as np

from ctrlshift.benchmark import RunConfig, load_dataset, run_benchmark, train_test, write_outputs

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "desk.json"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    ap.add_argument("--out", default="runs/desk_sweep")
    args = ap.parse_args()
    base = json.loads(CONFIG.read_text())
    out = Path(args.out)
    reports = []
    for seed in range(args.seeds):
        raw = {**base, "seed": seed, "workers": args.workers, "out": str(out / f"seed{seed}")}
        raw["dataset"] = {**base["dataset"], "seed": seed}
        cfg = RunConfig.from_dict(raw)
        train, test = train_test(cfg, load_dataset(cfg.dataset))
        res = run_benchmark(cfg, train, test)
        run_dir = Path(cfg.out)
        run_dir.mkdir(parents=True, exist_ok=True)
        write_outputs(cfg, res, run_dir)
        reports.append(res.report)
        ranks = res.report.ranks["tree"]
        print(f"seed {seed}: " + ", ".join(f"{k} {v:.2f}" for k, v in sorted(ranks.items(), key=lambda kv: kv[1])))

    models = list(reports[0].metrics)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "mse", "small_mse", "rwa", "mean_rank", "best_rank_seeds"])
        for m in models:
            vals = [np.mean([r.metrics[m][k] for r in reports]) for k in ("mse", "small_mse", "rwa")]
            ranks = [r.ranks["tree"][m] for r in reports]
            best = sum(r.ranks["tree"][m] <= min(r.ranks["tree"].values()) for r in reports)
            w.writerow([m, *(f"{v:.4f}" for v in vals), f"{np.mean(ranks):.3f}", best])
    print((out / "summary.csv").read_text())


if __name__ == "__main__":
    main()
