"""Command-line entry point: ``ctrlshift {synth,benchmark,cluster,theory,evaluate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import shift_theory
from .benchmark import (RunConfig, atomic_run_dir, cluster_search_for, evaluate_saved,
                        load_dataset, run_benchmark, summarize_sizes, train_test, write_outputs)
from .cluster import dumps_reports
from .dataset import SynthConfig, generate_synthetic, write_synthetic

log = logging.getLogger("ctrlshift")


def _setup_logging(logfile: Path | None = None) -> None:
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(message)s")
    log.handlers.clear()
    log.setLevel(logging.INFO)
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(fmt)
    log.addHandler(h)
    if logfile is not None:
        fh = logging.FileHandler(logfile)
        fh.setFormatter(fmt)
        log.addHandler(fh)


def _load_run_config(args) -> RunConfig:
    raw = json.loads(Path(args.config).read_text())
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.workers is not None:
        raw["workers"] = args.workers
    if args.out is not None:
        raw["out"] = args.out
    cfg = RunConfig.from_dict(raw)
    if not cfg.out:
        raise ValueError("no output directory: pass --out or set 'out' in the config")
    return cfg


def cmd_synth(args) -> int:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    seed = raw.pop("seed", 0)
    if args.seed is not None:
        seed = args.seed
    cfg = SynthConfig.from_dict(raw)
    ds = generate_synthetic(cfg, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_synthetic(ds, out)
    print(json.dumps(summarize_sizes(ds)))
    return 0


def cmd_benchmark(args) -> int:
    cfg = _load_run_config(args)
    out = Path(cfg.out)
    with atomic_run_dir(out) as tmp:
        _setup_logging(tmp / "run.log")
        ds = load_dataset(cfg.dataset, Path(args.config).parent)
        train, test = train_test(cfg, ds)
        log.info("train %d rows, test %d rows, %d sources", train.n, test.n, len(train.sources))
        res = run_benchmark(cfg, train, test)
        write_outputs(cfg, res, tmp)
    print(f"wrote {out}")
    return 0


def cmd_cluster(args) -> int:
    cfg = _load_run_config(args)
    ds = load_dataset(cfg.dataset, Path(args.config).parent)
    train, _ = train_test(cfg, ds)
    if args.target is not None and args.target not in train.sources:
        raise KeyError(f"unknown target source {args.target!r}")
    targets = [args.target] if args.target is not None else None
    kind = cfg.learners[0]
    out = Path(cfg.out)
    with atomic_run_dir(out) as tmp:
        _setup_logging(tmp / "run.log")
        search = cluster_search_for(cfg, kind)
        weights, reports = search.run(train, targets)
        for g, rep in reports.items():
            if weights[g].weights[g] != 1.0 or rep.cluster != sorted(rep.ranked[: rep.k_star]):
                raise RuntimeError(f"inconsistent cluster report for {g!r}")
            (tmp / f"curve_{g}.csv").write_text(rep.curve_csv())
        (tmp / "clusters.json").write_text(dumps_reports(weights, reports))
    for g, rep in reports.items():
        print(f"{g}: k*={rep.k_star} cluster={','.join(rep.cluster)}")
    return 0


def _theory_configs(raw: dict) -> dict[str, shift_theory.ShiftSimConfig]:
    if "configs" in raw:
        return {name: shift_theory.ShiftSimConfig.from_dict(c) for name, c in raw["configs"].items()}
    return {"config": shift_theory.ShiftSimConfig.from_dict(raw)}


def cmd_theory(args) -> int:
    raw = json.loads(Path(args.config).read_text())
    configs = _theory_configs(raw)
    if args.seed is not None:
        configs = {k: replace(c, seed=args.seed) for k, c in configs.items()}
    rows = []
    ok = True
    for name, c in configs.items():
        est = shift_theory.simulate_excess_risk(c)
        passed = est.within(3.0)
        ok &= passed
        rows.append((name, c, est))
        print(f"{'PASS' if passed else 'FAIL'} {name}: empirical {est.mean:.4f} +- {est.se:.4f} "
              f"(MC SE), theory {est.theory:.4f}, relative gap {est.relative_gap:.3%}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "theory_sweep.csv").write_text(shift_theory.sweep_csv(rows))
        summary = {name: {"config": c.to_dict(), "estimate": e.to_dict(), "pass": e.within(3.0)}
                   for name, c, e in rows}
        (out / "theory_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return 0 if ok else 1


def cmd_evaluate(args) -> int:
    run_dir = Path(args.out)
    report = evaluate_saved(run_dir)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    (run_dir / "report.rescored.json").write_text(text)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ctrlshift", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, config_required=True):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=config_required)
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.set_defaults(fn=fn)
        return p

    add("synth", cmd_synth, "generate a synthetic multi-source CSV", config_required=False)
    add("benchmark", cmd_benchmark, "train all model families and write reports")
    add("cluster", cmd_cluster, "run cluster discovery only").add_argument("--target")
    add("theory", cmd_theory, "Monte Carlo check of the excess-risk formula")
    add("evaluate", cmd_evaluate, "re-score the saved matrices of a benchmark run",
        config_required=False)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "synth" and not args.out:
        print("error: synth needs --out", file=sys.stderr)
        return 2
    if args.command == "evaluate" and not args.out:
        print("error: evaluate needs --out (the run directory)", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except (ValueError, KeyError, FileNotFoundError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    finally:
        for h in list(log.handlers):
            h.close()
            log.removeHandler(h)


if __name__ == "__main__":
    sys.exit(main())
