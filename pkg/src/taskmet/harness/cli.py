"""Command line entry points: run one config, sweep seeds, report tables."""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys
from pathlib import Path

from .config import ExperimentConfig
from .run import aggregate, format_table, load_records, run


def _parse_seed_range(spec: str) -> list[int]:
    if ".." in spec:
        a, b = spec.split("..")
        return list(range(int(a), int(b) + 1))
    return [int(spec)]


def _worker_run(doc: dict) -> dict:
    import torch

    torch.set_num_threads(1)
    record = run(ExperimentConfig.from_dict(doc))
    return record.to_dict()


def cmd_run(args) -> int:
    config = ExperimentConfig.load(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out_dir = args.out
    record = run(config)
    summary = {k: record.metrics[k] for k in sorted(record.metrics)}
    print(json.dumps({"content_hash": record.content_hash, "metrics": summary}, indent=1))
    return 0


def cmd_sweep(args) -> int:
    config = ExperimentConfig.load(args.config)
    seeds = _parse_seed_range(args.seeds)
    out_root = Path(args.out or config.out_dir or "runs")
    workers = args.parallel or 1
    cap = os.environ.get("TASKMET_WORKERS")
    if cap:
        workers = min(workers, int(cap))

    docs = []
    for seed in seeds:
        doc = config.resolve()
        doc["seed"] = seed
        doc["out_dir"] = str(out_root / f"{config.task}-{config.method}-seed{seed}")
        docs.append(doc)

    if workers <= 1:
        results = [_worker_run(d) for d in docs]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_worker_run, docs))
    for doc, rec in zip(docs, results):
        line = {"seed": doc["seed"], **rec["metrics"]}
        print(json.dumps(line))
    return 0


TABLE_METRICS = {
    "dq": ["final_dq"],
    "mse": ["final_test_mse"],
    "rl": ["final_return", "final_model_mse"],
}


def cmd_report(args) -> int:
    records = load_records(args.runs)
    rows = aggregate(records)
    metrics = TABLE_METRICS[args.table]
    text = format_table(rows, metrics)
    print(text)
    out_csv = Path(args.runs) / "summary.csv"
    from ..ndio import write_csv

    write_csv(out_csv, rows)
    print(f"wrote {out_csv}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="taskmet", description="metric-learning experiment harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one configured run")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a config across a seed range")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--seeds", required=True, help="e.g. 0..4")
    p_sweep.add_argument("--parallel", type=int, default=None)
    p_sweep.add_argument("--out", default=None)
    p_sweep.set_defaults(fn=cmd_sweep)

    p_rep = sub.add_parser("report", help="aggregate finished runs into a table")
    p_rep.add_argument("--runs", required=True)
    p_rep.add_argument("--table", choices=sorted(TABLE_METRICS), required=True)
    p_rep.set_defaults(fn=cmd_report)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
