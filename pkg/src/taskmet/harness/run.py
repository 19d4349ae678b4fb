"""Execute one configured run, persist artifacts, aggregate finished runs."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from ..baselines import DFLConfig, lodl_fit, train_dfl, train_lodl, train_mse
from ..bilevel import BilevelConfig, taskmet_train
from ..metric import MetricModel
from ..mbrl import CartpoleConfig, RLConfig, train_rl
from ..ndio import save_module, write_csv
from ..nets import Predictor
from ..tasks import make_task
from ..tensor_core import child_seed
from .config import DECISION_METHODS, ExperimentConfig, content_hash

HISTORY_COLUMNS = [
    "outer_step",
    "task_loss",
    "pred_mse",
    "metric_min_eig",
    "metric_frobenius",
    "grad_norm_phi",
]


@dataclass
class RunRecord:
    config: dict
    content_hash: str
    metrics: dict
    history: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    history_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "content_hash": self.content_hash,
            "metrics": self.metrics,
            "wall_clock": self.wall_clock,
            "history_hash": self.history_hash,
        }

    def save(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = None
        if self.history:
            cols = list(self.history[0].keys())
        write_csv(out / "history.csv", self.history, cols)
        import hashlib

        self.history_hash = hashlib.sha256((out / "history.csv").read_bytes()).hexdigest()
        (out / "record.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return out / "record.json"


def make_predictor(task, spec: dict, seed: int) -> Predictor:
    return Predictor(
        in_dim=task.in_dim,
        out_dim=task.n_outputs,
        architecture=spec.get("architecture", "linear"),
        hidden=spec.get("hidden"),
        bias=spec.get("bias", True),
        seed=seed,
    )


def run(config: ExperimentConfig) -> RunRecord:
    """Train per the config, write record + artifacts, return the record."""
    resolved = config.resolve()
    t0 = time.time()
    if resolved["method"] in DECISION_METHODS:
        metrics, history, artifacts = _run_decision(resolved)
    else:
        metrics, history, artifacts = _run_rl(resolved)
    record = RunRecord(
        config=resolved,
        content_hash=content_hash(resolved),
        metrics=metrics,
        history=history,
        wall_clock=time.time() - t0,
    )
    if resolved["out_dir"]:
        out = Path(resolved["out_dir"])
        record.save(out)
        for name, module in artifacts.items():
            if module is not None:
                save_module(out / f"{name}.ckpt.json", module, {"name": name})
    return record


def _run_decision(resolved: dict):
    mp = dict(resolved["method_params"])
    tp = dict(resolved["task_params"])
    pred_spec = tp.pop("predictor")
    task = make_task(resolved["task"], seed=resolved["dataset_seed"], **tp)
    seed = resolved["seed"]
    pred = make_predictor(task, pred_spec, seed)
    x, y = task.flat_train()
    method = resolved["method"]
    history: list[dict] = []
    artifacts: dict = {"predictor": pred}

    if method == "mse":
        train_mse(pred, x, y, mp["steps"], mp["lr"])
    elif method == "dfl":
        train_dfl(pred, task, DFLConfig(mp["alpha"], mp["temperature"], mp["steps"], mp["lr"]))
    elif method == "lodl":
        lodl = lodl_fit(
            task, n_samples=mp["n_samples"], radius=mp["radius"], seed=child_seed(seed, "lodl")
        )
        train_lodl(pred, lodl, task, mp["alpha"], mp["steps"], mp["lr"])
    elif method == "taskmet":
        metric = MetricModel(
            n=task.n_outputs,
            mode=mp["metric_mode"],
            in_dim=task.in_dim,
            hidden=mp["metric_hidden"],
            normalize=mp["metric_normalize"],
            l1_coeff=mp["metric_l1"],
            seed=seed,
        )
        cfg = BilevelConfig(
            inner_steps=mp["inner_steps"],
            warmup_steps=mp["warmup_steps"],
            outer_steps=mp["outer_steps"],
            predictor_lr=mp["predictor_lr"],
            metric_lr=mp["metric_lr"],
            implicit_batch_size=mp["implicit_batch_size"],
            cg_iterations=mp["cg_iterations"],
            cg_tolerance=mp["cg_tolerance"],
            seed=seed,
        )
        result = taskmet_train(pred, metric, task.task_loss_fn("train"), x, y, cfg)
        history = result.history
        artifacts["metric"] = metric

    metrics = {
        "final_dq": task.decision_quality_of(pred, "test"),
        "final_test_mse": task.test_mse(pred),
        "final_train_dq": task.decision_quality_of(pred, "train"),
    }
    return metrics, history, artifacts


def _run_rl(resolved: dict):
    mp = dict(resolved["method_params"])
    tp = dict(resolved["task_params"])
    env_cfg = CartpoleConfig(
        distractors=tp["distractors"],
        distractor_scale=tp["distractor_scale"],
        episode_cap=tp["episode_cap"],
    )
    mode = {"mle-rl": "mle", "omd-rl": "omd", "taskmet-rl": "taskmet"}[resolved["method"]]
    known = {f.name for f in RLConfig.__dataclass_fields__.values()}
    cfg = RLConfig(**{k: v for k, v in mp.items() if k in known})
    result = train_rl(mode, env_cfg, cfg, seed=resolved["seed"])
    metrics = {
        "final_return": result.final_return,
        "final_model_mse": result.final_model_mse,
    }
    artifacts = {"dynamics": result.dynamics, "qnet": result.qnet, "metric": result.metric}
    return metrics, result.history, artifacts


# -- aggregation ----------------------------------------------------------------


def method_label(config: dict) -> str:
    m = config["method"]
    alpha = config.get("method_params", {}).get("alpha")
    return f"{m}(alpha={alpha:g})" if alpha is not None else m


def aggregate(records: list[dict], groupby=("task", "method")) -> list[dict]:
    """Mean and sample std (n-1) of every numeric metric, per group."""
    groups: dict[tuple, list[dict]] = {}
    for rec in records:
        cfg = rec["config"]
        key = tuple(method_label(cfg) if g == "method" else cfg[g] for g in groupby)
        groups.setdefault(key, []).append(rec["metrics"])
    rows = []
    for key in sorted(groups):
        ms = groups[key]
        row = dict(zip(groupby, key))
        row["n"] = len(ms)
        for metric in sorted(ms[0]):
            vals = [m[metric] for m in ms if metric in m and m[metric] == m[metric]]
            if not vals:
                continue
            mean = sum(vals) / len(vals)
            std = (
                math.sqrt(sum((v - mean) ** 2 for v in vals) / (len(vals) - 1))
                if len(vals) > 1
                else 0.0
            )
            row[f"{metric}_mean"] = mean
            row[f"{metric}_std"] = std
        rows.append(row)
    return rows


def format_table(rows: list[dict], metrics: list[str], groupby=("task", "method")) -> str:
    """Aligned text table of mean +/- std per group.

    Footer notes the std convention (sample standard deviation, n-1).
    """
    headers = list(groupby) + ["n"] + metrics
    lines = []
    body = []
    for row in rows:
        cells = [str(row.get(g, "")) for g in groupby] + [str(row.get("n", ""))]
        for m in metrics:
            mean, std = row.get(f"{m}_mean"), row.get(f"{m}_std")
            cells.append("--" if mean is None else f"{mean:.4f} +/- {std:.4f}")
        body.append(cells)
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h) for i, h in enumerate(headers)]
    lines.append("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    lines.append("  ".join("-" * w for w in widths))
    for cells in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    lines.append("std convention: sample standard deviation (n-1)")
    return "\n".join(lines)


def load_records(runs_dir: str | Path) -> list[dict]:
    records = []
    for path in sorted(Path(runs_dir).glob("**/record.json")):
        records.append(json.loads(path.read_text()))
    if not records:
        raise FileNotFoundError(f"no record.json files under {runs_dir}")
    return records
