"""Experiment configuration: versioned JSON schema with embedded defaults.

Every number that enters a training loop is a named field here, either given
explicitly or filled from the per-method/per-task default tables, so a
resolved config fully determines a run.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1

DECISION_METHODS = ("mse", "dfl", "lodl", "taskmet")
RL_METHODS = ("mle-rl", "omd-rl", "taskmet-rl")
METHODS = DECISION_METHODS + RL_METHODS

DECISION_TASKS = ("cubic", "budget", "portfolio")
RL_TASKS = ("cartpole",)

METHOD_DEFAULTS: dict[str, dict] = {
    "mse": {"steps": 2500, "lr": 1e-2},
    "dfl": {"alpha": 0.0, "temperature": None, "steps": 2500, "lr": 1e-2},
    "lodl": {
        "alpha": 0.0,
        "steps": 2500,
        "lr": 1e-2,
        "n_samples": 2048,
        "radius": None,  # None -> grid search scaled by target std
    },
    "taskmet": {
        "inner_steps": 100,
        "warmup_steps": 500,
        "outer_steps": 60,
        "predictor_lr": 1e-2,
        "metric_lr": 1e-3,
        "implicit_batch_size": 10,
        "cg_iterations": 5,
        "cg_tolerance": 1e-8,
        "metric_mode": "full_conditional",
        "metric_hidden": [200],
        "metric_normalize": False,
        "metric_l1": 0.0,
    },
}

_RL_COMMON = {
    "total_steps": 15000,
    "warmup_steps": 5000,
    "learn_start": 500,
    "batch_size": 256,
    "q_updates_per_step": 1,
    "model_update_every": 1,
    "task_grad_clip": 10.0,
    "q_lr": 1e-3,
    "model_lr": 1e-3,
    "gamma": 0.99,
    "target_tau": 0.01,
    "boltzmann_temp": 1.0,
    "buffer_capacity": 100000,
    "eval_every": 1000,
    "eval_episodes": 10,
    "dyn_hidden": [64],
    "q_hidden": [64, 64],
}

METHOD_DEFAULTS["mle-rl"] = dict(_RL_COMMON)
METHOD_DEFAULTS["omd-rl"] = {
    **_RL_COMMON,
    "implicit_batch_size": 256,
}
METHOD_DEFAULTS["taskmet-rl"] = {
    **_RL_COMMON,
    "inner_steps": 1,
    "implicit_batch_size": 256,
    "cg_iterations": 10,
    "cg_tolerance": 1e-8,
    "metric_lr": 1e-3,
    "metric_mode": "diag_unconditional",
    "metric_hidden": [32, 32],
    "metric_normalize": False,
    "metric_l1": 0.0,
}

TASK_DEFAULTS: dict[str, dict] = {
    "cubic": {
        "n_train_instances": 10,
        "n_test_instances": 40,
        "m": 50,
        "budget": 1,
        "tau": 0.02,
        "predictor": {"architecture": "linear", "bias": False},
    },
    "budget": {
        "n_train_instances": 8,
        "n_test_instances": 16,
        "m": 6,
        "n_users": 10,
        "feature_dim": 5,
        "budget": 2,
        "tau": 0.1,
        "noise": 0.05,
        "predictor": {"architecture": "linear", "bias": True},
    },
    "portfolio": {
        "n_train_instances": 40,
        "n_test_instances": 40,
        "m": 10,
        "feature_dim": 4,
        "n_factors": 3,
        "factor_scale": 0.05,
        "idio_scale": 0.05,
        "risk_penalty": 0.5,
        "history_windows": 300,
        "predictor": {"architecture": "mlp", "hidden": [32], "bias": True},
    },
    "cartpole": {
        "distractors": 0,
        "distractor_scale": 1.0,
        "episode_cap": 200,
    },
}


@dataclass
class ExperimentConfig:
    task: str
    method: str
    seed: int = 0
    dataset_seed: int = 0
    out_dir: str | None = None
    task_params: dict = field(default_factory=dict)
    method_params: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema version {self.schema_version}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.method in DECISION_METHODS and self.task not in DECISION_TASKS:
            raise ValueError(f"method {self.method!r} requires a decision task, got {self.task!r}")
        if self.method in RL_METHODS and self.task not in RL_TASKS:
            raise ValueError(f"method {self.method!r} requires task 'cartpole', got {self.task!r}")
        defaults = METHOD_DEFAULTS[self.method]
        for k in self.method_params:
            if k not in defaults:
                raise ValueError(f"unknown parameter {k!r} for method {self.method!r}")
        for k in self.task_params:
            if k not in TASK_DEFAULTS[self.task]:
                raise ValueError(f"unknown parameter {k!r} for task {self.task!r}")

    def resolve(self) -> dict:
        """Fully expanded config: defaults overlaid with explicit overrides."""
        self.validate()
        task_params = copy.deepcopy(TASK_DEFAULTS[self.task])
        task_params.update(copy.deepcopy(self.task_params))
        method_params = copy.deepcopy(METHOD_DEFAULTS[self.method])
        method_params.update(copy.deepcopy(self.method_params))
        return {
            "schema_version": self.schema_version,
            "task": self.task,
            "method": self.method,
            "seed": self.seed,
            "dataset_seed": self.dataset_seed,
            "out_dir": self.out_dir,
            "task_params": task_params,
            "method_params": method_params,
        }

    def to_json(self) -> str:
        return json.dumps(self.resolve(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {
            "task": doc["task"],
            "method": doc["method"],
            "seed": doc.get("seed", 0),
            "dataset_seed": doc.get("dataset_seed", 0),
            "out_dir": doc.get("out_dir"),
            "task_params": doc.get("task_params", {}),
            "method_params": doc.get("method_params", {}),
            "schema_version": doc.get("schema_version", SCHEMA_VERSION),
        }
        return cls(**known)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def content_hash(resolved: dict) -> str:
    canon = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()
