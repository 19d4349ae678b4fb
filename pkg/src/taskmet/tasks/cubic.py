"""Cubic resource-selection setting.

Scalar targets follow y = 10x^3 - 6.5x on x ~ U[-1, 1]; a decision instance
groups M resources and the decision picks the top B=1 predicted resource,
scoring its true value. A linear model fit by plain MSE tilts the wrong way
on this data, which is what makes the setting a model-mismatch stress test.
"""

from __future__ import annotations

import json
from pathlib import Path

import torch

from ..ndio import write_csv
from ..tensor_core import DTYPE, generator
from .base import DecisionTask, Instances, stack_instances, topk_exact


def cubic_targets(x: torch.Tensor) -> torch.Tensor:
    return 10.0 * x**3 - 6.5 * x


def generate_cubic(n: int, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """n iid points: x ~ U[-1, 1], y = 10x^3 - 6.5x. Bit-stable per seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = generator(seed, "cubic-data")
    x = torch.rand(n, 1, generator=gen, dtype=DTYPE) * 2.0 - 1.0
    return x, cubic_targets(x)


class CubicTask(DecisionTask):
    name = "cubic"
    n_outputs = 1
    in_dim = 1

    def __init__(
        self,
        n_train_instances: int = 10,
        n_test_instances: int = 40,
        m: int = 50,
        budget: int = 1,
        tau: float = 0.02,
        seed: int = 0,
        n_random_decisions: int = 1000,
    ):
        self.m, self.budget, self.tau, self.seed = m, budget, tau, seed
        self.n_random_decisions = n_random_decisions
        self.params = {
            "n_train_instances": n_train_instances,
            "n_test_instances": n_test_instances,
            "m": m,
            "budget": budget,
            "tau": tau,
            "seed": seed,
        }
        xtr, ytr = generate_cubic(n_train_instances * m, seed)
        xte, yte = generate_cubic(n_test_instances * m, seed + 10_000)
        self.train = stack_instances(xtr, ytr, m)
        self.test = stack_instances(xte, yte, m)

    # values ---------------------------------------------------------------

    def surrogate_value(self, y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        # Soft selection: tempered softmax weights over predicted values,
        # scored against the true values.
        w = torch.softmax(y_hat.squeeze(-1) / self.tau, dim=-1)
        return (w * y.squeeze(-1)).sum(dim=-1).mean()

    def instance_values(self, y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        vals = []
        for i in range(y.shape[0]):
            idx = topk_exact(y_hat[i].squeeze(-1), self.budget)
            vals.append(y[i].squeeze(-1)[idx].sum())
        return torch.stack(vals)

    def instance_random_values(self, y: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
        yv = y.squeeze(-1)
        i, m = yv.shape
        picks = torch.randint(m, (i, self.n_random_decisions), generator=gen)
        return yv.gather(1, picks).mean(dim=1)

    def pointwise_values(self, i: int, j: int, samples: torch.Tensor) -> torch.Tensor:
        """Decision values when slot j's prediction is perturbed and every
        other slot predicts its true value (vectorized over samples)."""
        yv = self.train.y[i].squeeze(-1)
        others = torch.cat([yv[:j], yv[j + 1 :]])
        m_star = others.max()
        pos = int(torch.argmax(others))
        pos = pos if pos < j else pos + 1  # index in the full instance
        s = samples.squeeze(-1)
        picks_j = (s > m_star) | ((s == m_star) & (j < pos))
        return torch.where(picks_j, yv[j], m_star)

    # persistence ------------------------------------------------------------

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = []
        for split, inst in (("train", self.train), ("test", self.test)):
            for i in range(inst.n_instances):
                for j in range(inst.m):
                    rows.append(
                        {"split": split, "instance": i, "slot": j,
                         "x": float(inst.x[i, j, 0]), "y": float(inst.y[i, j, 0])}
                    )
        write_csv(out / "data.csv", rows)
        (out / "sidecar.json").write_text(json.dumps({"task": self.name, **self.params}, indent=1))

    @classmethod
    def from_sidecar(cls, path: str | Path) -> "CubicTask":
        spec = json.loads(Path(path).read_text())
        spec.pop("task", None)
        return cls(**spec)
