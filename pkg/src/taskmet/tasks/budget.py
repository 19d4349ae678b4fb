"""Budget allocation: pick B websites to maximize users reached.

Targets are per-website click-through-rate vectors over K users. The
objective of a selection is coverage -- the expected number of users who
click at least once. Selection is scored by enumerating all C(M, B) subsets
on the predicted CTRs (greedy beyond M=20); the training surrogate is a
tempered softmax over the same enumerated subsets, which converges to the
enumerated argmax as the temperature drops.
"""

from __future__ import annotations

import itertools
import json
import math
from pathlib import Path

import torch

from ..nets import mlp
from ..ndio import write_csv
from ..tensor_core import DTYPE, generator
from .base import DecisionTask, Instances, stack_instances

ENUM_LIMIT = 20


def budget_objective(z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Expected users clicking at least once: sum_j (1 - prod_i (1 - z_i y_ij)).

    z is a binary indicator or relaxed weights in [0, 1]; y is the (M, K)
    CTR matrix. Exact evaluation uses binary z.
    """
    kept = 1.0 - z.unsqueeze(-1) * y
    return (1.0 - kept.prod(dim=-2)).sum(dim=-1)


def enumerate_subsets(m: int, b: int) -> torch.Tensor:
    """(S, M) binary indicators of all size-b subsets, lexicographic order."""
    sets = list(itertools.combinations(range(m), b))
    out = torch.zeros(len(sets), m, dtype=DTYPE)
    for r, s in enumerate(sets):
        out[r, list(s)] = 1.0
    return out


def solve_budget_exact(y_hat: torch.Tensor, b: int) -> torch.Tensor:
    """Indicator of the subset maximizing predicted coverage.

    Enumerates when M <= 20; falls back to greedy forward selection above
    that. Ties resolve to the lexicographically first subset.
    """
    m = y_hat.shape[0]
    if m <= ENUM_LIMIT:
        subsets = enumerate_subsets(m, b)
        vals = budget_objective(subsets, y_hat.unsqueeze(0))
        best = int(torch.argmax(vals))
        return subsets[best]
    z = torch.zeros(m, dtype=DTYPE)
    for _ in range(b):
        best_gain, best_i = -math.inf, -1
        base = float(budget_objective(z, y_hat))
        for i in range(m):
            if z[i] > 0:
                continue
            zi = z.clone()
            zi[i] = 1.0
            gain = float(budget_objective(zi, y_hat)) - base
            if gain > best_gain:
                best_gain, best_i = gain, i
        z[best_i] = 1.0
    return z


class BudgetTask(DecisionTask):
    name = "budget"

    def __init__(
        self,
        n_train_instances: int = 8,
        n_test_instances: int = 16,
        m: int = 6,
        n_users: int = 10,
        feature_dim: int = 5,
        budget: int = 2,
        tau: float = 0.1,
        noise: float = 0.05,
        seed: int = 0,
        n_random_decisions: int = 1000,
    ):
        self.m, self.budget, self.tau, self.seed = m, budget, tau, seed
        self.n_outputs, self.in_dim = n_users, feature_dim
        self.n_random_decisions = n_random_decisions
        self.params = {
            "n_train_instances": n_train_instances,
            "n_test_instances": n_test_instances,
            "m": m,
            "n_users": n_users,
            "feature_dim": feature_dim,
            "budget": budget,
            "tau": tau,
            "noise": noise,
            "seed": seed,
        }
        self._subsets = enumerate_subsets(m, budget) if m <= ENUM_LIMIT else None

        gen = generator(seed, "budget-data")
        # Frozen random nonlinear CTR map: shared user embeddings, website
        # embedding derived from observable features through a random MLP.
        self._embed = mlp(feature_dim, [16], 8, gen, activation="tanh")
        self._users = torch.randn(n_users, 8, generator=gen, dtype=DTYPE)
        self.train = self._make(n_train_instances, noise, gen)
        self.test = self._make(n_test_instances, noise, gen)

    def _make(self, n_instances: int, noise: float, gen: torch.Generator) -> Instances:
        p = n_instances * self.m
        x = torch.randn(p, self.in_dim, generator=gen, dtype=DTYPE)
        with torch.no_grad():
            logits = self._embed(x) @ self._users.T
        eps = noise * torch.randn(p, self.n_outputs, generator=gen, dtype=DTYPE)
        y = torch.clamp(torch.sigmoid(1.5 * logits) + eps, 0.0, 1.0)
        return stack_instances(x, y, self.m)

    # values ---------------------------------------------------------------

    def _subset_values(self, y: torch.Tensor) -> torch.Tensor:
        """Coverage of every candidate subset for one instance; (S,) tensor."""
        return budget_objective(self._subsets, y.unsqueeze(0))

    def surrogate_value(self, y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        vals = []
        for i in range(y.shape[0]):
            scores = self._subset_values(y_hat[i])
            p = torch.softmax(scores / self.tau, dim=0)
            z = p @ self._subsets
            vals.append(budget_objective(z, y[i]))
        return torch.stack(vals).mean()

    def instance_values(self, y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        vals = []
        for i in range(y.shape[0]):
            z = solve_budget_exact(y_hat[i], self.budget)
            vals.append(budget_objective(z, y[i]))
        return torch.stack(vals)

    def instance_random_values(self, y: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
        # A uniformly random feasible decision is a uniform draw over the
        # enumerated size-B subsets.
        vals = []
        for i in range(y.shape[0]):
            subset_vals = self._subset_values(y[i])
            idx = torch.randint(subset_vals.numel(), (self.n_random_decisions,), generator=gen)
            vals.append(subset_vals[idx].mean())
        return torch.stack(vals)

    def pointwise_values(self, i: int, j: int, samples: torch.Tensor) -> torch.Tensor:
        """Decision values with website j's CTR row perturbed, others at truth.

        Subsets not containing j keep their true predicted coverage; for the
        rest only the (1 - y_hat_jk) factor changes, so everything vectorizes
        over samples.
        """
        y = self.train.y[i]  # (M, K)
        true_vals = self._subset_values(y)  # value of each subset at truth
        contains_j = self._subsets[:, j] > 0
        # partial products over the subset excluding j: (S_j, K)
        subs_j = self._subsets[contains_j].clone()
        subs_j[:, j] = 0.0
        partial = (1.0 - subs_j.unsqueeze(-1) * y.unsqueeze(0)).prod(dim=-2)
        # predicted coverage per contains-j subset and sample: (S_j, n_samples)
        pred_cov = (1.0 - partial.unsqueeze(1) * (1.0 - samples).unsqueeze(0)).sum(dim=-1)
        scores = true_vals.unsqueeze(1).repeat(1, samples.shape[0])
        scores[contains_j] = pred_cov
        best = torch.argmax(scores, dim=0)
        return true_vals[best]

    # persistence ------------------------------------------------------------

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = []
        for split, inst in (("train", self.train), ("test", self.test)):
            for i in range(inst.n_instances):
                for j in range(inst.m):
                    row = {"split": split, "instance": i, "slot": j}
                    row.update({f"x{k}": float(inst.x[i, j, k]) for k in range(self.in_dim)})
                    row.update({f"y{k}": float(inst.y[i, j, k]) for k in range(self.n_outputs)})
                    rows.append(row)
        write_csv(out / "data.csv", rows)
        (out / "sidecar.json").write_text(json.dumps({"task": self.name, **self.params}, indent=1))

    @classmethod
    def from_sidecar(cls, path: str | Path) -> "BudgetTask":
        spec = json.loads(Path(path).read_text())
        spec.pop("task", None)
        return cls(**spec)
