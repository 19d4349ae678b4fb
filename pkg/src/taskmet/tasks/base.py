"""Shared machinery for the decision-focused settings.

Each task bundles grouped decision instances (M resources per instance), a
differentiable surrogate decision used for training gradients, an exact
solver used for evaluation, and the (random, oracle) pair that anchors
normalized decision quality. All task objectives are maximized; training
losses are negated values.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from ..tensor_core import DTYPE, generator


@dataclass
class Instances:
    """Stacked decision instances: features (I, M, d_in), targets (I, M, n)."""

    x: torch.Tensor
    y: torch.Tensor

    @property
    def n_instances(self) -> int:
        return self.x.shape[0]

    @property
    def m(self) -> int:
        return self.x.shape[1]

    def flat(self) -> tuple[torch.Tensor, torch.Tensor]:
        i, m = self.x.shape[0], self.x.shape[1]
        return self.x.reshape(i * m, -1), self.y.reshape(i * m, -1)


def topk_exact(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the k largest entries; ties broken toward the lowest index."""
    if not 1 <= k <= scores.numel():
        raise ValueError(f"k={k} out of range for {scores.numel()} entries")
    order = torch.argsort(-scores, stable=True)
    return order[:k]


def topk_relaxed(scores: torch.Tensor, k: int, tau: float) -> torch.Tensor:
    """Soft top-k weights in [0, 1] summing to k.

    Successive tempered softmaxes with log-space exclusion of already
    selected mass; at low temperature this converges to the exact top-k
    indicator.
    """
    if not 1 <= k <= scores.numel():
        raise ValueError(f"k={k} out of range for {scores.numel()} entries")
    logits = scores / tau
    w = torch.zeros_like(scores)
    for _ in range(k):
        p = torch.softmax(logits, dim=-1)
        w = w + p
        logits = logits + torch.log(torch.clamp(1.0 - p, min=1e-300))
    return torch.clamp(w, max=1.0)


def topk_decision(scores: torch.Tensor, k: int, tau: float = 1.0) -> tuple[torch.Tensor, torch.Tensor]:
    """Exact index set and relaxed weight vector for a top-k selection."""
    return topk_exact(scores, k), topk_relaxed(scores, k, tau)


def decision_quality(raw: float, random_value: float, oracle_value: float) -> float:
    """Affine normalization of a task value: 0 at random, 1 at oracle."""
    span = oracle_value - random_value
    if abs(span) < 1e-12:
        raise ValueError("degenerate decision-quality normalizer (oracle == random)")
    return (raw - random_value) / span


class DecisionTask:
    """Base class: concrete tasks fill in the value functions.

    Subclasses must set name/n_outputs/in_dim/train/test and implement
    surrogate_value, exact_value, oracle_value, and random_value (all
    operating on one split's stacked instances, returning means over
    instances).
    """

    name: str
    n_outputs: int
    in_dim: int
    train: Instances
    test: Instances
    seed: int

    # -- to implement ----------------------------------------------------

    def surrogate_value(self, y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """Differentiable mean decision value of predictions over instances."""
        raise NotImplementedError

    def instance_values(self, y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """Exact decision value per instance, (I,), decisions from y_hat."""
        raise NotImplementedError

    def instance_random_values(self, y: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
        """Mean value of random feasible decisions, per instance, (I,)."""
        raise NotImplementedError

    # -- derived value summaries --------------------------------------------

    def exact_value(self, y_hat: torch.Tensor, y: torch.Tensor) -> float:
        return float(self.instance_values(y_hat, y).mean())

    def oracle_value(self, y: torch.Tensor) -> float:
        return float(self.instance_values(y, y).mean())

    def random_value(self, y: torch.Tensor, gen: torch.Generator) -> float:
        return float(self.instance_random_values(y, gen).mean())

    # -- shared ------------------------------------------------------------

    def split(self, which: str) -> Instances:
        return self.train if which == "train" else self.test

    def predictions(self, pred: nn.Module, inst: Instances) -> torch.Tensor:
        i, m = inst.x.shape[0], inst.x.shape[1]
        flat_x = inst.x.reshape(i * m, -1)
        return pred(flat_x).reshape(i, m, self.n_outputs)

    def task_loss_fn(self, which: str = "train"):
        """Differentiable training loss: negated mean surrogate value."""
        inst = self.split(which)

        def fn(pred: nn.Module) -> torch.Tensor:
            y_hat = self.predictions(pred, inst)
            return -self.surrogate_value(y_hat, inst.y)

        return fn

    def raw_value(self, pred: nn.Module, which: str = "test") -> float:
        inst = self.split(which)
        with torch.no_grad():
            y_hat = self.predictions(pred, inst)
        return self.exact_value(y_hat, inst.y)

    def instance_anchors(self, which: str = "test") -> tuple[torch.Tensor, torch.Tensor]:
        """Per-instance (random, oracle) values; cached, fixed-seed baseline."""
        cache = getattr(self, "_anchors", None)
        if cache is None:
            cache = self._anchors = {}
        if which not in cache:
            inst = self.split(which)
            gen = generator(self.seed, f"random-baseline:{which}")
            cache[which] = (
                self.instance_random_values(inst.y, gen),
                self.instance_values(inst.y, inst.y),
            )
        return cache[which]

    def normalizer(self, which: str = "test") -> tuple[float, float]:
        """Split-level (random, oracle) summary of the per-instance anchors."""
        rnd, oracle = self.instance_anchors(which)
        return float(rnd.mean()), float(oracle.mean())

    def decision_quality_of(self, pred: nn.Module, which: str = "test") -> float:
        """Mean per-instance normalized decision quality on a split.

        Each instance is normalized by its own random/oracle anchors; a
        degenerate instance (oracle == random) contributes nothing.
        """
        rnd, oracle = self.instance_anchors(which)
        inst = self.split(which)
        with torch.no_grad():
            y_hat = self.predictions(pred, inst)
        raw = self.instance_values(y_hat, inst.y)
        dqs = [
            decision_quality(float(raw[i]), float(rnd[i]), float(oracle[i]))
            for i in range(raw.numel())
            if abs(float(oracle[i]) - float(rnd[i])) > 1e-12
        ]
        if not dqs:
            raise ValueError("all decision instances have degenerate normalizers")
        return sum(dqs) / len(dqs)

    def flat_train(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self.train.flat()

    def test_mse(self, pred: nn.Module) -> float:
        from ..metric import mse_loss

        x, y = self.test.flat()
        with torch.no_grad():
            return float(mse_loss(pred, x, y))


def stack_instances(points_x: torch.Tensor, points_y: torch.Tensor, m: int) -> Instances:
    """Group flat points into instances of m resources each (drops remainder)."""
    n = (points_x.shape[0] // m) * m
    i = n // m
    return Instances(
        points_x[:n].reshape(i, m, -1).to(DTYPE),
        points_y[:n].reshape(i, m, -1).to(DTYPE),
    )
