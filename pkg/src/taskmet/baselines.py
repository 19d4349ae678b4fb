"""Comparison training procedures: plain MSE, task-weighted DFL, and
per-point learned quadratic losses (the LODL-style baseline).

The quadratic-loss baseline fits one PSD matrix per training point to task
loss values sampled around that point's target, then trains the predictor on
the fitted quadratics. Unlike the learned metric, the fitted store is
indexed by training point and cannot produce a loss for unseen inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .metric import MetricModel, mahalanobis_loss, mse_loss
from .bilevel import inner_fit
from .ndio import save_named_arrays
from .tasks.base import DecisionTask
from .tensor_core import DTYPE, check_finite, generator, quadratic_form


def train_mse(pred: nn.Module, x: torch.Tensor, y: torch.Tensor, steps: int, lr: float) -> nn.Module:
    """Adam on the Euclidean loss (identity metric), full batch."""
    identity = MetricModel(n=y.shape[-1] if y.dim() > 1 else 1, mode="identity")
    return inner_fit(pred, identity, x, y, steps, lr=lr)


@dataclass
class DFLConfig:
    alpha: float = 0.0
    temperature: float | None = None  # None keeps the task's default
    steps: int = 2000
    lr: float = 1e-2

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")


def train_dfl(pred: nn.Module, task: DecisionTask, cfg: DFLConfig) -> nn.Module:
    """Joint minimization of the surrogate task loss plus alpha * MSE."""
    if cfg.temperature is not None:
        task.tau = cfg.temperature
    x, y = task.flat_train()
    task_fn = task.task_loss_fn("train")
    opt = torch.optim.Adam(pred.parameters(), lr=cfg.lr)
    for _ in range(cfg.steps):
        opt.zero_grad(set_to_none=True)
        loss = task_fn(pred) + cfg.alpha * mse_loss(pred, x, y)
        check_finite(loss, "train_dfl loss")
        loss.backward()
        opt.step()
    return pred


# -- learned per-point quadratic losses ---------------------------------------


@dataclass
class LodlQuadratic:
    """Per-training-point PSD quadratic losses psi_n = G_n G_n^T."""

    factors: torch.Tensor  # (P, n, n)
    sample_count: int
    radius: float
    r2: list[float] = field(default_factory=list)

    @property
    def n_points(self) -> int:
        return self.factors.shape[0]

    def psi(self, idx: int) -> torch.Tensor:
        """PSD matrix for one training point; unseen indices have no loss."""
        if not 0 <= idx < self.n_points:
            raise KeyError(f"no fitted quadratic loss for point index {idx}")
        g = self.factors[idx]
        return g @ g.T

    def all_psis(self) -> torch.Tensor:
        return self.factors @ self.factors.transpose(1, 2)

    def save(self, path) -> None:
        save_named_arrays(
            path,
            {"factors": self.factors},
            {"sample_count": self.sample_count, "radius": self.radius, "r2": self.r2},
        )


def _quad_features(d: torch.Tensor) -> torch.Tensor:
    """Monomial features of residuals so t ~ d^T psi d is linear least squares."""
    k, n = d.shape
    cols = [d[:, i] * d[:, i] for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            cols.append(2.0 * d[:, i] * d[:, j])
    return torch.stack(cols, dim=1)


def _assemble_symmetric(coef: torch.Tensor, n: int) -> torch.Tensor:
    m = torch.zeros(n, n, dtype=DTYPE)
    k = 0
    for i in range(n):
        m[i, i] = coef[k]
        k += 1
    for i in range(n):
        for j in range(i + 1, n):
            m[i, j] = m[j, i] = coef[k]
            k += 1
    return m


def _psd_factor(sym: torch.Tensor) -> torch.Tensor:
    """Nearest-PSD factor: clip negative eigenvalues, return V sqrt(D)."""
    evals, evecs = torch.linalg.eigh(sym)
    evals = torch.clamp(evals, min=0.0)
    return evecs @ torch.diag(torch.sqrt(evals))


def fit_point_quadratic(
    deltas: torch.Tensor, losses: torch.Tensor
) -> tuple[torch.Tensor, float]:
    """Least-squares PSD quadratic for centered task-loss samples.

    Returns (factor G with psi = G G^T, holdout R^2). A constant target, which
    a centered quadratic fits perfectly with psi = 0, reports R^2 = 1.
    """
    k = deltas.shape[0]
    split = max(1, int(0.75 * k))
    feats = _quad_features(deltas)
    sol = torch.linalg.lstsq(feats[:split], losses[:split].unsqueeze(-1)).solution.squeeze(-1)
    sym = _assemble_symmetric(sol, deltas.shape[1])
    g = _psd_factor(sym)
    psi = g @ g.T
    pred = quadratic_form(deltas[split:], psi)
    ss_tot = float(((losses[split:] - losses[split:].mean()) ** 2).sum())
    ss_res = float(((losses[split:] - pred) ** 2).sum())
    r2 = 1.0 if ss_tot < 1e-18 else 1.0 - ss_res / ss_tot
    return g, r2


def lodl_fit(
    task: DecisionTask,
    n_samples: int = 2048,
    radius: float | None = None,
    radius_grid: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0),
    r2_target: float = 0.9,
    seed: int = 0,
) -> LodlQuadratic:
    """Fit per-point quadratics to sampled task-loss values around each target.

    Samples Gaussian perturbations of one point's prediction at a time (all
    other points held at their true values), scores the decision change, and
    fits a centered PSD quadratic. The sampling radius is chosen from a grid,
    scaled by the target standard deviation, as the first radius whose mean
    held-out R^2 clears the target (falling back to the best grid point).
    """
    n = task.n_outputs
    if n_samples < n * (n + 1) // 2:
        raise ValueError("n_samples must cover the quadratic's parameter count")
    y_std = float(task.train.y.std())
    grid = [radius] if radius is not None else [g * y_std for g in radius_grid]

    best = None
    for r in grid:
        factors, r2s = _fit_all_points(task, n_samples, r, seed)
        mean_r2 = sum(r2s) / len(r2s)
        if best is None or mean_r2 > best[0]:
            best = (mean_r2, r, factors, r2s)
        if mean_r2 >= r2_target:
            break
    _, r, factors, r2s = best
    return LodlQuadratic(torch.stack(factors), n_samples, r, r2s)


def _fit_all_points(task: DecisionTask, n_samples: int, radius: float, seed: int):
    inst = task.train
    n = task.n_outputs
    factors, r2s = [], []
    for i in range(inst.n_instances):
        for j in range(inst.m):
            gen = generator(seed, f"lodl:{i}:{j}")
            d = radius * torch.randn(n_samples, n, generator=gen, dtype=DTYPE)
            center = inst.y[i, j]
            vals = pointwise_task_values(task, i, j, center.unsqueeze(0) + d)
            base = pointwise_task_values(task, i, j, center.unsqueeze(0))
            losses = base.item() - vals  # loss increase relative to the truth
            g, r2 = fit_point_quadratic(d, losses)
            factors.append(g)
            r2s.append(r2)
    return factors, r2s


def pointwise_task_values(task: DecisionTask, i: int, j: int, samples: torch.Tensor) -> torch.Tensor:
    """Task values when point (i, j)'s prediction is each sample row and every
    other point predicts its true target."""
    if hasattr(task, "pointwise_values"):
        return task.pointwise_values(i, j, samples)
    inst = task.split("train")
    vals = []
    for s in range(samples.shape[0]):
        y_hat = inst.y[i].clone()
        y_hat[j] = samples[s]
        vals.append(task.exact_value(y_hat.unsqueeze(0), inst.y[i].unsqueeze(0)))
    return torch.tensor(vals, dtype=DTYPE)


def train_lodl(
    pred: nn.Module,
    lodl: LodlQuadratic,
    task: DecisionTask,
    alpha: float,
    steps: int,
    lr: float,
) -> nn.Module:
    """Train on the fitted per-point quadratics plus alpha * MSE."""
    x, y = task.flat_train()
    if lodl.n_points != x.shape[0]:
        raise ValueError(f"{lodl.n_points} fitted losses for {x.shape[0]} training points")
    psis = lodl.all_psis()
    opt = torch.optim.Adam(pred.parameters(), lr=lr)
    for _ in range(steps):
        opt.zero_grad(set_to_none=True)
        resid = pred(x) - y
        loss = quadratic_form(resid, psis).mean()
        if alpha > 0:
            loss = loss + alpha * mse_loss(pred, x, y)
        check_finite(loss, "train_lodl loss")
        loss.backward()
        opt.step()
    return pred
