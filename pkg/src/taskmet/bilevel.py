"""Bilevel training: inner predictor fits and implicit metric hypergradients.

The outer objective is a task loss evaluated at the inner optimum of the
metric-weighted prediction loss. The metric gradient never unrolls the inner
loop; it comes from the stationarity condition of the inner problem:

    d(task)/d(metric) = - g^T H^{-1} C

with g the task gradient in predictor parameters, H the predictor Hessian of
the prediction loss, and C its mixed predictor/metric second derivative.
H^{-1} g is approximated matrix-free by conjugate gradient on the normal
equations (H is only guaranteed symmetric near an approximate optimum, not
definite), using Hessian-vector products on a freshly sampled batch.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from collections.abc import Callable
from dataclasses import dataclass, field

import torch
from torch import nn
from torch.func import functional_call

from .metric import MetricModel, mahalanobis_loss, metric_input, prediction_residual_loss, mse_loss
from .tensor_core import (
    EvaluationError,
    ParamVector,
    check_finite,
    generator,
    grad as pv_grad,
    hvp as pv_hvp,
    mixed_grad as pv_mixed_grad,
    params_of,
)

log = logging.getLogger(__name__)

# Differentiable scalar loss of a module's live parameters.
ModuleLossFn = Callable[[nn.Module], torch.Tensor]


@dataclass
class BilevelConfig:
    inner_steps: int = 100
    warmup_steps: int = 500
    outer_steps: int = 100
    predictor_lr: float = 1e-2
    metric_lr: float = 1e-3
    implicit_batch_size: int = 10
    cg_iterations: int = 5
    cg_tolerance: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        for name in ("predictor_lr", "metric_lr", "cg_tolerance"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("implicit_batch_size", "cg_iterations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class CGInfo:
    iterations: int
    residual: float
    converged: bool
    fallback: bool = False


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    predictor_steps: int = 0
    steps_at_metric_updates: list[int] = field(default_factory=list)


def module_grad(loss_fn: ModuleLossFn, module: nn.Module) -> ParamVector:
    """Gradient of loss_fn w.r.t. the module's parameters, as a ParamVector."""
    loss = loss_fn(module)
    check_finite(loss, "module_grad (forward value)")
    names = [n for n, _ in module.named_parameters()]
    params = [p for _, p in module.named_parameters()]
    if not loss.requires_grad:
        return ParamVector(OrderedDict((n, torch.zeros_like(p)) for n, p in zip(names, params)))
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = OrderedDict(
        (n, g.detach() if g is not None else torch.zeros_like(p))
        for n, p, g in zip(names, params, grads)
    )
    pv = ParamVector(out)
    check_finite(pv.flatten(), "module_grad")
    return pv


def set_module_grads(module: nn.Module, pv: ParamVector) -> None:
    for n, p in module.named_parameters():
        p.grad = pv.segments[n].detach().clone()


def functional_pred_loss(
    pred: nn.Module, metric: MetricModel, x: torch.Tensor, y: torch.Tensor
) -> Callable[[ParamVector, ParamVector], torch.Tensor]:
    """The metric-weighted loss as an explicit function of both parameter sets."""
    mx = metric_input(metric, x)

    def f(theta: ParamVector, phi: ParamVector) -> torch.Tensor:
        y_hat = functional_call(pred, dict(theta.segments), (x,))
        lam = functional_call(metric, dict(phi.segments), (mx,))
        return prediction_residual_loss(y_hat, y, lam)

    return f


# -- inner loop --------------------------------------------------------------


def inner_fit(
    pred: nn.Module,
    metric: MetricModel,
    x: torch.Tensor,
    y: torch.Tensor,
    steps: int,
    optimizer: torch.optim.Optimizer | None = None,
    lr: float = 1e-2,
) -> nn.Module:
    """Advance the predictor `steps` Adam updates on the current metric loss."""
    if steps < 1:
        raise ValueError("inner_fit requires steps >= 1")
    opt = optimizer or torch.optim.Adam(pred.parameters(), lr=lr)
    for _ in range(steps):
        opt.zero_grad(set_to_none=True)
        loss = mahalanobis_loss(pred, metric, x, y)
        if not bool(torch.isfinite(loss)):
            gn = _grad_norm_or_nan(pred)
            raise EvaluationError(
                "non-finite prediction loss during inner fit "
                f"(metric eigenvalues min={metric.min_eigenvalue(metric_input(metric, x)):.3e}, "
                f"last grad norm={gn:.3e})"
            )
        loss.backward()
        opt.step()
    return pred


def _grad_norm_or_nan(module: nn.Module) -> float:
    sq = 0.0
    seen = False
    for p in module.parameters():
        if p.grad is not None:
            sq += float((p.grad * p.grad).sum())
            seen = True
    return sq**0.5 if seen else float("nan")


# -- conjugate gradient on the normal equations ------------------------------


def _zeros_like(v):
    return v.zeros_like() if isinstance(v, ParamVector) else torch.zeros_like(v)


def _dot(a, b) -> float:
    return float(a.dot(b))


def _is_finite(v) -> bool:
    flat = v.flatten() if isinstance(v, ParamVector) else v
    return bool(torch.isfinite(flat).all())


def cg_normal_solve(apply_a: Callable, b, iterations: int, tolerance: float):
    """Least-squares solve of A v = b for symmetric matrix-free A.

    Runs plain CG on A^2 v = A b (the normal equations for symmetric A),
    which is well defined even when A is indefinite or singular; starting
    from zero it converges to the minimum-norm least-squares solution.
    Returns (v, CGInfo). Residual is ||A^2 v - A b||.
    """
    ab = apply_a(b)
    if not _is_finite(ab):
        raise EvaluationError("cg_normal_solve: operator produced non-finite values on b")
    x = _zeros_like(b)
    r = ab
    p = r
    rs = _dot(r, r)
    n_iter = 0
    if rs**0.5 <= tolerance:
        return x, CGInfo(0, rs**0.5, True)
    for k in range(iterations):
        ap = apply_a(apply_a(p))
        if not _is_finite(ap):
            raise EvaluationError(f"cg_normal_solve: non-finite iterate at iteration {k}")
        pap = _dot(p, ap)
        if pap <= 0.0:
            break  # numerical null-space direction; current x is the LS point
        alpha = rs / pap
        x = x + alpha * p
        r = r - alpha * ap
        if not _is_finite(x) or not _is_finite(r):
            raise EvaluationError(f"cg_normal_solve: non-finite iterate at iteration {k}")
        n_iter = k + 1
        rs_new = _dot(r, r)
        if rs_new**0.5 <= tolerance:
            rs = rs_new
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, CGInfo(n_iter, rs**0.5, rs**0.5 <= tolerance)


# -- hypergradient ------------------------------------------------------------


def hypergradient(
    pred: nn.Module,
    metric: MetricModel,
    task_loss_fn: ModuleLossFn,
    implicit_x: torch.Tensor,
    implicit_y: torch.Tensor,
    cg_iterations: int,
    cg_tolerance: float,
) -> tuple[ParamVector, CGInfo]:
    """Implicit gradient of the task loss w.r.t. the metric parameters.

    Steps: task gradient g in predictor space; v ~= H^{-1} g by CG on the
    normal equations with Hessian-vector products of the prediction loss on
    the implicit batch; result is -v^T (d^2 L_pred / d theta d phi). If CG
    blows up, falls back to v = g (identity-Hessian, zero implicit
    correction) with a warning rather than aborting the run.
    """
    theta = params_of(pred)
    phi = params_of(metric)
    g_task = module_grad(task_loss_fn, pred)

    f_pred = functional_pred_loss(pred, metric, implicit_x, implicit_y)
    f_theta = lambda th: f_pred(th, phi)  # noqa: E731

    try:
        v, info = cg_normal_solve(
            lambda u: pv_hvp(f_theta, theta, u), g_task, cg_iterations, cg_tolerance
        )
    except EvaluationError as err:
        log.warning("implicit solve diverged (%s); using zero implicit correction", err)
        v, info = g_task, CGInfo(0, float("nan"), False, fallback=True)

    mixed = pv_mixed_grad(f_pred, theta, phi, v)
    return -1.0 * mixed, info


# -- full training loop --------------------------------------------------------


def taskmet_train(
    pred: nn.Module,
    metric: MetricModel,
    task_loss_fn: ModuleLossFn,
    x: torch.Tensor,
    y: torch.Tensor,
    cfg: BilevelConfig,
    eval_fn: Callable[[nn.Module], dict] | None = None,
) -> TrainResult:
    """Warmup on the near-identity metric, then alternate K inner predictor
    steps with one implicit metric update per outer step.

    History rows carry the surrogate task loss, Euclidean train MSE, metric
    spectrum statistics, and the metric gradient norm for each outer step.
    """
    implicit_gen = generator(cfg.seed, "implicit")
    pred_opt = torch.optim.Adam(pred.parameters(), lr=cfg.predictor_lr)
    metric_params = list(metric.parameters())
    metric_opt = (
        torch.optim.Adam(metric_params, lr=cfg.metric_lr) if metric_params else None
    )

    result = TrainResult()
    if cfg.warmup_steps > 0:
        inner_fit(pred, metric, x, y, cfg.warmup_steps, optimizer=pred_opt)
        result.predictor_steps += cfg.warmup_steps

    n = x.shape[0]
    for outer in range(cfg.outer_steps):
        inner_fit(pred, metric, x, y, cfg.inner_steps, optimizer=pred_opt)
        result.predictor_steps += cfg.inner_steps

        idx = _sample_indices(n, cfg.implicit_batch_size, implicit_gen)
        bx, by = x[idx], y[idx]

        if metric_opt is not None:
            g_phi, cg_info = hypergradient(
                pred, metric, task_loss_fn, bx, by, cfg.cg_iterations, cfg.cg_tolerance
            )
            if metric.l1_coeff > 0.0:
                g_phi = g_phi + module_grad(
                    lambda m: m.l1_penalty(metric_input(m, bx)), metric
                )
            metric_opt.zero_grad(set_to_none=True)
            set_module_grads(metric, g_phi)
            metric_opt.step()
            grad_norm_phi = g_phi.norm()
        else:
            cg_info, grad_norm_phi = CGInfo(0, 0.0, True), 0.0

        result.steps_at_metric_updates.append(result.predictor_steps)

        with torch.no_grad():
            pred_mse = float(mse_loss(pred, x, y))
        task_val = float(task_loss_fn(pred).detach())
        probe = metric_input(metric, bx)
        row = {
            "outer_step": outer,
            "task_loss": task_val,
            "pred_mse": pred_mse,
            "metric_min_eig": metric.min_eigenvalue(probe),
            "metric_frobenius": metric.frobenius_to_identity(probe),
            "grad_norm_phi": grad_norm_phi,
            "cg_residual": cg_info.residual,
        }
        if eval_fn is not None:
            row.update(eval_fn(pred))
        result.history.append(row)
    return result


def _sample_indices(n: int, batch: int, gen: torch.Generator) -> torch.Tensor:
    if batch >= n:
        return torch.arange(n)
    return torch.randperm(n, generator=gen)[:batch]
