"""Independent-oracle computations shared by unit tests and acceptance.

Each function returns measured error(s) against an oracle that never touches
the code path it checks: closed forms, finite differences, pseudoinverses, or
fully unrolled differentiation.
"""

from __future__ import annotations

import torch
from torch.func import functional_call

from taskmet.bilevel import cg_normal_solve, hypergradient
from taskmet.nets import Predictor, mlp
from taskmet.tensor_core import (
    DTYPE,
    ParamVector,
    generator,
    hvp as pv_hvp,
    mixed_grad as pv_mixed_grad,
)

from conftest import SampleWeightMetric


def wls_hypergradient_rel_err() -> float:
    """Analytic weighted-least-squares oracle for the implicit gradient."""
    pred = Predictor(1, 1, "linear", bias=False, seed=0)
    with torch.no_grad():
        pred.net.weight.fill_(1.5)
    m = SampleWeightMetric([3.0, 1.0])
    x = torch.ones(2, 1, dtype=DTYPE)
    y = torch.tensor([[1.0], [3.0]], dtype=DTYPE)
    task_fn = lambda p: ((p.net.weight - 2.0) ** 2).sum()  # noqa: E731
    g, _ = hypergradient(pred, m, task_fn, x, y, cg_iterations=50, cg_tolerance=1e-14)
    expect = torch.tensor([0.125, -0.375], dtype=DTYPE)
    return float((g.segments["weights"] - expect).norm() / expect.norm())


def scalar_invariance_hypergradient_norm() -> float:
    """Scalar reweighting cannot move a 1-D inner optimum: gradient is zero."""
    pred = Predictor(1, 1, "linear", bias=False, seed=0)
    with torch.no_grad():
        pred.net.weight.fill_(1.0)
    m = SampleWeightMetric([1.0])
    x = torch.ones(1, 1, dtype=DTYPE)
    y = torch.ones(1, 1, dtype=DTYPE)
    task_fn = lambda p: ((p.net.weight - 2.0) ** 2).sum()  # noqa: E731
    g, _ = hypergradient(pred, m, task_fn, x, y, cg_iterations=20, cg_tolerance=1e-14)
    return g.norm()


def mlp_unrolled_rel_err() -> tuple[float, float]:
    """(relative error vs unrolled backprop, achieved inner grad norm)."""
    gen = generator(21, "unroll")
    net = mlp(1, [6], 1, gen, activation="tanh")
    x = torch.linspace(-1, 1, 8, dtype=DTYPE).unsqueeze(-1)
    y = torch.sin(2.0 * x)
    probe_x = torch.tensor([[0.5], [-0.5]], dtype=DTYPE)
    probe_y = torch.tensor([[0.3], [-0.4]], dtype=DTYPE)
    ridge = 0.05

    w0 = torch.full((8,), 1.0, dtype=DTYPE).requires_grad_(True)
    w_const = ParamVector({"w": w0.detach()})

    def f(theta: ParamVector, w: ParamVector):
        out = functional_call(net, dict(theta.segments), (x,))
        data = (w.segments["w"] * ((out - y) ** 2).squeeze(-1)).mean()
        reg = ridge * sum((t * t).sum() for t in theta.tensors())
        return data + reg

    def task_of(params: dict) -> torch.Tensor:
        out = functional_call(net, params, (probe_x,))
        return ((out - probe_y) ** 2).sum()

    names = [n for n, _ in net.named_parameters()]
    opt_params = [p.detach().clone().requires_grad_(True) for p in net.parameters()]
    opt = torch.optim.Adam(opt_params, lr=0.02)
    for _ in range(6000):
        opt.zero_grad()
        f(ParamVector(dict(zip(names, opt_params))), w_const).backward()
        opt.step()
    theta_hat = ParamVector({n: p.detach().clone() for n, p in zip(names, opt_params)})

    f_theta_const = lambda th: f(th, w_const)  # noqa: E731
    v = theta_hat.unflatten_like(torch.randn(theta_hat.numel, generator=gen, dtype=DTYPE))
    for _ in range(30):
        hv = pv_hvp(f_theta_const, theta_hat, v)
        v = v.unflatten_like(hv.flatten() / hv.flatten().norm())
    eta = 0.9 / float(pv_hvp(f_theta_const, theta_hat, v).dot(v))

    params = {n: p.detach().clone().requires_grad_(True) for n, p in theta_hat.segments.items()}
    for _ in range(2500):
        loss = f(ParamVector(params), ParamVector({"w": w0}))
        grads = torch.autograd.grad(loss, list(params.values()), create_graph=True)
        params = {n: p - eta * g for (n, p), g in zip(params.items(), grads)}
    grad_norm = float(
        torch.cat(
            [
                g.reshape(-1)
                for g in torch.autograd.grad(
                    f(ParamVector(params), ParamVector({"w": w0})),
                    list(params.values()),
                    create_graph=True,
                )
            ]
        ).norm()
    )
    unrolled = torch.autograd.grad(task_of(params), w0)[0]

    theta_star = ParamVector({n: p.detach() for n, p in params.items()})
    req = {n: p.detach().clone().requires_grad_(True) for n, p in params.items()}
    tg = torch.autograd.grad(task_of(req), list(req.values()))
    g_task = ParamVector({n: g for (n, _), g in zip(req.items(), tg)})
    f_theta = lambda th: f(th, w_const)  # noqa: E731
    v_sol, _ = cg_normal_solve(lambda u: pv_hvp(f_theta, theta_star, u), g_task, 60, 1e-13)
    implicit = -1.0 * pv_mixed_grad(f, theta_star, w_const, v_sol)
    rel = float((implicit.segments["w"] - unrolled).norm() / unrolled.norm())
    return rel, grad_norm


def cg_pseudoinverse_max_err(n_cases: int = 20, seed: int = 7) -> float:
    """Minimum-norm least squares on singular symmetric systems."""
    gen = generator(seed, "sing")
    worst = 0.0
    for _ in range(n_cases):
        n = int(torch.randint(2, 7, (1,), generator=gen))
        rank = max(1, n - 2)
        b_mat = torch.randn(n, rank, generator=gen, dtype=DTYPE)
        a = b_mat @ b_mat.T
        rhs = torch.randn(n, generator=gen, dtype=DTYPE)
        v, _ = cg_normal_solve(lambda u, a=a: a @ u, rhs, 60, 1e-12)
        worst = max(worst, float((v - torch.linalg.pinv(a) @ rhs).norm()))
    return worst


def portfolio_grad_fd_max_rel_err(n_instances: int = 5, m: int = 10, seed: int = 8):
    """(max FD relative error, max KKT residual) over generic instances."""
    from taskmet.tasks import PortfolioTask, portfolio_solve
    from taskmet.tasks.portfolio import kkt_residual, portfolio_value, solve_portfolio_qp

    task = PortfolioTask(seed=1, m=m)
    gen = generator(seed, "fd")
    q, lam = task.q, task.lam
    worst_rel, worst_kkt, found, trial = 0.0, 0.0, 0, 0
    while found < n_instances and trial < 8 * n_instances:
        trial += 1
        y_hat = 0.15 * torch.randn(m, generator=gen, dtype=DTYPE)
        y_true = 0.15 * torch.randn(m, generator=gen, dtype=DTYPE)
        with torch.no_grad():
            z0 = solve_portfolio_qp(y_hat, q, lam)
        worst_kkt = max(worst_kkt, kkt_residual(z0, y_hat - 2 * lam * (q @ z0)))
        dist = torch.minimum(z0, 1.0 - z0)
        if bool(((dist > 1e-6) & (dist < 1e-3)).any()):
            continue
        found += 1

        def value_of(yh):
            z = portfolio_solve(yh, q, lam)
            return portfolio_value(z, y_true, q, lam)

        yh = y_hat.clone().requires_grad_(True)
        g = torch.autograd.grad(value_of(yh), yh)[0]
        h = 1e-6
        fd = torch.zeros(m, dtype=DTYPE)
        for i in range(m):
            e = torch.zeros(m, dtype=DTYPE)
            e[i] = h
            with torch.no_grad():
                fd[i] = (float(value_of(y_hat + e)) - float(value_of(y_hat - e))) / (2 * h)
        worst_rel = max(worst_rel, float((g - fd).norm()) / max(float(fd.norm()), 1e-12))
    return worst_rel, worst_kkt
