"""Portfolio allocation: a concave QP over the capped simplex.

The decision maximizes z^T y_hat - lam * z^T Q z subject to 0 <= z <= 1 and
sum(z) <= 1. The forward solve is (batched) projected gradient ascent run to
a tight KKT residual; gradients come from implicit differentiation of the
active-set KKT system at the solution, wrapped in a torch autograd Function
so task values backpropagate into the predictions.

Synthetic data replaces historical market feeds: returns mix a learnable
nonlinear signal of observable per-stock features with correlated factor
noise, and Q is the empirical correlation of a long window of synthetic
returns.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import torch

from ..ndio import write_csv
from ..tensor_core import DTYPE, generator
from .base import DecisionTask, Instances, stack_instances


def project_capped_simplex(v: torch.Tensor, total: float = 1.0) -> torch.Tensor:
    """Projection onto {0 <= z <= 1, sum(z) <= total}, rowwise for 2-D input."""
    squeeze = v.dim() == 1
    vb = v.unsqueeze(0) if squeeze else v
    z = torch.clamp(vb, 0.0, 1.0)
    over = z.sum(dim=1) > total + 1e-12
    if bool(over.any()):
        w = vb[over]
        lo = w.min(dim=1).values - 1.0
        hi = w.max(dim=1).values
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            s = torch.clamp(w - mid.unsqueeze(1), 0.0, 1.0).sum(dim=1)
            too_big = s > total
            lo = torch.where(too_big, mid, lo)
            hi = torch.where(too_big, hi, mid)
        z = z.clone()
        z[over] = torch.clamp(w - hi.unsqueeze(1), 0.0, 1.0)
    return z[0] if squeeze else z


def kkt_residual(z: torch.Tensor, grad: torch.Tensor, total: float = 1.0, tol: float = 1e-9) -> float:
    """Max KKT violation for max f s.t. 0<=z<=1, sum(z)<=total (one instance)."""
    at_lo = z <= tol
    at_hi = z >= 1.0 - tol
    free = ~(at_lo | at_hi)
    simplex_active = float(z.sum()) >= total - 1e-7
    if simplex_active:
        nu = float(grad[free].mean()) if bool(free.any()) else max(float(grad.max()), 0.0)
        nu = max(nu, 0.0)
    else:
        nu = 0.0
    res = 0.0
    if bool(free.any()):
        res = max(res, float((grad[free] - nu).abs().max()))
    if bool(at_lo.any()):
        res = max(res, float(torch.clamp(grad[at_lo] - nu, min=0.0).max()))
    if bool(at_hi.any()):
        res = max(res, float(torch.clamp(nu - grad[at_hi], min=0.0).max()))
    return res


def solve_portfolio_qp(
    y_hat: torch.Tensor,
    q: torch.Tensor,
    lam: float,
    max_iters: int = 20000,
    kkt_tol: float = 1e-8,
) -> torch.Tensor:
    """Projected gradient ascent to a KKT point; accepts (M,) or (I, M)."""
    squeeze = y_hat.dim() == 1
    yb = y_hat.unsqueeze(0) if squeeze else y_hat
    lmax = float(torch.linalg.eigvalsh(q).max())
    step = 1.0 / (2.0 * lam * max(lmax, 1e-12) + 1.0)
    z = torch.full_like(yb, 0.5 / yb.shape[1])
    for it in range(max_iters):
        grad = yb - 2.0 * lam * (z @ q)
        z_new = project_capped_simplex(z + step * grad, 1.0)
        delta = float((z_new - z).abs().max())
        z = z_new
        if delta < 1e-14:
            break
        if it % 100 == 99:
            grad = yb - 2.0 * lam * (z @ q)
            if max(kkt_residual(z[i], grad[i]) for i in range(z.shape[0])) <= kkt_tol:
                break
    grad = yb - 2.0 * lam * (z @ q)
    res = max(kkt_residual(z[i], grad[i]) for i in range(z.shape[0]))
    if res > max(kkt_tol, 1e-7):
        raise RuntimeError(f"portfolio QP did not reach a KKT point (residual {res:.2e})")
    return z[0] if squeeze else z


def _kkt_vjp(z: torch.Tensor, q: torch.Tensor, lam: float, upstream: torch.Tensor) -> torch.Tensor:
    """Gradient w.r.t. predicted returns for one solved instance.

    Differentiates the stationarity system on the active face: bound-active
    coordinates are locally constant, free ones respond through the reduced
    Hessian (bordered by the simplex constraint when it binds).
    """
    tol = 1e-7
    free = (z > tol) & (z < 1.0 - tol)
    grad_y = torch.zeros_like(z)
    if not bool(free.any()):
        return grad_y
    f = torch.nonzero(free).squeeze(-1)
    h = 2.0 * lam * q[f][:, f]
    u = upstream[f]
    if float(z.sum()) >= 1.0 - 1e-7:
        k = f.numel()
        kkt = torch.zeros(k + 1, k + 1, dtype=z.dtype)
        kkt[:k, :k] = h
        kkt[:k, k] = 1.0
        kkt[k, :k] = 1.0
        rhs = torch.zeros(k + 1, dtype=z.dtype)
        rhs[:k] = u
        sol = torch.linalg.lstsq(kkt, rhs.unsqueeze(-1)).solution.squeeze(-1)
        grad_y[f] = sol[:k]
    else:
        grad_y[f] = torch.linalg.lstsq(h, u.unsqueeze(-1)).solution.squeeze(-1)
    return grad_y


class _PortfolioSolve(torch.autograd.Function):
    """QP layer differentiable in the predicted returns via the KKT system."""

    @staticmethod
    def forward(ctx, y_hat, q, lam):
        with torch.no_grad():
            z = solve_portfolio_qp(y_hat.detach(), q, float(lam))
        ctx.save_for_backward(z, q)
        ctx.lam = float(lam)
        return z

    @staticmethod
    def backward(ctx, grad_out):
        z, q = ctx.saved_tensors
        if z.dim() == 1:
            return _kkt_vjp(z, q, ctx.lam, grad_out), None, None
        rows = [_kkt_vjp(z[i], q, ctx.lam, grad_out[i]) for i in range(z.shape[0])]
        return torch.stack(rows), None, None


def portfolio_solve(y_hat: torch.Tensor, q: torch.Tensor, lam: float) -> torch.Tensor:
    """Differentiable optimal portfolio for predicted returns; (M,) or (I, M)."""
    return _PortfolioSolve.apply(y_hat, q, lam)


def portfolio_value(z: torch.Tensor, y: torch.Tensor, q: torch.Tensor, lam: float) -> torch.Tensor:
    """Realized objective of decisions z under true returns y; batch-safe."""
    ret = (z * y).sum(dim=-1)
    risk = ((z @ q) * z).sum(dim=-1)
    return ret - lam * risk


class PortfolioTask(DecisionTask):
    name = "portfolio"
    n_outputs = 1

    def __init__(
        self,
        n_train_instances: int = 40,
        n_test_instances: int = 40,
        m: int = 10,
        feature_dim: int = 4,
        n_factors: int = 3,
        factor_scale: float = 0.05,
        idio_scale: float = 0.05,
        risk_penalty: float = 0.5,
        history_windows: int = 300,
        seed: int = 0,
        n_random_decisions: int = 1000,
    ):
        self.m, self.seed = m, seed
        self.in_dim = feature_dim
        self.lam = float(risk_penalty)
        self.n_random_decisions = n_random_decisions
        self.params = {
            "n_train_instances": n_train_instances,
            "n_test_instances": n_test_instances,
            "m": m,
            "feature_dim": feature_dim,
            "n_factors": n_factors,
            "factor_scale": factor_scale,
            "idio_scale": idio_scale,
            "risk_penalty": risk_penalty,
            "history_windows": history_windows,
            "seed": seed,
        }
        gen = generator(seed, "portfolio-data")
        loadings = torch.randn(m, n_factors, generator=gen, dtype=DTYPE) / math.sqrt(n_factors)
        self._signal_w = torch.randn(feature_dim, generator=gen, dtype=DTYPE)

        # Empirical correlation from a synthetic history of the noise process.
        hist = factor_scale * (
            torch.randn(history_windows, n_factors, generator=gen, dtype=DTYPE) @ loadings.T
        ) + idio_scale * torch.randn(history_windows, m, generator=gen, dtype=DTYPE)
        c = torch.cov(hist.T)
        d = torch.sqrt(torch.diag(c))
        self.q = c / d.unsqueeze(0) / d.unsqueeze(1) + torch.eye(m, dtype=DTYPE) * 1e-9
        self.q = 0.5 * (self.q + self.q.T)

        self.train = self._make(n_train_instances, loadings, factor_scale, idio_scale, gen)
        self.test = self._make(n_test_instances, loadings, factor_scale, idio_scale, gen)

    def _signal(self, x: torch.Tensor) -> torch.Tensor:
        s = torch.tanh(x @ self._signal_w) + 0.5 * x[..., 0] * x[..., 1]
        return 0.1 * s

    def _make(self, n_instances, loadings, factor_scale, idio_scale, gen) -> Instances:
        p = n_instances * self.m
        x = torch.randn(p, self.in_dim, generator=gen, dtype=DTYPE)
        factors = torch.randn(n_instances, loadings.shape[1], generator=gen, dtype=DTYPE)
        noise = factor_scale * (factors @ loadings.T)  # (I, M) correlated
        noise = noise + idio_scale * torch.randn(n_instances, self.m, generator=gen, dtype=DTYPE)
        y = self._signal(x).reshape(n_instances, self.m) + noise
        return stack_instances(x, y.reshape(p, 1), self.m)

    # values ---------------------------------------------------------------

    def surrogate_value(self, y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        z = portfolio_solve(y_hat.squeeze(-1), self.q, self.lam)
        return portfolio_value(z, y.squeeze(-1), self.q, self.lam).mean()

    def instance_values(self, y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            z = solve_portfolio_qp(y_hat.squeeze(-1), self.q, self.lam)
            return portfolio_value(z, y.squeeze(-1), self.q, self.lam)

    def pointwise_values(self, i: int, j: int, samples: torch.Tensor) -> torch.Tensor:
        """Decision values with stock j's prediction perturbed, others at truth."""
        yv = self.train.y[i].squeeze(-1)
        y_hat = yv.unsqueeze(0).repeat(samples.shape[0], 1)
        y_hat[:, j] = samples.squeeze(-1)
        with torch.no_grad():
            z = solve_portfolio_qp(y_hat, self.q, self.lam)
        return portfolio_value(z, yv.unsqueeze(0), self.q, self.lam)

    def instance_random_values(self, y: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
        # Random feasible decision: uniform simplex point scaled by U[0, 1].
        vals = []
        for i in range(y.shape[0]):
            per = self.n_random_decisions
            e = -torch.log(torch.rand(per, self.m, generator=gen, dtype=DTYPE))
            z = e / e.sum(dim=1, keepdim=True)
            z = z * torch.rand(per, 1, generator=gen, dtype=DTYPE)
            yv = y[i].squeeze(-1)
            v = z @ yv - self.lam * ((z @ self.q) * z).sum(dim=1)
            vals.append(v.mean())
        return torch.stack(vals)

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
                    row["y"] = float(inst.y[i, j, 0])
                    rows.append(row)
        write_csv(out / "data.csv", rows)
        (out / "sidecar.json").write_text(json.dumps({"task": self.name, **self.params}, indent=1))

    @classmethod
    def from_sidecar(cls, path: str | Path) -> "PortfolioTask":
        spec = json.loads(Path(path).read_text())
        spec.pop("task", None)
        return cls(**spec)
