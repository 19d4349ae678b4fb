"""Learned prediction-space metrics and the metric-weighted squared loss.

A MetricModel produces a symmetric PSD matrix for each input:

    full modes:     Lambda(x) = L(x) L(x)^T + eps * I
    diagonal mode:  Lambda    = diag(w), w >= 0 elementwise

The factorized form keeps the matrix PSD by construction; eps is a learnable
softplus-parameterized ridge that controls how much plain Euclidean metric is
mixed in. Fresh models start close to the identity so training begins from
ordinary mean squared error.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .nets import mlp
from .tensor_core import DTYPE, check_finite, generator, quadratic_form

MODES = ("identity", "full_conditional", "full_unconditional", "diag_unconditional")

_EPS_INIT = 0.5


def _softplus_inverse(y: float) -> float:
    return float(torch.log(torch.expm1(torch.tensor(y, dtype=DTYPE))))


def normalize_diag(w: torch.Tensor) -> torch.Tensor:
    """Rescale a diagonal weight vector to L2 norm sqrt(n), direction kept.

    sqrt(n) is the Frobenius norm of the identity, so the normalized family
    always has the same overall scale as the Euclidean metric.
    """
    n = w.numel()
    nrm = w.norm()
    if float(nrm) == 0.0:
        raise ValueError("cannot normalize a zero metric weight vector (collapsed metric)")
    return w / nrm * n**0.5


class MetricModel(nn.Module):
    """PSD metric over an n-dimensional prediction space.

    mode:
      identity            -- fixed Euclidean metric, no parameters
      full_conditional    -- L(x) from an MLP on the features
      full_unconditional  -- one free factor matrix L
      diag_unconditional  -- diag(w) with w the elementwise square of a free
                             vector (optionally renormalized to |w|_2 = sqrt(n))
    """

    def __init__(
        self,
        n: int,
        mode: str = "full_unconditional",
        in_dim: int | None = None,
        hidden: list[int] | None = None,
        normalize: bool = False,
        l1_coeff: float = 0.0,
        seed: int = 0,
    ):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"unknown metric mode {mode!r}")
        if mode == "full_conditional" and in_dim is None:
            raise ValueError("conditional metric requires in_dim")
        self.n = n
        self.mode = mode
        self.normalize = normalize
        self.l1_coeff = float(l1_coeff)
        self.hidden = list(hidden or [200])
        self.in_dim = in_dim

        gen = generator(seed, "init:metric")
        if mode == "full_conditional":
            # Final layer: tiny weights plus a bias pinned at sqrt(1-eps0)*I,
            # so Lambda(x) ~= (1-eps0)*I + eps0*I = I at initialization.
            self.factor_net = mlp(
                in_dim, self.hidden, n * n, gen, activation="relu", final_weight_scale=1e-3
            )
            with torch.no_grad():
                self.factor_net[-1].bias.copy_(
                    ((1.0 - _EPS_INIT) ** 0.5 * torch.eye(n, dtype=DTYPE)).reshape(-1)
                )
            self.raw_eps = nn.Parameter(torch.tensor(_softplus_inverse(_EPS_INIT), dtype=DTYPE))
        elif mode == "full_unconditional":
            factor = (1.0 - _EPS_INIT) ** 0.5 * torch.eye(n, dtype=DTYPE)
            factor = factor + 1e-3 * torch.randn(n, n, dtype=DTYPE, generator=gen)
            self.factor = nn.Parameter(factor)
            self.raw_eps = nn.Parameter(torch.tensor(_softplus_inverse(_EPS_INIT), dtype=DTYPE))
        elif mode == "diag_unconditional":
            # Elementwise square keeps the diagonal nonnegative; ones give
            # exactly the identity (also the fixed point of normalization).
            self.raw_diag = nn.Parameter(torch.ones(n, dtype=DTYPE))

    @property
    def conditional(self) -> bool:
        return self.mode == "full_conditional"

    @property
    def eps(self) -> torch.Tensor:
        if self.mode in ("identity", "diag_unconditional"):
            return torch.tensor(0.0, dtype=DTYPE)
        return F.softplus(self.raw_eps)

    def diag_weights(self) -> torch.Tensor:
        """Effective diagonal weight vector (diagonal mode only)."""
        if self.mode != "diag_unconditional":
            raise ValueError("diag_weights is only defined in diagonal mode")
        w = self.raw_diag * self.raw_diag
        return normalize_diag(w) if self.normalize else w

    def forward(self, x: torch.Tensor | None = None) -> torch.Tensor:
        """PSD metric matrix: (n, n), or (B, n, n) for a conditional metric."""
        if self.conditional:
            if x is None:
                raise ValueError("conditional metric requires features x")
            batched = x.dim() > 1
            xb = x if batched else x.unsqueeze(0)
            L = self.factor_net(xb).reshape(-1, self.n, self.n)
            lam = L @ L.transpose(1, 2) + self.eps * torch.eye(self.n, dtype=DTYPE)
            out = lam if batched else lam[0]
        elif self.mode == "full_unconditional":
            L = self.factor
            out = L @ L.T + self.eps * torch.eye(self.n, dtype=DTYPE)
        elif self.mode == "diag_unconditional":
            out = torch.diag(self.diag_weights())
        else:
            out = torch.eye(self.n, dtype=DTYPE)
        return check_finite(out, "eval_metric")

    def l1_penalty(self, x: torch.Tensor | None = None) -> torch.Tensor:
        """l1_coeff times the mean absolute entry of the metric."""
        if self.l1_coeff == 0.0:
            return torch.tensor(0.0, dtype=DTYPE)
        return self.l1_coeff * self.forward(x).abs().mean()

    def min_eigenvalue(self, x: torch.Tensor | None = None) -> float:
        with torch.no_grad():
            lam = self.forward(x)
            if lam.dim() == 2:
                lam = lam.unsqueeze(0)
            return float(torch.linalg.eigvalsh(lam).min())

    def frobenius_to_identity(self, x: torch.Tensor | None = None) -> float:
        """Mean ||Lambda - I||_F over the (possibly batched) evaluation."""
        with torch.no_grad():
            lam = self.forward(x)
            if lam.dim() == 2:
                lam = lam.unsqueeze(0)
            eye = torch.eye(self.n, dtype=DTYPE)
            return float((lam - eye).norm(dim=(1, 2)).mean())


def metric_input(metric: MetricModel, x: torch.Tensor | None) -> torch.Tensor | None:
    return x if metric.conditional else None


def prediction_residual_loss(
    y_hat: torch.Tensor,
    y: torch.Tensor,
    lam: torch.Tensor,
) -> torch.Tensor:
    """Mean metric-weighted squared residual; reduces to MSE when lam is I."""
    if y_hat.shape != y.shape:
        raise ValueError(f"prediction shape {tuple(y_hat.shape)} != target {tuple(y.shape)}")
    resid = y_hat - y
    if resid.dim() == 1:
        resid = resid.unsqueeze(-1)
    return quadratic_form(resid, lam).mean()


def mahalanobis_loss(
    pred: nn.Module,
    metric: MetricModel,
    x: torch.Tensor,
    y: torch.Tensor,
    include_l1: bool = False,
) -> torch.Tensor:
    """Metric-weighted prediction loss of a model over a batch.

    The optional L1 term (sparsity pressure on the metric entries) is added
    only when the caller is updating the metric, never for predictor steps.
    """
    lam = metric(metric_input(metric, x))
    loss = prediction_residual_loss(pred(x), y, lam)
    if include_l1 and metric.l1_coeff > 0.0:
        loss = loss + metric.l1_penalty(metric_input(metric, x))
    return check_finite(loss, "mahalanobis_loss")


def mse_loss(pred: nn.Module, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Plain Euclidean mean squared error (summed over output dims)."""
    y_hat = pred(x)
    if y_hat.shape != y.shape:
        raise ValueError(f"prediction shape {tuple(y_hat.shape)} != target {tuple(y.shape)}")
    resid = y_hat - y
    if resid.dim() == 1:
        resid = resid.unsqueeze(-1)
    return (resid * resid).sum(dim=-1).mean()
