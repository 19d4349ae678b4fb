"""Small float64 MLP/linear builders with explicit, generator-seeded init.

Module init never touches torch's global RNG: every weight draw comes from a
torch.Generator passed by the caller, so runs are reproducible stream by
stream.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .tensor_core import DTYPE


ACTIVATIONS = {"relu": nn.ReLU, "tanh": nn.Tanh}


def init_linear_(layer: nn.Linear, gen: torch.Generator, weight_scale: float = 1.0) -> None:
    """Kaiming-uniform style init drawn from an explicit generator."""
    fan_in = layer.in_features
    bound = weight_scale / math.sqrt(fan_in) if fan_in > 0 else 0.0
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound, generator=gen)


def mlp(
    in_dim: int,
    hidden: list[int],
    out_dim: int,
    gen: torch.Generator,
    activation: str = "relu",
    bias: bool = True,
    final_weight_scale: float = 1.0,
) -> nn.Sequential:
    """Fully connected float64 net; final layer weights may be down-scaled."""
    act = ACTIVATIONS[activation]
    dims = [in_dim] + list(hidden) + [out_dim]
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        lin = nn.Linear(a, b, bias=bias, dtype=DTYPE)
        last = i == len(dims) - 2
        init_linear_(lin, gen, weight_scale=final_weight_scale if last else 1.0)
        layers.append(lin)
        if not last:
            layers.append(act())
    return nn.Sequential(*layers)


class Predictor(nn.Module):
    """Regression model f(x): linear or MLP, chosen by architecture string.

    architecture "linear" gives a bias-free single layer (y_hat = W x);
    "mlp" uses the given hidden sizes and activation.
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        architecture: str = "linear",
        hidden: list[int] | None = None,
        activation: str = "relu",
        seed: int = 0,
        bias: bool = True,
    ):
        super().__init__()
        from .tensor_core import generator

        gen = generator(seed, "init:predictor")
        self.in_dim, self.out_dim = in_dim, out_dim
        self.architecture = architecture
        if architecture == "linear":
            lin = nn.Linear(in_dim, out_dim, bias=bias, dtype=DTYPE)
            init_linear_(lin, gen)
            self.net = lin
        elif architecture == "mlp":
            self.net = mlp(in_dim, hidden or [64], out_dim, gen, activation=activation, bias=bias)
        else:
            raise ValueError(f"unknown architecture {architecture!r}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)
