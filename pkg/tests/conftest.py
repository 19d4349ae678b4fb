from __future__ import annotations

import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _deterministic():
    # Library code draws from explicit generators; this guards stray calls in
    # test helpers that use torch's global stream.
    torch.manual_seed(0)
    yield


def pv(**named):
    """Shorthand ParamVector builder for tests."""
    from taskmet.tensor_core import ParamVector

    return ParamVector({k: torch.as_tensor(v, dtype=torch.float64) for k, v in named.items()})


class SampleWeightMetric(torch.nn.Module):
    """Per-sample scalar weights indexed by batch row.

    Stands in for a heteroscedastic metric in tests whose inputs coincide;
    only valid when batches are passed in dataset order.
    """

    conditional = True
    l1_coeff = 0.0
    mode = "sample_weights"

    def __init__(self, weights):
        super().__init__()
        self.weights = torch.nn.Parameter(torch.as_tensor(weights, dtype=torch.float64))

    def forward(self, x):
        return self.weights[: x.shape[0]].reshape(-1, 1, 1)

    def min_eigenvalue(self, x=None):
        return float(self.weights.min())
