"""TaskMet: task-driven metric learning for prediction models.

A prediction model is trained under a learned Mahalanobis metric whose
parameters are themselves optimized against a downstream task loss through
the implicit function theorem. The package bundles the bilevel engine, the
decision-focused benchmark tasks and baselines, and a model-based RL
instantiation, plus a reproducible experiment harness.
"""

from . import baselines, bilevel, metric, mbrl, ndio, nets, tasks, tensor_core
from .bilevel import BilevelConfig, cg_normal_solve, hypergradient, inner_fit, taskmet_train
from .metric import MetricModel, mahalanobis_loss, mse_loss, normalize_diag
from .nets import Predictor
from .tensor_core import ParamVector, grad, hvp, mixed_grad, value

__all__ = [
    "BilevelConfig",
    "MetricModel",
    "ParamVector",
    "Predictor",
    "baselines",
    "bilevel",
    "cg_normal_solve",
    "grad",
    "hvp",
    "hypergradient",
    "inner_fit",
    "mahalanobis_loss",
    "mbrl",
    "metric",
    "mixed_grad",
    "mse_loss",
    "ndio",
    "nets",
    "normalize_diag",
    "taskmet_train",
    "tasks",
    "tensor_core",
    "value",
]

__version__ = "0.1.0"
