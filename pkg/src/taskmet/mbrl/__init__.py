from .agents import (
    DynamicsModel,
    QNetwork,
    RLConfig,
    RLResult,
    evaluate_policy,
    model_bellman,
    model_loss,
    omd_model_grad,
    omd_task_loss,
    polyak_update,
    q_loss,
    train_rl,
    trilevel_hypergradient,
)
from .cartpole import CartpoleConfig, CartpoleEnv, env_step, is_terminal, physics_step, terminal_mask
from .replay import ReplayBuffer, TransitionBatch

__all__ = [
    "CartpoleConfig",
    "CartpoleEnv",
    "DynamicsModel",
    "QNetwork",
    "RLConfig",
    "RLResult",
    "ReplayBuffer",
    "TransitionBatch",
    "env_step",
    "evaluate_policy",
    "is_terminal",
    "model_bellman",
    "model_loss",
    "omd_model_grad",
    "omd_task_loss",
    "physics_step",
    "polyak_update",
    "q_loss",
    "terminal_mask",
    "train_rl",
    "trilevel_hypergradient",
]
