"""Soft Q-learning against a learned dynamics model, three model-training
modes, and the tri-level metric update.

All modes share the same loop: act with a Boltzmann policy, store real
transitions, fit the Q-network to the Bellman operator induced by the
current model, and take one model step per environment step. They differ
only in the model objective:

  mle      Euclidean squared error on next states and rewards
  omd      task gradient through the Q-network's optimality (identity
           inverse-Hessian approximation)
  taskmet  metric-weighted squared error, with the metric itself updated by
           chaining the task gradient through both inner problems: identity
           approximation at the Q level, exact implicit step (CG on the
           normal equations) at the dynamics level
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call

from ..bilevel import CGInfo, cg_normal_solve, module_grad, set_module_grads
from ..metric import MetricModel
from ..nets import mlp
from ..tensor_core import (
    DTYPE,
    EvaluationError,
    ParamVector,
    check_finite,
    generator,
    hvp as pv_hvp,
    mixed_grad as pv_mixed_grad,
    params_of,
    quadratic_form,
)
from .cartpole import CartpoleConfig, CartpoleEnv, terminal_mask
from .replay import ReplayBuffer, TransitionBatch

log = logging.getLogger(__name__)


class DynamicsModel(nn.Module):
    """Predicts (next observation, reward) from observation and action."""

    def __init__(self, obs_dim: int, n_actions: int = 2, hidden: list[int] | None = None, seed: int = 0):
        super().__init__()
        self.obs_dim, self.n_actions = obs_dim, n_actions
        gen = generator(seed, "init:dynamics")
        self.net = mlp(obs_dim + n_actions, hidden or [64], obs_dim + 1, gen)

    def forward(self, s: torch.Tensor, a: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        a_onehot = F.one_hot(a, self.n_actions).to(DTYPE)
        out = self.net(torch.cat([s, a_onehot], dim=-1))
        return out[..., : self.obs_dim], out[..., self.obs_dim]


class QNetwork(nn.Module):
    """Action-conditional values Q(s, .) over the discrete actions."""

    def __init__(self, obs_dim: int, n_actions: int = 2, hidden: list[int] | None = None, seed: int = 0):
        super().__init__()
        gen = generator(seed, "init:qnet")
        self.net = mlp(obs_dim, hidden or [64, 64], n_actions, gen)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        return self.net(s)


def polyak_update(target: nn.Module, source: nn.Module, tau: float) -> None:
    """target <- (1 - tau) * target + tau * source (convex combination)."""
    with torch.no_grad():
        for tp, sp in zip(target.parameters(), source.parameters()):
            tp.mul_(1.0 - tau).add_(sp, alpha=tau)


def model_bellman(
    dynamics: nn.Module,
    q_target: nn.Module,
    s: torch.Tensor,
    a: torch.Tensor,
    gamma: float,
    terminal_fn=None,
) -> torch.Tensor:
    """Soft Bellman backup through the learned model:
    r_hat(s,a) + gamma * logsumexp_a' Q(s_hat', a').

    terminal_fn, when given, zeroes the bootstrap on predicted states that
    the environment would terminate in.
    """
    s_pred, r_pred = dynamics(s, a)
    v = torch.logsumexp(q_target(s_pred), dim=-1)
    if terminal_fn is not None:
        v = v * (1.0 - terminal_fn(s_pred.detach()))
    return r_pred + gamma * v


def q_loss(
    qnet: nn.Module,
    q_target: nn.Module,
    dynamics: nn.Module,
    batch: TransitionBatch,
    gamma: float,
    terminal_fn=None,
    detach_target: bool = False,
) -> torch.Tensor:
    """Mean squared model-induced Bellman error.

    The target uses the frozen copy of the Q parameters, so no gradient
    reaches them either way; detaching just skips bookkeeping on the model
    path when only the Q gradient is needed.
    """
    target = model_bellman(dynamics, q_target, batch.s, batch.a, gamma, terminal_fn)
    if detach_target:
        target = target.detach()
    qsa = qnet(batch.s).gather(1, batch.a.unsqueeze(1)).squeeze(1)
    return ((qsa - target) ** 2).mean()


def omd_task_loss(qnet: nn.Module, q_target: nn.Module, batch: TransitionBatch, gamma: float) -> torch.Tensor:
    """Bellman error against real transitions and rewards (the RL task loss)."""
    with torch.no_grad():
        v = torch.logsumexp(q_target(batch.s_next), dim=-1)
        target = batch.r + gamma * (1.0 - batch.done) * v
    qsa = qnet(batch.s).gather(1, batch.a.unsqueeze(1)).squeeze(1)
    return ((qsa - target) ** 2).mean()


def model_loss(
    dynamics: nn.Module,
    batch: TransitionBatch,
    metric: MetricModel | None = None,
) -> torch.Tensor:
    """State-prediction loss (Euclidean, or metric-weighted when a metric is
    given) plus the Euclidean reward loss."""
    s_pred, r_pred = dynamics(batch.s, batch.a)
    resid = s_pred - batch.s_next
    if metric is None:
        state = (resid * resid).sum(dim=-1).mean()
    else:
        lam = metric(batch.s if metric.conditional else None)
        state = quadratic_form(resid, lam).mean()
    reward = ((r_pred - batch.r) ** 2).mean()
    return state + reward


# -- functional forms for second-order products -------------------------------


def _functional_q_loss(qnet, q_target, dynamics, batch, gamma, terminal_fn, detach_reward=False):
    """Model-induced Bellman error as f(omega, theta).

    With detach_reward the predicted-reward channel is treated as constant in
    theta: implicit task gradients then act only through predicted next
    states. Left free, the reward head gives the task gradient a degenerate
    value-inflation shortcut; the reward head is owned by its Euclidean fit.
    """

    def f(omega: ParamVector, theta: ParamVector) -> torch.Tensor:
        s_pred, r_pred = functional_call(dynamics, dict(theta.segments), (batch.s, batch.a))
        if detach_reward:
            r_pred = r_pred.detach()
        v = torch.logsumexp(q_target(s_pred), dim=-1)
        if terminal_fn is not None:
            v = v * (1.0 - terminal_fn(s_pred.detach()))
        target = r_pred + gamma * v
        qsa = (
            functional_call(qnet, dict(omega.segments), (batch.s,))
            .gather(1, batch.a.unsqueeze(1))
            .squeeze(1)
        )
        return ((qsa - target) ** 2).mean()

    return f


def _functional_model_loss(dynamics, metric, batch):
    mx = batch.s if metric.conditional else None

    def f(theta: ParamVector, phi: ParamVector) -> torch.Tensor:
        s_pred, r_pred = functional_call(dynamics, dict(theta.segments), (batch.s, batch.a))
        lam = functional_call(metric, dict(phi.segments), (mx,))
        resid = s_pred - batch.s_next
        state = quadratic_form(resid, lam).mean()
        reward = ((r_pred - batch.r) ** 2).mean()
        return state + reward

    return f


def omd_model_grad(
    qnet: nn.Module,
    q_target: nn.Module,
    dynamics: nn.Module,
    task_batch: TransitionBatch,
    implicit_batch: TransitionBatch,
    gamma: float,
    terminal_fn=None,
) -> ParamVector:
    """Task gradient w.r.t. model parameters through Q-network optimality.

    The inverse Q-Hessian is approximated by a scalar-calibrated identity:
    the direction follows the mixed second derivative, while the magnitude is
    divided by the Hessian's Rayleigh quotient along the task gradient (one
    extra Hessian-vector product). The reward head keeps its Euclidean fit
    regardless of the task signal.
    """
    u = module_grad(lambda q: omd_task_loss(q, q_target, task_batch, gamma), qnet)
    omega, theta = params_of(qnet), params_of(dynamics)
    f_q = _functional_q_loss(
        qnet, q_target, dynamics, implicit_batch, gamma, terminal_fn, detach_reward=True
    )
    theta_const = theta.detach()
    f_q_omega = lambda om: f_q(om, theta_const)  # noqa: E731
    scale = _rayleigh_scale(f_q_omega, omega, u)
    task_part = (-1.0 / scale) * pv_mixed_grad(f_q, omega, theta, u)
    reward_part = module_grad(
        lambda d: ((d(implicit_batch.s, implicit_batch.a)[1] - implicit_batch.r) ** 2).mean(),
        dynamics,
    )
    return task_part + reward_part


def _rayleigh_scale(f_omega, omega: ParamVector, u: ParamVector) -> float:
    """max(u^T H u / u^T u, 1): curvature along u, floored for safety."""
    uu = float(u.dot(u))
    if uu == 0.0:
        return 1.0
    hu = pv_hvp(f_omega, omega, u)
    return max(float(u.dot(hu)) / uu, 1.0)


def trilevel_hypergradient(
    metric: MetricModel,
    dynamics: nn.Module,
    qnet: nn.Module,
    q_target: nn.Module,
    task_batch: TransitionBatch,
    implicit_batch: TransitionBatch,
    gamma: float,
    cg_iterations: int,
    cg_tolerance: float,
    terminal_fn=None,
    detach_reward: bool = True,
    calibrate_q_scale: bool = True,
) -> tuple[ParamVector, CGInfo]:
    """Metric gradient of the RL task loss chained through both inner levels.

    The Q-level implicit factor uses the (scalar-calibrated) identity
    approximation of the inverse Hessian; the dynamics-level factor is exact,
    solved matrix-free by CG on the normal equations. The two implicit minus
    signs cancel, so the chained product enters with a positive sign.
    """
    u = module_grad(lambda q: omd_task_loss(q, q_target, task_batch, gamma), qnet)
    omega, theta, phi = params_of(qnet), params_of(dynamics), params_of(metric)

    f_q = _functional_q_loss(
        qnet, q_target, dynamics, implicit_batch, gamma, terminal_fn, detach_reward=detach_reward
    )
    scale = 1.0
    if calibrate_q_scale:
        theta_const = theta.detach()
        scale = _rayleigh_scale(lambda om: f_q(om, theta_const), omega, u)
    v_theta = (1.0 / scale) * pv_mixed_grad(f_q, omega, theta, u)

    f_pred = _functional_model_loss(dynamics, metric, implicit_batch)
    f_theta = lambda th: f_pred(th, phi)  # noqa: E731
    try:
        w, info = cg_normal_solve(
            lambda t: pv_hvp(f_theta, theta, t), v_theta, cg_iterations, cg_tolerance
        )
    except EvaluationError as err:
        log.warning("tri-level implicit solve diverged (%s); identity fallback", err)
        w, info = v_theta, CGInfo(0, float("nan"), False, fallback=True)
    return pv_mixed_grad(f_pred, theta, phi, w), info


# -- training loop -------------------------------------------------------------


@dataclass
class RLConfig:
    total_steps: int = 15000
    warmup_steps: int = 5000
    learn_start: int = 500
    batch_size: int = 256
    q_lr: float = 1e-3
    model_lr: float = 1e-3
    metric_lr: float = 1e-3
    gamma: float = 0.99
    target_tau: float = 0.01
    boltzmann_temp: float = 1.0
    buffer_capacity: int = 100000
    q_updates_per_step: int = 1
    model_update_every: int = 1  # env steps between model updates
    inner_steps: int = 1  # model updates between metric updates
    task_grad_clip: float = 10.0  # global-norm clip on implicit task gradients
    implicit_batch_size: int = 256
    cg_iterations: int = 10
    cg_tolerance: float = 1e-8
    eval_every: int = 1000
    eval_episodes: int = 10
    dyn_hidden: list[int] = field(default_factory=lambda: [64])
    q_hidden: list[int] = field(default_factory=lambda: [64, 64])
    metric_mode: str = "diag_unconditional"
    metric_hidden: list[int] = field(default_factory=lambda: [32, 32])
    metric_normalize: bool = False
    metric_l1: float = 0.0


@dataclass
class RLResult:
    history: list[dict]
    dynamics: DynamicsModel
    qnet: QNetwork
    metric: MetricModel | None
    model_losses: list[float] = field(default_factory=list)

    @property
    def final_return(self) -> float:
        return self.history[-1]["mean_return"]

    @property
    def final_model_mse(self) -> float:
        return self.history[-1]["model_mse"]


def boltzmann_action(qnet: QNetwork, obs: torch.Tensor, temp: float, gen: torch.Generator) -> int:
    with torch.no_grad():
        probs = torch.softmax(qnet(obs.unsqueeze(0)).squeeze(0) / temp, dim=-1)
    return int(torch.multinomial(probs, 1, generator=gen))


def evaluate_policy(qnet: QNetwork, env_cfg: CartpoleConfig, seed: int, episodes: int) -> tuple[float, float]:
    """Greedy-action rollouts; returns mean and std of episode return."""
    returns = []
    for ep in range(episodes):
        env = CartpoleEnv(env_cfg, seed=seed * 1000 + ep)
        obs = env.reset()
        total = 0.0
        while True:
            with torch.no_grad():
                a = int(torch.argmax(qnet(obs.unsqueeze(0)).squeeze(0)))
            obs, r, done, truncated = env.step(a)
            total += r
            if done or truncated:
                break
        returns.append(total)
    t = torch.tensor(returns, dtype=DTYPE)
    return float(t.mean()), float(t.std() if len(returns) > 1 else 0.0)


def train_rl(
    mode: str,
    env_cfg: CartpoleConfig,
    cfg: RLConfig,
    seed: int = 0,
    record_model_losses: bool = False,
) -> RLResult:
    """Interleaved environment interaction, Q fitting, and model training."""
    if mode not in ("mle", "omd", "taskmet"):
        raise ValueError(f"unknown RL mode {mode!r}")
    obs_dim = env_cfg.obs_dim
    env = CartpoleEnv(env_cfg, seed=seed)
    buffer = ReplayBuffer(cfg.buffer_capacity, obs_dim)
    dynamics = DynamicsModel(obs_dim, env_cfg.n_actions, cfg.dyn_hidden, seed=seed)
    qnet = QNetwork(obs_dim, env_cfg.n_actions, cfg.q_hidden, seed=seed)
    q_target = QNetwork(obs_dim, env_cfg.n_actions, cfg.q_hidden, seed=seed)
    q_target.load_state_dict(qnet.state_dict())

    metric: MetricModel | None = None
    metric_opt = None
    if mode == "taskmet":
        metric = MetricModel(
            n=obs_dim,
            mode=cfg.metric_mode,
            in_dim=obs_dim,
            hidden=cfg.metric_hidden,
            normalize=cfg.metric_normalize,
            l1_coeff=cfg.metric_l1,
            seed=seed,
        )
        params = list(metric.parameters())
        if params:
            metric_opt = torch.optim.Adam(params, lr=cfg.metric_lr)

    q_opt = torch.optim.Adam(qnet.parameters(), lr=cfg.q_lr)
    model_opt = torch.optim.Adam(dynamics.parameters(), lr=cfg.model_lr)

    action_gen = generator(seed, "actions")
    buffer_gen = generator(seed, "buffer")
    implicit_gen = generator(seed, "implicit")
    probe_gen = generator(seed, "probe")
    term_fn = lambda s: terminal_mask(s, env_cfg)  # noqa: E731

    history: list[dict] = []
    model_losses: list[float] = []
    inner_since_metric = 0
    obs = env.reset()

    for step in range(1, cfg.total_steps + 1):
        a = boltzmann_action(qnet, obs, cfg.boltzmann_temp, action_gen)
        next_obs, r, done, truncated = env.step(a)
        buffer.push(obs, a, r, next_obs, done)
        obs = env.reset() if (done or truncated) else next_obs

        if len(buffer) >= max(cfg.learn_start, cfg.batch_size):
            for _ in range(cfg.q_updates_per_step):
                batch = buffer.sample(cfg.batch_size, buffer_gen)
                q_opt.zero_grad(set_to_none=True)
                ql = q_loss(qnet, q_target, dynamics, batch, cfg.gamma, term_fn, detach_target=True)
                check_finite(ql, "q update")
                ql.backward()
                q_opt.step()
                polyak_update(q_target, qnet, cfg.target_tau)

            in_warmup = step <= cfg.warmup_steps
            if step % cfg.model_update_every == 0:
                model_opt.zero_grad(set_to_none=True)
                if mode == "omd" and not in_warmup:
                    task_b = buffer.sample(cfg.implicit_batch_size, implicit_gen)
                    impl_b = buffer.sample(cfg.implicit_batch_size, implicit_gen)
                    g_theta = omd_model_grad(
                        qnet, q_target, dynamics, task_b, impl_b, cfg.gamma, term_fn
                    )
                    g_theta = _clip_norm(g_theta, cfg.task_grad_clip)
                    set_module_grads(dynamics, g_theta)
                    if record_model_losses:
                        model_losses.append(float(model_loss(dynamics, batch).detach()))
                else:
                    ml = model_loss(dynamics, batch, metric=metric if mode == "taskmet" else None)
                    check_finite(ml, "model update")
                    ml.backward()
                    if record_model_losses:
                        model_losses.append(float(ml.detach()))
                model_opt.step()
                inner_since_metric += 1

            if (
                mode == "taskmet"
                and metric_opt is not None
                and not in_warmup
                and inner_since_metric >= cfg.inner_steps
            ):
                inner_since_metric = 0
                task_b = buffer.sample(cfg.implicit_batch_size, implicit_gen)
                impl_b = buffer.sample(cfg.implicit_batch_size, implicit_gen)
                g_phi, _ = trilevel_hypergradient(
                    metric, dynamics, qnet, q_target, task_b, impl_b,
                    cfg.gamma, cfg.cg_iterations, cfg.cg_tolerance, term_fn,
                )
                g_phi = _clip_norm(g_phi, cfg.task_grad_clip)
                if metric.l1_coeff > 0.0:
                    g_phi = g_phi + module_grad(
                        lambda m: m.l1_penalty(impl_b.s if m.conditional else None), metric
                    )
                metric_opt.zero_grad(set_to_none=True)
                set_module_grads(metric, g_phi)
                metric_opt.step()

        if step % cfg.eval_every == 0 or step == cfg.total_steps:
            # the Polyak-averaged copy gives a steadier greedy policy
            mean_ret, std_ret = evaluate_policy(
                q_target, env_cfg, seed=seed * 97 + step, episodes=cfg.eval_episodes
            )
            row = {
                "step": step,
                "mean_return": mean_ret,
                "std_return": std_ret,
                "model_mse": _eval_model_mse(dynamics, buffer, probe_gen),
            }
            if metric is not None and metric.mode == "diag_unconditional":
                w = metric.diag_weights().detach()
                row.update({f"metric_w{i}": float(w[i]) for i in range(w.numel())})
            history.append(row)

    return RLResult(history, dynamics, qnet, metric, model_losses)


def _clip_norm(g: ParamVector, max_norm: float) -> ParamVector:
    n = g.norm()
    if n > max_norm > 0:
        return g * (max_norm / n)
    return g


def _eval_model_mse(dynamics: DynamicsModel, buffer: ReplayBuffer, gen: torch.Generator) -> float:
    n = min(512, len(buffer))
    if n == 0:
        return float("nan")
    batch = buffer.sample(n, gen)
    with torch.no_grad():
        s_pred, _ = dynamics(batch.s, batch.a)
        return float(((s_pred - batch.s_next) ** 2).sum(dim=-1).mean())
