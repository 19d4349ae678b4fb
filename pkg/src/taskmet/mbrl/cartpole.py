"""Cartpole with optional distractor observation dimensions.

Physical dynamics follow the standard pole-on-cart equations with Euler
integration at a fixed timestep. Observations append `distractors` iid
Gaussian dimensions that carry no reward or termination information and are
resampled every step. All randomness flows through the environment's own
generator, so a seed fixes the full trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from ..tensor_core import DTYPE, generator


@dataclass
class CartpoleConfig:
    distractors: int = 0
    distractor_scale: float = 1.0
    episode_cap: int = 200
    gravity: float = 9.8
    masscart: float = 1.0
    masspole: float = 0.1
    pole_half_length: float = 0.5
    force_mag: float = 10.0
    dt: float = 0.02
    x_threshold: float = 2.4
    theta_threshold: float = 12.0 * 3.141592653589793 / 180.0
    init_range: float = 0.05

    @property
    def obs_dim(self) -> int:
        return 4 + self.distractors

    n_actions: int = field(default=2, init=False)


def physics_step(state: torch.Tensor, action: int, cfg: CartpoleConfig) -> torch.Tensor:
    """One Euler step of the 4-dim physical state for a discrete push."""
    x, x_dot, theta, theta_dot = (float(state[i]) for i in range(4))
    force = cfg.force_mag if action == 1 else -cfg.force_mag
    total_mass = cfg.masscart + cfg.masspole
    polemass_length = cfg.masspole * cfg.pole_half_length
    cos_t, sin_t = torch.cos(torch.tensor(theta, dtype=DTYPE)), torch.sin(torch.tensor(theta, dtype=DTYPE))
    cos_t, sin_t = float(cos_t), float(sin_t)
    temp = (force + polemass_length * theta_dot**2 * sin_t) / total_mass
    theta_acc = (cfg.gravity * sin_t - cos_t * temp) / (
        cfg.pole_half_length * (4.0 / 3.0 - cfg.masspole * cos_t**2 / total_mass)
    )
    x_acc = temp - polemass_length * theta_acc * cos_t / total_mass
    # kinematics first with the old velocities, then the velocity update
    return torch.tensor(
        [
            x + cfg.dt * x_dot,
            x_dot + cfg.dt * x_acc,
            theta + cfg.dt * theta_dot,
            theta_dot + cfg.dt * theta_acc,
        ],
        dtype=DTYPE,
    )


def is_terminal(state: torch.Tensor, cfg: CartpoleConfig) -> bool:
    return bool(
        abs(float(state[0])) > cfg.x_threshold or abs(float(state[2])) > cfg.theta_threshold
    )


def terminal_mask(states: torch.Tensor, cfg: CartpoleConfig) -> torch.Tensor:
    """Batched indicator of out-of-bounds physical states (uses dims 0 and 2)."""
    out = (states[..., 0].abs() > cfg.x_threshold) | (states[..., 2].abs() > cfg.theta_threshold)
    return out.to(states.dtype)


class CartpoleEnv:
    def __init__(self, cfg: CartpoleConfig, seed: int = 0):
        self.cfg = cfg
        self.gen = generator(seed, "env")
        self.state: torch.Tensor | None = None
        self.steps_in_episode = 0

    def _observe(self, physical: torch.Tensor) -> torch.Tensor:
        if self.cfg.distractors == 0:
            return physical
        noise = self.cfg.distractor_scale * torch.randn(
            self.cfg.distractors, generator=self.gen, dtype=DTYPE
        )
        return torch.cat([physical, noise])

    def reset(self) -> torch.Tensor:
        physical = (
            torch.rand(4, generator=self.gen, dtype=DTYPE) * 2.0 - 1.0
        ) * self.cfg.init_range
        self.steps_in_episode = 0
        self.state = self._observe(physical)
        return self.state

    def step(self, action: int) -> tuple[torch.Tensor, float, bool, bool]:
        """Advance one step: returns (obs, reward, done, truncated)."""
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        next_physical = physics_step(self.state[:4], action, self.cfg)
        done = is_terminal(next_physical, self.cfg)
        self.steps_in_episode += 1
        truncated = not done and self.steps_in_episode >= self.cfg.episode_cap
        self.state = self._observe(next_physical)
        return self.state, 1.0, done, truncated


def env_step(env: CartpoleEnv, s: torch.Tensor, a: int) -> tuple[torch.Tensor, float, bool]:
    """Pure-style transition from an explicit observation.

    Physical dims advance by the dynamics; distractor dims are resampled from
    the environment's stream; reward is 1 per surviving step.
    """
    next_physical = physics_step(s[:4], a, env.cfg)
    done = is_terminal(next_physical, env.cfg)
    obs = env._observe(next_physical)
    return obs, 1.0, done
