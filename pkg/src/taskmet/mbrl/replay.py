"""Fixed-capacity transition ring with seeded uniform sampling."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from ..tensor_core import DTYPE


@dataclass
class TransitionBatch:
    s: torch.Tensor
    a: torch.Tensor
    r: torch.Tensor
    s_next: torch.Tensor
    done: torch.Tensor

    def __len__(self) -> int:
        return self.s.shape[0]


class ReplayBuffer:
    def __init__(self, capacity: int, obs_dim: int):
        self.capacity = capacity
        self.s = torch.zeros(capacity, obs_dim, dtype=DTYPE)
        self.a = torch.zeros(capacity, dtype=torch.long)
        self.r = torch.zeros(capacity, dtype=DTYPE)
        self.s_next = torch.zeros(capacity, obs_dim, dtype=DTYPE)
        self.done = torch.zeros(capacity, dtype=DTYPE)
        self.size = 0
        self._head = 0

    def __len__(self) -> int:
        return self.size

    def push(self, s, a, r, s_next, done) -> None:
        i = self._head
        self.s[i] = s
        self.a[i] = int(a)
        self.r[i] = float(r)
        self.s_next[i] = s_next
        self.done[i] = 1.0 if done else 0.0
        self._head = (self._head + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, gen: torch.Generator) -> TransitionBatch:
        if batch > self.size:
            raise ValueError(f"requested {batch} transitions, only {self.size} stored")
        idx = torch.randint(self.size, (batch,), generator=gen)
        return TransitionBatch(
            self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx]
        )
