"""Ring replay buffer storing fused observations as uint8.

Observations arrive as C×H×W float channels in [0,1] and are quantized to
uint8 to keep 50k-transition buffers inside desk-scale memory. FIFO
eviction; sampling only ever touches filled slots. Size accounting is a
single int update, so one rollout writer and one learner reader interleave
safely under the GIL.
"""

from __future__ import annotations

import numpy as np


class ReplayBuffer:
    def __init__(self, capacity: int, obs_shape: tuple[int, ...], action_dim: int, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs = np.zeros((capacity, *obs_shape), dtype=np.uint8)
        self.next_obs = np.zeros((capacity, *obs_shape), dtype=np.uint8)
        self.actions = np.zeros((capacity, action_dim), dtype=np.float32)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.dones = np.zeros(capacity, dtype=np.float32)
        self.idx = 0
        self.size = 0
        self.rng = np.random.default_rng(seed)

    @staticmethod
    def quantize(channels: np.ndarray) -> np.ndarray:
        return np.round(np.clip(channels, 0.0, 1.0) * 255.0).astype(np.uint8)

    def add(self, obs: np.ndarray, action: np.ndarray, reward: float, next_obs: np.ndarray, done: bool) -> None:
        i = self.idx
        self.obs[i] = self.quantize(obs) if obs.dtype != np.uint8 else obs
        self.next_obs[i] = self.quantize(next_obs) if next_obs.dtype != np.uint8 else next_obs
        self.actions[i] = action
        if not np.isfinite(reward):
            raise ValueError("reward must be finite")
        self.rewards[i] = reward
        self.dones[i] = float(done)
        self.idx = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int) -> dict[str, np.ndarray]:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = self.rng.integers(0, self.size, size=batch_size)
        return {
            "obs": self.obs[idx].astype(np.float32) / 255.0,
            "actions": self.actions[idx],
            "rewards": self.rewards[idx],
            "next_obs": self.next_obs[idx].astype(np.float32) / 255.0,
            "dones": self.dones[idx],
        }

    def __len__(self) -> int:
        return self.size
