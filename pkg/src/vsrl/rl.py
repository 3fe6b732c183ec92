"""Soft actor-critic over encoder representations.

Twin critics, tanh-squashed Gaussian actor, learned temperature. The conv
encoder (when present) is owned by the critic: critic gradients flow into
it, the actor consumes detached features, and the target critic carries a
Polyak-averaged copy. All sampling goes through explicit torch Generators
so a seeded run is reproducible.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0


@dataclass
class SacConfig:
    gamma: float = 0.99
    tau: float = 0.01
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    alpha_lr: float = 1e-3
    init_temperature: float = 0.1
    target_entropy: float | None = None  # default −action_dim
    batch_size: int = 128
    update_every: int = 2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        for name in ("tau", "actor_lr", "critic_lr", "alpha_lr", "init_temperature"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch_size < 1 or self.update_every < 1:
            raise ValueError("batch_size and update_every must be >= 1")


def critic_target(
    reward: float, done: bool, gamma: float, min_q_next: float, alpha: float, logp_next: float
) -> float:
    """Soft Bellman backup target; terminal transitions stop at the reward."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    if done:
        return float(reward)
    return float(reward + gamma * (min_q_next - alpha * logp_next))


def _mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, hidden),
        nn.ReLU(inplace=True),
        nn.Linear(hidden, hidden),
        nn.ReLU(inplace=True),
        nn.Linear(hidden, out_dim),
    )


class Actor(nn.Module):
    def __init__(self, feature_dim: int, action_dim: int, hidden: int = 128):
        super().__init__()
        self.net = _mlp(feature_dim, hidden, 2 * action_dim)
        self.action_dim = action_dim

    def forward(self, feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mean, log_std = self.net(feat).chunk(2, dim=-1)
        return mean, log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)

    def sample(self, feat: torch.Tensor, gen: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
        mean, log_std = self(feat)
        std = log_std.exp()
        noise = torch.randn(mean.shape, generator=gen, dtype=mean.dtype)
        pre_tanh = mean + std * noise
        action = torch.tanh(pre_tanh)
        logp = (-0.5 * noise**2 - log_std - 0.5 * math.log(2 * math.pi)).sum(-1)
        logp = logp - torch.log(1.0 - action**2 + 1e-6).sum(-1)
        return action, logp

    def mean_action(self, feat: torch.Tensor) -> torch.Tensor:
        mean, _ = self(feat)
        return torch.tanh(mean)


class TwinCritic(nn.Module):
    def __init__(self, feature_dim: int, action_dim: int, hidden: int = 128):
        super().__init__()
        self.q1 = _mlp(feature_dim + action_dim, hidden, 1)
        self.q2 = _mlp(feature_dim + action_dim, hidden, 1)

    def forward(self, feat: torch.Tensor, action: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = torch.cat([feat, action], dim=-1)
        return self.q1(x).squeeze(-1), self.q2(x).squeeze(-1)


class SacAgent:
    """Encoder may be a conv module, a frozen callable, or None (state input)."""

    def __init__(
        self,
        feature_dim: int,
        action_dim: int,
        config: SacConfig,
        encoder: nn.Module | None = None,
        hidden_dim: int = 128,
    ):
        self.config = config
        torch.manual_seed(config.seed)
        self.encoder = encoder
        self.actor = Actor(feature_dim, action_dim, hidden_dim)
        self.critic = TwinCritic(feature_dim, action_dim, hidden_dim)
        self.critic_target_net = copy.deepcopy(self.critic)
        self.encoder_target = copy.deepcopy(encoder) if encoder is not None else None
        for p in self.critic_target_net.parameters():
            p.requires_grad_(False)
        if self.encoder_target is not None:
            for p in self.encoder_target.parameters():
                p.requires_grad_(False)

        self.log_alpha = torch.tensor(float(np.log(config.init_temperature)), requires_grad=True)
        self.target_entropy = (
            config.target_entropy if config.target_entropy is not None else -float(action_dim)
        )
        critic_params = list(self.critic.parameters())
        if encoder is not None:
            critic_params += list(encoder.parameters())
        self.critic_opt = torch.optim.Adam(critic_params, lr=config.critic_lr)
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=config.actor_lr)
        self.alpha_opt = torch.optim.Adam([self.log_alpha], lr=config.alpha_lr)
        self.gen = torch.Generator().manual_seed(config.seed)
        self.action_dim = action_dim
        self.feature_dim = feature_dim
        # Effective discount per stored transition; train loops using action
        # repeat set this to gamma**repeat.
        self.backup_gamma = config.gamma

    @property
    def alpha(self) -> float:
        return float(self.log_alpha.detach().exp())

    def _features(self, obs: torch.Tensor, target: bool = False) -> torch.Tensor:
        if self.encoder is None:
            return obs
        net = self.encoder_target if target else self.encoder
        return net(obs)

    def select_action(self, obs: np.ndarray, deterministic: bool = False) -> np.ndarray:
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(obs, dtype=np.float32)).unsqueeze(0)
            feat = self._features(x)
            if deterministic:
                action = self.actor.mean_action(feat)
            else:
                action, _ = self.actor.sample(feat, self.gen)
        return action[0].numpy()

    def update(self, batch: dict[str, np.ndarray]) -> dict[str, float]:
        cfg = self.config
        obs = torch.as_tensor(batch["obs"], dtype=torch.float32)
        actions = torch.as_tensor(batch["actions"], dtype=torch.float32)
        rewards = torch.as_tensor(batch["rewards"], dtype=torch.float32)
        next_obs = torch.as_tensor(batch["next_obs"], dtype=torch.float32)
        dones = torch.as_tensor(batch["dones"], dtype=torch.float32)

        with torch.no_grad():
            feat_next = self._features(next_obs, target=True)
            next_action, next_logp = self.actor.sample(feat_next, self.gen)
            tq1, tq2 = self.critic_target_net(feat_next, next_action)
            min_q_next = torch.min(tq1, tq2)
            y = rewards + self.backup_gamma * (1.0 - dones) * (min_q_next - self.alpha * next_logp)

        feat = self._features(obs)
        q1, q2 = self.critic(feat, actions)
        critic_loss = F.mse_loss(q1, y) + F.mse_loss(q2, y)
        self.critic_opt.zero_grad(set_to_none=True)
        critic_loss.backward()
        self.critic_opt.step()

        feat_pi = feat.detach()
        pi_action, logp = self.actor.sample(feat_pi, self.gen)
        pq1, pq2 = self.critic(feat_pi, pi_action)
        actor_loss = (self.alpha * logp - torch.min(pq1, pq2)).mean()
        self.actor_opt.zero_grad(set_to_none=True)
        actor_loss.backward()
        self.actor_opt.step()

        alpha_loss = (self.log_alpha.exp() * (-logp - self.target_entropy).detach()).mean()
        self.alpha_opt.zero_grad(set_to_none=True)
        alpha_loss.backward()
        self.alpha_opt.step()

        losses = {
            "critic_loss": critic_loss.item(),
            "actor_loss": actor_loss.item(),
            "alpha_loss": alpha_loss.item(),
            "alpha": self.alpha,
        }
        if not all(np.isfinite(v) for v in losses.values()):
            raise FloatingPointError(f"non-finite SAC losses: {losses}")

        self._polyak(self.critic, self.critic_target_net, cfg.tau)
        if self.encoder is not None:
            self._polyak(self.encoder, self.encoder_target, cfg.tau)
        return losses

    @staticmethod
    def _polyak(online: nn.Module, target: nn.Module, tau: float) -> None:
        with torch.no_grad():
            for p, tp in zip(online.parameters(), target.parameters()):
                tp.mul_(1.0 - tau).add_(p, alpha=tau)

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        for prefix, module in [("actor", self.actor), ("critic", self.critic)]:
            for k, v in module.state_dict().items():
                arrays[f"{prefix}.{k}"] = v.detach().numpy().astype(np.float32)
        if self.encoder is not None:
            for k, v in self.encoder.state_dict().items():
                arrays[f"encoder.{k}"] = v.detach().numpy().astype(np.float32)
        arrays["log_alpha"] = np.asarray([float(self.log_alpha)], dtype=np.float32)
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        def sub(prefix: str) -> dict[str, torch.Tensor]:
            plen = len(prefix) + 1
            return {
                k[plen:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix + ".")
            }

        self.actor.load_state_dict(sub("actor"))
        self.critic.load_state_dict(sub("critic"))
        if self.encoder is not None and any(k.startswith("encoder.") for k in arrays):
            self.encoder.load_state_dict(sub("encoder"))
            self.encoder_target = copy.deepcopy(self.encoder)
        self.critic_target_net = copy.deepcopy(self.critic)
        with torch.no_grad():
            self.log_alpha.copy_(torch.tensor(float(arrays["log_alpha"][0])))


def sac_update(agent: SacAgent, batch: dict[str, np.ndarray]) -> dict[str, float]:
    return agent.update(batch)
