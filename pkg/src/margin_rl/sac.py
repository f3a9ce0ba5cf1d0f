"""Soft actor-critic over the 4-d search state and a 1-d step action.

Twin critics with clipped double-Q targets, a tanh-squashed Gaussian policy
and automatic entropy-temperature tuning.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

STATE_DIM = 4
CHECKPOINT_FORMAT = "margin_rl.sac"
CHECKPOINT_VERSION = 1


@dataclass
class AgentConfig:
    batch_size: int = 512
    hidden: tuple = (1024, 1024)
    learning_rate: float = 3e-4
    buffer_capacity: int = 1_000_000
    gamma: float = 0.99
    tau: float = 5e-3
    action_low: float = -8 / 255
    action_high: float = 16 / 255
    warmup: int = 1000
    target_entropy: float = -1.0
    init_alpha: float = 1.0
    log_std_min: float = -20.0
    log_std_max: float = 2.0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if not self.action_low < self.action_high:
            raise ValueError("action_low must be below action_high")


class Transition(NamedTuple):
    state: torch.Tensor
    action: float
    reward: float
    next_state: torch.Tensor
    done: bool


class ReplayBuffer:
    """Fixed-capacity ring buffer; oldest transitions are overwritten first."""

    def __init__(self, capacity: int, state_dim: int = STATE_DIM, seed: int = 0):
        self.capacity = int(capacity)
        self.state = np.zeros((self.capacity, state_dim), dtype=np.float32)
        self.action = np.zeros(self.capacity, dtype=np.float32)
        self.reward = np.zeros(self.capacity, dtype=np.float32)
        self.next_state = np.zeros((self.capacity, state_dim), dtype=np.float32)
        self.done = np.zeros(self.capacity, dtype=np.float32)
        self.size = 0
        self.ptr = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return self.size

    def store(self, t: Transition) -> None:
        self.store_batch(np.asarray(t.state)[None], [t.action], [t.reward], np.asarray(t.next_state)[None], [t.done])

    def store_batch(self, state, action, reward, next_state, done) -> None:
        arrays = [np.asarray(a, dtype=np.float32) for a in (state, action, reward, next_state, done)]
        n = len(arrays[1])
        if n > self.capacity:
            arrays = [a[-self.capacity:] for a in arrays]
            n = self.capacity
        idx = (self.ptr + np.arange(n)) % self.capacity
        for store, values in zip((self.state, self.action, self.reward, self.next_state, self.done), arrays):
            store[idx] = values.reshape(store[idx].shape)
        self.ptr = (self.ptr + n) % self.capacity
        self.size = min(self.size + n, self.capacity)

    def sample(self, batch_size: int) -> tuple[torch.Tensor, ...]:
        if batch_size > self.size:
            raise ValueError(f"cannot sample {batch_size} from {self.size} transitions")
        idx = self.rng.choice(self.size, size=batch_size, replace=False)
        return tuple(torch.from_numpy(a[idx]) for a in (self.state, self.action, self.reward, self.next_state, self.done))

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "size": self.size, "ptr": self.ptr,
                "state": self.state[:self.size].copy(), "action": self.action[:self.size].copy(),
                "reward": self.reward[:self.size].copy(), "next_state": self.next_state[:self.size].copy(),
                "done": self.done[:self.size].copy(), "rng": self.rng.bit_generator.state}

    def load_state_dict(self, d: dict) -> None:
        self.__init__(d["capacity"], self.state.shape[1])
        n = d["size"]
        self.state[:n], self.action[:n], self.reward[:n] = d["state"], d["action"], d["reward"]
        self.next_state[:n], self.done[:n] = d["next_state"], d["done"]
        self.size, self.ptr = n, d["ptr"]
        self.rng.bit_generator.state = d["rng"]


def mlp(in_dim: int, hidden: tuple, out_dim: int) -> nn.Sequential:
    layers, prev = [], in_dim
    for h in hidden:
        layers += [nn.Linear(prev, h), nn.ReLU()]
        prev = h
    layers.append(nn.Linear(prev, out_dim))
    return nn.Sequential(*layers)


class Actor(nn.Module):
    def __init__(self, hidden, log_std_min=-20.0, log_std_max=2.0):
        super().__init__()
        self.net = mlp(STATE_DIM, hidden, 2)
        self.log_std_min, self.log_std_max = log_std_min, log_std_max

    def forward(self, s):
        mean, log_std = self.net(s).unbind(-1)
        return mean, log_std.clamp(self.log_std_min, self.log_std_max)

    def rsample(self, s, generator=None):
        """Reparameterised sample in tanh space and its log-density there."""
        mean, log_std = self(s)
        std = log_std.exp()
        noise = torch.randn(mean.shape, generator=generator)
        u = mean + std * noise
        a = torch.tanh(u)
        log_prob = (-0.5 * noise.pow(2) - log_std - 0.5 * np.log(2 * np.pi)) - torch.log1p(-a.pow(2) + 1e-6)
        return a, log_prob


class Critic(nn.Module):
    def __init__(self, hidden):
        super().__init__()
        self.net = mlp(STATE_DIM + 1, hidden, 1)

    def forward(self, s, a):
        return self.net(torch.cat([s, a.unsqueeze(-1)], dim=-1)).squeeze(-1)


class SACAgent:
    """Policy, twin critics and their targets, temperature and replay buffer.

    Actions leave the agent in search units (a step in epsilon inside
    [action_low, action_high]); internally the policy and critics work with
    the squashed value in [-1, 1].
    """

    def __init__(self, config: Optional[AgentConfig] = None, seed: int = 0):
        self.config = config or AgentConfig()
        c = self.config
        torch.manual_seed(seed)
        self.actor = Actor(c.hidden, c.log_std_min, c.log_std_max)
        self.q1, self.q2 = Critic(c.hidden), Critic(c.hidden)
        self.q1_target, self.q2_target = copy.deepcopy(self.q1), copy.deepcopy(self.q2)
        for p in list(self.q1_target.parameters()) + list(self.q2_target.parameters()):
            p.requires_grad_(False)
        self.log_alpha = torch.tensor(float(np.log(c.init_alpha)), requires_grad=True)
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=c.learning_rate)
        self.critic_opt = torch.optim.Adam(list(self.q1.parameters()) + list(self.q2.parameters()), lr=c.learning_rate)
        self.alpha_opt = torch.optim.Adam([self.log_alpha], lr=c.learning_rate)
        self.buffer = ReplayBuffer(c.buffer_capacity, seed=seed)
        self.generator = torch.Generator().manual_seed(seed)
        self.updates = 0

    @property
    def action_low(self) -> float:
        return self.config.action_low

    @property
    def action_high(self) -> float:
        return self.config.action_high

    @property
    def alpha(self) -> float:
        return self.log_alpha.exp().item()

    def _to_env(self, a: torch.Tensor) -> torch.Tensor:
        c = self.config
        return (c.action_high + c.action_low) / 2 + (c.action_high - c.action_low) / 2 * a

    def _to_squashed(self, action: torch.Tensor) -> torch.Tensor:
        c = self.config
        return ((action - (c.action_high + c.action_low) / 2) / ((c.action_high - c.action_low) / 2)).clamp(-1.0, 1.0)

    @torch.no_grad()
    def select_action(self, states: torch.Tensor, deterministic: bool = False) -> torch.Tensor:
        states = torch.as_tensor(states, dtype=torch.float32)
        single = states.dim() == 1
        states = states.view(-1, STATE_DIM)
        if deterministic:
            a = torch.tanh(self.actor(states)[0])
        elif len(self.buffer) < self.config.warmup:
            a = torch.rand(len(states), generator=self.generator) * 2 - 1
        else:
            a, _ = self.actor.rsample(states, self.generator)
        action = self._to_env(a).clamp(self.action_low, self.action_high)
        return action[0] if single else action

    def store(self, transition: Transition) -> None:
        self.buffer.store(transition)

    def store_batch(self, state, action, reward, next_state, done) -> None:
        self.buffer.store_batch(state, action, reward, next_state, done)

    def update(self, buffer: Optional[ReplayBuffer] = None) -> Optional[dict]:
        """One gradient step on critics, actor and temperature.

        Returns ``None`` (no-op) while the buffer holds fewer than batch_size
        transitions, otherwise a dict of scalar diagnostics.
        """
        buffer = buffer or self.buffer
        c = self.config
        if len(buffer) < c.batch_size:
            return None
        s, action, r, s1, done = buffer.sample(c.batch_size)
        a = self._to_squashed(action)
        alpha = self.log_alpha.exp().detach()

        with torch.no_grad():
            a1, logp1 = self.actor.rsample(s1, self.generator)
            q_next = torch.min(self.q1_target(s1, a1), self.q2_target(s1, a1)) - alpha * logp1
            target = r + c.gamma * (1 - done) * q_next
        q1, q2 = self.q1(s, a), self.q2(s, a)
        critic_loss = F.mse_loss(q1, target) + F.mse_loss(q2, target)
        self.critic_opt.zero_grad()
        critic_loss.backward()
        self.critic_opt.step()

        a_new, logp = self.actor.rsample(s, self.generator)
        q_new = torch.min(self.q1(s, a_new), self.q2(s, a_new))
        actor_loss = (alpha * logp - q_new).mean()
        self.actor_opt.zero_grad()
        actor_loss.backward()
        self.actor_opt.step()

        alpha_loss = -(self.log_alpha * (logp.detach() + c.target_entropy)).mean()
        self.alpha_opt.zero_grad()
        alpha_loss.backward()
        self.alpha_opt.step()

        self.soft_update_targets(c.tau)
        self.updates += 1
        return {"critic_loss": critic_loss.item(), "actor_loss": actor_loss.item(),
                "alpha_loss": alpha_loss.item(), "alpha": self.alpha, "q_mean": q1.mean().item(),
                "entropy": -logp.mean().item()}

    @torch.no_grad()
    def soft_update_targets(self, tau: float) -> None:
        if not 0 <= tau <= 1:
            raise ValueError("tau must lie in [0, 1]")
        for online, target in ((self.q1, self.q1_target), (self.q2, self.q2_target)):
            for p, tp in zip(online.parameters(), target.parameters()):
                tp.mul_(1 - tau).add_(p, alpha=tau)

    @torch.no_grad()
    def q_value(self, states: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        a = self._to_squashed(torch.as_tensor(actions, dtype=torch.float32))
        s = torch.as_tensor(states, dtype=torch.float32)
        return torch.min(self.q1(s, a), self.q2(s, a))

    def state_dict(self, include_buffer: bool = False) -> dict:
        d = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "actor": self.actor.state_dict(),
            "q1": self.q1.state_dict(), "q2": self.q2.state_dict(),
            "q1_target": self.q1_target.state_dict(), "q2_target": self.q2_target.state_dict(),
            "log_alpha": self.log_alpha.detach().clone(),
            "actor_opt": self.actor_opt.state_dict(), "critic_opt": self.critic_opt.state_dict(),
            "alpha_opt": self.alpha_opt.state_dict(),
            "generator": self.generator.get_state(),
            "updates": self.updates,
        }
        if include_buffer:
            d["buffer"] = self.buffer.state_dict()
        return d

    def load_state_dict(self, d: dict) -> None:
        if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} checkpoint")
        for name in ("actor", "q1", "q2", "q1_target", "q2_target", "actor_opt", "critic_opt", "alpha_opt"):
            getattr(self, name).load_state_dict(d[name])
        with torch.no_grad():
            self.log_alpha.copy_(d["log_alpha"])
        self.generator.set_state(d["generator"])
        self.updates = d["updates"]
        if "buffer" in d:
            self.buffer.load_state_dict(d["buffer"])

    @classmethod
    def from_state_dict(cls, d: dict, seed: int = 0) -> "SACAgent":
        agent = cls(AgentConfig(**d["config"]), seed=seed)
        agent.load_state_dict(d)
        return agent

    def save(self, path, include_buffer: bool = False) -> None:
        torch.save(self.state_dict(include_buffer), path)

    @classmethod
    def load(cls, path, seed: int = 0) -> "SACAgent":
        return cls.from_state_dict(torch.load(path, weights_only=False), seed=seed)
