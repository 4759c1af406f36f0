"""Soft actor-critic over a feature vector.

The actor is a tanh-squashed Gaussian; critics come in a pair with EMA
target copies and the target value uses the minimum of the two.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn

from .losses import mlp

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
LOG2 = math.log(2.0)


@dataclass
class PolicyOutput:
    action: torch.Tensor
    log_prob: torch.Tensor
    mean_action: torch.Tensor


def squash_log_det(u: torch.Tensor) -> torch.Tensor:
    """``log(1 - tanh(u)^2)`` summed over the last axis, in the overflow-free
    form ``2 (log 2 - u - softplus(-2u))``."""
    return (2.0 * (LOG2 - u - nn.functional.softplus(-2.0 * u))).sum(-1)


class Actor(nn.Module):
    def __init__(self, feature_dim: int, action_dim: int = 2, hidden: int = 256, layers: int = 2):
        super().__init__()
        self.action_dim = action_dim
        self.net = mlp(feature_dim, 2 * action_dim, hidden, layers)

    def distribution(self, f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mu, raw = self.net(f).chunk(2, dim=-1)
        log_std = LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (torch.tanh(raw) + 1.0)
        return mu, log_std

    def forward(self, f: torch.Tensor, deterministic: bool = False,
                generator: torch.Generator | None = None) -> PolicyOutput:
        if not torch.isfinite(f).all():
            raise ValueError("policy input contains non-finite features")
        mu, log_std = self.distribution(f)
        std = log_std.exp()
        if deterministic:
            u = mu
        else:
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
            u = mu + std * eps
        gauss = (-0.5 * ((u - mu) / std) ** 2 - log_std - 0.5 * math.log(2 * math.pi)).sum(-1)
        log_prob = gauss - squash_log_det(u)
        return PolicyOutput(torch.tanh(u), log_prob, torch.tanh(mu))


class Critic(nn.Module):
    def __init__(self, feature_dim: int, action_dim: int = 2, hidden: int = 256, layers: int = 2):
        super().__init__()
        self.q1 = mlp(feature_dim + action_dim, 1, hidden, layers)
        self.q2 = mlp(feature_dim + action_dim, 1, hidden, layers)

    def forward(self, f, a):
        x = torch.cat([f, a], dim=-1)
        return self.q1(x).squeeze(-1), self.q2(x).squeeze(-1)


PolicyFn = Callable[[torch.Tensor], tuple[torch.Tensor, torch.Tensor]]


def soft_target(critic_target: Critic, policy: PolicyFn, f_next, reward, done, gamma: float, alpha):
    """``r + gamma (1 - done) (min Q~(f', a') - alpha log pi(a'|f'))``, no grad."""
    with torch.no_grad():
        a_next, logp_next = policy(f_next)
        q1, q2 = critic_target(f_next, a_next)
        v_next = torch.min(q1, q2) - alpha * logp_next
        return reward + gamma * (1.0 - done) * v_next


def critic_loss(critic: Critic, critic_target: Critic, policy: PolicyFn, f, action, reward,
                f_next, done, gamma: float, alpha) -> torch.Tensor:
    """Soft Bellman error averaged over both critics."""
    y = soft_target(critic_target, policy, f_next, reward, done, gamma, alpha)
    q1, q2 = critic(f, action)
    return 0.5 * (((q1 - y) ** 2).mean() + ((q2 - y) ** 2).mean())


def actor_loss(actor: Actor, critic: Critic, f, alpha, generator: torch.Generator | None = None):
    """``mean(alpha log pi(a|f) - min Q(f, a))`` with reparameterised ``a``.

    Only the actor should be stepped on this loss; callers freeze the critic.
    ``f`` is detached so no gradient reaches the encoders.
    """
    out = actor(f.detach(), generator=generator)
    q1, q2 = critic(f.detach(), out.action)
    return (alpha * out.log_prob - torch.min(q1, q2)).mean(), out


def alpha_loss(log_alpha: torch.Tensor, log_prob: torch.Tensor, target_entropy: float) -> torch.Tensor:
    return -(log_alpha * (log_prob.detach() + target_entropy)).mean()


@torch.no_grad()
def target_update(online: nn.Module, target: nn.Module, tau: float) -> None:
    """``target <- (1 - tau) target + tau online``, elementwise."""
    for p, tp in zip(online.parameters(), target.parameters()):
        if tau == 1.0:
            tp.copy_(p)
        elif tau != 0.0:
            tp.mul_(1.0 - tau).add_(p, alpha=tau)


class SACAgent(nn.Module):
    """Actor, critic pair, target critics and the entropy temperature."""

    def __init__(self, feature_dim: int, action_dim: int = 2, actor_hidden: int = 256,
                 critic_hidden: int = 256, init_alpha: float = 0.1, alpha_mode: str = "auto",
                 layers: int = 2):
        super().__init__()
        self.action_dim = action_dim
        self.actor = Actor(feature_dim, action_dim, actor_hidden, layers)
        self.critic = Critic(feature_dim, action_dim, critic_hidden, layers)
        self.critic_target = copy.deepcopy(self.critic)
        for p in self.critic_target.parameters():
            p.requires_grad_(False)
        self.log_alpha = nn.Parameter(torch.tensor(math.log(max(init_alpha, 1e-12))),
                                      requires_grad=alpha_mode == "auto")
        self.alpha_mode = alpha_mode
        self.fixed_alpha = float(init_alpha)
        self.target_entropy = -float(action_dim)

    @property
    def alpha(self) -> torch.Tensor:
        if self.alpha_mode == "fixed":
            return torch.tensor(self.fixed_alpha, dtype=self.log_alpha.dtype)
        return self.log_alpha.exp().detach()

    def policy_fn(self, generator: torch.Generator | None = None) -> PolicyFn:
        def sample(f):
            out = self.actor(f, generator=generator)
            return out.action, out.log_prob
        return sample

    def select_action(self, f: torch.Tensor, deterministic: bool = False,
                      generator: torch.Generator | None = None) -> PolicyOutput:
        with torch.no_grad():
            return self.actor(f, deterministic=deterministic, generator=generator)
