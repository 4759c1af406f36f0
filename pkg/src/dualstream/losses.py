"""Auxiliary objectives and total-loss assembly."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .encoders import orthogonal_init

EPS = 1e-8
COMPONENTS = ("L_trans", "L_SG", "L_R", "L_pi", "L_Q")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value: float, step: int | None = None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"loss component {component} is non-finite ({value}){where}")
        self.component = component
        self.step = step


def mlp(in_dim: int, out_dim: int, hidden: int = 128, layers: int = 2) -> nn.Sequential:
    mods, d = [], in_dim
    for _ in range(layers):
        mods += [nn.Linear(d, hidden), nn.ReLU()]
        d = hidden
    mods.append(nn.Linear(d, out_dim))
    net = nn.Sequential(*mods)
    net.apply(orthogonal_init)
    return net


class MotionPredictor(nn.Module):
    """Predicts the next compact motion vector from the current one and the action."""

    def __init__(self, feature_dim: int, action_dim: int = 2, hidden: int = 128):
        super().__init__()
        self.net = mlp(feature_dim + action_dim, feature_dim, hidden)

    def forward(self, f_m, action):
        return self.net(torch.cat([f_m, action], dim=-1))


class RewardHead(nn.Module):
    def __init__(self, feature_dim: int, action_dim: int = 2, hidden: int = 128):
        super().__init__()
        self.net = mlp(feature_dim + action_dim, 1, hidden)

    def forward(self, f, action):
        return self.net(torch.cat([f, action], dim=-1)).squeeze(-1)


def similarity_loss(f_s: torch.Tensor, h_hat: torch.Tensor, eps: float = EPS) -> tuple[torch.Tensor, int]:
    """Mean over the batch of ``|F_s - H|_1 / |H|_1``.

    Samples whose target has L1 norm <= ``eps`` (an empty scene encoded to
    an all-zero map) are left out; the second return value counts them.
    """
    if f_s.shape != h_hat.shape:
        raise ValueError(f"shape mismatch {tuple(f_s.shape)} vs {tuple(h_hat.shape)}")
    num = (f_s - h_hat).abs().flatten(1).sum(1)
    den = h_hat.abs().flatten(1).sum(1)
    keep = den > eps
    skipped = int((~keep).sum())
    if not keep.any():
        return f_s.sum() * 0.0, skipped
    return (num[keep] / den[keep]).mean(), skipped


def transition_loss(predictor: nn.Module, f_m: torch.Tensor, action: torch.Tensor,
                    f_m_next: torch.Tensor) -> torch.Tensor:
    """Squared L2 error of the next motion vector, averaged over the batch.
    The target is treated as data."""
    pred = predictor(f_m, action)
    if pred.shape != f_m_next.shape:
        raise ValueError(f"predictor output {tuple(pred.shape)} vs target {tuple(f_m_next.shape)}")
    return ((pred - f_m_next.detach()) ** 2).sum(-1).mean()


def reward_loss(head: nn.Module, f: torch.Tensor, action: torch.Tensor, r_next: torch.Tensor,
                norm: str = "l1") -> torch.Tensor:
    pred = head(f, action)
    if pred.shape != r_next.shape:
        raise ValueError(f"reward prediction {tuple(pred.shape)} vs target {tuple(r_next.shape)}")
    err = pred - r_next
    if norm == "l1":
        return err.abs().mean()
    if norm == "l2":
        return (err**2).mean()
    raise ValueError(f"unknown reward norm {norm!r}")


@dataclass
class LossReport:
    L_trans: float = 0.0
    L_SG: float = 0.0
    L_R: float = 0.0
    L_pi: float = 0.0
    L_Q: float = 0.0
    total: float = 0.0
    w_trans: float = 1.0
    w_sg: float = 1.0
    w_reward: float = 1.0
    w_pi: float = 1.0
    w_q: float = 1.0

    def as_dict(self) -> dict:
        return asdict(self)


WEIGHT_OF = {"L_trans": "w_trans", "L_SG": "w_sg", "L_R": "w_reward", "L_pi": "w_pi", "L_Q": "w_q"}


def total_loss(components: dict, weights=None, step: int | None = None):
    """Weighted sum of the five objectives.

    ``components`` maps names in :data:`COMPONENTS` to scalars (tensors or
    floats); missing ones count as 0.  ``weights`` is a ``LossConfig`` or a
    mapping with ``w_*`` keys; a zero weight removes the term entirely, so
    ablated components are reported as 0.
    """
    if weights is None:
        w = {v: 1.0 for v in WEIGHT_OF.values()}
    elif isinstance(weights, dict):
        w = {v: float(weights.get(v, 1.0)) for v in WEIGHT_OF.values()}
    else:
        w = {v: float(getattr(weights, v)) for v in WEIGHT_OF.values()}

    unknown = set(components) - set(COMPONENTS)
    if unknown:
        raise KeyError(f"unknown loss components {sorted(unknown)}")

    total = 0.0
    values = {}
    for name in COMPONENTS:
        value = components.get(name, 0.0)
        scalar = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(scalar):
            raise NonFiniteLossError(name, scalar, step)
        weight = w[WEIGHT_OF[name]]
        if weight == 0.0:
            values[name] = 0.0
            continue
        values[name] = scalar
        total = total + weight * value
    report = LossReport(**values, total=float(total.detach()) if isinstance(total, torch.Tensor) else float(total), **w)
    return total, report
