"""Cross-attention between the knowledge-aware map and motion features.

Both inputs are reduced by a 1x1 convolution to ``C'`` channels and flattened
to ``(N, C')`` with ``N = H_f * W_f`` spatial rows.  The interaction map is

    X = softmax(softmax(H F^T / sqrt(C')) + softmax(F H^T / sqrt(C')))

with every softmax taken over rows, so ``X`` is ``(N, N)`` and row-stochastic.
Two separate fully connected maps turn ``X`` into ``(N, C)`` offsets that are
added to the semantic and motion feature maps.
"""
from __future__ import annotations

import math

import torch
from torch import nn

from .encoders import orthogonal_init


def attention_map(h: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
    """Bidirectional attention over spatial rows; inputs ``(..., N, C')``."""
    if h.shape != f.shape:
        raise ValueError(f"attention inputs must match, got {tuple(h.shape)} and {tuple(f.shape)}")
    if not (torch.isfinite(h).all() and torch.isfinite(f).all()):
        raise ValueError("attention inputs contain non-finite values")
    scale = 1.0 / math.sqrt(h.shape[-1])
    a1 = torch.softmax(h @ f.transpose(-1, -2) * scale, dim=-1)
    a2 = torch.softmax(f @ h.transpose(-1, -2) * scale, dim=-1)
    return torch.softmax(a1 + a2, dim=-1)


def fuse(f_s: torch.Tensor, f_m: torch.Tensor) -> torch.Tensor:
    if f_s.shape != f_m.shape:
        raise ValueError(f"cannot fuse vectors of shape {tuple(f_s.shape)} and {tuple(f_m.shape)}")
    return torch.cat([f_s, f_m], dim=-1)


class Interaction(nn.Module):
    def __init__(self, channels: int, spatial: int, reduced_channels: int = 16):
        super().__init__()
        self.channels = channels
        self.spatial = spatial
        self.n = spatial * spatial
        self.reduce_key = nn.Conv2d(channels, reduced_channels, 1)
        self.reduce_motion = nn.Conv2d(channels, reduced_channels, 1)
        self.fn_semantic = nn.Linear(self.n, channels)
        self.fn_motion = nn.Linear(self.n, channels)
        self.apply(orthogonal_init)

    def _check_map(self, fmap: torch.Tensor) -> None:
        want = (self.channels, self.spatial, self.spatial)
        if fmap.dim() != 4 or tuple(fmap.shape[1:]) != want:
            raise ValueError(f"expected feature map (B, {want[0]}, {want[1]}, {want[2]}), got {tuple(fmap.shape)}")

    def reduce(self, conv: nn.Conv2d, fmap: torch.Tensor) -> torch.Tensor:
        """1x1 conv then flatten: (B, C, H_f, W_f) -> (B, N, C')."""
        self._check_map(fmap)
        return conv(fmap).flatten(2).transpose(1, 2)

    def interaction_map(self, key: torch.Tensor, motion: torch.Tensor) -> torch.Tensor:
        return attention_map(self.reduce(self.reduce_key, key), self.reduce(self.reduce_motion, motion))

    def enhance(self, f_s: torch.Tensor, f_m: torch.Tensor, x: torch.Tensor):
        self._check_map(f_s)
        self._check_map(f_m)
        if tuple(x.shape[-2:]) != (self.n, self.n):
            raise ValueError(f"interaction map must be ({self.n}, {self.n}), got {tuple(x.shape[-2:])}")
        shape = f_s.shape
        ds = self.fn_semantic(x).transpose(1, 2).reshape(shape)
        dm = self.fn_motion(x).transpose(1, 2).reshape(shape)
        return f_s + ds, f_m + dm

    def forward(self, key, f_s, f_m):
        x = self.interaction_map(key, f_m)
        f_s2, f_m2 = self.enhance(f_s, f_m, x)
        return f_s2, f_m2, x
