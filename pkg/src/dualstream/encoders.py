"""Semantic and motion convolutional encoders.

Both streams share one architecture: four 3x3 conv layers with ReLU, then a
fully connected layer plus layer norm that squeezes the last feature map into
a compact vector.  They differ only in the input channel count: 3 for the
latest RGB frame, 6 for the two stacked residuals of adjacent frames.

Inputs are channels-last float tensors ``(B, H, W, C)`` in ``[0, 1]``
(residuals in ``[-1, 1]``), matching how frames come out of the simulator.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from torch import nn


def orthogonal_init(module: nn.Module) -> None:
    if isinstance(module, (nn.Linear, nn.Conv2d)):
        nn.init.orthogonal_(module.weight)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def conv_output_size(size: int, strides: Sequence[int]) -> int:
    for s in strides:
        size = (size + 2 - 3) // s + 1
    return size


class ConvEncoder(nn.Module):
    def __init__(self, in_channels: int, image_size: int, channels: int = 32,
                 feature_dim: int = 64, strides: Sequence[int] = (2, 2, 2, 1)):
        super().__init__()
        self.in_channels = in_channels
        self.image_size = image_size
        self.channels = channels
        self.feature_dim = feature_dim
        self.strides = tuple(strides)
        self.spatial = conv_output_size(image_size, self.strides)

        convs, c = [], in_channels
        for s in self.strides:
            convs.append(nn.Conv2d(c, channels, 3, stride=s, padding=1))
            c = channels
        self.convs = nn.ModuleList(convs)
        self.fc = nn.Linear(channels * self.spatial * self.spatial, feature_dim)
        self.ln = nn.LayerNorm(feature_dim)
        self.apply(orthogonal_init)

    @property
    def map_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.spatial, self.spatial)

    def _check(self, x: torch.Tensor) -> None:
        want = (self.image_size, self.image_size, self.in_channels)
        if x.dim() != 4 or tuple(x.shape[1:]) != want:
            raise ValueError(f"expected input (B, {want[0]}, {want[1]}, {want[2]}), got {tuple(x.shape)}")

    def feature_map(self, x: torch.Tensor) -> torch.Tensor:
        """Channels-last batch -> (B, C, H_f, W_f) feature map."""
        self._check(x)
        h = x.permute(0, 3, 1, 2)
        for conv in self.convs:
            h = torch.relu(conv(h))
        return h

    def compact(self, fmap: torch.Tensor) -> torch.Tensor:
        if tuple(fmap.shape[1:]) != self.map_shape:
            raise ValueError(f"expected feature map {self.map_shape}, got {tuple(fmap.shape[1:])}")
        return self.ln(self.fc(fmap.flatten(1)))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        fmap = self.feature_map(x)
        return fmap, self.compact(fmap)


def semantic_encoder(image_size: int, channels: int = 32, feature_dim: int = 64) -> ConvEncoder:
    return ConvEncoder(3, image_size, channels, feature_dim)


def motion_encoder(image_size: int, channels: int = 32, feature_dim: int = 64) -> ConvEncoder:
    return ConvEncoder(6, image_size, channels, feature_dim)


def motion_input(frames):
    """Residuals of adjacent frames, ``[o_{t-1} - o_{t-2}, o_t - o_{t-1}]``,
    stacked along the channel axis.

    ``frames`` has shape ``(..., 3, H, W, 3)``; the result ``(..., H, W, 6)``.
    Works on numpy arrays and torch tensors.
    """
    if frames.shape[-4] != 3:
        raise ValueError(f"motion input needs exactly 3 frames, got {frames.shape[-4]}")
    first = frames[..., 1, :, :, :] - frames[..., 0, :, :, :]
    second = frames[..., 2, :, :, :] - frames[..., 1, :, :, :]
    if isinstance(frames, torch.Tensor):
        return torch.cat([first, second], dim=-1)
    return np.concatenate([first, second], axis=-1)


def encode_mask(encoder: ConvEncoder, aggregate: torch.Tensor, grad: bool = False) -> torch.Tensor:
    """Push a one-channel mask aggregate ``(B, H, W)`` through the semantic
    encoder's conv stack, replicating it to three channels.

    By default the result is a constant target: no gradient reaches the
    encoder through this path.
    """
    if aggregate.dim() != 3 or tuple(aggregate.shape[1:]) != (encoder.image_size, encoder.image_size):
        raise ValueError(f"mask aggregate must be (B, {encoder.image_size}, {encoder.image_size}), "
                         f"got {tuple(aggregate.shape)}")
    x = aggregate.unsqueeze(-1).expand(-1, -1, -1, 3)
    if grad:
        return encoder.feature_map(x)
    with torch.no_grad():
        return encoder.feature_map(x)
