"""Representation model: semantic + motion streams, interaction, fusion and
the auxiliary heads, switched by the ablation flags in ``ModelConfig``."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .encoders import ConvEncoder, encode_mask, motion_input
from .interaction import Interaction, fuse
from .losses import MotionPredictor, RewardHead


@dataclass
class FeatureBundle:
    F_s: torch.Tensor
    F_m: torch.Tensor | None
    f_s: torch.Tensor
    f_m: torch.Tensor | None
    f: torch.Tensor
    H_hat: torch.Tensor | None = None  # encoded knowledge mask
    F_s_raw: torch.Tensor | None = None  # semantic map before enhancement
    X: torch.Tensor | None = None


def frames_to_tensor(frames, dtype=torch.float32) -> torch.Tensor:
    """uint8 or float frames -> float tensor in [0, 1]."""
    t = torch.as_tensor(frames)
    if t.dtype == torch.uint8:
        return t.to(dtype) / 255.0
    return t.to(dtype)


class DualStreamModel(nn.Module):
    def __init__(self, image_size: int, cfg: ModelConfig | None = None, action_dim: int = 2):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.image_size = image_size
        self.semantic = ConvEncoder(3, image_size, cfg.channels, cfg.feature_dim)
        self.motion = ConvEncoder(6, image_size, cfg.channels, cfg.feature_dim)
        self.interaction = Interaction(cfg.channels, self.semantic.spatial, cfg.reduced_channels)
        self.predictor = MotionPredictor(cfg.feature_dim, action_dim, cfg.hidden_dim)
        self.reward_head = RewardHead(self.feature_dim, action_dim, cfg.hidden_dim)

    @property
    def feature_dim(self) -> int:
        return self.cfg.feature_dim * (2 if self.cfg.use_motion else 1)

    def forward(self, frames: torch.Tensor, mask: torch.Tensor | None = None,
                training: bool = True, use_interaction: bool | None = None) -> FeatureBundle:
        """``frames``: (B, 3, H, W, 3) window ending at o_t.  ``mask``: cached
        knowledge-mask aggregates (B, H, W), only consulted when training.

        When training with a mask, attention is keyed by the encoded mask;
        otherwise (evaluation, or no mask available) by the semantic map.
        """
        cfg = self.cfg
        if use_interaction is None:
            use_interaction = cfg.use_interaction
        F_s = self.semantic.feature_map(frames[:, -1])
        H_hat = None
        if mask is not None and training:
            H_hat = encode_mask(self.semantic, mask.to(F_s.dtype), grad=cfg.mask_grad)

        if not cfg.use_motion:
            f_s = self.semantic.compact(F_s)
            return FeatureBundle(F_s, None, f_s, None, f_s, H_hat, F_s)

        F_m = self.motion.feature_map(motion_input(frames))
        X = None
        F_s_out, F_m_out = F_s, F_m
        if use_interaction:
            key = F_s
            if H_hat is not None and not cfg.interaction_train_on_semantic:
                key = H_hat
            F_s_out, F_m_out, X = self.interaction(key, F_s, F_m)
        f_s = self.semantic.compact(F_s_out)
        f_m = self.motion.compact(F_m_out)
        return FeatureBundle(F_s_out, F_m_out, f_s, f_m, fuse(f_s, f_m), H_hat, F_s, X)

    def parameter_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {}
        for name, _ in self.named_parameters():
            groups.setdefault(name.split(".")[0], []).append(name)
        return groups
