"""Attention Feature Fusion of a transformer map X with a CNN map Y.

    F_mid = C_br( U(R_ca(Y) * X)  concat  (R_sa(X) * Y) )
    F_out = C_br( U(C(X)) + F_mid + C(Y) )

R_ca gates X's channels with a global-pooled bottleneck of Y; R_sa gates Y's
pixels with a one-channel map computed from X. U resizes to Y's grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Conv2d, ConvBNReLU, Module, Tensor
from .autograd import functional as F


@dataclass(frozen=True)
class AFConfig:
    channels: int = 64
    level: int = 1


def _check_sizes(x: Tensor, y: Tensor) -> None:
    if x.shape[-2] > y.shape[-2] or x.shape[-1] > y.shape[-1]:
        raise ValueError(f"transformer map {x.shape[-2:]} is larger than CNN map {y.shape[-2:]}")


class ChannelAttention(Module):
    """Global average pool -> 1x1 bottleneck (C -> C/4 -> C) -> sigmoid."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        if channels < 4:
            raise ValueError(f"channel attention needs at least 4 channels, got {channels}")
        self.squeeze = Conv2d(channels, channels // 4, 1, rng, padding=0)
        self.excite = Conv2d(channels // 4, channels, 1, rng, padding=0)

    def forward(self, y: Tensor) -> Tensor:
        pooled = F.global_avg_pool2d(y)
        return F.sigmoid(self.excite(F.relu(self.squeeze(pooled))))


class SpatialAttention(Module):
    """1x1 conv to one channel -> sigmoid -> bilinear resize to the target grid."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(channels, 1, 1, rng, padding=0)

    def forward(self, x: Tensor, target_hw: tuple[int, int]) -> Tensor:
        if target_hw[0] < x.shape[-2] or target_hw[1] < x.shape[-1]:
            raise ValueError(f"target {target_hw} smaller than source {x.shape[-2:]}")
        return F.resize_bilinear(F.sigmoid(self.conv(x)), target_hw)


class AttentionFusion(Module):
    """Fuse transformer feature ``x`` and CNN feature ``y`` at ``y``'s resolution.

    Both inputs are first projected by 1x1 convs to the common width, so the
    transformer and CNN widths of a level may differ.
    """

    def __init__(self, x_channels: int, y_channels: int, rng: np.random.Generator, cfg: AFConfig = AFConfig()):
        super().__init__()
        c = cfg.channels
        self.cfg = cfg
        self.proj_x = Conv2d(x_channels, c, 1, rng, padding=0)
        self.proj_y = Conv2d(y_channels, c, 1, rng, padding=0)
        self.channel_att = ChannelAttention(c, rng)
        self.spatial_att = SpatialAttention(c, rng)
        self.mid = ConvBNReLU(2 * c, c, 3, rng)
        self.conv_x = Conv2d(c, c, 3, rng)
        self.conv_y = Conv2d(c, c, 3, rng)
        self.out = ConvBNReLU(c, c, 3, rng)

    def project(self, x: Tensor, y: Tensor) -> tuple[Tensor, Tensor]:
        return self.proj_x(x), self.proj_y(y)

    def fuse(self, x: Tensor, y: Tensor) -> Tensor:
        """Apply the two fusion equations to already projected features."""
        _check_sizes(x, y)
        hw = y.shape[-2:]
        enhanced_x = F.resize_bilinear(self.channel_att(y) * x, hw)
        selected_y = self.spatial_att(x, hw) * y
        f_mid = self.mid(F.concat([enhanced_x, selected_y], axis=1))
        return self.out(F.resize_bilinear(self.conv_x(x), hw) + f_mid + self.conv_y(y))

    def forward(self, x: Tensor, y: Tensor) -> Tensor:
        px, py = self.project(x, y)
        return self.fuse(px, py)


class AddFusion(Module):
    """Ablation baseline: project, resize and add, then one conv-BN-ReLU."""

    def __init__(self, x_channels: int, y_channels: int, rng: np.random.Generator, cfg: AFConfig = AFConfig()):
        super().__init__()
        c = cfg.channels
        self.proj_x = Conv2d(x_channels, c, 1, rng, padding=0)
        self.proj_y = Conv2d(y_channels, c, 1, rng, padding=0)
        self.out = ConvBNReLU(c, c, 3, rng)

    def forward(self, x: Tensor, y: Tensor) -> Tensor:
        _check_sizes(x, y)
        px, py = self.proj_x(x), self.proj_y(y)
        return self.out(F.resize_bilinear(px, py.shape[-2:]) + py)


class SingleProjection(Module):
    """Single-branch ablations: bring one backbone's map to the common width."""

    def __init__(self, in_channels: int, rng: np.random.Generator, cfg: AFConfig = AFConfig()):
        super().__init__()
        self.proj = ConvBNReLU(in_channels, cfg.channels, 1, rng)

    def forward(self, feature: Tensor) -> Tensor:
        return self.proj(feature)
