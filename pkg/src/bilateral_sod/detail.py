"""High-resolution residual CNN producing the detail pyramid at strides 2, 4, 8, 16."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import BatchNorm2d, Conv2d, ConvBNReLU, Module, Tensor
from .autograd import functional as F

DETAIL_STRIDES = (2, 4, 8, 16)


@dataclass
class DetailPyramid:
    features: tuple[Tensor, Tensor, Tensor, Tensor]
    strides: tuple[int, ...] = DETAIL_STRIDES

    def __iter__(self):
        return iter(self.features)

    def __getitem__(self, i):
        return self.features[i]

    @property
    def spatial_sizes(self) -> tuple[int, ...]:
        return tuple(f.shape[-1] for f in self.features)


class BasicBlock(Module):
    """Two 3x3 convs with a shortcut; strided blocks project the shortcut with a 1x1 conv."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, stride=stride, bias=False)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, bias=False)
        self.bn2 = BatchNorm2d(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = _Projection(in_ch, out_ch, stride, rng)

    def forward(self, x: Tensor) -> Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class _Projection(Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, 1, rng, stride=stride, padding=0, bias=False)
        self.bn = BatchNorm2d(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x))


class DetailBranch(Module):
    """ResNet-18-proportioned CNN without the stem max-pool.

    The stem convolution keeps its stride of 2, so the four stages emit maps at
    1/2, 1/4, 1/8 and 1/16 of the input resolution.
    """

    def __init__(self, rng: np.random.Generator, channels: Sequence[int] = (16, 32, 64, 128),
                 blocks_per_stage: int = 2):
        super().__init__()
        channels = tuple(channels)
        if len(channels) != 4 or any(b <= a for a, b in zip(channels, channels[1:])):
            raise ValueError(f"need four strictly increasing stage widths, got {channels}")
        self.channels = channels
        self.stem = ConvBNReLU(3, channels[0], 3, rng, stride=2)
        self.stages = []
        in_ch = channels[0]
        for i, width in enumerate(channels):
            stride = 1 if i == 0 else 2
            blocks = [BasicBlock(in_ch, width, stride, rng)]
            blocks += [BasicBlock(width, width, 1, rng) for _ in range(blocks_per_stage - 1)]
            self.stages.append(_Stage(blocks))
            in_ch = width

    def forward(self, image: Tensor) -> DetailPyramid:
        h, w = image.shape[-2:]
        if image.shape[1] != 3:
            raise ValueError(f"detail branch expects 3 input channels, got {image.shape[1]}")
        if h % 32 or w % 32:
            raise ValueError(f"detail input {h}x{w} is not a multiple of 32")
        x = self.stem(image)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return DetailPyramid(tuple(feats))


class _Stage(Module):
    def __init__(self, blocks):
        super().__init__()
        self.blocks = list(blocks)

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x
