"""Top-down decoder with auxiliary heads, and the multi-head boosting block.

Every forward pass evaluates all N dilated prediction branches. During training
one branch index is drawn per step; only that branch's logits enter the loss
with gradient, while the others contribute a gradient-free per-pixel weight
(``1 + sum of their BCE maps``). At inference the branch logits are summed and
passed through a sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autograd import Conv2d, ConvBNReLU, Module, Sequential, Tensor, no_grad
from .autograd import functional as F
from .losses import bce_map_array


@dataclass
class DecoderState:
    fused: tuple[Tensor, ...]
    cb_outputs: tuple[Tensor, ...]

    @property
    def final_feature(self) -> Tensor:
        return self.cb_outputs[0]


@dataclass
class PredictionSet:
    logits: list[Tensor]
    selected: Optional[int] = None
    history: list[int] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.logits)

    def __post_init__(self):
        shapes = {t.shape for t in self.logits}
        if len(shapes) > 1:
            raise ValueError(f"branch maps differ in shape: {sorted(shapes)}")
        if self.selected is not None and not 1 <= self.selected <= len(self.logits):
            raise ValueError(f"selected branch {self.selected} outside 1..{len(self.logits)}")


class ConvBlock(Sequential):
    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__(ConvBNReLU(channels, channels, 3, rng), ConvBNReLU(channels, channels, 3, rng))


class TopDownDecoder(Module):
    """``D4 = CB(F4)``; ``Di = CB(Fi + U(D(i+1)))`` for i = 3, 2, 1."""

    def __init__(self, channels: int, rng: np.random.Generator, levels: int = 4):
        super().__init__()
        self.blocks = [ConvBlock(channels, rng) for _ in range(levels)]

    def forward(self, fused: Sequence[Tensor]) -> DecoderState:
        if len(fused) != len(self.blocks):
            raise ValueError(f"decoder expects {len(self.blocks)} levels, got {len(fused)}")
        for fine, coarse in zip(fused, fused[1:]):
            for a, b in zip(fine.shape[-2:], coarse.shape[-2:]):
                if -(-a // 2) != b:
                    raise ValueError(f"level sizes {fine.shape[-2:]} -> {coarse.shape[-2:]} break the 2x chain")
        outs: list[Tensor] = [None] * len(fused)
        d = self.blocks[-1](fused[-1])
        outs[-1] = d
        for i in range(len(fused) - 2, -1, -1):
            d = self.blocks[i](fused[i] + F.resize_bilinear(d, fused[i].shape[-2:]))
            outs[i] = d
        return DecoderState(tuple(fused), tuple(outs))


class AuxHeads(Module):
    """One 1x1 logit conv per decoder level, resized to the input resolution."""

    def __init__(self, channels: int, rng: np.random.Generator, levels: int = 4):
        super().__init__()
        self.heads = [Conv2d(channels, 1, 1, rng, padding=0) for _ in range(levels)]

    def forward(self, state: DecoderState, out_hw: tuple[int, int]) -> list[Tensor]:
        return [F.resize_bilinear(head(d), out_hw) for head, d in zip(self.heads, state.cb_outputs)]


def default_dilations(n: int) -> tuple[int, ...]:
    return tuple(2 ** i for i in range(n))


class PredictionBranch(Sequential):
    def __init__(self, channels: int, hidden: int, dilation: int, rng: np.random.Generator):
        super().__init__(ConvBNReLU(channels, hidden, 3, rng, dilation=dilation), Conv2d(hidden, 1, 1, rng, padding=0))
        self.dilation = dilation


class MultiHeadBoosting(Module):
    def __init__(self, channels: int, n_branches: int, rng: np.random.Generator,
                 dilations: Optional[Sequence[int]] = None, hidden: Optional[int] = None):
        super().__init__()
        if n_branches < 1:
            raise ValueError(f"need at least one branch, got {n_branches}")
        dilations = tuple(dilations) if dilations is not None else default_dilations(n_branches)
        if len(dilations) != n_branches:
            raise ValueError(f"{len(dilations)} dilation rates for {n_branches} branches")
        hidden = hidden or max(1, channels // 2)
        self.branches = [PredictionBranch(channels, hidden, d, rng) for d in dilations]

    @property
    def n(self) -> int:
        return len(self.branches)

    def branch_parameter_names(self, index: int, prefix: str = "") -> list[str]:
        """Dotted names of the parameters exclusive to 1-based branch ``index``."""
        return [f"{prefix}branches.{index - 1}.{name}" for name, _ in self.branches[index - 1].named_parameters()]

    def forward(self, feature: Tensor, out_hw: tuple[int, int]) -> PredictionSet:
        h, w = feature.shape[-2:]
        for branch in self.branches:
            reach = 2 * branch.dilation + 1
            if reach > 4 * min(h, w):
                raise ValueError(f"dilation {branch.dilation} too large for a {h}x{w} feature map")
        return PredictionSet([F.resize_bilinear(branch(feature), out_hw) for branch in self.branches])


def select_branch(rng: np.random.Generator, n: int) -> int:
    """Uniform draw of a 1-based branch index."""
    if n < 1:
        raise ValueError(f"need at least one branch, got {n}")
    return int(rng.integers(1, n + 1))


def boosting_weight(preds: PredictionSet, g) -> Tensor:
    """Per-pixel ``1 + sum over non-selected branches of BCE(sigmoid(P_i), g)``, gradient-free."""
    if preds.selected is None:
        raise ValueError("boosting weight needs a selected branch")
    g = np.asarray(g.data if isinstance(g, Tensor) else g)
    ref = preds.logits[0]
    if g.shape != ref.shape:
        raise ValueError(f"mask shape {g.shape} != prediction shape {ref.shape}")
    weight = np.ones(ref.shape, dtype=ref.dtype)
    with no_grad():
        for i, logits in enumerate(preds.logits, start=1):
            if i == preds.selected:
                continue
            weight += bce_map_array(F.sigmoid_array(logits.data), g).astype(ref.dtype)
    return Tensor(weight, dtype=ref.dtype)


def aggregate_inference(preds: PredictionSet) -> np.ndarray:
    """Saliency map ``sigmoid(sum_i P_i)``.

    The logits are sorted per pixel before summing so the result does not
    depend on branch order, down to the last bit.
    """
    stacked = np.sort(np.stack([logits.data for logits in preds.logits]).astype(np.float64), axis=0)
    return F.sigmoid_array(stacked.sum(axis=0))
