"""Low-resolution windowed self-attention transformer producing the semantic pyramid.

Tokens live in (B, H, W, C) grids. Each stage runs a plain-window block then a
shifted-window block; stages are joined by 2x2 patch merging, which edge-pads
odd grids so the next stage has ``ceil(size / 2)`` tokens per side.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autograd import Conv2d, LayerNorm, Linear, Module, Parameter, Tensor
from .autograd import functional as F


@dataclass
class SemanticPyramid:
    features: tuple[Tensor, Tensor, Tensor, Tensor]
    token_dims: tuple[int, ...]

    def __iter__(self):
        return iter(self.features)

    def __getitem__(self, i):
        return self.features[i]

    @property
    def spatial_sizes(self) -> tuple[int, ...]:
        return tuple(f.shape[-1] for f in self.features)


def stage_sizes(input_size: int, patch: int = 2, stages: int = 4) -> tuple[int, ...]:
    sizes = [input_size // patch]
    for _ in range(stages - 1):
        sizes.append(-(-sizes[-1] // 2))
    return tuple(sizes)


def downsample_input(image: Tensor, target: int, patch: int = 2) -> Tensor:
    """Bilinear resize of an NCHW image to ``target x target``."""
    if target < patch:
        raise ValueError(f"semantic input size {target} is smaller than the patch size {patch}")
    h, w = image.shape[-2:]
    if target > min(h, w):
        raise ValueError(f"cannot downsample {h}x{w} to a larger {target}x{target}")
    return F.resize_bilinear(image, (target, target))


def relative_position_index(window: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.transpose(1, 2, 0) + (window - 1)
    return rel[..., 0] * (2 * window - 1) + rel[..., 1]


def shifted_window_mask(height: int, width: int, window: int, shift: int) -> np.ndarray:
    """Additive (nWindows, L, L) mask blocking attention across rolled-together regions."""
    ids = np.zeros((height, width), dtype=np.int64)
    label = 0
    bands = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    for hs in bands:
        for ws in bands:
            ids[hs, ws] = label
            label += 1
    ids = ids.reshape(height // window, window, width // window, window).transpose(0, 2, 1, 3)
    ids = ids.reshape(-1, window * window)
    return np.where(ids[:, :, None] != ids[:, None, :], -100.0, 0.0)


class WindowAttention(Module):
    def __init__(self, dim: int, heads: int, window: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads:
            raise ValueError(f"token dim {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.window = dim, heads, window
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.rel_bias_table = Parameter(rng.normal(0.0, 0.02, size=((2 * window - 1) ** 2, heads)))
        self.rel_index = relative_position_index(window)

    def relative_bias(self) -> Tensor:
        length = self.window * self.window
        bias = F.take(self.rel_bias_table, self.rel_index.reshape(-1), axis=0)
        return F.transpose(F.reshape(bias, (length, length, self.heads)), (2, 0, 1))

    def forward(self, windows: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        d = self.dim
        qkv = self.qkv(windows)
        q, k, v = qkv[..., :d], qkv[..., d:2 * d], qkv[..., 2 * d:]
        out = F.attention(q, k, v, self.heads, bias=self.relative_bias(), mask=mask)
        return self.proj(out)


class Mlp(Module):
    def __init__(self, dim: int, ratio: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(dim, dim * ratio, rng)
        self.fc2 = Linear(dim * ratio, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.relu(self.fc1(x)))


class SwinBlock(Module):
    """Pre-norm window attention + MLP, each with a residual connection.

    When the grid fits inside one window the window shrinks to the grid and the
    shift is dropped, so a shifted block degenerates to plain window attention.
    """

    def __init__(self, dim: int, heads: int, window: int, shift: bool, resolution: int,
                 rng: np.random.Generator, mlp_ratio: int = 4):
        super().__init__()
        if resolution <= window:
            window, shift = resolution, False
        self.window = window
        self.shift = window // 2 if shift else 0
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio, rng)
        self._mask_cache: dict[tuple[int, int], np.ndarray] = {}

    def _mask(self, hp: int, wp: int) -> np.ndarray:
        key = (hp, wp)
        if key not in self._mask_cache:
            self._mask_cache[key] = shifted_window_mask(hp, wp, self.window, self.shift)
        return self._mask_cache[key]

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        ws, s = self.window, self.shift
        y = self.norm1(x)
        ph, pw = (-h) % ws, (-w) % ws
        if ph or pw:
            y = F.pad(y, [(0, 0), (0, ph), (0, pw), (0, 0)], mode="edge")
        hp, wp = h + ph, w + pw
        mask = None
        if s:
            y = F.roll(y, (-s, -s), (1, 2))
            mask = self._mask(hp, wp)
        windows = self.attn(F.window_partition(y, ws), mask=mask)
        y = F.window_merge(windows, ws, hp, wp)
        if s:
            y = F.roll(y, (s, s), (1, 2))
        if ph or pw:
            y = y[:, :h, :w, :]
        x = x + y
        return x + self.mlp(self.norm2(x))


class PatchMerging(Module):
    def __init__(self, dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, out_dim, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            x = F.pad(x, [(0, 0), (0, h % 2), (0, w % 2), (0, 0)], mode="edge")
        parts = [x[:, 0::2, 0::2, :], x[:, 1::2, 0::2, :], x[:, 0::2, 1::2, :], x[:, 1::2, 1::2, :]]
        return self.reduction(self.norm(F.concat(parts, axis=-1)))


class PatchEmbed(Module):
    def __init__(self, dim: int, patch: int, rng: np.random.Generator):
        super().__init__()
        self.patch = patch
        self.proj = Conv2d(3, dim, patch, rng, stride=patch, padding=0)
        self.norm = LayerNorm(dim)

    def forward(self, image: Tensor) -> Tensor:
        x = F.transpose(self.proj(image), (0, 2, 3, 1))
        return self.norm(x)


class _Stage(Module):
    def __init__(self, blocks, norm):
        super().__init__()
        self.blocks = list(blocks)
        self.norm = norm

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        for block in self.blocks:
            x = block(x)
        return x, F.transpose(self.norm(x), (0, 3, 1, 2))


class SemanticBranch(Module):
    def __init__(self, rng: np.random.Generator, input_size: int = 16, dims: Sequence[int] = (32, 64, 128, 256),
                 patch: int = 2, window: int = 4, head_dim: int = 32, mlp_ratio: int = 4):
        super().__init__()
        if input_size % patch:
            raise ValueError(f"semantic input size {input_size} is not a multiple of patch size {patch}")
        self.input_size, self.patch, self.dims = input_size, patch, tuple(dims)
        self.sizes = stage_sizes(input_size, patch, len(dims))
        self.embed = PatchEmbed(dims[0], patch, rng)
        self.stages = []
        self.merges = []
        for i, (dim, size) in enumerate(zip(dims, self.sizes)):
            heads = max(1, dim // head_dim)
            blocks = [SwinBlock(dim, heads, window, shift, size, rng, mlp_ratio) for shift in (False, True)]
            self.stages.append(_Stage(blocks, LayerNorm(dim)))
            if i + 1 < len(dims):
                self.merges.append(PatchMerging(dim, dims[i + 1], rng))

    def forward(self, image: Tensor) -> SemanticPyramid:
        small = image
        if image.shape[-1] != self.input_size or image.shape[-2] != self.input_size:
            small = downsample_input(image, self.input_size, self.patch)
        x = self.embed(small)
        outs = []
        for i, stage in enumerate(self.stages):
            x, grid = stage(x)
            outs.append(grid)
            if i < len(self.merges):
                x = self.merges[i](x)
        return SemanticPyramid(tuple(outs), self.dims)
