"""The full bilateral saliency network and its ablation variants."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .autograd import Module, Tensor
from .autograd import functional as F
from .decoder import AuxHeads, DecoderState, MultiHeadBoosting, PredictionSet, TopDownDecoder
from .detail import DetailBranch
from .fusion import AddFusion, AFConfig, AttentionFusion, SingleProjection
from .semantic import SemanticBranch

BACKBONES = ("bilateral", "detail", "semantic")
FUSIONS = ("af", "add")


@dataclass
class ModelConfig:
    detail_input_size: int = 64
    semantic_input_size: int = 16
    detail_channels: tuple[int, ...] = (16, 32, 64, 128)
    semantic_dims: tuple[int, ...] = (32, 64, 128, 256)
    channels: int = 64
    n_branches: int = 4
    dilations: Optional[tuple[int, ...]] = None
    backbone: str = "bilateral"
    fusion: str = "af"
    patch: int = 2
    window: int = 4

    def __post_init__(self):
        self.detail_channels = tuple(self.detail_channels)
        self.semantic_dims = tuple(self.semantic_dims)
        if self.dilations is not None:
            self.dilations = tuple(self.dilations)
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.detail_input_size % 32:
            raise ValueError(f"detail_input_size {self.detail_input_size} is not a multiple of 32")
        if self.semantic_input_size % self.patch:
            raise ValueError(f"semantic_input_size {self.semantic_input_size} is not a multiple of {self.patch}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelOutput:
    aux_logits: list[Tensor]
    preds: PredictionSet
    state: DecoderState
    extras: dict = field(default_factory=dict)


class BilateralSOD(Module):
    """Detail CNN + semantic transformer, fused per level, decoded top-down, predicted by N heads.

    Single-branch variants keep the decoder and heads but feed it one backbone's
    pyramid through 1x1 projections; the semantic-only variant resizes its maps
    onto the detail strides so the decoder sees the same geometry.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        af = AFConfig(channels=cfg.channels)
        self.detail = None
        self.semantic = None
        if cfg.backbone in ("bilateral", "detail"):
            self.detail = DetailBranch(rng, cfg.detail_channels)
        if cfg.backbone in ("bilateral", "semantic"):
            self.semantic = SemanticBranch(rng, cfg.semantic_input_size, cfg.semantic_dims, patch=cfg.patch,
                                           window=cfg.window)
        if cfg.backbone == "bilateral":
            fusion_cls = AttentionFusion if cfg.fusion == "af" else AddFusion
            self.fusions = [fusion_cls(x_ch, y_ch, rng, AFConfig(channels=cfg.channels, level=i + 1))
                            for i, (x_ch, y_ch) in enumerate(zip(cfg.semantic_dims, cfg.detail_channels))]
        else:
            widths = cfg.detail_channels if cfg.backbone == "detail" else cfg.semantic_dims
            self.fusions = [SingleProjection(w, rng, af) for w in widths]
        self.decoder = TopDownDecoder(cfg.channels, rng)
        self.aux = AuxHeads(cfg.channels, rng)
        self.mhb = MultiHeadBoosting(cfg.channels, cfg.n_branches, rng, cfg.dilations)

    def backbone_parameters(self):
        for prefix, module in (("detail.", self.detail), ("semantic.", self.semantic)):
            if module is not None:
                yield from module.named_parameters(prefix)

    def head_parameters(self):
        backbone = {name for name, _ in self.backbone_parameters()}
        for name, p in self.named_parameters():
            if name not in backbone:
                yield name, p

    def branch_parameter_names(self, index: int) -> list[str]:
        return self.mhb.branch_parameter_names(index, prefix="mhb.")

    def fuse(self, image: Tensor) -> list[Tensor]:
        h, w = image.shape[-2:]
        if self.cfg.backbone == "bilateral":
            ys, xs = self.detail(image), self.semantic(image)
            return [fusion(x, y) for fusion, x, y in zip(self.fusions, xs, ys)]
        if self.cfg.backbone == "detail":
            return [proj(r) for proj, r in zip(self.fusions, self.detail(image))]
        sizes = [(h // s, w // s) for s in (2, 4, 8, 16)]
        return [F.resize_bilinear(proj(t), hw) for proj, t, hw in zip(self.fusions, self.semantic(image), sizes)]

    def forward(self, image: Tensor) -> ModelOutput:
        out_hw = image.shape[-2:]
        state = self.decoder(self.fuse(image))
        aux = self.aux(state, out_hw)
        preds = self.mhb(state.final_feature, out_hw)
        return ModelOutput(aux, preds, state)
