"""Segmentation losses: pixel BCE, weighted BCE, weighted IoU and their compositions.

Ratios are taken per sample for NCHW inputs (sums over C, H, W) and then
averaged over the batch; any other rank is treated as one sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autograd import Tensor
from .autograd import functional as F
from .autograd.functional import PROB_EPS


def _as_const(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.broadcast_to(np.asarray(value, dtype=like.dtype), like.shape), dtype=like.dtype)


def _sample_axes(t: Tensor):
    return (1, 2, 3) if t.ndim == 4 else None


def _reduce(t: Tensor) -> Tensor:
    axes = _sample_axes(t)
    return t.sum() if axes is None else F.sum(t, axis=axes)


def bce_map(p: Tensor, g) -> Tensor:
    """Per-pixel ``-(g log p + (1-g) log(1-p))``; ``p`` must already be clamped into (0, 1)."""
    if np.any(p.data <= 0.0) or np.any(p.data >= 1.0):
        raise ValueError("bce_map needs probabilities strictly inside (0, 1); clamp them first")
    g = _as_const(g, p)
    if g.shape != p.shape:
        raise ValueError(f"prediction {p.shape} and mask {g.shape} differ in shape")
    return F.neg(g * F.log(p) + F.invert(g) * F.log(F.invert(p)))


def bce_map_array(p: np.ndarray, g: np.ndarray, eps: float = PROB_EPS) -> np.ndarray:
    """Gradient-free BCE map on raw arrays, clamping ``p`` first."""
    p = np.clip(p, eps, 1.0 - eps)
    return -(g * np.log(p) + (1.0 - g) * np.log(1.0 - p))


def wbce(p: Tensor, g, w=None) -> Tensor:
    """``S(bce * w) / S(w)``."""
    w = _as_const(1.0 if w is None else w, p)
    total_w = _reduce(w)
    if np.any(total_w.data == 0):
        raise ZeroDivisionError("weight map sums to zero")
    return F.mean(_reduce(bce_map(p, g) * w) / total_w)


def wiou(p: Tensor, g, w=None) -> Tensor:
    """``1 - S(p g w) / (S((p + g) w) - S(p g w))``; empty prediction and mask score 0."""
    g = _as_const(g, p)
    w = _as_const(1.0 if w is None else w, p)
    inter = _reduce(p * g * w)
    union = _reduce((p + g) * w) - inter
    empty = union.data == 0
    safe = union + Tensor(empty.astype(p.dtype), dtype=p.dtype)
    per_sample = (1.0 - inter / safe) * Tensor((~empty).astype(p.dtype), dtype=p.dtype)
    return F.mean(per_sample)


def boost_loss(p: Tensor, g, w=None) -> Tensor:
    return wbce(p, g, w) + wiou(p, g, w)


@dataclass
class LossBreakdown:
    total: Tensor
    aux: list[float]
    boosted: float
    boosted_wbce: float
    boosted_wiou: float
    aux_wbce: list[float] = field(default_factory=list)
    aux_wiou: list[float] = field(default_factory=list)

    @property
    def total_value(self) -> float:
        return self.total.item()

    @property
    def aux_sum(self) -> float:
        return float(sum(self.aux))

    def components(self) -> dict[str, float]:
        return {"total": self.total_value, "boosted": self.boosted, "aux_sum": self.aux_sum,
                **{f"aux{i + 1}": v for i, v in enumerate(self.aux)}}


def total_loss(aux_logits: Sequence[Tensor], preds, g, boosting: bool = True,
               weight: Optional[Tensor] = None, synchronized: bool = False) -> LossBreakdown:
    """Unweighted BCE+IoU on each auxiliary map plus the boosted loss on the selected branch.

    ``preds`` is a :class:`~bilateral_sod.decoder.PredictionSet` with ``selected``
    set. The boosting weight is computed from the other branches unless given
    explicitly; with ``boosting=False`` it is all ones. ``synchronized`` replaces
    the selected branch by the sum of all branch logits with unit weight, so
    every branch is trained on every step (the plain ASPP baseline).
    """
    from .decoder import boosting_weight

    if len(aux_logits) == 0:
        raise ValueError("total loss needs at least one auxiliary map")
    if preds.selected is None and not synchronized:
        raise ValueError("no branch selected for the boosted loss")
    g_t = _as_const(g, preds.logits[0])
    parts, aux, aux_wbce, aux_wiou = [], [], [], []
    for logits in aux_logits:
        p = F.probabilities(logits)
        lb, li = wbce(p, g_t), wiou(p, g_t)
        parts.append(lb + li)
        aux_wbce.append(lb.item())
        aux_wiou.append(li.item())
        aux.append(aux_wbce[-1] + aux_wiou[-1])
    if synchronized:
        summed = preds.logits[0]
        for logits in preds.logits[1:]:
            summed = summed + logits
        p_sel = F.probabilities(summed)
        weight = _as_const(1.0, summed)
    else:
        if weight is None:
            weight = boosting_weight(preds, g_t.data) if boosting else _as_const(1.0, preds.logits[0])
        p_sel = F.probabilities(preds.logits[preds.selected - 1])
    bw, bi = wbce(p_sel, g_t, weight), wiou(p_sel, g_t, weight)
    boosted = bw + bi
    total = parts[0]
    for part in parts[1:]:
        total = total + part
    total = total + boosted
    return LossBreakdown(total=total, aux=aux, boosted=boosted.item(), boosted_wbce=bw.item(),
                         boosted_wiou=bi.item(), aux_wbce=aux_wbce, aux_wiou=aux_wiou)
