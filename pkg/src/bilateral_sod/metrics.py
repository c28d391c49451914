"""Saliency evaluation: MAE, PR curve, F-measure, S-measure and E-measure.

Predictions are min-max normalised per image (constant maps are left as they
are) and quantised as ``floor(255 p)``; a pixel is positive at threshold ``t``
when its level is ``>= t`` for ``t = 1..255``.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

log = logging.getLogger(__name__)

BETA2 = 0.3
THRESHOLDS = np.arange(1, 256)
_EPS = np.spacing(1)

REPORT_COLUMNS = ("dataset", "n_images", "mae", "f_max", "f_mean", "f_adaptive", "e_measure", "s_measure")


class EmptyMaskError(ValueError):
    """Recall is undefined for a ground truth without foreground."""


def _check_pair(p: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and mask {g.shape} differ in shape")
    return p, g > 0.5


def normalize_prediction(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    lo, hi = p.min(), p.max()
    if hi > lo:
        return (p - lo) / (hi - lo)
    return np.clip(p, 0.0, 1.0)


def quantize(p: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(p, 0.0, 1.0) * 255).astype(np.int64)


def mae(p: np.ndarray, g: np.ndarray) -> float:
    """Mean absolute error, with a correctly rounded sum."""
    p, g = _check_pair(p, g)
    return math.fsum(np.abs(p - g).ravel()) / p.size


def _counts_at_thresholds(levels: np.ndarray, select: np.ndarray) -> np.ndarray:
    """Number of selected pixels whose level is ``>= t`` for t = 1..255."""
    hist = np.bincount(levels[select], minlength=256)
    at_least = np.cumsum(hist[::-1])[::-1]
    return at_least[1:]


def pr_curve(p: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Precision and recall at thresholds 1..255.

    Precision is 1 where nothing is predicted positive. Raises
    :class:`EmptyMaskError` when ``g`` has no foreground.
    """
    p, g = _check_pair(p, g)
    n_fg = int(g.sum())
    if n_fg == 0:
        raise EmptyMaskError("ground truth has no foreground; recall is undefined")
    levels = quantize(p).ravel()
    fg = g.ravel()
    tp = _counts_at_thresholds(levels, fg)
    fp = _counts_at_thresholds(levels, ~fg)
    predicted = tp + fp
    precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 1.0)
    recall = tp / n_fg
    return precision, recall


def f_curve(precision: np.ndarray, recall: np.ndarray, beta2: float = BETA2) -> np.ndarray:
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    num = (1 + beta2) * precision * recall
    den = beta2 * precision + recall
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def f_measure(precision: np.ndarray, recall: np.ndarray, beta2: float = BETA2) -> tuple[float, float]:
    """``(f_max, f_mean)`` over the thresholds of one PR curve."""
    f = f_curve(precision, recall, beta2)
    return float(f.max()), math.fsum(f) / f.size


def adaptive_f_measure(p: np.ndarray, g: np.ndarray, beta2: float = BETA2) -> float:
    """F-measure at the threshold ``min(2 mean(p), 1)``."""
    p, g = _check_pair(p, g)
    positive = p >= min(2.0 * p.mean(), 1.0)
    tp = np.count_nonzero(positive & g)
    precision = tp / positive.sum() if positive.any() else 1.0
    recall = tp / g.sum() if g.any() else 0.0
    return float(f_curve(np.array([precision]), np.array([recall]), beta2)[0])


def _ssim(p: np.ndarray, g: np.ndarray) -> float:
    n = p.size
    mp, mg = p.mean(), g.mean()
    var_p = ((p - mp) ** 2).sum() / (n - 1 + _EPS)
    var_g = ((g - mg) ** 2).sum() / (n - 1 + _EPS)
    cov = ((p - mp) * (g - mg)).sum() / (n - 1 + _EPS)
    num = 4 * mp * mg * cov
    den = (mp ** 2 + mg ** 2) * (var_p + var_g)
    if num != 0:
        return num / (den + _EPS)
    return 1.0 if den == 0 else 0.0


def _object_score(values: np.ndarray) -> float:
    mu = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2 * mu / (mu ** 2 + 1 + sigma + _EPS)


def _s_object(p: np.ndarray, g: np.ndarray) -> float:
    ratio = g.mean()
    return ratio * _object_score(p[g]) + (1 - ratio) * _object_score(1 - p[~g])


def _s_region(p: np.ndarray, g: np.ndarray) -> float:
    h, w = g.shape
    rows, cols = np.nonzero(g)
    # split point is one past the rounded centroid, so the top-left block includes it
    cy = int(np.round(rows.mean())) + 1
    cx = int(np.round(cols.mean())) + 1
    area = h * w
    blocks = [
        ((slice(0, cy), slice(0, cx)), cy * cx),
        ((slice(0, cy), slice(cx, w)), cy * (w - cx)),
        ((slice(cy, h), slice(0, cx)), (h - cy) * cx),
    ]
    score, used = 0.0, 0.0
    for index, size in blocks:
        weight = size / area
        used += weight
        score += weight * _ssim(p[index], g[index].astype(np.float64))
    rest = (slice(cy, h), slice(cx, w))
    return score + (1 - used) * _ssim(p[rest], g[rest].astype(np.float64))


def s_measure(p: np.ndarray, g: np.ndarray, alpha: float = 0.5) -> float:
    """Structure measure: ``alpha * S_object + (1 - alpha) * S_region``, floored at 0."""
    p, g = _check_pair(p, g)
    fg = g.mean()
    if fg == 0:
        return float(1 - p.mean())
    if fg == 1:
        return float(p.mean())
    return float(max(0.0, alpha * _s_object(p, g) + (1 - alpha) * _s_region(p, g)))


def e_curve(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Enhanced-alignment score at thresholds 1..255.

    The enhanced alignment sum is divided by the pixel count, so a perfect
    binary prediction scores exactly 1.
    """
    p, g = _check_pair(p, g)
    n = g.size
    n_fg = int(g.sum())
    levels = quantize(p).ravel()
    fg = g.ravel()
    tp = _counts_at_thresholds(levels, fg).astype(np.float64)
    fp = _counts_at_thresholds(levels, ~fg).astype(np.float64)
    pred_fg = tp + fp
    if n_fg == 0:
        return (n - pred_fg) / n
    if n_fg == n:
        return pred_fg / n
    fn = n_fg - tp
    tn = n - pred_fg - fn
    mean_pred = pred_fg / n
    mean_gt = n_fg / n
    total = np.zeros_like(tp)
    # each confusion cell has constant demeaned (prediction, truth) values
    for count, a, b in ((tp, 1 - mean_pred, 1 - mean_gt), (fp, 1 - mean_pred, -mean_gt),
                        (fn, -mean_pred, 1 - mean_gt), (tn, -mean_pred, -mean_gt)):
        align = 2 * a * b / (a * a + b * b + _EPS)
        total += count * (align + 1) ** 2 / 4
    return total / n


def e_measure(p: np.ndarray, g: np.ndarray) -> float:
    return float(e_curve(p, g).max())


@dataclass
class ImageScores:
    name: str
    mae: float
    s_measure: float
    e_measure: float
    f_adaptive: Optional[float]
    precision: Optional[np.ndarray]
    recall: Optional[np.ndarray]


def score_image(p: np.ndarray, g: np.ndarray, name: str = "", normalize: bool = True) -> ImageScores:
    p = normalize_prediction(p) if normalize else np.asarray(p, dtype=np.float64)
    g = np.asarray(g) > 0.5
    precision = recall = f_ad = None
    if g.any():
        precision, recall = pr_curve(p, g)
        f_ad = adaptive_f_measure(p, g)
    return ImageScores(name, mae(p, g), s_measure(p, g), e_measure(p, g), f_ad, precision, recall)


@dataclass
class EvalReport:
    mae: float
    f_max: float
    f_mean: float
    e_measure: float
    s_measure: float
    pr_points: np.ndarray
    f_adaptive: float = float("nan")
    n_images: int = 0
    excluded: list[str] = field(default_factory=list)
    mean_f_mode: str = "thresholds"

    @property
    def mean_f(self) -> float:
        """The mean F-measure under the selected convention."""
        return self.f_adaptive if self.mean_f_mode == "adaptive" else self.f_mean

    def row(self, dataset: str = "") -> dict:
        return {"dataset": dataset, "n_images": self.n_images, "mae": self.mae, "f_max": self.f_max,
                "f_mean": self.mean_f, "f_adaptive": self.f_adaptive, "e_measure": self.e_measure,
                "s_measure": self.s_measure}

    def write_csv(self, path: str | os.PathLike, dataset: str = "") -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            writer.writerow({k: _fmt(v) for k, v in self.row(dataset).items()})

    def write_pr_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("threshold", "precision", "recall"))
            for t, (prec, rec) in zip(THRESHOLDS, self.pr_points):
                writer.writerow((int(t), _fmt(prec), _fmt(rec)))


def _fmt(value):
    return f"{value:.10g}" if isinstance(value, (float, np.floating)) else value


def aggregate(scores: Iterable[ImageScores], beta2: float = BETA2, mean_f_mode: str = "thresholds") -> EvalReport:
    """Dataset average: scalar metrics per image, F and PR curves pointwise."""
    if mean_f_mode not in ("thresholds", "adaptive"):
        raise ValueError(f"unknown mean-F convention {mean_f_mode!r}")
    scores = list(scores)
    if not scores:
        raise ValueError("cannot evaluate an empty dataset")
    with_pr = [s for s in scores if s.precision is not None]
    excluded = [s.name for s in scores if s.precision is None]
    if excluded:
        warnings.warn(f"{len(excluded)} image(s) with empty ground truth excluded from PR/F: {excluded[:5]}")
    if with_pr:
        precision = np.mean([s.precision for s in with_pr], axis=0)
        recall = np.mean([s.recall for s in with_pr], axis=0)
        f = np.mean([f_curve(s.precision, s.recall, beta2) for s in with_pr], axis=0)
        f_max, f_mean = float(f.max()), float(f.mean())
        f_ad = float(np.mean([s.f_adaptive for s in with_pr]))
    else:
        precision = recall = np.full(len(THRESHOLDS), np.nan)
        f_max = f_mean = f_ad = float("nan")
    return EvalReport(
        mae=float(np.mean([s.mae for s in scores])),
        f_max=f_max,
        f_mean=f_mean,
        e_measure=float(np.mean([s.e_measure for s in scores])),
        s_measure=float(np.mean([s.s_measure for s in scores])),
        pr_points=np.stack([precision, recall], axis=1),
        f_adaptive=f_ad,
        n_images=len(scores),
        excluded=excluded,
        mean_f_mode=mean_f_mode,
    )


def evaluate_arrays(pairs: Iterable[tuple[str, np.ndarray, np.ndarray]], **kwargs) -> EvalReport:
    return aggregate((score_image(p, g, name) for name, p, g in pairs), **kwargs)


def evaluate_dir(pred_dir: str | os.PathLike, gt_dir: str | os.PathLike, **kwargs) -> EvalReport:
    """Score every ``<gt_dir>/*.pgm`` mask against the same-named prediction.

    ``gt_dir`` may be a corpus root containing ``masks/``. Predictions whose
    size differs from the mask are resized bilinearly to the mask.
    """
    from .data import read_pgm, resize_array

    gt_dir = Path(gt_dir)
    if (gt_dir / "masks").is_dir():
        gt_dir = gt_dir / "masks"
    pred_dir = Path(pred_dir)
    masks = sorted(gt_dir.glob("*.pgm"))
    if not masks:
        raise ValueError(f"no masks found in {gt_dir}")

    def pairs():
        for mask_path in masks:
            pred_path = pred_dir / mask_path.name
            if not pred_path.exists():
                raise FileNotFoundError(f"no prediction for {mask_path.stem} in {pred_dir}")
            g = read_pgm(mask_path) >= 128
            p = read_pgm(pred_path) / 255.0
            if p.shape != g.shape:
                log.info("resizing prediction %s from %s to %s", mask_path.stem, p.shape, g.shape)
                p = resize_array(p, g.shape)
            yield mask_path.stem, p, g

    return evaluate_arrays(pairs(), **kwargs)
