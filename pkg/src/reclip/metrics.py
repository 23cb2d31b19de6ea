"""Segmentation metrics and class/space preference bias scores."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import IGNORE

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def confusion(pred, gt, C: int) -> np.ndarray:
    """``C x C`` counts; rows are ground truth, columns predictions, IGNORE pixels skipped."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    keep = gt != IGNORE
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if g.size and (g.min() < 0 or g.max() >= C):
        raise ValueError(f"ground-truth labels outside 0..{C - 1}")
    if p.size and (p.min() < 0 or p.max() >= C):
        raise ValueError(f"predicted labels outside 0..{C - 1}")
    return np.bincount(g * C + p, minlength=C * C).reshape(C, C)


def per_class_iou(cm: np.ndarray) -> np.ndarray:
    """IoU per class; NaN where the class is neither present nor predicted."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    union = cm.sum(0) + cm.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)


def miou(cm: np.ndarray):
    """``(mean IoU over classes with non-zero union, per-class IoU)``."""
    iou = per_class_iou(cm)
    if np.all(np.isnan(iou)):
        raise ValueError("mIoU undefined: every class has zero union")
    return float(np.nanmean(iou)), iou


def class_preference_score(cm: np.ndarray) -> float:
    """Mean over ground-truth rows of ``diag - max(off-diagonal)`` on the row-normalised matrix."""
    cm = np.asarray(cm, dtype=np.float64)
    rows = cm.sum(1)
    valid = rows > 0
    if not valid.any():
        raise ValueError("class-preference score undefined: confusion matrix is empty")
    scores = []
    for i in np.flatnonzero(valid):
        r = cm[i] / rows[i]
        others = np.delete(r, i)
        scores.append(r[i] - (others.max() if others.size else 0.0))
    return float(np.mean(scores))


@dataclass
class DistanceCurve:
    edges: np.ndarray
    miou: np.ndarray  # NaN for unsupported bins
    pixels: np.ndarray
    confusions: np.ndarray  # B x C x C

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def supported(self) -> np.ndarray:
        return (self.pixels > 0) & ~np.isnan(self.miou)


def instance_distances(gt: np.ndarray, min_pixels: int = 16):
    """Yield ``(pixel_mask, normalised_centroid_distance)`` per ground-truth instance.

    Instances are 4-connected components of each non-ignore class; the distance is
    to the image centre divided by half the image diagonal.
    """
    H, W = gt.shape
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    half_diag = 0.5 * math.hypot(H, W)
    for c in np.unique(gt):
        if c == IGNORE:
            continue
        labels, k = ndimage.label(gt == c, structure=FOUR_CONNECTED)
        for j in range(1, k + 1):
            region = labels == j
            size = int(region.sum())
            if size < min_pixels:
                continue
            ys, xs = np.nonzero(region)
            d = math.hypot(ys.mean() - cy, xs.mean() - cx) / half_diag
            yield region, min(d, 1.0)


def distance_curve(preds: Iterable, gts: Iterable, C: int, bins: int = 10,
                   min_pixels: int = 16) -> DistanceCurve:
    if bins < 2:
        raise ValueError("distance curve needs at least 2 bins")
    edges = np.linspace(0.0, 1.0, bins + 1)
    cms = np.zeros((bins, C, C), dtype=np.int64)
    found = False
    for pred, gt in zip(preds, gts):
        pred, gt = np.asarray(pred), np.asarray(gt)
        for region, d in instance_distances(gt, min_pixels):
            found = True
            b = min(int(d * bins), bins - 1)
            cms[b] += confusion(pred[region], gt[region], C)
    if not found:
        raise ValueError("distance curve undefined: no object instances in the ground truth")
    pixels = cms.sum(axis=(1, 2))
    values = np.full(bins, np.nan)
    for b in range(bins):
        if pixels[b]:
            values[b] = miou(cms[b])[0]
    return DistanceCurve(edges, values, pixels, cms)


def space_preference_score(curve: DistanceCurve) -> float:
    """Mean slope of mIoU against distance between consecutive supported bins."""
    idx = np.flatnonzero(curve.supported)
    if len(idx) < 2:
        raise ValueError(
            f"space-preference score needs at least 2 supported distance bins, got {len(idx)}"
        )
    x = curve.centers[idx]
    y = curve.miou[idx]
    return float(np.mean(np.diff(y) / np.diff(x)))


@dataclass
class EvalResult:
    confusion: np.ndarray
    miou: float
    iou: np.ndarray
    class_preference: float
    curve: Optional[DistanceCurve] = None
    space_preference: Optional[float] = None

    def as_report(self, class_names: Sequence[str]) -> dict:
        out = {"miou": self.miou}
        for name, v in zip(class_names, self.iou):
            out[f"iou.{name}"] = v
        out["class_preference"] = self.class_preference
        if self.space_preference is not None:
            out["space_preference"] = self.space_preference
        if self.curve is not None:
            for c, v, n in zip(self.curve.centers, self.curve.miou, self.curve.pixels):
                out[f"curve.{c:.3f}.miou"] = v
                out[f"curve.{c:.3f}.pixels"] = int(n)
        return out


def evaluate_labels(preds: Sequence, gts: Sequence, C: int, bins: int = 10,
                    min_pixels: int = 16, with_curve: bool = True) -> EvalResult:
    preds, gts = list(preds), list(gts)
    cm = np.zeros((C, C), dtype=np.int64)
    for p, g in zip(preds, gts):
        cm += confusion(p, g, C)
    m, iou = miou(cm)
    res = EvalResult(cm, m, iou, class_preference_score(cm))
    if with_curve:
        res.curve = distance_curve(preds, gts, C, bins, min_pixels)
        try:
            res.space_preference = space_preference_score(res.curve)
        except ValueError:
            res.space_preference = None
    return res


def evaluate_model(model, images: Sequence, ablate: str = "none",
                   upsample: Optional[str] = None, with_curve: bool = True) -> EvalResult:
    """Run inference on labelled images and score it."""
    from .model import infer

    preds = [infer(im, model, ablate, upsample) for im in images]
    cfg = model.config
    return evaluate_labels(preds, [im.gt_mask for im in images], model.vocab.C,
                           cfg.distance_bins, cfg.min_instance_pixels, with_curve)


def ablate_bias(model, images: Sequence, which: str = "none",
                upsample: Optional[str] = None) -> EvalResult:
    """Evaluate with one bias disabled by average pooling.

    ``which="class"`` pools the positional feature over patches (only class bias
    remains); ``which="space"`` pools the reference feature over classes (only
    space bias remains).
    """
    return evaluate_model(model, images, which, upsample)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "nan" if np.isnan(v) else repr(float(v))
    return str(v)


def write_report(path, items: dict) -> None:
    """Flat ``key: value`` text, one pair per line, in insertion order."""
    lines = [f"{k}: {_fmt(v)}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        k, _, v = line.partition(": ")
        try:
            out[k] = float(v)
        except ValueError:
            out[k] = v
    return out


def write_curve_table(path, curve: DistanceCurve) -> None:
    """Two tab-separated columns (bin centre, mIoU) for supported bins."""
    lines = ["# distance\tmiou"]
    for c, v, ok in zip(curve.centers, curve.miou, curve.supported):
        if ok:
            lines.append(f"{c:.6f}\t{v:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")
