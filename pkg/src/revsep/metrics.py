"""Segmentation metrics: MAE, adaptive F, mean E-measure, S-measure, Dice and IoU.

All functions take a real prediction in [0, 1] and a binary ground truth of
the same H x W shape and return a Python float in [0, 1].
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

METRIC_KEYS = ("mae", "f_beta_adaptive", "e_phi_mean", "s_alpha", "m_dice", "m_iou")
E_THRESHOLDS = (np.arange(256) + 1) / 256.0


@dataclass
class MetricReport:
    mae: float
    f_beta_adaptive: float
    e_phi_mean: float
    s_alpha: float
    m_dice: float
    m_iou: float

    def as_dict(self):
        return asdict(self)


def _prep(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} differ in shape")
    return pred, gt > 0.5


def mae(pred, gt) -> float:
    pred, gt = _prep(pred, gt)
    return float(np.abs(pred - gt).mean())


def f_beta_adaptive(pred, gt, beta_sq: float = 0.3) -> float:
    pred, gt = _prep(pred, gt)
    thr = min(2.0 * pred.mean(), 1.0)
    # a zero threshold would call every pixel foreground; require a positive score instead
    binar = pred > 0 if thr == 0 else pred >= thr
    tp = np.count_nonzero(binar & gt)
    n_pred, n_gt = np.count_nonzero(binar), np.count_nonzero(gt)
    if n_pred == 0 and n_gt == 0:
        return 1.0
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gt if n_gt else 0.0
    if precision + recall == 0:
        return 0.0
    return float((1 + beta_sq) * precision * recall / (beta_sq * precision + recall))


def _enhanced_alignment(binar, gt):
    n = gt.size
    n_gt = np.count_nonzero(gt)
    if n_gt == 0:
        return np.count_nonzero(binar == 0) / n
    if n_gt == n:
        return np.count_nonzero(binar) / n
    dp = binar - binar.mean()
    dg = gt - gt.mean()
    align = 2 * dp * dg / (dp * dp + dg * dg)
    return float(((align + 1) ** 2 / 4).sum() / n)


def e_phi_mean(pred, gt) -> float:
    """Enhanced-alignment score averaged over 256 thresholds in (0, 1]."""
    pred, gt = _prep(pred, gt)
    g = gt.astype(np.float64)
    scores = [_enhanced_alignment((pred >= t).astype(np.float64), g) for t in E_THRESHOLDS]
    return float(np.mean(scores))


def _s_object(x, region):
    vals = x[region]
    mean = vals.mean()
    std = vals.std(ddof=1) if vals.size > 1 else 0.0
    return 2 * mean / (mean * mean + 1 + std)


def _object_score(pred, gt):
    u = gt.mean()
    fg = _s_object(pred * gt, gt)
    bg = _s_object((1 - pred) * (1 - gt), ~gt)
    return u * fg + (1 - u) * bg


def _ssim(pred, gt):
    n = pred.size
    x, y = pred.mean(), gt.mean()
    d = max(n - 1, 1)
    sx = ((pred - x) ** 2).sum() / d
    sy = ((gt - y) ** 2).sum() / d
    sxy = ((pred - x) * (gt - y)).sum() / d
    a = 4 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return a / b
    return 1.0 if b == 0 else 0.0


def _region_score(pred, gt):
    h, w = gt.shape
    ys, xs = np.nonzero(gt)
    cx = int(np.round(xs.mean())) + 1
    cy = int(np.round(ys.mean())) + 1
    cx, cy = min(cx, w), min(cy, h)
    score = 0.0
    for rows in (slice(0, cy), slice(cy, h)):
        for cols in (slice(0, cx), slice(cx, w)):
            p, g = pred[rows, cols], gt[rows, cols].astype(np.float64)
            if p.size:
                score += p.size / gt.size * _ssim(p, g)
    return score


def s_alpha(pred, gt, alpha: float = 0.5) -> float:
    """Structure measure: alpha * object-aware + (1 - alpha) * region-aware."""
    pred, gt = _prep(pred, gt)
    y = gt.mean()
    if y == 0:
        return float(1 - pred.mean())
    if y == 1:
        return float(pred.mean())
    s = alpha * _object_score(pred, gt) + (1 - alpha) * _region_score(pred, gt)
    return float(min(max(s, 0.0), 1.0))


def _overlap(pred, gt, threshold):
    pred, gt = _prep(pred, gt)
    binar = pred >= threshold
    inter = np.count_nonzero(binar & gt)
    return inter, np.count_nonzero(binar), np.count_nonzero(gt)


def m_dice(pred, gt, threshold: float = 0.5) -> float:
    inter, n_pred, n_gt = _overlap(pred, gt, threshold)
    if n_pred + n_gt == 0:
        return 1.0
    return 2 * inter / (n_pred + n_gt)


def m_iou(pred, gt, threshold: float = 0.5) -> float:
    inter, n_pred, n_gt = _overlap(pred, gt, threshold)
    union = n_pred + n_gt - inter
    if union == 0:
        return 1.0
    return inter / union


def per_image_metrics(pred, gt) -> dict:
    return {
        "mae": mae(pred, gt),
        "f_beta_adaptive": f_beta_adaptive(pred, gt),
        "e_phi_mean": e_phi_mean(pred, gt),
        "s_alpha": s_alpha(pred, gt),
        "m_dice": m_dice(pred, gt),
        "m_iou": m_iou(pred, gt),
    }


def evaluate_masks(preds, gts):
    """Return ``(MetricReport, rows)`` with one metric dict per image."""
    rows = [per_image_metrics(p, g) for p, g in zip(preds, gts)]
    if not rows:
        raise ValueError("no predictions to evaluate")
    report = MetricReport(**{k: float(np.mean([r[k] for r in rows])) for k in METRIC_KEYS})
    return report, rows


def mean_dice(preds, gts, threshold: float = 0.5) -> float:
    return float(np.mean([m_dice(p, g, threshold) for p, g in zip(preds, gts)]))
