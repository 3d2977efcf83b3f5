"""Segmentation and temporal-consistency metrics.

All metrics are pure pixel-set computations on binary masks and are
cross-checked against brute-force counting oracles in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shape mismatch: {p.shape} vs {g.shape}")
    union = int(np.logical_or(p, g).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(p, g).sum()) / union


class VCResult(NamedTuple):
    """Windowed consistency plus how many windows could be scored."""

    value: float | None
    scored: int
    skipped: int


def video_consistency(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray],
                      window: int) -> VCResult:
    """Fraction of the ground-truth common area all predictions agree on.

    For every window of ``window`` consecutive frames, the ground-truth
    masks are intersected into a common area; the score is the fraction of
    it also covered by the intersection of the predictions.  Windows whose
    common area is empty cannot be scored and are skipped (counted).
    """
    if window < 2:
        raise ValueError("window must be at least 2")
    preds = [np.asarray(m).astype(bool) for m in pred]
    gts = [np.asarray(m).astype(bool) for m in gt]
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth frame counts differ")
    n = len(gts)
    if n < window:
        raise ValueError(f"insufficient frames: {n} < window {window}")
    values = []
    skipped = 0
    for start in range(n - window + 1):
        gt_common = np.logical_and.reduce(gts[start:start + window])
        area = int(gt_common.sum())
        if area == 0:
            skipped += 1
            continue
        pred_common = np.logical_and.reduce(preds[start:start + window])
        values.append(int(np.logical_and(pred_common, gt_common).sum()) / area)
    if not values:
        return VCResult(None, 0, skipped)
    return VCResult(sum(values) / len(values), len(values), skipped)


def contour(mask: np.ndarray) -> np.ndarray:
    """4-connectivity boundary: foreground pixels with a background
    4-neighbour (pixels outside the grid count as background)."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[1:-1, :-2] & padded[1:-1, 2:] & padded[:-2, 1:-1] & padded[2:, 1:-1]
    )
    return m & ~interior


def boundary_f(pred: np.ndarray, gt: np.ndarray, tol: float | None = None) -> float:
    """Contour F-measure: harmonic mean of boundary precision and recall.

    A boundary pixel matches when it lies within ``tol`` pixels (Euclidean)
    of the other mask's boundary; ``tol`` defaults to 1% of the image
    diagonal with a floor of one pixel.
    """
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shape mismatch: {p.shape} vs {g.shape}")
    if not p.any() and not g.any():
        return 1.0
    if p.any() != g.any():
        return 0.0
    if tol is None:
        tol = max(1.0, 0.01 * math.hypot(*p.shape))
    pc = contour(p)
    gc = contour(g)
    dist_to_g = ndimage.distance_transform_edt(~gc)
    dist_to_p = ndimage.distance_transform_edt(~pc)
    precision = float((dist_to_g[pc] <= tol).mean())
    recall = float((dist_to_p[gc] <= tol).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def kshot_stability(iou_multi: float, one_shot_ious: Sequence[float]) -> float:
    """Best standalone one-shot IoU minus the multi-shot IoU.

    Positive values flag episodes where extra support examples confused
    the classifier instead of helping it.
    """
    shots = list(one_shot_ious)
    if not shots:
        raise ValueError("need at least one one-shot IoU")
    for v in [iou_multi, *shots]:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"IoU values must lie in [0, 1], got {v}")
    return max(shots) - iou_multi


def nearest_resize(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resample of a 2-D grid (pixel-centre convention)."""
    m = np.asarray(mask)
    h, w = m.shape
    out_h, out_w = size
    rows = np.floor((np.arange(out_h) + 0.5) * h / out_h).astype(int)
    cols = np.floor((np.arange(out_w) + 0.5) * w / out_w).astype(int)
    return m[np.clip(rows, 0, h - 1)][:, np.clip(cols, 0, w - 1)]


def center_bias_map(masks: Sequence[np.ndarray],
                    size: tuple[int, int] | None = None) -> np.ndarray:
    """Per-pixel mean of masks resampled to a common size.

    Visualizes where segmentation targets concentrate across a dataset.
    """
    items = list(masks)
    if not items:
        raise ValueError("need at least one mask")
    if size is None:
        size = tuple(np.asarray(items[0]).shape)
    resized = [nearest_resize(np.asarray(m, dtype=np.float64), size) for m in items]
    return np.mean(resized, axis=0)


@dataclass
class MetricReport:
    """Aggregated metric values for one mask sequence; ``None`` entries
    carry their reason in ``notes``."""

    miou: float | None = None
    vc: dict[int, float | None] = field(default_factory=dict)
    boundary_f: float | None = None
    skipped_windows: dict[int, int] = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=dict)


def compute_report(
    pred: Sequence[np.ndarray],
    gt: Sequence[np.ndarray],
    windows: Sequence[int] = (3,),
    metrics: Sequence[str] = ("miou", "vc", "bf"),
) -> MetricReport:
    """Per-episode metrics over a predicted and ground-truth mask sequence."""
    report = MetricReport()
    if "miou" in metrics:
        report.miou = float(np.mean([iou(p, g) for p, g in zip(pred, gt)]))
    if "vc" in metrics:
        for w in windows:
            if len(gt) < w:
                report.vc[w] = None
                report.notes[f"vc{w}"] = f"sequence shorter than window {w}"
                continue
            result = video_consistency(pred, gt, w)
            report.vc[w] = result.value
            report.skipped_windows[w] = result.skipped
            if result.value is None:
                report.notes[f"vc{w}"] = "all windows had empty common area"
    if "bf" in metrics:
        report.boundary_f = float(np.mean([boundary_f(p, g) for p, g in zip(pred, gt)]))
    return report
