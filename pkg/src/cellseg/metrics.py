"""Segmentation evaluation: DSC, HD95, IoU with thresholded aggregates, mAP.

Boundary pixels are foreground pixels with a 4-connected background
neighbor or an image-edge contact; distances are Euclidean between pixel
centers; percentiles use the nearest-rank rule ceil(0.95 * n) - 1. Images
where either mask is empty are skipped from HD95 aggregation and counted.

IoU-t is the percentage of evaluated images whose foreground IoU reaches
the threshold, and mAP is the mean of those pass rates over thresholds
0.50, 0.55, ..., 0.95.
"""

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError

MAP_THRESHOLDS = tuple(round(100.0 * (0.50 + 0.05 * i), 6) for i in range(10))
IOU_THRESHOLDS = (0.5, 0.75, 0.9)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int


def _binary(mask, name):
    m = np.asarray(mask)
    if m.ndim != 2:
        raise DataError(f"{name}: expected 2-D mask")
    return m > 0


def confusion(pred, gt):
    """Exact pixel counts of true positives, false positives, false negatives."""
    p = _binary(pred, "pred")
    g = _binary(gt, "gt")
    if p.shape != g.shape:
        raise DataError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn)


def dsc(pred, gt):
    """Dice similarity coefficient as a percentage; both-empty counts as 100."""
    c = confusion(pred, gt)
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return 100.0
    return 100.0 * 2.0 * c.tp / denom


def iou(pred, gt):
    """Intersection over union as a percentage; both-empty counts as 100."""
    c = confusion(pred, gt)
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        return 100.0
    return 100.0 * c.tp / denom


def boundary_points(mask):
    """Coordinates of foreground pixels with a 4-neighbor background or
    an image-edge contact, as an (n, 2) float array of (row, col)."""
    fg = _binary(mask, "mask")
    padded = np.pad(fg, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return np.argwhere(fg & ~interior).astype(np.float64)


def _directed_distances(src, dst):
    """Nearest Euclidean distance from each src point to the dst set."""
    tree = cKDTree(dst)
    d, _ = tree.query(src, k=1)
    return np.atleast_1d(d)


def hd95(pred, gt) -> Optional[float]:
    """95th-percentile symmetric boundary distance, or None if a mask is empty."""
    x = boundary_points(pred)
    y = boundary_points(gt)
    if len(x) == 0 or len(y) == 0:
        return None
    pool = np.concatenate([_directed_distances(x, y), _directed_distances(y, x)])
    pool.sort()
    rank = int(np.ceil(0.95 * len(pool))) - 1
    return float(pool[rank])


def hausdorff(pred, gt) -> Optional[float]:
    """Exact symmetric Hausdorff distance between the two boundaries."""
    x = boundary_points(pred)
    y = boundary_points(gt)
    if len(x) == 0 or len(y) == 0:
        return None
    return float(max(_directed_distances(x, y).max(), _directed_distances(y, x).max()))


@dataclass
class ImageScore:
    image_id: str
    dsc: float
    hd95: Optional[float]
    iou: float


@dataclass
class EvalReport:
    """Per-image records plus dataset-level aggregates (all percentages)."""

    records: list
    mean_dsc: float
    mean_hd95: Optional[float]
    iou_at: dict
    map: float
    hd95_skipped: int = 0
    extras: dict = field(default_factory=dict)

    def summary(self):
        return {
            "mean_dsc": self.mean_dsc,
            "mean_hd95": self.mean_hd95,
            "iou_at": {str(k): v for k, v in self.iou_at.items()},
            "map": self.map,
            "hd95_skipped": self.hd95_skipped,
            "n_images": len(self.records),
            **self.extras,
        }


def score_image(pred, gt, image_id="img"):
    return ImageScore(image_id, dsc(pred, gt), hd95(pred, gt), iou(pred, gt))


def aggregate(records, thresholds=IOU_THRESHOLDS):
    """Fold per-image scores into an EvalReport."""
    if not records:
        raise DataError("cannot aggregate an empty record list")
    dscs = np.array([r.dsc for r in records])
    ious = np.array([r.iou for r in records])
    hds = [r.hd95 for r in records if r.hd95 is not None]
    skipped = sum(1 for r in records if r.hd95 is None)

    def pass_rate(threshold_pct):
        return 100.0 * float(np.count_nonzero(ious >= threshold_pct)) / len(records)

    iou_at = {t: pass_rate(round(100.0 * t, 6)) for t in thresholds}
    map_score = float(np.mean([pass_rate(t) for t in MAP_THRESHOLDS]))
    return EvalReport(
        records=list(records),
        mean_dsc=float(dscs.mean()),
        mean_hd95=float(np.mean(hds)) if hds else None,
        iou_at=iou_at,
        map=map_score,
        hd95_skipped=skipped,
    )


def write_eval_report(report, out_dir, stem="eval"):
    """Emit the per-image CSV and the JSON summary for a report."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "dsc", "hd95", "iou"])
        for r in report.records:
            writer.writerow(
                [r.image_id, f"{r.dsc:.6f}", "SKIP" if r.hd95 is None else f"{r.hd95:.6f}", f"{r.iou:.6f}"]
            )
    json_path = os.path.join(out_dir, f"{stem}.json")
    with open(json_path, "w") as fh:
        json.dump(report.summary(), fh, indent=2)
    return csv_path, json_path
