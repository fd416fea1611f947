"""Overlap and boundary-distance metrics for label masks."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import directed_hausdorff


class UndefinedMetricError(ValueError):
    """The metric has no value for these inputs (e.g. Hausdorff of an empty mask)."""


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(pred, true) -> float:
    """``2|A∩B| / (|A|+|B|)``; two empty masks score 1."""
    a, b = _pair(pred, true)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def iou(pred, true) -> float:
    """``|A∩B| / |A∪B|``; two empty masks score 1."""
    a, b = _pair(pred, true)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the mask (image border counts as outside)."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def hausdorff(pred, true) -> float:
    """Symmetric Hausdorff distance (pixels) between the masks' boundary sets."""
    a, b = _pair(pred, true)
    if not a.any() or not b.any():
        raise UndefinedMetricError("Hausdorff distance is undefined for an empty mask")
    pa = np.argwhere(boundary(a)).astype(np.float64)
    pb = np.argwhere(boundary(b)).astype(np.float64)
    return max(directed_hausdorff(pa, pb)[0], directed_hausdorff(pb, pa)[0])


@dataclass
class MetricsReport:
    dice: dict[int, float] = field(default_factory=dict)
    iou: dict[int, float] = field(default_factory=dict)
    hausdorff: dict[int, Optional[float]] = field(default_factory=dict)
    samples: int = 0

    @property
    def mean_dice(self) -> float:
        return float(np.mean(list(self.dice.values())))

    @property
    def mean_iou(self) -> float:
        return float(np.mean(list(self.iou.values())))

    @property
    def mean_hausdorff(self) -> Optional[float]:
        vals = [v for v in self.hausdorff.values() if v is not None]
        return float(np.mean(vals)) if vals else None

    def rows(self) -> list[list]:
        rows = []
        for c in sorted(self.dice):
            hd = self.hausdorff.get(c)
            rows.append([str(c), _fmt(self.dice[c]), _fmt(self.iou[c]), _fmt(hd), self.samples])
        rows.append(["mean", _fmt(self.mean_dice), _fmt(self.mean_iou), _fmt(self.mean_hausdorff), self.samples])
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "dice", "iou", "hd", "samples"])
        writer.writerows(self.rows())
        return buf.getvalue()

    def table(self) -> str:
        header = f"{'class':>6} {'dice':>8} {'iou':>8} {'hd':>8} {'n':>4}"
        lines = [header, "-" * len(header)]
        for c, d, i, h, n in self.rows():
            lines.append(f"{c:>6} {d:>8} {i:>8} {h or '-':>8} {n:>4}")
        return "\n".join(lines)


def _fmt(value: Optional[float]) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return f"{value:.6f}"


def evaluate_masks(preds: Sequence[np.ndarray], trues: Sequence[np.ndarray], num_classes: int = 2,
                   classes: Optional[Sequence[int]] = None) -> MetricsReport:
    """Per-class metrics averaged over samples (foreground classes by default).

    Hausdorff distances are averaged over the samples where both masks are
    nonempty; a class with no such sample reports ``None``.
    """
    classes = list(classes) if classes is not None else list(range(1, num_classes))
    report = MetricsReport(samples=len(preds))
    for c in classes:
        ds, js, hs = [], [], []
        for p, t in zip(preds, trues):
            a, b = np.asarray(p) == c, np.asarray(t) == c
            ds.append(dice(a, b))
            js.append(iou(a, b))
            try:
                hs.append(hausdorff(a, b))
            except UndefinedMetricError:
                pass
        report.dice[c] = float(np.mean(ds)) if ds else 1.0
        report.iou[c] = float(np.mean(js)) if js else 1.0
        report.hausdorff[c] = float(np.mean(hs)) if hs else None
    return report
