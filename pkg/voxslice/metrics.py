"""
Occupancy evaluation

Per-class IoU over the semantic classes 1..K-1, their mean over classes with a
nonzero union, geometric IoU on the occupied/empty split, and per-class height
histograms. Reports are built from integer confusion counts, which sum across
batches before any ratio is taken.
"""

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from voxslice.errors import ShapeError, ValidationError

logger = logging.getLogger(__name__)

EMPTY_CLASS = 0


@dataclass
class OccupancyGrid:
    """Integer labels [B, X, Y, Z] in [0, num_classes); 0 is empty."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 4:
            raise ShapeError("occupancy grids are [B, X, Y, Z]", labels.shape)
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValidationError(f"labels must be integers, got {labels.dtype}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValidationError(
                f"labels must lie in [0, {self.num_classes}), found [{labels.min()}, {labels.max()}]"
            )
        self.labels = np.ascontiguousarray(labels, dtype=np.uint8)

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(self.labels.shape)

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "OccupancyGrid":
        """Argmax over the class axis of a [B, K, X, Y, Z] volume."""
        probs = np.asarray(probs)
        return cls(np.argmax(probs, axis=1).astype(np.uint8), probs.shape[1])


@dataclass
class ConfusionCounts:
    """Per-class tp/fp/fn plus the occupied/empty counts."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    geo_tp: int = 0
    geo_fp: int = 0
    geo_fn: int = 0
    support: np.ndarray = field(default=None)

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionCounts":
        z = lambda: np.zeros(num_classes, dtype=np.int64)
        return cls(z(), z(), z(), 0, 0, 0, z())

    @classmethod
    def from_grids(cls, pred: OccupancyGrid, gt: OccupancyGrid) -> "ConfusionCounts":
        if pred.dims != gt.dims:
            raise ShapeError("prediction and ground truth differ in shape", pred.dims, gt.dims)
        k = max(pred.num_classes, gt.num_classes)
        p = pred.labels.ravel().astype(np.int64)
        g = gt.labels.ravel().astype(np.int64)
        hits = p == g
        tp = np.bincount(p[hits], minlength=k)
        fp = np.bincount(p[~hits], minlength=k)
        fn = np.bincount(g[~hits], minlength=k)
        occ_p = p != EMPTY_CLASS
        occ_g = g != EMPTY_CLASS
        return cls(
            tp=tp,
            fp=fp,
            fn=fn,
            geo_tp=int(np.sum(occ_p & occ_g)),
            geo_fp=int(np.sum(occ_p & ~occ_g)),
            geo_fn=int(np.sum(~occ_p & occ_g)),
            support=np.bincount(g, minlength=k),
        )

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if self.num_classes != other.num_classes:
            raise ShapeError("cannot merge counts over different class sets", self.tp.shape, other.tp.shape)
        return ConfusionCounts(
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.geo_tp + other.geo_tp,
            self.geo_fp + other.geo_fp,
            self.geo_fn + other.geo_fn,
            self.support + other.support,
        )


@dataclass(frozen=True)
class MetricsReport:
    """IoU summary over semantic classes 1..K-1 (NaN marks a zero-union class)."""

    per_class_iou: Tuple[float, ...]
    miou: float
    geo_iou: float
    support: Tuple[int, ...]
    counts: ConfusionCounts
    class_names: Tuple[str, ...] = ()

    @property
    def defined(self) -> List[bool]:
        return [not np.isnan(v) for v in self.per_class_iou]

    def class_name(self, class_id: int) -> str:
        if 0 < class_id <= len(self.class_names):
            return self.class_names[class_id - 1]
        return f"class_{class_id}"

    def group_miou(self, class_ids: Iterable[int]) -> float:
        """Mean IoU over the defined classes among class_ids (NaN if none)."""
        values = [self.per_class_iou[c - 1] for c in class_ids if 0 < c <= len(self.per_class_iou)]
        values = [v for v in values if not np.isnan(v)]
        return float(np.mean(values)) if values else float("nan")

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for c in range(1, self.counts.num_classes):
            rows.append({
                "name": self.class_name(c),
                "tp": int(self.counts.tp[c]),
                "fp": int(self.counts.fp[c]),
                "fn": int(self.counts.fn[c]),
                "iou": self.per_class_iou[c - 1],
            })
        return pd.DataFrame(rows, columns=["name", "tp", "fp", "fn", "iou"])

    def summary(self) -> Dict[str, float]:
        return {"miou": self.miou, "geo_iou": self.geo_iou}

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path

    def write_json(self, path: Union[str, Path], extra: Optional[dict] = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = dict(self.summary())
        if extra:
            payload.update(extra)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def report_from_counts(counts: ConfusionCounts, class_names: Sequence[str] = ()) -> MetricsReport:
    """Ratios from integer counts; exact rational arithmetic until the final float."""
    ious = []
    defined = []
    for c in range(1, counts.num_classes):
        union = int(counts.tp[c] + counts.fp[c] + counts.fn[c])
        if union == 0:
            ious.append(float("nan"))
            continue
        iou = Fraction(int(counts.tp[c]), union)
        defined.append(iou)
        ious.append(float(iou))
    miou = float(sum(defined, Fraction(0)) / len(defined)) if defined else float("nan")

    geo_union = counts.geo_tp + counts.geo_fp + counts.geo_fn
    geo_iou = float(Fraction(counts.geo_tp, geo_union)) if geo_union else 1.0
    return MetricsReport(
        per_class_iou=tuple(ious),
        miou=miou,
        geo_iou=geo_iou,
        support=tuple(int(s) for s in counts.support[1:]),
        counts=counts,
        class_names=tuple(class_names),
    )


def iou_per_class(pred: OccupancyGrid, gt: OccupancyGrid, class_names: Sequence[str] = ()) -> MetricsReport:
    """IoU_c = TP_c / (TP_c + FP_c + FN_c) for the non-empty classes."""
    return report_from_counts(ConfusionCounts.from_grids(pred, gt), class_names)


@dataclass(frozen=True)
class HeightHistogram:
    """Per-class voxel counts and normalized distributions over height bins."""

    counts: np.ndarray          # [K, bins]
    distributions: np.ndarray   # [K, bins]; NaN rows for classes with no voxels
    bin_width: int

    @property
    def defined(self) -> np.ndarray:
        return self.counts.sum(axis=1) > 0

    def mass_in(self, class_id: int, z_lo: int, z_hi: int) -> float:
        """Fraction of class_id's voxels with z index in [z_lo, z_hi)."""
        if not self.defined[class_id]:
            return float("nan")
        lo = z_lo // self.bin_width
        hi = -(-z_hi // self.bin_width)
        return float(self.distributions[class_id, lo:hi].sum())


def height_histogram(gt: OccupancyGrid, bin_width: int = 1) -> HeightHistogram:
    """Distribution of each class's voxels over z bins of bin_width voxels."""
    if bin_width <= 0:
        raise ValidationError(f"bin width must be positive, got {bin_width}")
    k = gt.num_classes
    nz = gt.dims[3]
    bins = -(-nz // bin_width)
    z_index = np.broadcast_to(np.arange(nz), gt.dims).ravel() // bin_width
    labels = gt.labels.ravel().astype(np.int64)
    counts = np.bincount(labels * bins + z_index, minlength=k * bins).reshape(k, bins)
    totals = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        distributions = np.where(totals > 0, counts / totals, np.nan)
    return HeightHistogram(counts=counts, distributions=distributions, bin_width=bin_width)
