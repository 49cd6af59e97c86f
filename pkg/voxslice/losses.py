"""
Training objectives

L_total = L_focal + L_lovasz + L_scal_geo + L_scal_sem (unit weights by
default). Every loss is a single recorded op over the class probabilities
[B, K, X, Y, Z] with a hand-derived gradient; the Lovász sort permutation is
treated as constant, which gives the usual subgradient at ties.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from voxslice import ops
from voxslice.errors import ShapeError, ValidationError
from voxslice.tensor import Tensor, make_output

logger = logging.getLogger(__name__)

EMPTY_CLASS = 0
DEFAULT_GAMMA = 2.0
_LOG_EPS = 1e-12


@dataclass(frozen=True)
class LossBreakdown:
    focal: float
    lovasz: float
    scal_geo: float
    scal_sem: float
    total: float

    def as_dict(self) -> dict:
        return {
            "focal": self.focal,
            "lovasz": self.lovasz,
            "scal_geo": self.scal_geo,
            "scal_sem": self.scal_sem,
            "total": self.total,
        }


def _labels(p: Tensor, y) -> np.ndarray:
    """Validate labels against the probability volume and return them as int64."""
    labels = np.asarray(getattr(y, "labels", y))
    if p.data.ndim != 5:
        raise ShapeError("class probabilities must be [B, K, X, Y, Z]", p.dims)
    b, k = p.dims[:2]
    if labels.shape != (b,) + p.dims[2:]:
        raise ShapeError("labels do not match probability volume", labels.shape, p.dims)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValidationError(f"labels must lie in [0, {k}), found range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def _scalar_op(op_name: str, value: float, p: Tensor, grad_p: Optional[np.ndarray]) -> Tensor:
    def backward():
        return lambda g: (g * grad_p,)

    return make_output(op_name, np.array(value), (p,), backward)


def _true_class_probs(p: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return np.take_along_axis(p, labels[:, None], axis=1)[:, 0]


def _scatter_true_class(shape, labels: np.ndarray, values: np.ndarray) -> np.ndarray:
    grad = np.zeros(shape)
    np.put_along_axis(grad, labels[:, None], values[:, None], axis=1)
    return grad


def focal_loss(p: Tensor, y, gamma: float = DEFAULT_GAMMA, alpha: Optional[Sequence[float]] = None) -> Tensor:
    """mean over voxels of -alpha_y (1 - p_y)^gamma log p_y."""
    labels = _labels(p, y)
    k = p.dims[1]
    alpha_arr = np.ones(k) if alpha is None else np.asarray(alpha, dtype=np.float64)
    if alpha_arr.shape != (k,):
        raise ShapeError("alpha must hold one weight per class", alpha_arr.shape, (k,))

    pt = np.maximum(_true_class_probs(p.data, labels), _LOG_EPS)
    a = alpha_arr[labels]
    log_pt = np.log(pt)
    one_minus = 1.0 - pt
    modulator = one_minus ** gamma
    n = labels.size
    value = float((-a * modulator * log_pt).sum() / n)

    grad_p = None
    if p.requires_grad:
        if gamma == 0:
            d_pt = -a / pt
        else:
            # (1 - p)^(gamma - 1) is unbounded at p = 1 for gamma < 1; log p is 0 there
            safe_base = np.where(one_minus > 0, one_minus, 1.0)
            slope = np.where(one_minus > 0, gamma * safe_base ** (gamma - 1.0), 0.0)
            d_pt = a * (slope * log_pt - modulator / pt)
        grad_p = _scatter_true_class(p.dims, labels, d_pt / n)
    return _scalar_op("focal_loss", value, p, grad_p)


def cross_entropy(p: Tensor, y) -> Tensor:
    """mean over voxels of -log p_y."""
    return focal_loss(p, y, gamma=0.0, alpha=None)


def lovasz_grad(fg_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovász extension of the Jaccard loss w.r.t. sorted errors."""
    gts = fg_sorted.sum()
    intersection = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jaccard = 1.0 - intersection / union
    if fg_sorted.size > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def present_classes(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.flatnonzero(np.bincount(labels.ravel(), minlength=num_classes))


def lovasz_softmax_loss(p: Tensor, y) -> Tensor:
    """Lovász-Softmax averaged over the classes present in y."""
    labels = _labels(p, y)
    k = p.dims[1]
    probs = np.moveaxis(p.data, 1, -1).reshape(-1, k)
    flat_labels = labels.reshape(-1)
    classes = present_classes(flat_labels, k)
    grad_flat = np.zeros_like(probs) if p.requires_grad else None

    total = 0.0
    for c in classes:
        fg = (flat_labels == c).astype(np.float64)
        errors = np.abs(fg - probs[:, c])
        order = np.argsort(-errors, kind="stable")
        g = lovasz_grad(fg[order])
        total += float(np.dot(errors[order], g))
        if grad_flat is not None:
            sign = np.where(fg > 0, -1.0, 1.0)
            grad_flat[order, c] += g * sign[order] / len(classes)
    value = total / len(classes) if len(classes) else 0.0

    grad_p = None
    if grad_flat is not None:
        b, _, nx, ny, nz = p.dims
        grad_p = np.ascontiguousarray(np.moveaxis(grad_flat.reshape(b, nx, ny, nz, k), -1, 1))
    return _scalar_op("lovasz_softmax_loss", value, p, grad_p)


def _neg_log_ratio(num: float, den: float, d_num: np.ndarray, d_den: np.ndarray) -> Tuple[float, np.ndarray]:
    """-log(num / den) and its gradient given d(num)/dx and d(den)/dx."""
    ratio = num / den
    if ratio < _LOG_EPS:
        return -np.log(_LOG_EPS), np.zeros_like(d_num)
    return -np.log(ratio), -(d_num / num - d_den / den)


def _affinity_terms(x: np.ndarray, t: np.ndarray) -> Tuple[float, np.ndarray]:
    """-(log P + log R + log S) for soft scores x against binary targets t.

    Precision and recall need positives in t (precision also needs mass in x);
    specificity needs negatives. Undefined terms are skipped.
    """
    value = 0.0
    grad = np.zeros_like(x)
    positives = t.sum()
    negatives = (1.0 - t).sum()
    intersection = (x * t).sum()
    mass = x.sum()
    if positives > 0:
        if mass > 0:
            v, g = _neg_log_ratio(intersection, mass, t, np.ones_like(x))
            value += v
            grad += g
        v, g = _neg_log_ratio(intersection, positives, t, np.zeros_like(x))
        value += v
        grad += g
    if negatives > 0:
        true_negative = ((1.0 - x) * (1.0 - t)).sum()
        v, g = _neg_log_ratio(true_negative, negatives, -(1.0 - t), np.zeros_like(x))
        value += v
        grad += g
    return float(value), grad


def scal_geo_loss(p: Tensor, y) -> Tensor:
    """Scene-wise affinity on the occupied/empty split, x = 1 - p_empty."""
    labels = _labels(p, y)
    occupied_score = 1.0 - p.data[:, EMPTY_CLASS]
    target = (labels != EMPTY_CLASS).astype(np.float64)
    value, d_x = _affinity_terms(occupied_score.ravel(), target.ravel())
    grad_p = None
    if p.requires_grad:
        grad_p = np.zeros(p.dims)
        grad_p[:, EMPTY_CLASS] = -d_x.reshape(occupied_score.shape)
    return _scalar_op("scal_geo_loss", value, p, grad_p)


def scal_sem_loss(p: Tensor, y) -> Tensor:
    """Class-wise affinity averaged over semantic classes present in y."""
    labels = _labels(p, y)
    k = p.dims[1]
    classes = [c for c in present_classes(labels, k) if c != EMPTY_CLASS]
    grad_p = np.zeros(p.dims) if p.requires_grad else None
    total = 0.0
    for c in classes:
        x = p.data[:, c]
        target = (labels == c).astype(np.float64)
        v, d_x = _affinity_terms(x.ravel(), target.ravel())
        total += v
        if grad_p is not None:
            grad_p[:, c] = d_x.reshape(x.shape) / len(classes)
    value = total / len(classes) if classes else 0.0
    return _scalar_op("scal_sem_loss", value, p, grad_p)


def class_weights_from_counts(counts: Sequence[int]) -> np.ndarray:
    """Inverse-frequency weights normalized to mean 1; unseen classes take the largest weight."""
    counts = np.asarray(counts, dtype=np.float64)
    weights = np.zeros_like(counts)
    seen = counts > 0
    if not seen.any():
        return np.ones_like(counts)
    weights[seen] = counts[seen].sum() / counts[seen]
    weights[~seen] = weights[seen].max()
    return weights / weights.mean()


def total_loss(
    p: Tensor, y, cfg=None, alpha: Optional[Sequence[float]] = None
) -> Tuple[Tensor, LossBreakdown]:
    """Weighted sum of the four components.

    Args:
        p: Class probabilities
        y: OccupancyGrid or label array
        cfg: LossConfig-like object (gamma, weights); None means defaults
        alpha: Per-class focal weights; None means uniform

    Returns:
        (scalar tensor for backward, per-component breakdown)
    """
    gamma = DEFAULT_GAMMA if cfg is None else cfg.gamma
    weights = (1.0, 1.0, 1.0, 1.0) if cfg is None else cfg.weights

    parts = [
        focal_loss(p, y, gamma=gamma, alpha=alpha),
        lovasz_softmax_loss(p, y),
        scal_geo_loss(p, y),
        scal_sem_loss(p, y),
    ]
    weighted = [part if w == 1.0 else ops.scale(part, w) for part, w in zip(parts, weights)]
    total = weighted[0]
    for part in weighted[1:]:
        total = ops.add(total, part)
    values = [part.item() for part in weighted]
    breakdown = LossBreakdown(*values, total=total.item())
    if not np.isfinite(breakdown.total):
        logger.warning("non-finite loss: %s", breakdown.as_dict())
    return total, breakdown
