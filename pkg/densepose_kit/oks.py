"""
Object Keypoint Similarity.

OKS = sum_i exp(-d_i^2 / (2 s^2 kappa_i^2)) [v_i > 0] / sum_i [v_i > 0]

Used for refinement positives, PSM targets, NMS similarity and evaluation.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import NoLabeledKeypoints, OutOfRange, ShapeMismatch

# Segment area is roughly this fraction of its bounding box area for COCO persons.
BOX_AREA_FACTOR = 0.53
MIN_SCALE_SQUARED = 1.0


@dataclass(frozen=True)
class OksScale:
    """Squared object scale s^2 in pixels^2."""

    s_squared: float

    def __post_init__(self):
        value = float(self.s_squared)
        if not (math.isfinite(value) and value > 0):
            raise OutOfRange(f"s_squared must be positive, got {self.s_squared}")
        object.__setattr__(self, "s_squared", value)

    @classmethod
    def from_box(cls, box):
        return cls(max(BOX_AREA_FACTOR * box.area, MIN_SCALE_SQUARED))


def scale_for_instance(instance, use_area=True):
    """Annotated area when present and requested, else 0.53 x pseudo-box area."""
    if use_area and instance.area is not None:
        return OksScale(instance.area)
    return OksScale.from_box(instance.pseudo_box)


def compute_oks(pred, gt, scale, spec):
    """OKS of ``pred`` against ``gt``; visibility is read from ``gt`` only."""
    if pred.k != gt.k or gt.k != spec.k:
        raise ShapeMismatch(f"pose sizes {pred.k}/{gt.k} do not match skeleton K={spec.k}")
    labeled = gt.labeled
    if not labeled.any():
        raise NoLabeledKeypoints("OKS is undefined for a ground truth without labeled keypoints")
    d2 = np.sum((pred.keypoints - gt.keypoints) ** 2, axis=1)
    e = d2[labeled] / (2.0 * scale.s_squared * spec.kappas[labeled] ** 2)
    return float(np.mean(np.exp(-e)))


def oks_batch(pred, gt, visibility, s_squared, kappas):
    """Row-wise OKS for stacked poses.

    pred, gt: (N, K, 2); visibility: (N, K); s_squared: (N,) or scalar.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    labeled = np.asarray(visibility) > 0
    if pred.shape != gt.shape or labeled.shape != pred.shape[:2]:
        raise ShapeMismatch(f"oks_batch shapes {pred.shape}, {gt.shape}, {labeled.shape}")
    counts = labeled.sum(axis=1)
    if np.any(counts == 0):
        raise NoLabeledKeypoints("OKS is undefined for a ground truth without labeled keypoints")
    s2 = np.broadcast_to(np.asarray(s_squared, dtype=float), (pred.shape[0],))
    d2 = np.sum((pred - gt) ** 2, axis=2)
    e = d2 / (2.0 * s2[:, None] * np.asarray(kappas, dtype=float)[None, :] ** 2)
    return np.where(labeled, np.exp(-e), 0.0).sum(axis=1) / counts


def oks_matrix(preds, gts, gt_visibility, s_squared, kappas):
    """OKS of every prediction against every ground truth, shape (D, G).

    Ground truths without labeled keypoints get OKS 0 in their column.
    """
    preds = np.asarray(preds, dtype=float)
    gts = np.asarray(gts, dtype=float)
    labeled = np.asarray(gt_visibility) > 0
    if preds.ndim != 3 or gts.ndim != 3 or preds.shape[1:] != gts.shape[1:]:
        raise ShapeMismatch(f"oks_matrix shapes {preds.shape} and {gts.shape}")
    if preds.shape[0] == 0 or gts.shape[0] == 0:
        return np.zeros((preds.shape[0], gts.shape[0]))
    s2 = np.asarray(s_squared, dtype=float)
    d2 = np.sum((preds[:, None] - gts[None]) ** 2, axis=3)
    e = d2 / (2.0 * s2[None, :, None] * np.asarray(kappas, dtype=float)[None, None, :] ** 2)
    counts = labeled.sum(axis=1)
    total = np.where(labeled[None], np.exp(-e), 0.0).sum(axis=2)
    return np.divide(total, counts[None, :], out=np.zeros_like(total), where=counts[None, :] > 0)
