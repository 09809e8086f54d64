"""
Loss arithmetic for the five training branches (values only, no gradients).

L = l1 L_cls + l2 L_hm + l3 L_reg_initial + l4 L_reg_refined + l5 L_psm
"""

import math
from dataclasses import dataclass

import numpy as np

from .console import verbose_print
from .core import decode_initial, decode_refined
from .errors import InvalidConfig, OutOfRange, ShapeMismatch, check_keys

EPS = 1e-6
HEATMAP_STRIDE = 8
STAGES = ("initial", "refined")


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    heatmap: float = 4.0
    reg_initial: float = 0.05
    reg_refined: float = 0.1
    psm: float = 1.0

    def __post_init__(self):
        for name, value in zip(self.__dataclass_fields__, self.as_tuple()):
            if not (math.isfinite(value) and value >= 0):
                raise InvalidConfig(f"loss_weights.{name} must be >= 0, got {value}")

    @classmethod
    def from_dict(cls, data):
        check_keys("loss_weights", data, cls.__dataclass_fields__)
        return cls(**{k: float(v) for k, v in data.items()})

    def as_tuple(self):
        return (self.cls, self.heatmap, self.reg_initial, self.reg_refined, self.psm)


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0
    heatmap_beta: float = 4.0
    heatmap_sigma: float = 2.0  # feature-grid cells

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise InvalidConfig(f"focal.alpha must be in (0, 1), got {self.alpha}")
        if self.gamma < 0 or self.heatmap_beta < 0:
            raise InvalidConfig("focal.gamma and focal.heatmap_beta must be >= 0")
        if not self.heatmap_sigma > 0:
            raise InvalidConfig("focal.heatmap_sigma must be positive")

    @classmethod
    def from_dict(cls, data):
        check_keys("focal", data, cls.__dataclass_fields__)
        return cls(**{k: float(v) for k, v in data.items()})


@dataclass(frozen=True, eq=False)
class HeatmapTarget:
    """(K, H, W) Gaussian keypoint maps on the stride-8 grid."""

    values: np.ndarray
    stride: int = HEATMAP_STRIDE

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 3:
            raise ShapeMismatch(f"heatmap target must be (K, H, W), got {values.shape}")
        if np.any(values < 0) or np.any(values > 1):
            raise OutOfRange("heatmap target values must lie in [0, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class RegressionLoss:
    value: float
    empty: bool  # no positive contributed; value is defined as 0


def _same_shape(a, b, what):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what}: prediction {a.shape} vs target {b.shape}")
    return a, b


def _log(x):
    return np.log(np.maximum(x, EPS))


def focal_loss(pred_probs, targets, params=FocalParams()):
    """Sum of -alpha_t (1 - p_t)^gamma log p_t over cells, per positive target."""
    p, t = _same_shape(pred_probs, targets, "focal_loss")
    positive = t >= 0.5
    p_t = np.where(positive, p, 1.0 - p)
    alpha_t = np.where(positive, params.alpha, 1.0 - params.alpha)
    terms = -alpha_t * (1.0 - p_t) ** params.gamma * _log(p_t)
    return float(terms.sum() / max(1, int(positive.sum())))


def gaussian_heatmap_targets(instances, image_w, image_h, k, sigma=2.0, stride=HEATMAP_STRIDE):
    """Per-keypoint Gaussian peaks at the stride-8 cell holding each labeled keypoint."""
    h = math.ceil(image_h / stride)
    w = math.ceil(image_w / stride)
    maps = np.zeros((k, h, w))
    gx = np.arange(w)[None, :]
    gy = np.arange(h)[:, None]
    for inst in instances:
        kps = inst.pose.keypoints
        for j in np.flatnonzero(inst.pose.labeled):
            cx = min(max(int(math.floor(kps[j, 0] / stride)), 0), w - 1)
            cy = min(max(int(math.floor(kps[j, 1] / stride)), 0), h - 1)
            peak = np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2.0 * sigma**2))
            np.maximum(maps[j], peak, out=maps[j])
    return HeatmapTarget(maps, stride)


def heatmap_loss(pred, target, params=FocalParams()):
    """Penalty-reduced focal loss over heatmap cells, per peak."""
    p, t = _same_shape(pred, target.values, "heatmap_loss")
    peak = t == 1.0
    pos = -((1.0 - p) ** params.gamma) * _log(p)
    neg = -((1.0 - t) ** params.heatmap_beta) * p**params.gamma * _log(1.0 - p)
    return float(np.where(peak, pos, neg).sum() / max(1, int(peak.sum())))


def l1_regression_loss(hyps, positives, gts, stage="initial"):
    """Mean absolute stride-normalized keypoint error over positives.

    positives: (hypothesis index, instance id) pairs; gts maps id to instance.
    Unlabeled ground-truth keypoints are excluded.
    """
    if stage not in STAGES:
        raise InvalidConfig(f"stage must be one of {STAGES}, got {stage!r}")
    decode = decode_initial if stage == "initial" else decode_refined
    total = 0.0
    count = 0
    for index, inst_id in sorted(positives):
        h = hyps[index]
        inst = gts[inst_id]
        labeled = inst.pose.labeled
        residual = decode(h).keypoints[labeled] - inst.pose.keypoints[labeled]
        total += float(np.abs(residual).sum()) / h.location.stride
        count += residual.size
    if count == 0:
        verbose_print(f"{stage} regression: empty positive set, loss defined as 0")
        return RegressionLoss(0.0, True)
    return RegressionLoss(total / count, False)


def bce_score_loss(pred_scores, psm_targets):
    """Mean binary cross entropy of pose scores against OKS targets."""
    p, t = _same_shape(pred_scores, psm_targets, "bce_score_loss")
    if p.size == 0:
        return 0.0
    terms = -(t * _log(p) + (1.0 - t) * _log(1.0 - p))
    return float(terms.mean())


def total_loss(components, weights=LossWeights()):
    """Exact weighted sum of the five branch losses."""
    values = [float(c) for c in components]
    if len(values) != 5:
        raise ShapeMismatch(f"expected 5 loss components, got {len(values)}")
    if any(not math.isfinite(c) or c < 0 for c in values):
        raise OutOfRange(f"loss components must be finite and >= 0, got {values}")
    return math.fsum(w * c for w, c in zip(weights.as_tuple(), values))
