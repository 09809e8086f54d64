"""
Score fusion, level merging and OKS-based pose NMS.
"""

from dataclasses import dataclass

import numpy as np

from .core import Detection, Pose
from .errors import InvalidConfig, OutOfRange, check_keys
from .oks import BOX_AREA_FACTOR, MIN_SCALE_SQUARED

NMS_MODES = ("hard", "soft-linear", "soft-gaussian")
SCORE_MODES = ("fused", "cls", "gt-oks")


@dataclass(frozen=True)
class NmsConfig:
    oks_threshold: float = 0.3
    mode: str = "hard"
    soft_sigma: float = 0.5
    score_floor: float = 0.05
    max_detections: int = 100

    def __post_init__(self):
        if not 0.0 <= self.oks_threshold <= 1.0:
            raise InvalidConfig(f"nms.oks_threshold must be in [0, 1], got {self.oks_threshold}")
        if self.mode not in NMS_MODES:
            raise InvalidConfig(f"nms.mode must be one of {NMS_MODES}, got {self.mode!r}")
        if not self.soft_sigma > 0:
            raise InvalidConfig("nms.soft_sigma must be positive")
        if not 0.0 <= self.score_floor < 1.0:
            raise InvalidConfig(f"nms.score_floor must be in [0, 1), got {self.score_floor}")
        if int(self.max_detections) < 1:
            raise InvalidConfig("nms.max_detections must be >= 1")
        object.__setattr__(self, "max_detections", int(self.max_detections))

    @classmethod
    def from_dict(cls, data):
        check_keys("nms", data, cls.__dataclass_fields__)
        return cls(**data)


def _unit(name, value):
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise OutOfRange(f"{name} must be in [0, 1], got {value}")
    return value


def fuse_confidence(cls_score, pose_score, mode="fused", oracle_score=None):
    """Ranking confidence of a detection.

    fused: cls x pose; cls: the classification score alone;
    gt-oks: the supplied oracle OKS replaces the confidence.
    """
    cls_score = _unit("cls_score", cls_score)
    pose_score = _unit("pose_score", pose_score)
    if mode == "fused":
        return cls_score * pose_score
    if mode == "cls":
        return cls_score
    if mode == "gt-oks":
        if oracle_score is None:
            raise InvalidConfig("gt-oks scoring needs an oracle score")
        return _unit("oracle_score", oracle_score)
    raise InvalidConfig(f"score mode must be one of {SCORE_MODES}, got {mode!r}")


def merge_levels(per_level):
    """Concatenate per-level detections, confidence descending.

    Ties go to the lower level, then the lower row-major index.
    """
    groups = per_level.values() if isinstance(per_level, dict) else per_level
    merged = [det for group in groups for det in group]
    return sorted(merged, key=lambda det: det.rank_key)


def _nms_scales(poses):
    lo = poses.min(axis=1)
    hi = poses.max(axis=1)
    area = np.prod(hi - lo, axis=1)
    return np.maximum(BOX_AREA_FACTOR * area, MIN_SCALE_SQUARED)


def oks_between(poses, ref, kappas):
    """NMS similarity of ``poses`` against ``ref``, the ground-truth side.

    ``poses`` is one (K, 2) pose or a (N, K, 2) stack; every keypoint counts
    as labeled and the scale comes from the pseudo box of ``ref``.
    """
    poses = np.asarray(poses, dtype=float)
    ref = np.asarray(ref, dtype=float)
    s2 = _nms_scales(ref[None])[0]
    d2 = np.sum((poses.reshape(-1, *ref.shape) - ref[None]) ** 2, axis=2)
    values = np.mean(np.exp(-d2 / (2.0 * s2 * np.asarray(kappas)[None, :] ** 2)), axis=1)
    return values if poses.ndim == 3 else float(values[0])


def pose_nms(dets, cfg, spec):
    """Greedy OKS-NMS (hard) or score decay (soft-linear / soft-gaussian)."""
    ordered = merge_levels([dets])
    if not ordered:
        return []
    poses = np.stack([det.pose.keypoints for det in ordered])
    kappas = spec.kappas

    if cfg.mode == "hard":
        alive = np.ones(len(ordered), dtype=bool)
        kept = []
        for i in range(len(ordered)):
            if not alive[i]:
                continue
            kept.append(ordered[i])
            if len(kept) == cfg.max_detections:
                break
            rest = np.flatnonzero(alive[i + 1 :]) + i + 1
            if rest.size:
                overlap = oks_between(poses[rest], poses[i], kappas)
                alive[rest[overlap >= cfg.oks_threshold]] = False
        return kept

    scores = np.array([det.confidence for det in ordered])
    remaining = np.arange(len(ordered))
    kept = []
    while remaining.size and len(kept) < cfg.max_detections:
        pick = remaining[int(np.argmax(scores[remaining]))]
        if scores[pick] < cfg.score_floor:
            break
        kept.append(ordered[pick].with_confidence(float(scores[pick])))
        remaining = remaining[remaining != pick]
        if not remaining.size:
            break
        overlap = oks_between(poses[remaining], poses[pick], kappas)
        if cfg.mode == "soft-linear":
            decay = np.where(overlap >= cfg.oks_threshold, 1.0 - overlap, 1.0)
        else:
            decay = np.exp(-(overlap**2) / cfg.soft_sigma)
        scores[remaining] *= decay
    return kept


def hypotheses_to_detections(
    level_hyps, score_mode="fused", oracle=None, score_floor=0.05, image_id=0
):
    """Decode refined poses of hypotheses whose cls score clears the floor.

    ``oracle`` maps a decoded Pose to its ground-truth OKS (gt-oks mode).
    """
    dets = []
    for level in sorted(level_hyps):
        for h in level_hyps[level]:
            if h.cls_score < score_floor:
                continue
            pose = Pose.all_labeled(h.location.center + h.offsets1 + h.offsets2)
            oracle_score = oracle(pose) if score_mode == "gt-oks" else None
            dets.append(
                Detection(
                    pose=pose,
                    confidence=fuse_confidence(h.cls_score, h.pose_score, score_mode, oracle_score),
                    source_level=level,
                    location=h.location,
                    image_id=image_id,
                    cls_score=h.cls_score,
                    pose_score=h.pose_score,
                )
            )
    return dets


def nms_per_image(dets, cfg, spec):
    """Run pose_nms separately for each image id, images in ascending id order."""
    by_image = {}
    for det in dets:
        by_image.setdefault(det.image_id, []).append(det)
    survivors = []
    for image_id in sorted(by_image):
        survivors.extend(pose_nms(by_image[image_id], cfg, spec))
    return survivors

