#!/usr/bin/env python3
"""
Tests for score fusion, level merging and pose NMS
"""

import math

import numpy as np
import pytest

from densepose_kit.core import Detection, GridLocation, Pose, PoseHypothesis, SkeletonSpec
from densepose_kit.errors import InvalidConfig, OutOfRange
from densepose_kit.postprocess import (
    NmsConfig,
    fuse_confidence,
    hypotheses_to_detections,
    merge_levels,
    nms_per_image,
    oks_between,
    pose_nms,
)

COCO = SkeletonSpec.coco()
HARD = NmsConfig()


def make_det(kps, confidence, level=3, ix=0, image_id=0):
    return Detection(
        pose=Pose.all_labeled(kps),
        confidence=confidence,
        source_level=level,
        location=GridLocation(level=level, iy=0, ix=ix),
        image_id=image_id,
    )


def reference_oks(pred, ref, kappas):
    """Ground-truth side is ``ref``; every keypoint counts."""
    xs = [p[0] for p in ref]
    ys = [p[1] for p in ref]
    s2 = max(0.53 * (max(xs) - min(xs)) * (max(ys) - min(ys)), 1.0)
    total = 0.0
    for (px, py), (gx, gy), kappa in zip(pred, ref, kappas):
        total += math.exp(-((px - gx) ** 2 + (py - gy) ** 2) / (2.0 * s2 * kappa * kappa))
    return total / len(kappas)


def greedy_oracle(dets, thr, max_dets):
    ordered = sorted(dets, key=lambda d: (-d.confidence, d.source_level, d.location.iy, d.location.ix))
    kept = []
    for det in ordered:
        if len(kept) == max_dets:
            break
        if all(reference_oks(det.pose.keypoints, k.pose.keypoints, COCO.kappas) < thr for k in kept):
            kept.append(det)
    return kept


def clustered_detections(rng, count):
    centers = rng.uniform(50, 350, (int(rng.integers(1, 4)), 2))
    template = rng.uniform(-40, 40, (17, 2))
    dets = []
    for n in range(count):
        center = centers[rng.integers(len(centers))]
        kps = center + template + rng.normal(0, float(rng.uniform(1, 20)), (17, 2))
        dets.append(make_det(kps, float(rng.uniform(0.05, 1.0)), level=int(rng.integers(3, 8)), ix=n))
    return dets


def test_fuse_confidence_modes():
    assert fuse_confidence(0.8, 0.5) == pytest.approx(0.4)
    assert fuse_confidence(0.8, 0.5, "cls") == 0.8
    assert fuse_confidence(0.8, 0.5, "gt-oks", oracle_score=0.93) == 0.93
    with pytest.raises(InvalidConfig):
        fuse_confidence(0.8, 0.5, "gt-oks")
    with pytest.raises(InvalidConfig):
        fuse_confidence(0.8, 0.5, "product")
    with pytest.raises(OutOfRange):
        fuse_confidence(1.2, 0.5)


def test_merge_levels_breaks_ties_by_level():
    kps = np.zeros((17, 2))
    a = make_det(kps, 0.6, level=5)
    b = make_det(kps, 0.6, level=3, ix=4)
    c = make_det(kps, 0.9, level=7)
    merged = merge_levels({5: [a], 3: [b], 7: [c]})
    assert merged == [c, b, a]


def test_single_detection_survives():
    det = make_det(np.random.default_rng(0).uniform(0, 100, (17, 2)), 0.7)
    assert pose_nms([det], HARD, COCO) == [det]
    assert pose_nms([], HARD, COCO) == []


def test_identical_pair_keeps_higher_ranked():
    kps = np.random.default_rng(1).uniform(0, 100, (17, 2))
    low = make_det(kps, 0.4)
    high = make_det(kps, 0.9, ix=1)
    assert pose_nms([low, high], HARD, COCO) == [high]

    tie_a = make_det(kps, 0.5, level=4)
    tie_b = make_det(kps, 0.5, level=3)
    assert pose_nms([tie_a, tie_b], HARD, COCO) == [tie_b]


def test_hard_nms_matches_greedy_oracle():
    rng = np.random.default_rng(2)
    for _ in range(500):
        dets = clustered_detections(rng, int(rng.integers(1, 15)))
        thr = float(rng.choice([0.3, 0.5, 0.9]))
        cfg = NmsConfig(oks_threshold=thr, max_detections=int(rng.integers(1, 20)))
        assert pose_nms(dets, cfg, COCO) == greedy_oracle(dets, thr, cfg.max_detections)


def test_survivors_are_pairwise_separated_and_stable():
    rng = np.random.default_rng(3)
    for _ in range(50):
        dets = clustered_detections(rng, 25)
        kept = pose_nms(dets, HARD, COCO)
        for i, a in enumerate(kept):
            for b in kept[i + 1 :]:
                assert oks_between(b.pose.keypoints, a.pose.keypoints, COCO.kappas) < HARD.oks_threshold
        assert pose_nms(kept, HARD, COCO) == kept


def test_nms_ignores_input_order():
    rng = np.random.default_rng(8)
    for mode in ("hard", "soft-linear", "soft-gaussian"):
        cfg = NmsConfig(mode=mode)
        for _ in range(30):
            dets = clustered_detections(rng, int(rng.integers(2, 20)))
            # coarse scores so confidence ties fall back to level and index
            dets = [d.with_confidence(round(d.confidence, 1) or 0.1) for d in dets]
            expected = [(d.source_level, d.location.ix, d.confidence) for d in pose_nms(dets, cfg, COCO)]
            for _ in range(3):
                shuffled = [dets[i] for i in rng.permutation(len(dets))]
                kept = pose_nms(shuffled, cfg, COCO)
                assert [(d.source_level, d.location.ix, d.confidence) for d in kept] == expected


def test_oks_between_matches_reference():
    rng = np.random.default_rng(4)
    a = make_det(rng.uniform(0, 200, (17, 2)), 0.5)
    b = make_det(a.pose.keypoints + rng.normal(0, 6, (17, 2)), 0.5)
    expected = reference_oks(b.pose.keypoints, a.pose.keypoints, COCO.kappas)
    assert oks_between(b.pose.keypoints, a.pose.keypoints, COCO.kappas) == pytest.approx(expected, abs=1e-12)
    stacked = oks_between(np.stack([b.pose.keypoints, a.pose.keypoints]), a.pose.keypoints, COCO.kappas)
    assert stacked.shape == (2,)
    assert stacked[0] == pytest.approx(expected, abs=1e-12)
    assert stacked[1] == pytest.approx(1.0)


def test_max_detections_cap():
    template = np.random.default_rng(5).uniform(0, 10, (17, 2))
    dets = [make_det(template + 1000.0 * n, 0.9 - n * 0.001, ix=n) for n in range(150)]
    kept = pose_nms(dets, HARD, COCO)
    assert len(kept) == 100
    assert kept == dets[:100]


def test_soft_linear_drops_exact_duplicate():
    kps = np.random.default_rng(6).uniform(0, 100, (17, 2))
    high = make_det(kps, 0.9)
    dup = make_det(kps, 0.8, ix=1)
    far = make_det(kps + 500.0, 0.3, ix=2)
    kept = pose_nms([high, dup, far], NmsConfig(mode="soft-linear"), COCO)
    assert [d.location.ix for d in kept] == [0, 2]
    assert kept[1].confidence == pytest.approx(0.3)


def test_soft_gaussian_decays_duplicate():
    kps = np.random.default_rng(7).uniform(0, 100, (17, 2))
    high = make_det(kps, 0.9)
    dup = make_det(kps, 0.9, ix=1)
    kept = pose_nms([high, dup], NmsConfig(mode="soft-gaussian", soft_sigma=0.5), COCO)
    assert len(kept) == 2
    assert kept[0].confidence == 0.9
    assert kept[1].confidence == pytest.approx(0.9 * math.exp(-2.0))

    strict = NmsConfig(mode="soft-gaussian", soft_sigma=0.5, score_floor=0.2)
    assert len(pose_nms([high, dup], strict, COCO)) == 1


def _hypothesis(ix, cls_score, pose_score=0.5):
    loc = GridLocation(level=3, iy=0, ix=ix)
    return PoseHypothesis(loc, np.full((17, 2), 2.0), np.ones((17, 2)), cls_score, pose_score)


def test_hypotheses_to_detections_floor_and_fusion():
    hyps = {3: [_hypothesis(0, 0.04), _hypothesis(1, 0.05), _hypothesis(2, 0.8)]}
    dets = hypotheses_to_detections(hyps, image_id=9)
    assert [d.location.ix for d in dets] == [1, 2]
    assert dets[1].confidence == pytest.approx(0.4)
    assert dets[1].image_id == 9
    assert np.allclose(dets[1].pose.keypoints, [2 * 8 + 4 + 3, 4 + 3])

    oracle = hypotheses_to_detections(hyps, "gt-oks", oracle=lambda pose: 0.66)
    assert {d.confidence for d in oracle} == {0.66}


def test_nms_per_image_keeps_images_apart():
    kps = np.random.default_rng(8).uniform(0, 100, (17, 2))
    dets = [
        make_det(kps, 0.9, image_id=2),
        make_det(kps, 0.8, ix=1, image_id=2),
        make_det(kps, 0.7, image_id=1),
        make_det(kps, 0.6, ix=1, image_id=1),
    ]
    kept = nms_per_image(dets, HARD, COCO)
    assert [(d.image_id, d.confidence) for d in kept] == [(1, 0.7), (2, 0.9)]


def test_nms_config_validation():
    with pytest.raises(InvalidConfig):
        NmsConfig(oks_threshold=1.5)
    with pytest.raises(InvalidConfig):
        NmsConfig(mode="matrix")
    with pytest.raises(InvalidConfig):
        NmsConfig(max_detections=0)
