#!/usr/bin/env python3
"""
Tests for the seeded scene generator and the dense prediction model
"""

import json

import numpy as np
import pytest

from densepose_kit.coco_eval import gt_from_dict
from densepose_kit.core import LEVELS, SkeletonSpec, decode_initial, decode_refined
from densepose_kit.errors import InvalidConfig, SchemaError
from densepose_kit.postprocess import NmsConfig
from densepose_kit.simulator import (
    NoiseModel,
    SceneConfig,
    detect,
    evaluate_scenes,
    generate_scene,
    gt_oks_oracle,
    hypotheses_from_records,
    hypothesis_from_record,
    hypothesis_records,
    scene_from_dataset,
    scenes_to_dataset,
    simulate_fields,
    simulate_predictions,
    stream_seed,
)

COCO = SkeletonSpec.coco()
SOLID = SceneConfig(unlabeled_prob=0.0)


def test_stream_seeds_are_stable_and_distinct():
    assert stream_seed(7, 1, 2) == stream_seed(7, 1, 2)
    seeds = {stream_seed(7, a, b) for a in range(4) for b in range(4)}
    assert len(seeds) == 16
    assert stream_seed(7, 0) != stream_seed(8, 0)


def test_scene_generation_is_deterministic():
    a = generate_scene(42)
    b = generate_scene(42)
    assert len(a.instances) == len(b.instances) >= 1
    for x, y in zip(a.instances, b.instances):
        assert np.array_equal(x.pose.keypoints, y.pose.keypoints)
        assert np.array_equal(x.pose.visibility, y.pose.visibility)


def test_scene_people_do_not_overlap_and_stay_inside():
    for seed in range(20):
        scene = generate_scene(seed)
        boxes = [inst.pseudo_box for inst in scene.instances]
        for i, a in enumerate(boxes):
            assert 0 <= a.x_min and a.x_max <= scene.image_width
            assert 0 <= a.y_min and a.y_max <= scene.image_height
            for b in boxes[i + 1 :]:
                assert a.x_max <= b.x_min or b.x_max <= a.x_min or a.y_max <= b.y_min or b.y_max <= a.y_min
        assert [inst.id for inst in scene.instances] == list(range(1, len(boxes) + 1))


def test_empty_scene():
    scene = generate_scene(3, SceneConfig(min_count=0, max_count=0))
    assert scene.instances == ()
    fields = simulate_fields(scene, NoiseModel(), 3)
    assert all(np.all(field.instance_ids == -1) for field in fields.values())
    assert np.all(gt_oks_oracle(scene, np.zeros((4, 17, 2)), COCO) == 0.0)


def test_mirrored_scene():
    cfg = dict(min_count=1, max_count=1, pose_jitter=0.0)
    plain = generate_scene(11, SceneConfig(flip_prob=0.0, **cfg)).instances[0]
    mirrored = generate_scene(11, SceneConfig(flip_prob=1.0, **cfg)).instances[0]
    perm = COCO.flip_permutation()
    sums = mirrored.pose.keypoints[:, 0] + plain.pose.keypoints[perm, 0]
    assert np.allclose(sums, sums[0])
    assert np.allclose(mirrored.pose.keypoints[:, 1], plain.pose.keypoints[perm, 1])


def test_fields_are_deterministic_finite_and_bounded():
    scene = generate_scene(5)
    a = simulate_fields(scene, NoiseModel(), 99)
    b = simulate_fields(scene, NoiseModel(), 99)
    for level in LEVELS:
        fa, fb = a[level], b[level]
        assert np.array_equal(fa.offsets1, fb.offsets1)
        assert np.array_equal(fa.cls_scores, fb.cls_scores)
        assert np.all(np.isfinite(fa.offsets1)) and np.all(np.isfinite(fa.offsets2))
        for scores in (fa.cls_scores, fa.pose_scores, fa.true_oks):
            assert np.all((scores >= 0.0) & (scores <= 1.0))
        assert len(fa.centers) == fa.nx * fa.ny


def test_noiseless_pipeline_is_perfect():
    scenes = [generate_scene(stream_seed(1, i), SOLID) for i in range(10)]
    dets = []
    for index, scene in enumerate(scenes):
        fields = simulate_fields(scene, NoiseModel.noiseless(), stream_seed(2, index))
        dets.extend(detect(scene, fields, "fused", NmsConfig(), COCO, image_id=index + 1))
    assert len(dets) == sum(len(scene.instances) for scene in scenes)
    result = evaluate_scenes(scenes, dets, COCO)
    assert result.ap == pytest.approx(1.0, abs=1e-9)
    assert result.ar == pytest.approx(1.0, abs=1e-9)


def test_noiseless_hypotheses_decode_to_ground_truth():
    for seed in range(5):
        scene = generate_scene(seed)
        by_id = {inst.id: inst for inst in scene.instances}
        for field in simulate_fields(scene, NoiseModel.noiseless(), seed).values():
            rows = np.flatnonzero(field.instance_ids >= 0)
            for row, hyp in zip(rows, field.hypotheses(rows)):
                gt = by_id[int(field.instance_ids[row])].pose.keypoints
                assert np.allclose(decode_initial(hyp).keypoints, gt, rtol=0, atol=1e-9)
                assert np.allclose(decode_refined(hyp).keypoints, gt, rtol=0, atol=1e-9)
            assert np.allclose(field.true_oks[rows], 1.0)


def test_person_sizes_stay_in_configured_range():
    cfg = SceneConfig()
    heights = [h for seed in range(100) for h in generate_scene(seed, cfg).heights]
    assert len(heights) >= 100
    assert min(heights) >= cfg.min_height * (1 - 1e-12)
    assert max(heights) <= cfg.max_height * (1 + 1e-12)
    assert min(heights) < 1.25 * cfg.min_height
    assert max(heights) > 0.8 * cfg.max_height


def test_central_locations_regress_better_than_edges():
    central, edge = [], []
    for seed in range(10):
        scene = generate_scene(seed)
        for field in simulate_fields(scene, NoiseModel(), seed).values():
            assigned = field.instance_ids >= 0
            central.extend(field.true_oks[assigned & field.initial_positive])
            edge.extend(field.true_oks[assigned & ~field.initial_positive])
    assert np.mean(central) > np.mean(edge)


def _assigned_scores(noise, count):
    quality, cls = [], []
    seed = 0
    while len(quality) < count:
        seed += 1
        scene = generate_scene(seed)
        for field in simulate_fields(scene, noise, seed).values():
            assigned = field.instance_ids >= 0
            quality.extend(field.true_oks[assigned])
            cls.extend(field.cls_scores[assigned])
    return np.array(quality), np.array(cls)


def test_score_correlation_knob():
    quality, cls = _assigned_scores(NoiseModel(score_corr=0.0), 10_000)
    assert len(quality) >= 10_000
    assert abs(np.corrcoef(quality, cls)[0, 1]) < 0.1

    quality, cls = _assigned_scores(NoiseModel(score_corr=1.0), 2_000)
    ranked = cls[np.argsort(quality, kind="mergesort")]
    assert np.all(np.diff(ranked) >= -1e-12)


def test_oracle_scores_exact_pose_as_one():
    scene = generate_scene(8, SOLID)
    poses = np.stack([inst.pose.keypoints for inst in scene.instances])
    assert np.allclose(gt_oks_oracle(scene, poses, COCO), 1.0)


def test_dataset_conversion_keeps_people():
    scenes = [generate_scene(s) for s in range(4)]
    dataset = scenes_to_dataset(scenes)
    assert dataset.image_ids() == [1, 2, 3, 4]
    reparsed = gt_from_dict(json.loads(json.dumps(dataset.to_dict())), 17)
    for index, scene in enumerate(scenes):
        view = scene_from_dataset(reparsed, index + 1)
        assert len(view.instances) == len(scene.instances)
        for a, b in zip(view.instances, scene.instances):
            assert np.allclose(a.pose.keypoints, b.pose.keypoints)


def test_hypothesis_records_reload():
    scene = generate_scene(12)
    fields = simulate_fields(scene, NoiseModel(), 12)
    records = json.loads(json.dumps(hypothesis_records(fields, image_id=3, floor=0.05)))
    grouped = hypotheses_from_records({"hypotheses": records}, 17)
    assert set(grouped) <= {3}
    for level, hyps in grouped.get(3, {}).items():
        field = fields[level]
        rows = np.flatnonzero(field.cls_scores >= 0.05)
        assert len(hyps) == len(rows)
        for h, row in zip(hyps, rows):
            assert h.location == field.location(row)
            assert np.allclose(h.offsets1, field.offsets1[row])
            assert h.cls_score == pytest.approx(field.cls_scores[row])

    full = simulate_predictions(scene, NoiseModel(), 12)
    assert sum(len(h) for h in full.values()) == sum(len(f.centers) for f in fields.values())


def test_bad_hypothesis_records():
    record = {"level": 3, "ix": 0, "iy": 0, "offsets1": [[0, 0]] * 17, "cls_score": 0.5, "pose_score": 0.5}
    assert hypothesis_from_record(record, 17).offsets2.sum() == 0
    with pytest.raises(SchemaError):
        hypothesis_from_record({**record, "offsets1": [[0, 0]] * 16}, 17)
    with pytest.raises(SchemaError):
        hypothesis_from_record({k: v for k, v in record.items() if k != "cls_score"}, 17)
    with pytest.raises(SchemaError):
        hypotheses_from_records("not a list", 17)


def test_config_validation():
    with pytest.raises(InvalidConfig):
        SceneConfig(min_count=3, max_count=1)
    with pytest.raises(InvalidConfig):
        NoiseModel(score_corr=1.5)
    assert NoiseModel.from_dict({"base_sigma": 2}).base_sigma == 2.0
