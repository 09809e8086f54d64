#!/usr/bin/env python3
"""
Tests for COCO keypoint ingestion and AP/AR evaluation
"""

import json
import math

import numpy as np
import pytest

from densepose_kit.coco_eval import (
    EvalParams,
    EvalResult,
    evaluate,
    format_table_row,
    gt_from_dict,
    load_gt,
    load_results,
    results_from_obj,
    write_gt,
    write_results,
)
from densepose_kit.core import COCO_SIGMAS, SkeletonSpec
from densepose_kit.errors import LengthError, ParseError, SchemaError, UnknownImageId

COCO = SkeletonSpec.coco()
THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
MEDIUM = (32.0**2, 96.0**2)
LARGE = (96.0**2, 1e10)


def reference_oks(dt, gt, area):
    total = 0.0
    count = 0
    for j in range(17):
        if gt[3 * j + 2] > 0:
            d2 = (dt[3 * j] - gt[3 * j]) ** 2 + (dt[3 * j + 1] - gt[3 * j + 1]) ** 2
            var = (2.0 * COCO_SIGMAS[j]) ** 2
            total += math.exp(-d2 / var / (area + np.spacing(1)) / 2.0)
            count += 1
    return total / count


def _inside(area, area_range):
    return area_range[0] <= area <= area_range[1]


def _keypoint_box_area(kps):
    xs, ys = kps[0::3], kps[1::3]
    return (max(xs) - min(xs)) * (max(ys) - min(ys))


def reference_evaluate(gt, results, max_dets=100, area_range=(0.0, 1e10)):
    """Plain-loop COCO AP/AR for one area range, no crowd annotations.

    Returns -1 for every metric when the range holds no ground truth.
    """
    aps = []
    recalls = []
    image_ids = sorted(im["id"] for im in gt["images"])
    for t in THRESHOLDS:
        ranked = []
        n_gt = 0
        for image_id in image_ids:
            gts = [a for a in gt["annotations"] if a["image_id"] == image_id]
            gts.sort(key=lambda a: not _inside(a["area"], area_range))
            ignored = [not _inside(a["area"], area_range) for a in gts]
            n_gt += ignored.count(False)
            dts = sorted(
                (r for r in results if r["image_id"] == image_id), key=lambda r: -r["score"]
            )[:max_dets]
            taken = set()
            for dt in dts:
                best, match = min(t, 1 - 1e-10), None
                for g_index, g in enumerate(gts):
                    if g_index in taken:
                        continue
                    if match is not None and not ignored[match] and ignored[g_index]:
                        break
                    oks = reference_oks(dt["keypoints"], g["keypoints"], g["area"])
                    if oks >= best:
                        best, match = oks, g_index
                if match is not None:
                    taken.add(match)
                    skip = ignored[match]
                else:
                    skip = not _inside(_keypoint_box_area(dt["keypoints"]), area_range)
                if not skip:
                    ranked.append((dt["score"], match is not None))
        if n_gt == 0:
            return {"AP": -1.0, "AP50": -1.0, "AP75": -1.0, "AR": -1.0}
        ranked.sort(key=lambda item: -item[0])
        tp = fp = 0
        precisions = []
        recall_curve = []
        for _, hit in ranked:
            tp += hit
            fp += not hit
            precisions.append(tp / (tp + fp))
            recall_curve.append(tp / n_gt)
        for i in range(len(precisions) - 2, -1, -1):
            precisions[i] = max(precisions[i], precisions[i + 1])
        samples = []
        for level in np.linspace(0.0, 1.0, 101):
            reached = [p for p, rc in zip(precisions, recall_curve) if rc >= level]
            samples.append(reached[0] if reached else 0.0)
        aps.append(sum(samples) / 101)
        recalls.append(recall_curve[-1] if recall_curve else 0.0)
    return {
        "AP": sum(aps) / 10,
        "AP50": aps[0],
        "AP75": aps[5],
        "AR": sum(recalls) / 10,
    }


def _person(rng, origin, scale):
    kps = []
    for _ in range(17):
        x, y = origin + rng.uniform(0, scale, 2)
        v = int(rng.choice([0, 1, 2], p=[0.2, 0.2, 0.6]))
        kps.extend([float(x), float(y), v])
    kps[2] = 2
    return kps


def make_fixture(seed=0, images=20):
    rng = np.random.default_rng(seed)
    gt = {"images": [], "annotations": [], "categories": [{"id": 1, "name": "person"}]}
    results = []
    ann_id = 1
    for image_id in range(1, images + 1):
        gt["images"].append({"id": image_id, "width": 640, "height": 480})
        for _ in range(int(rng.integers(0, 5))):
            scale = float(rng.uniform(30, 250))
            kps = _person(rng, rng.uniform(0, 300, 2), scale)
            area = float(rng.uniform(0.3, 0.9) * scale * scale)
            gt["annotations"].append(
                {"id": ann_id, "image_id": image_id, "keypoints": kps, "area": area, "iscrowd": 0}
            )
            ann_id += 1
            for _ in range(int(rng.integers(0, 3))):
                noise = rng.normal(0, float(rng.uniform(0.5, 0.15 * scale)), (17, 2))
                dt = []
                for j in range(17):
                    dt.extend([kps[3 * j] + noise[j, 0], kps[3 * j + 1] + noise[j, 1], 1.0])
                results.append({"image_id": image_id, "keypoints": dt, "score": float(rng.uniform(0, 1))})
        for _ in range(int(rng.integers(0, 3))):
            dt = _person(rng, rng.uniform(0, 400, 2), 80.0)
            results.append({"image_id": image_id, "keypoints": dt, "score": float(rng.uniform(0, 1))})
    return gt, results


def test_matches_reference_evaluator():
    for seed in range(8):
        gt, results = make_fixture(seed)
        got = evaluate(gt_from_dict(gt, 17), results_from_obj(results, 17), COCO).to_dict()
        expected = reference_evaluate(gt, results)
        expected["APM"] = reference_evaluate(gt, results, area_range=MEDIUM)["AP"]
        expected["APL"] = reference_evaluate(gt, results, area_range=LARGE)["AP"]
        assert expected["APM"] >= 0.0 and expected["APL"] >= 0.0
        assert set(got) == set(expected)
        for key, value in expected.items():
            assert got[key] == pytest.approx(value, abs=1e-6), key


def test_reference_evaluator_with_small_detection_cap():
    gt, results = make_fixture(4)
    params = EvalParams(max_detections=2)
    got = evaluate(gt_from_dict(gt, 17), results_from_obj(results, 17), COCO, params).to_dict()
    expected = reference_evaluate(gt, results, max_dets=2)
    assert got["AP"] == pytest.approx(expected["AP"], abs=1e-6)
    assert got["AR"] == pytest.approx(expected["AR"], abs=1e-6)


def test_perfect_detections_score_one():
    gt, _ = make_fixture(5)
    perfect = [
        {"image_id": a["image_id"], "keypoints": a["keypoints"], "score": 1.0}
        for a in gt["annotations"]
    ]
    result = evaluate(gt_from_dict(gt, 17), results_from_obj(perfect, 17), COCO)
    assert result.ap == pytest.approx(1.0)
    assert result.ap50 == pytest.approx(1.0)
    assert result.ar == 1.0


def test_no_detections_score_zero():
    gt, _ = make_fixture(6)
    result = evaluate(gt_from_dict(gt, 17), results_from_obj([], 17), COCO)
    assert result.ap == 0.0
    assert result.ar == 0.0


def test_high_scoring_false_positive_halves_precision():
    kps = [float(v) for j in range(17) for v in (100 + 3 * j, 100 + 5 * j, 2)]
    gt = {
        "images": [{"id": 1, "width": 400, "height": 400}],
        "annotations": [{"id": 1, "image_id": 1, "keypoints": kps, "area": 5000.0}],
    }
    far = [v + 250.0 if i % 3 != 2 else v for i, v in enumerate(kps)]
    results = [
        {"image_id": 1, "keypoints": far, "score": 0.9},
        {"image_id": 1, "keypoints": kps, "score": 0.5},
        {"image_id": 1, "keypoints": kps, "score": 0.4},
    ]
    result = evaluate(gt_from_dict(gt, 17), results_from_obj(results, 17), COCO)
    assert result.ap == pytest.approx(0.5)
    assert result.ap50 == pytest.approx(0.5)
    assert result.ar == pytest.approx(1.0)


def test_recall_grows_with_detection_cap():
    gt, results = make_fixture(7)
    dataset = gt_from_dict(gt, 17)
    res = results_from_obj(results, 17)
    recalls = [evaluate(dataset, res, COCO, EvalParams(max_detections=m)).ar for m in (1, 2, 100)]
    assert recalls == sorted(recalls)


def test_annotations_are_grouped_by_image():
    gt, _ = make_fixture(11, images=6)
    dataset = gt_from_dict(gt, 17)
    for image_id in dataset.image_ids():
        expected = [a["id"] for a in gt["annotations"] if a["image_id"] == image_id]
        assert [ann.id for ann in dataset.annotations_for(image_id)] == expected
        assert dataset.image(image_id).id == image_id
    dataset.annotations_for(1).clear()
    assert len(dataset.annotations_for(1)) == sum(a["image_id"] == 1 for a in gt["annotations"])
    assert dataset.annotations_for(999) == []
    with pytest.raises(UnknownImageId):
        dataset.image(999)


def test_wrong_keypoint_length_is_rejected():
    with pytest.raises(LengthError):
        results_from_obj([{"image_id": 1, "keypoints": [0.0] * 50, "score": 0.5}], 17)


def test_missing_fields_are_schema_errors():
    with pytest.raises(SchemaError):
        results_from_obj([{"image_id": 1, "keypoints": [0.0] * 51}], 17)
    with pytest.raises(SchemaError):
        gt_from_dict({"images": []}, 17)
    with pytest.raises(SchemaError):
        results_from_obj([{"image_id": 1, "keypoints": [0.0] * 51, "score": "high"}], 17)


def test_unknown_image_ids():
    gt, _ = make_fixture(8, images=2)
    with pytest.raises(UnknownImageId):
        evaluate(
            gt_from_dict(gt, 17),
            results_from_obj([{"image_id": 999, "keypoints": [0.0] * 51, "score": 0.5}], 17),
            COCO,
        )
    gt["annotations"].append({"id": 10_000, "image_id": 999, "keypoints": [0.0] * 51})
    with pytest.raises(UnknownImageId):
        gt_from_dict(gt, 17)


def test_malformed_json_is_a_parse_error(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ParseError):
        load_results(path)
    with pytest.raises(ParseError):
        load_gt(tmp_path / "missing.json")


def test_written_files_evaluate_identically(tmp_path):
    gt, results = make_fixture(9)
    dataset = gt_from_dict(gt, 17)
    res = results_from_obj(results, 17)
    write_gt(dataset, tmp_path / "gt.json")
    write_results(res, tmp_path / "dt.json")
    reloaded = evaluate(load_gt(tmp_path / "gt.json"), load_results(tmp_path / "dt.json"), COCO)
    assert reloaded == evaluate(dataset, res, COCO)


def test_simulate_output_is_accepted_as_ground_truth(tmp_path):
    gt, _ = make_fixture(10, images=3)
    path = tmp_path / "sim.json"
    path.write_text(json.dumps({"gt": gt, "hypotheses": []}))
    assert load_gt(path).image_ids() == [1, 2, 3]


def test_missing_area_falls_back_to_pseudo_box():
    kps = [float(v) for j in range(17) for v in (10 + j, 20 + 2 * j, 2)]
    gt = {"images": [{"id": 1, "width": 100, "height": 100}], "annotations": [{"id": 1, "image_id": 1, "keypoints": kps}]}
    (ann,) = gt_from_dict(gt, 17).annotations
    assert ann.area == pytest.approx(0.53 * 16 * 32)
    assert ann.bbox == (10.0, 20.0, 16.0, 32.0)


def test_table_row_formatting():
    row = format_table_row(EvalResult(0.5, 0.75, 0.25, -1.0, 1.0, 0.6134), label="fused")
    assert row == "fused | 50.0 | 75.0 | 25.0 | - | 100.0 | 61.3"
