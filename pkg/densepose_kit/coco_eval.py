"""
COCO keypoint ingestion and OKS-based AP/AR evaluation.

Follows the public COCO keypoint protocol:
- OKS thresholds 0.50:0.05:0.95, 101-point interpolated precision
- per image, detections sorted by score and capped before greedy matching
- crowd and keypoint-less ground truths are ignore regions
- medium / large buckets by ground-truth area
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import GroundTruthInstance, Pose, pseudo_box
from .errors import (
    LengthError,
    NoLabeledKeypoints,
    ParseError,
    SchemaError,
    UnknownImageId,
)
from .oks import BOX_AREA_FACTOR

TABLE_COLUMNS = ("AP", "AP50", "AP75", "APM", "APL", "AR")


@dataclass(frozen=True)
class ImageInfo:
    id: int
    width: int
    height: int


@dataclass(frozen=True, eq=False)
class Annotation:
    id: int
    image_id: int
    keypoints: np.ndarray  # (K, 3)
    area: float
    bbox: tuple
    iscrowd: bool = False

    @property
    def num_keypoints(self):
        return int(np.count_nonzero(self.keypoints[:, 2] > 0))

    @property
    def ignore(self):
        return self.iscrowd or self.num_keypoints == 0

    def to_dict(self):
        return {
            "id": self.id,
            "image_id": self.image_id,
            "category_id": 1,
            "keypoints": [float(v) for v in self.keypoints.ravel()],
            "num_keypoints": self.num_keypoints,
            "area": float(self.area),
            "bbox": [float(v) for v in self.bbox],
            "iscrowd": int(self.iscrowd),
        }


@dataclass(frozen=True, eq=False)
class GtDataset:
    images: tuple
    annotations: tuple
    k: int
    _by_image: dict = field(init=False, repr=False)
    _images: dict = field(init=False, repr=False)

    def __post_init__(self):
        by_image = {image.id: [] for image in self.images}
        for ann in self.annotations:
            by_image.setdefault(ann.image_id, []).append(ann)
        object.__setattr__(self, "_by_image", by_image)
        object.__setattr__(self, "_images", {image.id: image for image in self.images})

    def image_ids(self):
        return sorted(self._images)

    def annotations_for(self, image_id):
        return list(self._by_image.get(image_id, ()))

    def image(self, image_id):
        if image_id in self._images:
            return self._images[image_id]
        raise UnknownImageId(f"image id {image_id} not in dataset")

    def instances_for(self, image_id):
        """Non-ignored annotations of an image as GroundTruthInstances."""
        return [
            GroundTruthInstance(
                Pose(ann.keypoints[:, :2], ann.keypoints[:, 2]),
                id=ann.id,
                area=ann.area if ann.area > 0 else None,
            )
            for ann in self.annotations_for(image_id)
            if not ann.ignore
        ]

    def to_dict(self):
        return {
            "images": [
                {"id": im.id, "width": im.width, "height": im.height} for im in self.images
            ],
            "annotations": [ann.to_dict() for ann in self.annotations],
            "categories": [{"id": 1, "name": "person"}],
        }


@dataclass(frozen=True, eq=False)
class KeypointResult:
    image_id: int
    keypoints: np.ndarray  # (K, 3)
    score: float
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        record = {
            "image_id": self.image_id,
            "category_id": 1,
            "keypoints": [float(v) for v in self.keypoints.ravel()],
            "score": float(self.score),
        }
        record.update(self.extras)
        return record


@dataclass(frozen=True, eq=False)
class ResultSet:
    results: tuple

    def to_list(self):
        return [r.to_dict() for r in self.results]


@dataclass(frozen=True)
class EvalParams:
    oks_thresholds: tuple = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
    recall_points: int = 101
    max_detections: int = 100
    medium_range: tuple = (32.0**2, 96.0**2)
    large_range: tuple = (96.0**2, 1e10)

    def area_ranges(self):
        return {
            "all": (0.0, 1e10),
            "medium": self.medium_range,
            "large": self.large_range,
        }


@dataclass(frozen=True)
class EvalResult:
    ap: float
    ap50: float
    ap75: float
    ap_medium: float
    ap_large: float
    ar: float

    def to_dict(self):
        return {
            "AP": self.ap,
            "AP50": self.ap50,
            "AP75": self.ap75,
            "APM": self.ap_medium,
            "APL": self.ap_large,
            "AR": self.ar,
        }


def read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: malformed JSON: {e}") from e


def require_field(record, key, where):
    if not isinstance(record, dict):
        raise SchemaError(f"{where}: expected an object, got {type(record).__name__}")
    if key not in record:
        raise SchemaError(f"{where}: missing required field '{key}'")
    return record[key]


def require_number(value, where):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(f"{where}: expected a number, got {value!r}")
    if not math.isfinite(value):
        raise SchemaError(f"{where}: value must be finite")
    return value


def _keypoint_triples(flat, k, where):
    if not isinstance(flat, list):
        raise SchemaError(f"{where}: keypoints must be a list")
    if len(flat) != 3 * k:
        raise LengthError(f"{where}: keypoints has length {len(flat)}, expected {3 * k}")
    values = np.array([require_number(v, where) for v in flat], dtype=float)
    return values.reshape(k, 3)


def gt_from_dict(data, k):
    """Validate an in-memory COCO keypoint annotations object."""
    images = []
    image_ids = set()
    for i, record in enumerate(require_field(data, "images", "dataset")):
        where = f"images[{i}]"
        image_id = int(require_number(require_field(record, "id", where), where))
        if image_id in image_ids:
            raise SchemaError(f"{where}: duplicate image id {image_id}")
        image_ids.add(image_id)
        images.append(
            ImageInfo(
                id=image_id,
                width=int(require_number(require_field(record, "width", where), where)),
                height=int(require_number(require_field(record, "height", where), where)),
            )
        )

    annotations = []
    ann_ids = set()
    for i, record in enumerate(require_field(data, "annotations", "dataset")):
        where = f"annotations[{i}]"
        ann_id = int(require_number(require_field(record, "id", where), where))
        image_id = int(require_number(require_field(record, "image_id", where), where))
        if ann_id in ann_ids:
            raise SchemaError(f"{where}: duplicate annotation id {ann_id}")
        if image_id not in image_ids:
            raise UnknownImageId(f"{where}: image id {image_id} not in images")
        ann_ids.add(ann_id)
        triples = _keypoint_triples(require_field(record, "keypoints", where), k, where)

        box = None
        if record.get("bbox") is not None:
            bbox = record["bbox"]
            if not isinstance(bbox, list) or len(bbox) != 4:
                raise SchemaError(f"{where}: bbox must be [x, y, w, h]")
            box = tuple(float(require_number(v, where)) for v in bbox)
        try:
            pbox = pseudo_box(Pose(triples[:, :2], triples[:, 2].astype(np.int64)))
        except NoLabeledKeypoints:
            pbox = None
        if box is None:
            box = tuple(pbox.to_xywh()) if pbox is not None else (0.0, 0.0, 0.0, 0.0)

        area = record.get("area")
        if area is None:
            area = BOX_AREA_FACTOR * (pbox.area if pbox is not None else box[2] * box[3])
        annotations.append(
            Annotation(
                id=ann_id,
                image_id=image_id,
                keypoints=triples,
                area=float(require_number(area, where)),
                bbox=box,
                iscrowd=bool(record.get("iscrowd", 0)),
            )
        )
    return GtDataset(tuple(images), tuple(annotations), k)


def results_from_obj(data, k):
    """Validate a results list (or an object with a ``results`` list)."""
    if isinstance(data, dict):
        data = require_field(data, "results", "results file")
    if not isinstance(data, list):
        raise SchemaError("results file: expected a list of detections")
    results = []
    for i, record in enumerate(data):
        where = f"results[{i}]"
        image_id = int(require_number(require_field(record, "image_id", where), where))
        triples = _keypoint_triples(require_field(record, "keypoints", where), k, where)
        score = float(require_number(require_field(record, "score", where), where))
        extras = {
            key: float(require_number(record[key], where))
            for key in ("cls_score", "pose_score")
            if record.get(key) is not None
        }
        results.append(KeypointResult(image_id, triples, score, extras))
    return ResultSet(tuple(results))


def load_gt(path, k=17):
    data = read_json(path)
    if isinstance(data, dict) and "images" not in data and "gt" in data:
        data = data["gt"]  # output of the simulate subcommand
    return gt_from_dict(data, k)


def load_results(path, k=17):
    return results_from_obj(read_json(path), k)


def write_gt(dataset, path):
    with open(path, "w") as f:
        json.dump(dataset.to_dict(), f)


def write_results(results, path):
    with open(path, "w") as f:
        json.dump(results.to_list(), f)


def _image_oks(dts, gts, kappas):
    """OKS matrix (D, G) the way the COCO evaluator computes it."""
    ious = np.zeros((len(dts), len(gts)))
    variances = kappas**2
    for j, gt in enumerate(gts):
        xg, yg, vg = gt.keypoints[:, 0], gt.keypoints[:, 1], gt.keypoints[:, 2]
        labeled = vg > 0
        bx, by, bw, bh = gt.bbox
        x0, x1 = bx - bw, bx + 2 * bw
        y0, y1 = by - bh, by + 2 * bh
        for i, dt in enumerate(dts):
            xd, yd = dt.keypoints[:, 0], dt.keypoints[:, 1]
            if labeled.any():
                dx = xd - xg
                dy = yd - yg
            else:
                # Distance to an enlarged box when the ground truth has no keypoints.
                dx = np.maximum(0.0, x0 - xd) + np.maximum(0.0, xd - x1)
                dy = np.maximum(0.0, y0 - yd) + np.maximum(0.0, yd - y1)
            e = (dx**2 + dy**2) / variances / (gt.area + np.spacing(1)) / 2.0
            if labeled.any():
                e = e[labeled]
            ious[i, j] = np.sum(np.exp(-e)) / e.shape[0]
    return ious


def _detection_area(dt):
    xs = dt.keypoints[:, 0]
    ys = dt.keypoints[:, 1]
    return float((xs.max() - xs.min()) * (ys.max() - ys.min()))


def _evaluate_image(dts, gts, ious, area_range, thresholds, max_det):
    """Greedy matching of one image for one area range."""
    lo, hi = area_range
    gt_ignore = np.array([g.ignore or not (lo <= g.area <= hi) for g in gts], dtype=bool)
    gt_order = np.argsort(gt_ignore, kind="mergesort")
    gt_ignore = gt_ignore[gt_order]
    crowd = np.array([gts[j].iscrowd for j in gt_order], dtype=bool)

    dt_order = np.argsort([-d.score for d in dts], kind="mergesort")[:max_det]
    ious = ious[dt_order][:, gt_order] if len(gts) else np.zeros((len(dt_order), 0))

    n_t = len(thresholds)
    gt_matched = np.zeros((n_t, len(gts)), dtype=bool)
    dt_matched = np.zeros((n_t, len(dt_order)), dtype=bool)
    dt_ignore = np.zeros((n_t, len(dt_order)), dtype=bool)
    for t_index, t in enumerate(thresholds):
        for d_index in range(len(dt_order)):
            best = min(t, 1 - 1e-10)
            m = -1
            for g_index in range(len(gts)):
                if gt_matched[t_index, g_index] and not crowd[g_index]:
                    continue
                if m > -1 and not gt_ignore[m] and gt_ignore[g_index]:
                    break
                if ious[d_index, g_index] < best:
                    continue
                best = ious[d_index, g_index]
                m = g_index
            if m == -1:
                continue
            dt_ignore[t_index, d_index] = gt_ignore[m]
            dt_matched[t_index, d_index] = True
            gt_matched[t_index, m] = True

    areas = np.array([_detection_area(dts[i]) for i in dt_order])
    outside = (areas < lo) | (areas > hi) if len(dt_order) else np.zeros(0, dtype=bool)
    dt_ignore |= ~dt_matched & outside[None, :]
    scores = np.array([dts[i].score for i in dt_order], dtype=float)
    return scores, dt_matched, dt_ignore, int(np.count_nonzero(~gt_ignore))


def _accumulate(per_image, thresholds, recall_thresholds):
    """Interpolated precision (T, R) and recall (T,), -1 when no ground truth counts."""
    n_t = len(thresholds)
    precision = -np.ones((n_t, len(recall_thresholds)))
    recall = -np.ones(n_t)
    if not per_image:
        return precision, recall
    scores = np.concatenate([s for s, _, _, _ in per_image])
    npig = sum(n for _, _, _, n in per_image)
    if npig == 0:
        return precision, recall
    order = np.argsort(-scores, kind="mergesort")
    matched = np.concatenate([m for _, m, _, _ in per_image], axis=1)[:, order]
    ignored = np.concatenate([ig for _, _, ig, _ in per_image], axis=1)[:, order]
    tps = np.cumsum(matched & ~ignored, axis=1).astype(float)
    fps = np.cumsum(~matched & ~ignored, axis=1).astype(float)
    for t_index in range(n_t):
        tp, fp = tps[t_index], fps[t_index]
        nd = len(tp)
        rc = tp / npig
        pr = tp / (fp + tp + np.spacing(1))
        q = np.zeros(len(recall_thresholds))
        recall[t_index] = rc[-1] if nd else 0.0
        pr = pr.tolist()
        for i in range(nd - 1, 0, -1):
            if pr[i] > pr[i - 1]:
                pr[i - 1] = pr[i]
        inds = np.searchsorted(rc, recall_thresholds, side="left")
        for ri, pi in enumerate(inds):
            if pi < nd:
                q[ri] = pr[pi]
        precision[t_index] = q
    return precision, recall


def _mean_valid(values):
    valid = values[values > -1]
    return float(np.mean(valid)) if valid.size else -1.0


def evaluate(gt, res, spec, params=EvalParams()):
    """AP / AP50 / AP75 / APM / APL / AR of a result set against a dataset."""
    known = set(gt.image_ids())
    dts_by_image = {}
    for r in res.results:
        if r.image_id not in known:
            raise UnknownImageId(f"result references unknown image id {r.image_id}")
        dts_by_image.setdefault(r.image_id, []).append(r)

    thresholds = np.asarray(params.oks_thresholds, dtype=float)
    recall_thresholds = np.linspace(0.0, 1.0, params.recall_points)
    ranges = params.area_ranges()
    per_range = {name: [] for name in ranges}
    for image_id in gt.image_ids():
        gts = gt.annotations_for(image_id)
        dts = dts_by_image.get(image_id, [])
        if not gts and not dts:
            continue
        dt_order = np.argsort([-d.score for d in dts], kind="mergesort")[: params.max_detections]
        capped = [dts[i] for i in dt_order]
        ious = _image_oks(capped, gts, spec.kappas)
        for name, area_range in ranges.items():
            per_range[name].append(
                _evaluate_image(
                    capped, gts, ious, area_range, thresholds, params.max_detections
                )
            )

    summary = {}
    for name in ranges:
        summary[name] = _accumulate(per_range[name], thresholds, recall_thresholds)
    precision, recall = summary["all"]

    def at(threshold):
        index = int(np.argmin(np.abs(thresholds - threshold)))
        if not np.isclose(thresholds[index], threshold):
            return -1.0
        return _mean_valid(precision[index])

    return EvalResult(
        ap=_mean_valid(precision),
        ap50=at(0.5),
        ap75=at(0.75),
        ap_medium=_mean_valid(summary["medium"][0]),
        ap_large=_mean_valid(summary["large"][0]),
        ar=_mean_valid(recall),
    )


def format_table_row(result, label=""):
    values = result.to_dict()
    cells = [f"{values[c] * 100:.1f}" if values[c] >= 0 else "-" for c in TABLE_COLUMNS]
    return " | ".join([label] + cells if label else cells)
