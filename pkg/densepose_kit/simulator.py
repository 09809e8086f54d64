"""
Seeded synthetic scenes and parametric dense-prediction models.

A scene holds a few non-overlapping people drawn from a jittered 17-keypoint
template. The prediction model emits one hypothesis per grid location:
assigned locations regress the true offsets with noise that grows with the
distance to the person center, refinement removes part of the residual for
hypotheses that are already roughly right, and the two scores follow the
true OKS with tunable correlation. Background locations regress noise.
"""

import math
from dataclasses import dataclass

import numpy as np

from .assign import AssignerConfig, assign_grid
from .coco_eval import (
    Annotation,
    GtDataset,
    ImageInfo,
    KeypointResult,
    ResultSet,
    evaluate,
    require_field,
    require_number,
)
from .console import verbose_print
from .core import (
    LEVELS,
    Detection,
    GridLocation,
    GroundTruthInstance,
    Pose,
    PoseHypothesis,
    SkeletonSpec,
    flip_pose,
    grid_centers,
    level_stride,
    pseudo_box,
)
from .errors import InvalidConfig, SchemaError, check_keys
from .oks import BOX_AREA_FACTOR, oks_batch, oks_matrix, scale_for_instance
from .postprocess import NmsConfig, fuse_confidence, pose_nms

# COCO-17 person in units of body height, centered; the person's left is +x.
PERSON_TEMPLATE = np.array(
    [
        (0.00, -0.42),
        (0.03, -0.45),
        (-0.03, -0.45),
        (0.06, -0.43),
        (-0.06, -0.43),
        (0.12, -0.30),
        (-0.12, -0.30),
        (0.16, -0.12),
        (-0.16, -0.12),
        (0.18, 0.04),
        (-0.18, 0.04),
        (0.08, 0.02),
        (-0.08, 0.02),
        (0.09, 0.25),
        (-0.09, 0.25),
        (0.10, 0.48),
        (-0.10, 0.48),
    ]
)
TORSO = (5, 6, 11, 12)

# Quality z-score used when mixing true OKS into the classification logit.
OKS_CENTER = 0.5
OKS_SPREAD = 0.2


def stream_seed(master, *indices):
    """Seed of the independent random stream named by ``indices``."""
    entropy = [int(master)] + [int(i) for i in indices]
    return int(np.random.SeedSequence(entropy).generate_state(2, np.uint64)[0])


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _check_non_negative(section, record, names):
    for name in names:
        value = getattr(record, name)
        if not (math.isfinite(value) and value >= 0):
            raise InvalidConfig(f"{section}.{name} must be >= 0, got {value}")


@dataclass(frozen=True)
class SceneConfig:
    image_width: int = 512
    image_height: int = 512
    min_count: int = 1
    max_count: int = 4
    min_height: float = 40.0  # person height in pixels
    max_height: float = 320.0
    pose_jitter: float = 0.03  # in units of height
    occlusion_prob: float = 0.1
    unlabeled_prob: float = 0.05
    flip_prob: float = 0.5
    max_tries: int = 50

    def __post_init__(self):
        if self.image_width < 1 or self.image_height < 1:
            raise InvalidConfig("scene image dims must be >= 1")
        if not 0 <= self.min_count <= self.max_count:
            raise InvalidConfig("scene counts must satisfy 0 <= min_count <= max_count")
        if not 0 < self.min_height <= self.max_height:
            raise InvalidConfig("scene heights must satisfy 0 < min_height <= max_height")
        for name in ("occlusion_prob", "unlabeled_prob", "flip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidConfig(f"scene.{name} must be in [0, 1]")
        if self.occlusion_prob + self.unlabeled_prob > 1.0:
            raise InvalidConfig("scene.occlusion_prob + scene.unlabeled_prob must be <= 1")
        _check_non_negative("scene", self, ("pose_jitter",))
        if self.max_tries < 1:
            raise InvalidConfig("scene.max_tries must be >= 1")

    @classmethod
    def from_dict(cls, data):
        check_keys("scene", data, cls.__dataclass_fields__)
        return cls(**data)


@dataclass(frozen=True)
class NoiseModel:
    base_sigma: float = 3.0  # pixels, for a person of reference_scale
    center_slope: float = 16.0
    reference_scale: float = 100.0
    refine_gain: float = 0.7
    refine_gate: float = 0.2
    cls_noise: float = 1.5
    cls_bias: float = 1.5
    score_corr: float = 0.3
    pose_noise: float = 0.08
    background_logit: float = -7.0
    refine_reach: float = 0.06
    refine_noise: float = 0.006

    def __post_init__(self):
        _check_non_negative(
            "noise",
            self,
            (
                "base_sigma",
                "center_slope",
                "refine_gain",
                "refine_gate",
                "cls_noise",
                "cls_bias",
                "score_corr",
                "pose_noise",
                "refine_noise",
            ),
        )
        if not self.reference_scale > 0 or not self.refine_reach > 0:
            raise InvalidConfig("noise.reference_scale and noise.refine_reach must be positive")
        if self.refine_gain > 1.0 or self.refine_gate > 1.0 or self.score_corr > 1.0:
            raise InvalidConfig("noise.refine_gain, refine_gate and score_corr must be <= 1")
        if not math.isfinite(self.background_logit):
            raise InvalidConfig("noise.background_logit must be finite")

    @classmethod
    def from_dict(cls, data):
        check_keys("noise", data, cls.__dataclass_fields__)
        return cls(**{k: float(v) for k, v in data.items()})

    @classmethod
    def noiseless(cls):
        """Exact offsets, exact refinement, constant classification score."""
        return cls(
            base_sigma=0.0,
            center_slope=0.0,
            refine_gain=1.0,
            refine_gate=0.0,
            cls_noise=0.0,
            score_corr=0.0,
            pose_noise=0.0,
            refine_noise=0.0,
        )

    def relative_sigma(self, distance):
        """Offset noise std in units of person size at normalized ``distance``."""
        return (self.base_sigma + self.center_slope * distance) / self.reference_scale

    def pixel_sigma(self, distance, size):
        return self.relative_sigma(distance) * size

    def cls_scores(self, quality, xi):
        rho = self.score_corr
        z = (quality - OKS_CENTER) / OKS_SPREAD
        return _sigmoid(self.cls_bias + self.cls_noise * (rho * z + math.sqrt(1.0 - rho**2) * xi))

    def pose_scores(self, quality, xi):
        return np.clip(quality + self.pose_noise * xi, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class SimScene:
    image_width: int
    image_height: int
    instances: tuple
    heights: tuple


def _overlaps(a, b):
    return a.x_min < b.x_max and b.x_min < a.x_max and a.y_min < b.y_max and b.y_min < a.y_max


def generate_scene(seed, cfg=SceneConfig(), spec=None):
    """Deterministic scene of non-overlapping people for ``seed``."""
    spec = spec or SkeletonSpec.coco()
    if spec.k != PERSON_TEMPLATE.shape[0]:
        raise InvalidConfig(f"scene template has 17 keypoints, skeleton has {spec.k}")
    rng = np.random.default_rng(seed)
    width, height = float(cfg.image_width), float(cfg.image_height)
    count = int(rng.integers(cfg.min_count, cfg.max_count + 1))
    instances = []
    heights = []
    for _ in range(count):
        for _attempt in range(cfg.max_tries):
            size = math.exp(rng.uniform(math.log(cfg.min_height), math.log(cfg.max_height)))
            half_w, half_h = 0.25 * size, 0.5 * size
            jitter = cfg.pose_jitter * rng.standard_normal(PERSON_TEMPLATE.shape)
            flip = rng.random() < cfg.flip_prob
            u = rng.random(spec.k)
            if 2 * half_w >= width or 2 * half_h >= height:
                continue
            cx = rng.uniform(half_w, width - half_w)
            cy = rng.uniform(half_h, height - half_h)

            template = Pose.all_labeled(PERSON_TEMPLATE + jitter)
            if flip:
                template = flip_pose(template, spec, 0.0)
            kps = np.column_stack(
                [
                    np.clip(cx + size * template.keypoints[:, 0], 0.0, width),
                    np.clip(cy + size * template.keypoints[:, 1], 0.0, height),
                ]
            )
            visibility = np.where(
                u < cfg.unlabeled_prob, 0, np.where(u < cfg.unlabeled_prob + cfg.occlusion_prob, 1, 2)
            )
            if np.count_nonzero(visibility) < 3:
                visibility[list(TORSO)] = 2
            pose = Pose(kps, visibility)
            box = pseudo_box(pose)
            if box.width <= 0 or box.height <= 0:
                continue
            if any(_overlaps(box, other.pseudo_box) for other in instances):
                continue
            instances.append(
                GroundTruthInstance(pose, id=len(instances) + 1, area=BOX_AREA_FACTOR * box.area)
            )
            heights.append(size)
            break
        else:
            verbose_print(f"scene {seed}: no free spot for person after {cfg.max_tries} tries")
    return SimScene(cfg.image_width, cfg.image_height, tuple(instances), tuple(heights))


@dataclass(frozen=True, eq=False)
class PredictionField:
    """Dense predictions of one level as flat row-major arrays."""

    level: int
    nx: int
    ny: int
    centers: np.ndarray  # (N, 2)
    instance_ids: np.ndarray  # (N,), -1 background
    initial_positive: np.ndarray  # (N,)
    offsets1: np.ndarray  # (N, K, 2)
    offsets2: np.ndarray  # (N, K, 2)
    cls_scores: np.ndarray  # (N,)
    pose_scores: np.ndarray  # (N,)
    true_oks: np.ndarray  # (N,), refined OKS vs assigned instance, 0 for background

    def location(self, index):
        return GridLocation(level=self.level, iy=int(index) // self.nx, ix=int(index) % self.nx)

    def refined_poses(self, rows):
        return self.centers[rows, None, :] + self.offsets1[rows] + self.offsets2[rows]

    def hypotheses(self, rows=None):
        rows = range(len(self.centers)) if rows is None else rows
        return [
            PoseHypothesis(
                self.location(i),
                self.offsets1[i],
                self.offsets2[i],
                float(self.cls_scores[i]),
                float(self.pose_scores[i]),
            )
            for i in rows
        ]


def _instance_arrays(instances, use_area):
    gt = np.stack([inst.pose.keypoints for inst in instances])
    vis = np.stack([inst.pose.visibility for inst in instances])
    s2 = np.array([scale_for_instance(inst, use_area).s_squared for inst in instances])
    return gt, vis, s2


def simulate_fields(scene, noise, seed, assigner=AssignerConfig(), spec=None):
    """Dense prediction arrays for all five levels of a scene."""
    spec = spec or SkeletonSpec.coco()
    by_id = {inst.id: inst for inst in scene.instances}
    fields = {}
    for level in LEVELS:
        rng = np.random.default_rng(stream_seed(seed, level))
        stride = level_stride(level)
        ids, positive = assign_grid(level, scene.image_width, scene.image_height, scene.instances, assigner)
        ny, nx = ids.shape
        centers = grid_centers(level, scene.image_width, scene.image_height)
        flat_ids = ids.ravel()
        n, k = len(centers), spec.k
        xi1 = rng.standard_normal((n, k, 2))
        xi2 = rng.standard_normal((n, k, 2))
        xi_cls = rng.standard_normal(n)
        xi_pose = rng.standard_normal(n)

        offsets1 = 2.0 * stride * xi1
        offsets2 = np.zeros((n, k, 2))
        cls = _sigmoid(noise.background_logit + noise.cls_noise * xi_cls)
        pose = np.clip(np.abs(noise.pose_noise * xi_pose), 0.0, 1.0)
        true_oks = np.zeros(n)

        rows = np.flatnonzero(flat_ids >= 0)
        if rows.size:
            targets = [by_id[int(i)] for i in flat_ids[rows]]
            gt, vis, s2 = _instance_arrays(targets, assigner.use_annotated_area)
            box_centers = np.array([inst.pseudo_box.center for inst in targets])
            sizes = np.array([max(inst.pseudo_box.max_side, 1.0) for inst in targets])
            loc = centers[rows]
            truth = gt - loc[:, None, :]
            distance = np.linalg.norm(loc - box_centers, axis=1) / sizes
            sigma = noise.pixel_sigma(distance, sizes)[:, None, None]

            o1 = truth + sigma * xi1[rows]
            q1 = oks_batch(loc[:, None, :] + o1, gt, vis, s2, spec.kappas)
            gated = (q1 >= noise.refine_gate)[:, None, None]
            o2 = np.where(gated, noise.refine_gain * (truth - o1), 0.25 * sigma * xi2[rows])
            q = oks_batch(loc[:, None, :] + o1 + o2, gt, vis, s2, spec.kappas)

            offsets1[rows] = o1
            offsets2[rows] = o2
            cls[rows] = noise.cls_scores(q, xi_cls[rows])
            pose[rows] = noise.pose_scores(q, xi_pose[rows])
            true_oks[rows] = q

        fields[level] = PredictionField(
            level=level,
            nx=nx,
            ny=ny,
            centers=centers,
            instance_ids=flat_ids,
            initial_positive=positive.ravel(),
            offsets1=offsets1,
            offsets2=offsets2,
            cls_scores=cls,
            pose_scores=pose,
            true_oks=true_oks,
        )
    return fields


def simulate_predictions(scene, noise, seed, assigner=AssignerConfig(), spec=None):
    """Per-level PoseHypothesis lists covering every grid location."""
    fields = simulate_fields(scene, noise, seed, assigner, spec)
    return {level: field.hypotheses() for level, field in fields.items()}


def gt_oks_oracle(scene, poses, spec, use_area=True):
    """Best OKS of each (N, K, 2) pose against the scene's people, 0 without people."""
    if not scene.instances:
        return np.zeros(len(poses))
    gt, vis, s2 = _instance_arrays(scene.instances, use_area)
    return oks_matrix(poses, gt, vis, s2, spec.kappas).max(axis=1)


def detect(scene, fields, score_mode, nms, spec, image_id=0, use_area=True):
    """Prefilter by cls score, fuse scores, decode refined poses and run NMS."""
    dets = []
    for level in LEVELS:
        field = fields[level]
        rows = np.flatnonzero(field.cls_scores >= nms.score_floor)
        if not rows.size:
            continue
        poses = field.refined_poses(rows)
        oracle = gt_oks_oracle(scene, poses, spec, use_area) if score_mode == "gt-oks" else None
        for n, i in enumerate(rows):
            cls_score = float(field.cls_scores[i])
            pose_score = float(field.pose_scores[i])
            dets.append(
                Detection(
                    pose=Pose.all_labeled(poses[n]),
                    confidence=fuse_confidence(
                        cls_score, pose_score, score_mode, None if oracle is None else float(oracle[n])
                    ),
                    source_level=level,
                    location=field.location(i),
                    image_id=image_id,
                    cls_score=cls_score,
                    pose_score=pose_score,
                )
            )
    return pose_nms(dets, nms, spec)


def scenes_to_dataset(scenes, k=17):
    """COCO ground truth for scenes; image ids and annotation ids start at 1."""
    images = []
    annotations = []
    for index, scene in enumerate(scenes):
        image_id = index + 1
        images.append(ImageInfo(image_id, scene.image_width, scene.image_height))
        for inst in scene.instances:
            triples = np.column_stack([inst.pose.keypoints, inst.pose.visibility.astype(float)])
            annotations.append(
                Annotation(
                    id=len(annotations) + 1,
                    image_id=image_id,
                    keypoints=triples,
                    area=float(inst.area),
                    bbox=tuple(inst.pseudo_box.to_xywh()),
                )
            )
    return GtDataset(tuple(images), tuple(annotations), k)


def detections_to_results(dets):
    results = []
    for det in dets:
        triples = np.column_stack([det.pose.keypoints, det.pose.visibility.astype(float)])
        extras = {}
        if det.cls_score is not None:
            extras["cls_score"] = det.cls_score
        if det.pose_score is not None:
            extras["pose_score"] = det.pose_score
        results.append(KeypointResult(det.image_id, triples, det.confidence, extras))
    return ResultSet(tuple(results))


def evaluate_scenes(scenes, detections, spec):
    """Evaluate detections whose image ids follow scenes_to_dataset numbering."""
    return evaluate(scenes_to_dataset(scenes, spec.k), detections_to_results(detections), spec)


def hypothesis_records(fields, image_id, floor=None):
    """JSON-ready hypotheses; only cls >= floor unless floor is None."""
    records = []
    for level in LEVELS:
        field = fields[level]
        rows = range(len(field.centers)) if floor is None else np.flatnonzero(field.cls_scores >= floor)
        for i in rows:
            loc = field.location(i)
            inst_id = int(field.instance_ids[i])
            records.append(
                {
                    "image_id": image_id,
                    "level": level,
                    "ix": loc.ix,
                    "iy": loc.iy,
                    "x_c": loc.x_c,
                    "y_c": loc.y_c,
                    "offsets1": field.offsets1[i].tolist(),
                    "offsets2": field.offsets2[i].tolist(),
                    "cls_score": float(field.cls_scores[i]),
                    "pose_score": float(field.pose_scores[i]),
                    "instance_id": inst_id if inst_id >= 0 else None,
                }
            )
    return records


def scene_from_dataset(dataset, image_id):
    """SimScene view of one image of a COCO dataset (ignored annotations dropped)."""
    image = dataset.image(image_id)
    instances = tuple(dataset.instances_for(image_id))
    heights = tuple(inst.pseudo_box.height for inst in instances)
    return SimScene(image.width, image.height, instances, heights)


def _offsets(record, key, k, where):
    try:
        values = np.asarray(require_field(record, key, where), dtype=float)
    except (TypeError, ValueError) as e:
        raise SchemaError(f"{where}: {key} is not a numeric array") from e
    if values.shape != (k, 2):
        raise SchemaError(f"{where}: {key} must be a {k} x 2 array, got shape {values.shape}")
    return values


def hypothesis_from_record(record, k, where="hypothesis"):
    """PoseHypothesis from one record of hypothesis_records; offsets2 is optional."""
    location = GridLocation(
        level=int(require_number(require_field(record, "level", where), where)),
        iy=int(require_number(require_field(record, "iy", where), where)),
        ix=int(require_number(require_field(record, "ix", where), where)),
    )
    return PoseHypothesis(
        location,
        _offsets(record, "offsets1", k, where),
        _offsets(record, "offsets2", k, where) if record.get("offsets2") is not None else None,
        require_number(require_field(record, "cls_score", where), where),
        require_number(require_field(record, "pose_score", where), where),
    )


def hypotheses_from_records(records, k):
    """Inverse of hypothesis_records: {image_id: {level: [PoseHypothesis]}}."""
    if isinstance(records, dict):
        records = require_field(records, "hypotheses", "hypotheses file")
    if not isinstance(records, list):
        raise SchemaError("hypotheses file: expected a list of hypotheses")
    grouped = {}
    for i, record in enumerate(records):
        where = f"hypotheses[{i}]"
        hyp = hypothesis_from_record(record, k, where)
        image_id = int(require_number(record.get("image_id", 0), where))
        grouped.setdefault(image_id, {}).setdefault(hyp.location.level, []).append(hyp)
    return grouped
