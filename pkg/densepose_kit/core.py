"""
Pose geometry for dense single-stage pose regression.

Features:
- Skeleton description (keypoint names, OKS falloff constants, flip pairs)
- Pose / ground-truth / hypothesis / detection records
- Pseudo-box computation over labeled keypoints
- Pyramid grid construction (levels 3-7, strides 8-128)
- Initial and refined decoding of per-location offsets
- Sampling-offset field for the 3x3 feature-aggregation kernel
- Horizontal flip with left/right keypoint swap

All records are immutable; numpy arrays they hold are read-only.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .errors import (
    InvalidConfig,
    InvalidLevel,
    LengthError,
    NoLabeledKeypoints,
    OutOfRange,
    ParseError,
    SchemaError,
    ShapeMismatch,
    TooFewKeypoints,
    check_keys,
)

LEVELS = (3, 4, 5, 6, 7)

COCO_KEYPOINT_NAMES = (
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)

# Per-keypoint sigmas of the COCO keypoint benchmark; OKS falloff kappa = 2 * sigma.
COCO_SIGMAS = (
    np.array(
        [
            0.26, 0.25, 0.25, 0.35, 0.35, 0.79, 0.79, 0.72, 0.72,
            0.62, 0.62, 1.07, 1.07, 0.87, 0.87, 0.89, 0.89,
        ]
    )
    / 10.0
)
COCO_KAPPAS = 2.0 * COCO_SIGMAS
COCO_FLIP_PAIRS = ((1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16))

# One keypoint per 3x3 kernel tap, row-major; the nose sits on the center tap.
COCO_SAMPLING_INDICES = (5, 6, 7, 8, 0, 11, 12, 13, 14)

# Default 3x3 kernel grid in feature cells, row-major over (dy, dx).
KERNEL_GRID = np.array([(dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=float)
KERNEL_GRID.setflags(write=False)


def _frozen(values, dtype=float):
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def level_stride(level):
    """Downsampling ratio 2**level of a pyramid level."""
    if isinstance(level, bool) or not isinstance(level, (int, np.integer)) or level not in LEVELS:
        raise InvalidLevel(f"level must be an integer in [3, 7], got {level!r}")
    return 2 ** int(level)


@dataclass(frozen=True, eq=False)
class SkeletonSpec:
    """Keypoint layout shared by every pose in a run."""

    k: int
    names: tuple
    kappas: np.ndarray
    flip_pairs: tuple = ()
    sampling_indices: tuple = None

    def __post_init__(self):
        if not isinstance(self.k, (int, np.integer)) or self.k < 1:
            raise InvalidConfig(f"skeleton.k must be a positive integer, got {self.k!r}")
        names = tuple(str(n) for n in self.names)
        kappas = _frozen(self.kappas)
        if len(names) != self.k or kappas.shape != (self.k,):
            raise InvalidConfig(
                f"skeleton: expected {self.k} names and kappas, got {len(names)} and {kappas.size}"
            )
        if not np.all(np.isfinite(kappas)) or np.any(kappas <= 0):
            raise InvalidConfig("skeleton.kappas must be finite and positive")

        pairs = tuple((int(a), int(b)) for a, b in self.flip_pairs)
        seen = set()
        for a, b in pairs:
            if not (0 <= a < self.k and 0 <= b < self.k) or a == b or {a, b} & seen:
                raise InvalidConfig(f"skeleton.flip_pairs: invalid pair ({a}, {b})")
            seen.update((a, b))

        indices = self.sampling_indices
        if indices is not None:
            indices = tuple(int(i) for i in indices)
            if len(indices) != 9 or len(set(indices)) != 9 or not all(0 <= i < self.k for i in indices):
                raise InvalidConfig("skeleton.sampling_indices must be 9 distinct keypoint indices")

        object.__setattr__(self, "k", int(self.k))
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "kappas", kappas)
        object.__setattr__(self, "flip_pairs", pairs)
        object.__setattr__(self, "sampling_indices", indices)

    @classmethod
    def coco(cls):
        """The 17-keypoint COCO person skeleton."""
        return cls(
            k=17,
            names=COCO_KEYPOINT_NAMES,
            kappas=COCO_KAPPAS,
            flip_pairs=COCO_FLIP_PAIRS,
            sampling_indices=COCO_SAMPLING_INDICES,
        )

    @classmethod
    def from_dict(cls, data):
        check_keys("skeleton", data, ("k", "names", "kappas", "flip_pairs", "sampling_indices"))
        missing = [key for key in ("k", "names", "kappas") if data.get(key) is None]
        if missing:
            raise InvalidConfig(f"skeleton: missing {', '.join(missing)}")
        return cls(
            k=data["k"],
            names=data["names"],
            kappas=data["kappas"],
            flip_pairs=data.get("flip_pairs") or (),
            sampling_indices=data.get("sampling_indices"),
        )

    @classmethod
    def load(cls, path):
        """Load a skeleton from a JSON or YAML file."""
        try:
            with open(path) as f:
                data = yaml.safe_load(f)
        except (OSError, yaml.YAMLError) as e:
            raise ParseError(f"cannot read skeleton file {path}: {e}") from e
        return cls.from_dict(data)

    def to_dict(self):
        return {
            "k": self.k,
            "names": list(self.names),
            "kappas": [float(v) for v in self.kappas],
            "flip_pairs": [list(p) for p in self.flip_pairs],
            "sampling_indices": list(self.resolved_sampling_indices()) if self.k >= 9 else None,
        }

    def resolved_sampling_indices(self):
        if self.k < 9:
            raise TooFewKeypoints(f"sampling offsets need at least 9 keypoints, skeleton has {self.k}")
        if self.sampling_indices is not None:
            return self.sampling_indices
        return tuple(range(9))

    def flip_permutation(self):
        perm = np.arange(self.k)
        for a, b in self.flip_pairs:
            perm[a], perm[b] = b, a
        return perm


@dataclass(frozen=True, eq=False)
class Pose:
    """K keypoints in input-image pixels with COCO visibility flags."""

    keypoints: np.ndarray
    visibility: np.ndarray

    def __post_init__(self):
        kps = _frozen(self.keypoints)
        vis = _frozen(self.visibility, dtype=np.int64)
        if kps.ndim != 2 or kps.shape[1] != 2 or vis.shape != (kps.shape[0],):
            raise ShapeMismatch(f"pose keypoints {kps.shape} and visibility {vis.shape} disagree")
        if not np.all(np.isfinite(kps)):
            raise OutOfRange("pose coordinates must be finite")
        if np.any((vis < 0) | (vis > 2)):
            raise OutOfRange("visibility flags must be 0, 1 or 2")
        object.__setattr__(self, "keypoints", kps)
        object.__setattr__(self, "visibility", vis)

    @property
    def k(self):
        return self.keypoints.shape[0]

    @property
    def labeled(self):
        return self.visibility > 0

    @classmethod
    def all_labeled(cls, keypoints):
        kps = np.asarray(keypoints, dtype=float)
        return cls(kps, np.full(kps.shape[0], 2))

    @classmethod
    def from_flat(cls, flat, k=None):
        """Build from a COCO ``[x1, y1, v1, x2, ...]`` array."""
        try:
            values = np.asarray(flat, dtype=float)
        except (TypeError, ValueError) as e:
            raise SchemaError(f"keypoints must be a flat array of numbers: {e}") from e
        if values.ndim != 1 or values.size % 3 != 0 or (k is not None and values.size != 3 * k):
            expected = f"3K = {3 * k}" if k is not None else "a multiple of 3"
            raise LengthError(f"keypoints array has length {values.size}, expected {expected}")
        triples = values.reshape(-1, 3)
        return cls(triples[:, :2], np.rint(triples[:, 2]).astype(np.int64))

    def to_flat(self):
        triples = np.column_stack([self.keypoints, self.visibility.astype(float)])
        return [float(v) for v in triples.ravel()]

    def translated(self, dx, dy):
        return Pose(self.keypoints + np.array([dx, dy], dtype=float), self.visibility)


@dataclass(frozen=True)
class PseudoBox:
    """Minimal axis-aligned box over the labeled keypoints of a pose."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise OutOfRange(f"box corners out of order: {self}")

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return self.width * self.height

    @property
    def max_side(self):
        return max(self.width, self.height)

    @property
    def center(self):
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def contains(self, x, y):
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def to_xywh(self):
        return [float(self.x_min), float(self.y_min), float(self.width), float(self.height)]


def pseudo_box(pose):
    """Tight box over the keypoints of ``pose`` with v > 0."""
    labeled = pose.keypoints[pose.labeled]
    if labeled.shape[0] == 0:
        raise NoLabeledKeypoints("pose has no labeled keypoints")
    lo = labeled.min(axis=0)
    hi = labeled.max(axis=0)
    return PseudoBox(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


@dataclass(frozen=True, eq=False)
class GroundTruthInstance:
    """An annotated person; the pseudo-box is derived from its pose."""

    pose: Pose
    id: int
    area: float = None
    pseudo_box: PseudoBox = field(init=False)

    def __post_init__(self):
        if self.area is not None and not (math.isfinite(self.area) and self.area > 0):
            raise OutOfRange(f"instance {self.id}: area must be positive, got {self.area}")
        object.__setattr__(self, "id", int(self.id))
        object.__setattr__(self, "pseudo_box", pseudo_box(self.pose))


@dataclass(frozen=True, order=True)
class GridLocation:
    """A cell of one pyramid level; ordering is (level, row-major)."""

    level: int
    iy: int
    ix: int

    def __post_init__(self):
        level_stride(self.level)
        if self.ix < 0 or self.iy < 0:
            raise OutOfRange(f"grid indices must be non-negative, got ({self.ix}, {self.iy})")
        for name in ("level", "iy", "ix"):
            object.__setattr__(self, name, int(getattr(self, name)))

    @property
    def stride(self):
        return level_stride(self.level)

    @property
    def x_c(self):
        return (self.ix + 0.5) * self.stride

    @property
    def y_c(self):
        return (self.iy + 0.5) * self.stride

    @property
    def center(self):
        return np.array([self.x_c, self.y_c])


def grid_shape(level, image_w, image_h):
    """(rows, cols) of the level grid covering an image."""
    stride = level_stride(level)
    if image_w < 1 or image_h < 1:
        raise OutOfRange(f"image dims must be >= 1, got {image_w}x{image_h}")
    return math.ceil(image_h / stride), math.ceil(image_w / stride)


def grid_centers(level, image_w, image_h):
    """Cell centers of a level as an (ny * nx, 2) array in row-major order."""
    stride = level_stride(level)
    ny, nx = grid_shape(level, image_w, image_h)
    xs = (np.arange(nx) + 0.5) * stride
    ys = (np.arange(ny) + 0.5) * stride
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def grid_locations(level, image_w, image_h):
    """Every location of a level at cell centers, row-major."""
    ny, nx = grid_shape(level, image_w, image_h)
    return [GridLocation(level, iy, ix) for iy in range(ny) for ix in range(nx)]


@dataclass(frozen=True, eq=False)
class PoseHypothesis:
    """Per-location prediction: two offset sets plus two scores."""

    location: GridLocation
    offsets1: np.ndarray
    offsets2: np.ndarray = None
    cls_score: float = 0.0
    pose_score: float = 0.0

    def __post_init__(self):
        o1 = _frozen(self.offsets1)
        o2 = _frozen(np.zeros_like(o1) if self.offsets2 is None else self.offsets2)
        if o1.ndim != 2 or o1.shape[1] != 2 or o2.shape != o1.shape:
            raise ShapeMismatch(f"offsets1 {o1.shape} and offsets2 {o2.shape} must both be (K, 2)")
        if not (np.all(np.isfinite(o1)) and np.all(np.isfinite(o2))):
            raise OutOfRange("offsets must be finite")
        for name in ("cls_score", "pose_score"):
            value = float(getattr(self, name))
            if not 0.0 <= value <= 1.0:
                raise OutOfRange(f"{name} must be in [0, 1], got {value}")
            object.__setattr__(self, name, value)
        object.__setattr__(self, "offsets1", o1)
        object.__setattr__(self, "offsets2", o2)

    @property
    def k(self):
        return self.offsets1.shape[0]


@dataclass(frozen=True, eq=False)
class Detection:
    """A decoded pose with its ranking confidence."""

    pose: Pose
    confidence: float
    source_level: int
    location: GridLocation = None
    image_id: int = 0
    cls_score: float = None
    pose_score: float = None

    def __post_init__(self):
        confidence = float(self.confidence)
        if not 0.0 <= confidence <= 1.0:
            raise OutOfRange(f"confidence must be in [0, 1], got {confidence}")
        object.__setattr__(self, "confidence", confidence)

    def with_confidence(self, confidence):
        return replace(self, confidence=confidence)

    @property
    def rank_key(self):
        """Sort key: confidence descending, then level, then row-major index."""
        loc = self.location
        return (-self.confidence, self.source_level, loc.iy if loc else 0, loc.ix if loc else 0)


def decode_initial(h):
    """Keypoints at the location center plus offsets1."""
    return Pose.all_labeled(h.location.center + h.offsets1)


def decode_refined(h):
    """Keypoints at the location center plus offsets1 plus offsets2."""
    return Pose.all_labeled(h.location.center + h.offsets1 + h.offsets2)


def derive_sampling_offsets(offsets1, stride, spec=None):
    """Sampling offsets of the 3x3 aggregation kernel, in feature cells.

    Tap ``t`` samples near keypoint ``sampling_indices[t]``: its offset is
    that keypoint's offsets1 (pixels, divided by ``stride``) minus the tap's
    default grid position, so the kernel lands on the keypoints.
    """
    offsets1 = np.asarray(offsets1, dtype=float)
    if offsets1.ndim != 2 or offsets1.shape[1] != 2:
        raise ShapeMismatch(f"offsets1 must be (K, 2), got {offsets1.shape}")
    if not stride > 0:
        raise OutOfRange(f"stride must be positive, got {stride}")
    k = offsets1.shape[0]
    if spec is None:
        if k < 9:
            raise TooFewKeypoints(f"sampling offsets need at least 9 keypoints, got {k}")
        indices = COCO_SAMPLING_INDICES if k == 17 else tuple(range(9))
    else:
        if spec.k != k:
            raise ShapeMismatch(f"offsets1 has {k} keypoints, skeleton has {spec.k}")
        indices = spec.resolved_sampling_indices()
    return offsets1[list(indices)] / float(stride) - KERNEL_GRID


def flip_pose(pose, spec, image_width):
    """Mirror a pose horizontally and swap left/right keypoints."""
    if pose.k != spec.k:
        raise ShapeMismatch(f"pose has {pose.k} keypoints, skeleton has {spec.k}")
    kps = pose.keypoints.copy()
    kps[:, 0] = float(image_width) - kps[:, 0]
    perm = spec.flip_permutation()
    return Pose(kps[perm], pose.visibility[perm])
