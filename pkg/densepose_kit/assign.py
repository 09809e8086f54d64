"""
Training-target assignment.

Instances go to one pyramid level by the longer side of their pseudo-box.
Within a level, a location belongs to the smallest pseudo-box containing its
center. Initial-regression positives sit inside a fixed-size square around
the pseudo-box center; refinement positives are the assigned hypotheses whose
refined pose reaches an OKS threshold; PSM targets are the refined OKS.
"""

import math
from dataclasses import dataclass

import numpy as np

from .core import LEVELS, GridLocation, PoseHypothesis, decode_refined, grid_shape, level_stride
from .errors import InvalidConfig, InvariantViolation, ShapeMismatch, check_keys
from .oks import compute_oks, oks_batch, scale_for_instance

POSITIVE_RULES = ("shrunk-box", "full-box")


@dataclass(frozen=True)
class AssignerConfig:
    shrunk_sides: tuple = (12.0, 24.0, 48.0, 96.0, 192.0)
    level_ranges: tuple = ((0.0, 64.0), (64.0, 128.0), (128.0, 256.0), (256.0, 512.0), (512.0, math.inf))
    refine_oks_threshold: float = 0.5
    positive_rule: str = "shrunk-box"
    use_annotated_area: bool = True

    def __post_init__(self):
        sides = tuple(float(s) for s in self.shrunk_sides)
        if len(sides) != len(LEVELS) or any(s <= 0 for s in sides):
            raise InvalidConfig("assigner.shrunk_sides needs 5 positive values")
        if any(b <= a for a, b in zip(sides, sides[1:])):
            raise InvalidConfig("assigner.shrunk_sides must be increasing")

        ranges = tuple(
            (float(lo), math.inf if hi is None else float(hi)) for lo, hi in self.level_ranges
        )
        if len(ranges) != len(LEVELS) or ranges[0][0] != 0.0 or ranges[-1][1] != math.inf:
            raise InvalidConfig("assigner.level_ranges must be 5 intervals covering [0, inf)")
        for (lo, hi), (nxt, _) in zip(ranges, ranges[1:] + ((math.inf, None),)):
            if not lo < hi or hi != nxt:
                raise InvalidConfig("assigner.level_ranges must partition [0, inf) in order")

        if not 0.0 <= float(self.refine_oks_threshold) <= 1.0:
            raise InvalidConfig("assigner.refine_oks_threshold must be in [0, 1]")
        if self.positive_rule not in POSITIVE_RULES:
            raise InvalidConfig(f"assigner.positive_rule must be one of {POSITIVE_RULES}")

        object.__setattr__(self, "shrunk_sides", sides)
        object.__setattr__(self, "level_ranges", ranges)
        object.__setattr__(self, "refine_oks_threshold", float(self.refine_oks_threshold))
        object.__setattr__(self, "use_annotated_area", bool(self.use_annotated_area))

    @classmethod
    def from_dict(cls, data):
        check_keys("assigner", data, cls.__dataclass_fields__)
        return cls(**data)

    def to_dict(self):
        return {
            "shrunk_sides": list(self.shrunk_sides),
            "level_ranges": [[lo, None if math.isinf(hi) else hi] for lo, hi in self.level_ranges],
            "refine_oks_threshold": self.refine_oks_threshold,
            "positive_rule": self.positive_rule,
            "use_annotated_area": self.use_annotated_area,
        }

    def shrunk_side(self, level):
        return self.shrunk_sides[LEVELS.index(level)]


@dataclass(frozen=True)
class Assignment:
    location: GridLocation
    instance_id: int = None
    is_initial_positive: bool = False
    is_refine_positive: bool = False
    psm_target: float = None

    def __post_init__(self):
        assigned = self.instance_id is not None
        if (self.is_initial_positive or self.is_refine_positive) and not assigned:
            raise InvariantViolation(f"{self.location}: positive without an assigned instance")
        if (self.psm_target is not None) != assigned:
            raise InvariantViolation(f"{self.location}: psm_target must be present iff assigned")
        if assigned and not 0.0 <= self.psm_target <= 1.0:
            raise InvariantViolation(f"{self.location}: psm_target {self.psm_target} outside [0, 1]")

    def to_dict(self):
        return {
            "level": self.location.level,
            "ix": self.location.ix,
            "iy": self.location.iy,
            "x_c": self.location.x_c,
            "y_c": self.location.y_c,
            "instance_id": self.instance_id,
            "initial_positive": self.is_initial_positive,
            "refine_positive": self.is_refine_positive,
            "psm_target": self.psm_target,
        }


def level_for_side(side, cfg):
    for level, (lo, hi) in zip(LEVELS, cfg.level_ranges):
        if lo <= side < hi:
            return level
    return LEVELS[0]


def assign_levels(instances, cfg):
    """Map every level to the ids of the instances it is responsible for."""
    levels = {level: [] for level in LEVELS}
    for inst in instances:
        levels[level_for_side(inst.pseudo_box.max_side, cfg)].append(inst.id)
    return levels


def instances_at_level(instances, level, cfg):
    return [inst for inst in instances if level_for_side(inst.pseudo_box.max_side, cfg) == level]


def assign_location_to_instance(loc, instances):
    """Smallest pseudo-box containing the location center, ties to the lowest id."""
    best = None
    for inst in instances:
        if inst.pseudo_box.contains(loc.x_c, loc.y_c):
            key = (inst.pseudo_box.area, inst.id)
            if best is None or key < best[0]:
                best = (key, inst.id)
    return None if best is None else best[1]


def in_shrunk_square(loc, inst, cfg):
    half = cfg.shrunk_side(loc.level) / 2.0
    cx, cy = inst.pseudo_box.center
    return abs(loc.x_c - cx) <= half and abs(loc.y_c - cy) <= half


def initial_positives(locs, instances, cfg):
    """(location, instance id) pairs supervised by the initial regression."""
    by_id = {inst.id: inst for inst in instances}
    per_level = {level: instances_at_level(instances, level, cfg) for level in LEVELS}
    positives = set()
    for loc in locs:
        inst_id = assign_location_to_instance(loc, per_level[loc.level])
        if inst_id is None:
            continue
        if cfg.positive_rule == "full-box" or in_shrunk_square(loc, by_id[inst_id], cfg):
            positives.add((loc, inst_id))
    return positives


def assign_grid(level, image_w, image_h, instances, cfg):
    """Vectorized location assignment over a full level grid.

    Returns ``(ids, positive)``: (ny, nx) instance ids with -1 for background
    and the matching initial-positive mask.
    """
    ny, nx = grid_shape(level, image_w, image_h)
    stride = level_stride(level)
    xs = (np.arange(nx) + 0.5) * stride
    ys = (np.arange(ny) + 0.5) * stride
    ids = np.full((ny, nx), -1, dtype=np.int64)
    positive = np.zeros((ny, nx), dtype=bool)
    candidates = sorted(
        instances_at_level(instances, level, cfg), key=lambda inst: (inst.pseudo_box.area, inst.id)
    )
    half = cfg.shrunk_side(level) / 2.0
    # Paint largest first so the smallest (area, id) wins every overlap.
    for inst in reversed(candidates):
        box = inst.pseudo_box
        inside = ((ys >= box.y_min) & (ys <= box.y_max))[:, None] & (
            (xs >= box.x_min) & (xs <= box.x_max)
        )[None, :]
        if cfg.positive_rule == "full-box":
            square = inside
        else:
            cx, cy = box.center
            square = inside & (np.abs(ys - cy) <= half)[:, None] & (np.abs(xs - cx) <= half)[None, :]
        ids[inside] = inst.id
        positive[inside] = square[inside]
    return ids, positive


def _check_assigned(hyps, assigned):
    if len(hyps) != len(assigned):
        raise ShapeMismatch(f"{len(hyps)} hypotheses but {len(assigned)} assignments")


def refined_oks_values(hyps, assigned, instances, spec, use_area=True):
    """Refined-pose OKS against the assigned instance, 0.0 for background."""
    _check_assigned(hyps, assigned)
    by_id = {inst.id: inst for inst in instances}
    values = np.zeros(len(hyps))
    rows = [i for i, inst_id in enumerate(assigned) if inst_id is not None]
    if not rows:
        return values
    targets = [by_id[assigned[i]] for i in rows]
    pred = np.stack([hyps[i].location.center + hyps[i].offsets1 + hyps[i].offsets2 for i in rows])
    gt = np.stack([inst.pose.keypoints for inst in targets])
    vis = np.stack([inst.pose.visibility for inst in targets])
    s2 = np.array([scale_for_instance(inst, use_area).s_squared for inst in targets])
    values[rows] = oks_batch(pred, gt, vis, s2, spec.kappas)
    return values


def refinement_positives(hyps, assigned, instances, cfg, spec):
    """Indices of hypotheses whose refined pose has OKS >= the threshold."""
    _check_assigned(hyps, assigned)
    by_id = {inst.id: inst for inst in instances}
    positives = set()
    for i, (h, inst_id) in enumerate(zip(hyps, assigned)):
        if inst_id is None:
            continue
        inst = by_id[inst_id]
        value = compute_oks(
            decode_refined(h), inst.pose, scale_for_instance(inst, cfg.use_annotated_area), spec
        )
        if value >= cfg.refine_oks_threshold:
            positives.add(i)
    return positives


def psm_targets(hyps, assigned, instances, spec, use_area=True):
    """Pose-score targets: refined OKS for assigned locations, 0 for background."""
    return refined_oks_values(hyps, assigned, instances, spec, use_area)


def assign_image(instances, image_w, image_h, cfg, spec, hypotheses=None):
    """Assignment record for every location of every level.

    ``hypotheses`` maps GridLocation to PoseHypothesis; locations without one
    are scored with a zero-offset hypothesis.
    """
    hypotheses = hypotheses or {}
    records = []
    for level in LEVELS:
        ids, positive = assign_grid(level, image_w, image_h, instances, cfg)
        ny, nx = ids.shape
        locs = [GridLocation(level=level, iy=iy, ix=ix) for iy in range(ny) for ix in range(nx)]
        hyps = [
            hypotheses.get(loc) or PoseHypothesis(loc, np.zeros((spec.k, 2)))
            for loc in locs
        ]
        assigned = [None if i < 0 else int(i) for i in ids.ravel()]
        values = refined_oks_values(hyps, assigned, instances, spec, cfg.use_annotated_area)
        for loc, inst_id, pos, value in zip(locs, assigned, positive.ravel(), values):
            records.append(
                Assignment(
                    location=loc,
                    instance_id=inst_id,
                    is_initial_positive=bool(pos),
                    is_refine_positive=inst_id is not None and value >= cfg.refine_oks_threshold,
                    psm_target=None if inst_id is None else float(value),
                )
            )
    return records
