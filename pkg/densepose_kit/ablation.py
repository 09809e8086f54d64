"""
Toy trainer and ablation harnesses.

The toy offset regressor stands in for the two regression stages:
- initial stage: per-level linear map from perceived offsets to offsets,
  fit by least absolute deviations on the strategy's positives only;
  perception gets noisier away from the person center
- refinement stage: per-level gain on a perceived residual whose reach is
  limited, fit by subgradient descent on the strategy's refine positives,
  which are re-selected every epoch from the current refined OKS

Test time uses an idealized classifier that fires on the strategy's
positive region, so strategies differ only by what they supervise and where
they fire. All random draws are indexed per grid location and shared
across strategies.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .assign import AssignerConfig, assign_grid
from .coco_eval import TABLE_COLUMNS
from .console import debug_print, verbose_print
from .core import LEVELS, Detection, GridLocation, Pose, SkeletonSpec, grid_centers
from .errors import InvalidConfig, NoPositives, check_keys
from .oks import oks_batch, scale_for_instance
from .postprocess import SCORE_MODES, NmsConfig, fuse_confidence, nms_per_image
from .simulator import (
    NoiseModel,
    detect,
    evaluate_scenes,
    generate_scene,
    simulate_fields,
    stream_seed,
)

REFINE_RULES = ("none", "all-assigned", "oks-threshold")
ABLATION_COLUMNS = (
    "strategy",
    "positive_rule",
    "refine_rule",
    "refine_threshold",
    "score_mode",
) + TABLE_COLUMNS

# Stream identifiers under the master seed.
TRAIN_STAGE, TEST_STAGE, SWEEP_STAGE, SCORING_STAGE = 0, 1, 2, 3


@dataclass(frozen=True)
class StrategyConfig:
    name: str = "+PSM"
    positive_rule: str = "shrunk-box"
    refine_rule: str = "oks-threshold"
    refine_threshold: float = 0.5
    score_mode: str = "fused"

    def __post_init__(self):
        if self.positive_rule not in ("shrunk-box", "full-box"):
            raise InvalidConfig(f"strategy.positive_rule invalid: {self.positive_rule!r}")
        if self.refine_rule not in REFINE_RULES:
            raise InvalidConfig(f"strategy.refine_rule must be one of {REFINE_RULES}")
        if not 0.0 <= float(self.refine_threshold) <= 1.0:
            raise InvalidConfig("strategy.refine_threshold must be in [0, 1]")
        if self.score_mode not in SCORE_MODES:
            raise InvalidConfig(f"strategy.score_mode must be one of {SCORE_MODES}")
        object.__setattr__(self, "refine_threshold", float(self.refine_threshold))

    @classmethod
    def from_dict(cls, data):
        check_keys("strategy", data, cls.__dataclass_fields__)
        return cls(**data)

    def to_dict(self):
        return {
            "name": self.name,
            "positive_rule": self.positive_rule,
            "refine_rule": self.refine_rule,
            "refine_threshold": self.refine_threshold,
            "score_mode": self.score_mode,
        }


# Row structure of the ablation ladder: each row adds one component.
LADDER = (
    StrategyConfig("baseline", "full-box", "none", 0.5, "cls"),
    StrategyConfig("baseline*", "shrunk-box", "none", 0.5, "cls"),
    StrategyConfig("+refine", "shrunk-box", "all-assigned", 0.5, "cls"),
    StrategyConfig("+refine*", "shrunk-box", "oks-threshold", 0.5, "cls"),
    StrategyConfig("+PSM", "shrunk-box", "oks-threshold", 0.5, "fused"),
)


@dataclass(frozen=True)
class TrainerConfig:
    irls_iters: int = 50
    lad_epsilon: float = 1e-6
    refine_epochs: int = 80
    refine_lr: float = 0.1
    refine_decay: float = 20.0
    refine_init_gain: float = 0.0

    def __post_init__(self):
        if self.irls_iters < 0 or self.refine_epochs < 0:
            raise InvalidConfig("trainer iteration counts must be >= 0")
        if not (self.lad_epsilon > 0 and self.refine_lr > 0 and self.refine_decay > 0):
            raise InvalidConfig("trainer.lad_epsilon, refine_lr and refine_decay must be positive")

    @classmethod
    def from_dict(cls, data):
        check_keys("trainer", data, cls.__dataclass_fields__)
        return cls(**data)


@dataclass(frozen=True)
class AblationConfig:
    n_train: int = 24
    n_test: int = 24
    scoring_scenes: int = 50
    sweep_thresholds: tuple = (0.0, 0.25, 0.5, 0.75, 0.9)
    sweep_seeds: int = 10
    strategies: tuple = LADDER

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1 or self.scoring_scenes < 1 or self.sweep_seeds < 1:
            raise InvalidConfig("ablation scene and seed counts must be >= 1")
        thresholds = tuple(float(t) for t in self.sweep_thresholds)
        if any(not 0.0 <= t <= 1.0 for t in thresholds):
            raise InvalidConfig("ablation.sweep_thresholds must lie in [0, 1]")
        strategies = tuple(
            s if isinstance(s, StrategyConfig) else StrategyConfig.from_dict(s)
            for s in self.strategies
        )
        object.__setattr__(self, "sweep_thresholds", thresholds)
        object.__setattr__(self, "strategies", strategies)

    @classmethod
    def from_dict(cls, data):
        check_keys("ablation", data, cls.__dataclass_fields__)
        return cls(**data)


def lad_loss(w, X, y):
    """Mean absolute residual of the linear model ``X @ w``."""
    return float(np.mean(np.abs(y - X @ w)))


def lad_subgradient(w, X, y):
    """A subgradient of lad_loss at ``w``."""
    return -(X.T @ np.sign(y - X @ w)) / len(y)


def fit_lad(X, y, iters=50, eps=1e-6):
    """Least-absolute-deviation fit by iteratively reweighted least squares.

    Starts at the least-squares solution; an iterate is accepted only if it
    does not increase the LAD loss.
    """
    w = np.linalg.lstsq(X, y, rcond=None)[0]
    loss = lad_loss(w, X, y)
    for _ in range(iters):
        sw = 1.0 / np.sqrt(np.maximum(np.abs(y - X @ w), eps))
        candidate = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)[0]
        candidate_loss = lad_loss(candidate, X, y)
        if candidate_loss > loss:
            break
        converged = loss - candidate_loss <= 1e-12
        w, loss = candidate, candidate_loss
        if converged:
            break
    return w, loss


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Assigned locations of a scene list with their per-location random draws.

    Offsets are normalized by the person size S (longer pseudo-box side).
    """

    image_index: np.ndarray  # (M,)
    level: np.ndarray  # (M,)
    ix: np.ndarray
    iy: np.ndarray
    loc: np.ndarray  # (M, 2) pixels
    size: np.ndarray  # (M,) S in pixels
    s2: np.ndarray  # (M,) OKS scale
    central: np.ndarray  # (M,) inside the shrunk square
    target: np.ndarray  # (M, K, 2) (gt - loc) / S
    visibility: np.ndarray  # (M, K)
    perception_sigma: np.ndarray  # (M,) normalized
    xi_perception: np.ndarray  # (M, K, 2)
    xi_residual: np.ndarray  # (M, K, 2)
    xi_cls: np.ndarray  # (M,)
    xi_pose: np.ndarray  # (M,)

    def __len__(self):
        return len(self.level)

    def region(self, positive_rule):
        return self.central if positive_rule == "shrunk-box" else np.ones(len(self), dtype=bool)


_EMPTY_DTYPES = {"central": bool, "image_index": int, "level": int, "ix": int, "iy": int}


def _empty_samples(k):
    shapes = {"loc": (0, 2), "visibility": (0, k)}
    for name in ("target", "xi_perception", "xi_residual"):
        shapes[name] = (0, k, 2)
    return SampleSet(
        **{
            name: np.zeros(shapes.get(name, (0,)), dtype=_EMPTY_DTYPES.get(name, float))
            for name in SampleSet.__dataclass_fields__
        }
    )


def collect_samples(scenes, seed, noise, assigner=AssignerConfig(), spec=None):
    """Gather every assigned location of ``scenes``; draws are keyed by location."""
    spec = spec or SkeletonSpec.coco()
    shrunk = replace(assigner, positive_rule="shrunk-box")
    parts = []
    for index, scene in enumerate(scenes):
        by_id = {inst.id: inst for inst in scene.instances}
        for level in LEVELS:
            ids, central = assign_grid(level, scene.image_width, scene.image_height, scene.instances, shrunk)
            ny, nx = ids.shape
            rng = np.random.default_rng(stream_seed(seed, index, level))
            n, k = ny * nx, spec.k
            xi_perception = rng.standard_normal((n, k, 2))
            xi_residual = rng.standard_normal((n, k, 2))
            xi_cls = rng.standard_normal(n)
            xi_pose = rng.standard_normal(n)
            rows = np.flatnonzero(ids.ravel() >= 0)
            if not rows.size:
                continue
            targets = [by_id[int(i)] for i in ids.ravel()[rows]]
            loc = grid_centers(level, scene.image_width, scene.image_height)[rows]
            size = np.array([max(inst.pseudo_box.max_side, 1.0) for inst in targets])
            center = np.array([inst.pseudo_box.center for inst in targets])
            gt = np.stack([inst.pose.keypoints for inst in targets])
            distance = np.linalg.norm(loc - center, axis=1) / size
            parts.append(
                dict(
                    image_index=np.full(rows.size, index),
                    level=np.full(rows.size, level),
                    ix=rows % nx,
                    iy=rows // nx,
                    loc=loc,
                    size=size,
                    s2=np.array(
                        [scale_for_instance(inst, assigner.use_annotated_area).s_squared for inst in targets]
                    ),
                    central=central.ravel()[rows],
                    target=(gt - loc[:, None, :]) / size[:, None, None],
                    visibility=np.stack([inst.pose.visibility for inst in targets]),
                    perception_sigma=noise.relative_sigma(distance),
                    xi_perception=xi_perception[rows],
                    xi_residual=xi_residual[rows],
                    xi_cls=xi_cls[rows],
                    xi_pose=xi_pose[rows],
                )
            )
    if not parts:
        return _empty_samples(spec.k)
    return SampleSet(
        **{name: np.concatenate([p[name] for p in parts]) for name in SampleSet.__dataclass_fields__}
    )


@dataclass(frozen=True, eq=False)
class ToyPredictor:
    strategy: StrategyConfig
    weights: np.ndarray  # (5, 2): intercept and slope per level
    refine_gains: np.ndarray  # (5,)
    train_loss: float
    noise: NoiseModel

    def _level_index(self, samples):
        return samples.level - LEVELS[0]

    def perceived(self, samples):
        return samples.target + samples.perception_sigma[:, None, None] * samples.xi_perception

    def initial(self, samples):
        w = self.weights[self._level_index(samples)]
        return w[:, 0, None, None] + w[:, 1, None, None] * self.perceived(samples)

    def perceived_residual(self, samples, initial):
        reach = self.noise.refine_reach
        residual = samples.target - initial
        return reach * np.tanh(residual / reach) + self.noise.refine_noise * samples.xi_residual

    def refined(self, samples):
        initial = self.initial(samples)
        gains = self.refine_gains[self._level_index(samples)]
        return initial + gains[:, None, None] * self.perceived_residual(samples, initial)


def normalized_oks(pred, samples, spec):
    """OKS of normalized offset predictions against the sample targets."""
    scale = samples.size[:, None, None]
    return oks_batch(pred * scale, samples.target * scale, samples.visibility, samples.s2, spec.kappas)


def _fit_initial(samples, region, trainer):
    perceived = samples.target + samples.perception_sigma[:, None, None] * samples.xi_perception
    labeled = samples.visibility > 0

    def design(rows):
        z = perceived[rows][labeled[rows]].ravel()
        y = samples.target[rows][labeled[rows]].ravel()
        return np.column_stack([np.ones_like(z), z]), y

    X_all, y_all = design(region)
    if len(y_all) == 0:
        raise NoPositives("strategy selected no initial positives")
    pooled, _ = fit_lad(X_all, y_all, trainer.irls_iters, trainer.lad_epsilon)

    weights = np.tile(pooled, (len(LEVELS), 1))
    for i, level in enumerate(LEVELS):
        X, y = design(region & (samples.level == level))
        if len(y) >= 3:
            weights[i], _ = fit_lad(X, y, trainer.irls_iters, trainer.lad_epsilon)
        else:
            debug_print(f"level {level}: {len(y)} initial samples, using pooled fit")
    w = weights[samples.level[region] - LEVELS[0]]
    fitted = w[:, 0, None, None] + w[:, 1, None, None] * perceived[region]
    loss = float(np.mean(np.abs(samples.target[region] - fitted)[labeled[region]]))
    return weights, loss


def _fit_refine(predictor, samples, strategy, trainer, spec):
    gains = np.full(len(LEVELS), float(trainer.refine_init_gain))
    if strategy.refine_rule == "none" or len(samples) == 0:
        return np.zeros(len(LEVELS))
    initial = predictor.initial(samples)
    residual = samples.target - initial
    perceived = predictor.perceived_residual(samples, initial)
    labeled = (samples.visibility > 0)[:, :, None]
    level_index = samples.level - LEVELS[0]

    for epoch in range(trainer.refine_epochs):
        step = trainer.refine_lr / (1.0 + epoch / trainer.refine_decay)
        refined = initial + gains[level_index][:, None, None] * perceived
        if strategy.refine_rule == "all-assigned":
            positive = np.ones(len(samples), dtype=bool)
        else:
            positive = normalized_oks(refined, samples, spec) >= strategy.refine_threshold
        updated = False
        for i, level in enumerate(LEVELS):
            rows = level_index == i
            chosen = rows & positive
            if not chosen.any():
                continue
            mask = np.broadcast_to(labeled[chosen], residual[chosen].shape)
            y = residual[chosen][mask]
            if not y.size:
                continue
            # one-parameter LAD: residual ~ gain * perceived residual
            X = perceived[chosen][mask][:, None]
            sub = lad_subgradient(gains[i : i + 1], X, y)[0] * len(y)
            norm = np.sum(np.abs(perceived[rows]) * labeled[rows])
            if norm > 0:
                gains[i] -= step * sub / norm
                updated = True
        if not updated:
            verbose_print(f"refine epoch {epoch}: no positives, skipped")
    return gains


def toy_train(
    scenes,
    strategy,
    trainer=TrainerConfig(),
    noise=NoiseModel(),
    assigner=AssignerConfig(),
    spec=None,
    seed=0,
    samples=None,
):
    """Fit the toy predictor on the strategy's positives.

    Raises NoPositives when the initial positive set is empty.
    """
    spec = spec or SkeletonSpec.coco()
    if not scenes and samples is None:
        raise InvalidConfig("toy_train needs at least one scene")
    if samples is None:
        samples = collect_samples(scenes, seed, noise, assigner, spec)
    weights, loss = _fit_initial(samples, samples.region(strategy.positive_rule), trainer)
    predictor = ToyPredictor(strategy, weights, np.zeros(len(LEVELS)), loss, noise)
    gains = _fit_refine(predictor, samples, strategy, trainer, spec)
    debug_print(f"{strategy.name}: slopes {np.round(weights[:, 1], 3)}, gains {np.round(gains, 3)}")
    return replace(predictor, refine_gains=gains)


def predict_detections(predictor, samples, spec):
    """Detections of the idealized classifier over the strategy's positive region."""
    region = np.flatnonzero(samples.region(predictor.strategy.positive_rule))
    if not region.size:
        return []
    refined = predictor.refined(samples)
    quality = normalized_oks(refined, samples, spec)
    noise = predictor.noise
    cls = noise.cls_scores(quality, samples.xi_cls)
    pose = noise.pose_scores(quality, samples.xi_pose)
    poses = samples.loc[:, None, :] + refined * samples.size[:, None, None]
    mode = predictor.strategy.score_mode
    dets = []
    for i in region:
        dets.append(
            Detection(
                pose=Pose.all_labeled(poses[i]),
                confidence=fuse_confidence(cls[i], pose[i], mode, quality[i]),
                source_level=int(samples.level[i]),
                location=GridLocation(level=int(samples.level[i]), iy=int(samples.iy[i]), ix=int(samples.ix[i])),
                image_id=int(samples.image_index[i]) + 1,
                cls_score=float(cls[i]),
                pose_score=float(pose[i]),
            )
        )
    return dets


def _ablation_row(strategy, result):
    row = strategy.to_dict()
    row["strategy"] = row.pop("name")
    row.update(result.to_dict())
    return row


def _map(fn, items, jobs):
    """Apply fn to items, results in item order."""
    items = list(items)
    if jobs is None or jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True, eq=False)
class _Bench:
    train_scenes: list
    test_scenes: list
    train: SampleSet
    test: SampleSet


def _bench(config, seed, n_train, n_test):
    spec = config.skeleton
    train_scenes = [generate_scene(stream_seed(seed, TRAIN_STAGE, i), config.scene, spec) for i in range(n_train)]
    test_scenes = [generate_scene(stream_seed(seed, TEST_STAGE, i), config.scene, spec) for i in range(n_test)]
    return _Bench(
        train_scenes,
        test_scenes,
        collect_samples(train_scenes, stream_seed(seed, TRAIN_STAGE), config.noise, config.assigner, spec),
        collect_samples(test_scenes, stream_seed(seed, TEST_STAGE), config.noise, config.assigner, spec),
    )


def _train_and_score(config, bench, strategy):
    spec = config.skeleton
    predictor = toy_train(
        bench.train_scenes,
        strategy,
        config.trainer,
        config.noise,
        config.assigner,
        spec,
        samples=bench.train,
    )
    dets = nms_per_image(predict_detections(predictor, bench.test, spec), config.nms, spec)
    return evaluate_scenes(bench.test_scenes, dets, spec)


def run_strategy_ablation(config, strategies=None, seed=None, jobs=None):
    """One row per strategy: train on seeded scenes, evaluate on held-out scenes."""
    strategies = config.ablation.strategies if strategies is None else tuple(strategies)
    seed = config.seed if seed is None else seed
    jobs = config.jobs if jobs is None else jobs
    if not strategies:
        return pd.DataFrame(columns=list(ABLATION_COLUMNS))
    bench = _bench(config, seed, config.ablation.n_train, config.ablation.n_test)
    results = _map(lambda s: _train_and_score(config, bench, s), strategies, jobs)
    rows = [_ablation_row(s, r) for s, r in zip(strategies, results)]
    return pd.DataFrame(rows, columns=list(ABLATION_COLUMNS))


def run_refine_threshold_sweep(config, thresholds=None, seeds=None, jobs=None):
    """Held-out AP against the refine OKS threshold, averaged over seeds."""
    thresholds = config.ablation.sweep_thresholds if thresholds is None else tuple(thresholds)
    seeds = config.ablation.sweep_seeds if seeds is None else seeds
    jobs = config.jobs if jobs is None else jobs
    base = replace(config.strategy, refine_rule="oks-threshold")

    def one_seed(index):
        bench = _bench(
            config, stream_seed(config.seed, SWEEP_STAGE, index), config.ablation.n_train, config.ablation.n_test
        )
        return [
            _train_and_score(config, bench, replace(base, name=f"t={t:g}", refine_threshold=t)).to_dict()
            for t in thresholds
        ]

    per_seed = _map(one_seed, range(seeds), jobs)
    rows = []
    for j, t in enumerate(thresholds):
        row = {"refine_threshold": t}
        for column in TABLE_COLUMNS:
            row[column] = float(np.mean([results[j][column] for results in per_seed]))
        rows.append(row)
    return pd.DataFrame(rows, columns=["refine_threshold", *TABLE_COLUMNS])


def run_scoring_experiment(
    scenes,
    noise,
    seeds,
    nms=NmsConfig(),
    assigner=AssignerConfig(),
    spec=None,
    modes=SCORE_MODES,
    jobs=None,
):
    """Evaluate the full simulated pipeline once per score mode.

    ``seeds`` gives one prediction seed per scene, or a master seed.
    """
    spec = spec or SkeletonSpec.coco()
    if isinstance(seeds, (int, np.integer)):
        seeds = [stream_seed(seeds, SCORING_STAGE, 1, i) for i in range(len(scenes))]
    if len(seeds) != len(scenes):
        raise InvalidConfig(f"{len(scenes)} scenes but {len(seeds)} seeds")
    fields = _map(
        lambda pair: simulate_fields(pair[0], noise, pair[1], assigner, spec), list(zip(scenes, seeds)), jobs
    )
    rows = []
    for mode in modes:
        dets = []
        for index, (scene, field) in enumerate(zip(scenes, fields)):
            dets.extend(detect(scene, field, mode, nms, spec, index + 1, assigner.use_annotated_area))
        result = evaluate_scenes(scenes, dets, spec)
        rows.append({"score_mode": mode, **result.to_dict()})
    return pd.DataFrame(rows, columns=["score_mode", *TABLE_COLUMNS])


def scoring_experiment_from_config(config, seed=None, jobs=None):
    seed = config.seed if seed is None else seed
    scenes = [
        generate_scene(stream_seed(seed, SCORING_STAGE, 0, i), config.scene, config.skeleton)
        for i in range(config.ablation.scoring_scenes)
    ]
    return run_scoring_experiment(
        scenes,
        config.noise,
        seed,
        config.nms,
        config.assigner,
        config.skeleton,
        jobs=config.jobs if jobs is None else jobs,
    )


def ablation_csv(frame):
    """Byte-stable CSV of an ablation table."""
    return frame.to_csv(index=False, float_format="%.6f", lineterminator="\n")
