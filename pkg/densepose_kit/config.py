"""
Configuration management for densepose-kit
"""

import copy
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import psutil
import yaml

from .ablation import AblationConfig, StrategyConfig, TrainerConfig
from .assign import AssignerConfig
from .core import SkeletonSpec
from .errors import ConfigError, InvalidConfig, ParseError, check_keys
from .losses import FocalParams, LossWeights
from .postprocess import NmsConfig
from .simulator import NoiseModel, SceneConfig

CONFIG_ENV = "DENSEPOSE_KIT_CONFIG"


def _section(record):
    return _plain(asdict(record))


def _plain(value):
    """Tuples to lists and inf to None, so sections dump as plain YAML/JSON."""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, float) and math.isinf(value):
        return None
    return value


DEFAULT_CONFIG = {
    # None everywhere means the 17-keypoint COCO skeleton
    "skeleton": {
        "path": None,
        "k": None,
        "names": None,
        "kappas": None,
        "flip_pairs": None,
        "sampling_indices": None,
    },
    "assigner": AssignerConfig().to_dict(),
    "nms": _section(NmsConfig()),
    "loss_weights": _section(LossWeights()),
    "focal": _section(FocalParams()),
    "noise": _section(NoiseModel()),
    "scene": _section(SceneConfig()),
    "strategy": StrategyConfig().to_dict(),
    "trainer": _section(TrainerConfig()),
    "ablation": {
        "n_train": AblationConfig.n_train,
        "n_test": AblationConfig.n_test,
        "scoring_scenes": AblationConfig.scoring_scenes,
        "sweep_thresholds": list(AblationConfig.sweep_thresholds),
        "sweep_seeds": AblationConfig.sweep_seeds,
        "strategies": None,  # None: the five-row ladder
    },
    "runtime": {"seed": 0, "jobs": None},  # jobs None: logical cores
}


def config_paths(path=None):
    """Candidate config files in lookup order."""
    candidates = []
    if path is not None:
        candidates.append(Path(path))
    if os.environ.get(CONFIG_ENV):
        candidates.append(Path(os.environ[CONFIG_ENV]))
    candidates.append(Path.home() / ".config" / "densepose-kit" / "config.yaml")
    candidates.append(Path(__file__).parent.parent / "config.yaml")
    return candidates


def merge_config(base, user, section="config"):
    """Deep-merge ``user`` over ``base``; keys unknown to ``base`` are errors."""
    if user is None:
        return copy.deepcopy(base)
    check_keys(section, user, base)
    merged = copy.deepcopy(base)
    for key, value in user.items():
        where = key if section == "config" else f"{section}.{key}"
        if isinstance(base[key], dict):
            merged[key] = merge_config(base[key], value, where)
        elif isinstance(value, dict):
            raise ConfigError(f"{where}: expected a value, got a mapping")
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_config(path=None):
    """Load configuration from file, merged over the defaults.

    An explicit ``path`` must exist; the other candidates are optional.
    """
    if path is not None and not Path(path).exists():
        raise ConfigError(f"config file not found: {path}")
    for config_path in config_paths(path):
        if config_path.exists():
            try:
                with open(config_path) as f:
                    user_config = yaml.safe_load(f)
            except (OSError, yaml.YAMLError) as e:
                raise ParseError(f"cannot read config {config_path}: {e}") from e
            return merge_config(DEFAULT_CONFIG, user_config or {})

    # No config found, return defaults
    return copy.deepcopy(DEFAULT_CONFIG)


def save_config(config, path=None):
    """Save configuration to file."""
    if path is None:
        config_dir = Path.home() / ".config" / "densepose-kit"
        config_dir.mkdir(parents=True, exist_ok=True)
        path = config_dir / "config.yaml"

    with open(path, "w") as f:
        yaml.safe_dump(_plain(config), f, default_flow_style=False, indent=2, sort_keys=False)


def default_jobs():
    return psutil.cpu_count(logical=True) or 1


def _skeleton(section):
    if section.get("path"):
        other = [key for key, value in section.items() if key != "path" and value is not None]
        if other:
            raise InvalidConfig(f"skeleton: path and {', '.join(other)} are mutually exclusive")
        return SkeletonSpec.load(section["path"])
    if section.get("k") is None:
        return SkeletonSpec.coco()
    return SkeletonSpec.from_dict({key: value for key, value in section.items() if key != "path"})


def _runtime(section):
    seed = section.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise InvalidConfig(f"runtime.seed must be a non-negative integer, got {seed!r}")
    jobs = section.get("jobs")
    if jobs is None:
        jobs = default_jobs()
    if isinstance(jobs, bool) or not isinstance(jobs, int) or jobs < 1:
        raise InvalidConfig(f"runtime.jobs must be a positive integer, got {jobs!r}")
    return seed, jobs


@dataclass(frozen=True, eq=False)
class RunConfig:
    """Typed, validated view of one merged configuration."""

    skeleton: SkeletonSpec
    assigner: AssignerConfig
    nms: NmsConfig
    loss_weights: LossWeights
    focal: FocalParams
    noise: NoiseModel
    scene: SceneConfig
    strategy: StrategyConfig
    trainer: TrainerConfig
    ablation: AblationConfig
    seed: int = 0
    jobs: int = 1

    @classmethod
    def from_dict(cls, data):
        data = merge_config(DEFAULT_CONFIG, data)
        ablation = dict(data["ablation"])
        if ablation.get("strategies") is None:
            ablation.pop("strategies")
        else:
            ablation["strategies"] = tuple(ablation["strategies"])
        ablation["sweep_thresholds"] = tuple(ablation["sweep_thresholds"])
        seed, jobs = _runtime(data["runtime"])
        return cls(
            skeleton=_skeleton(data["skeleton"]),
            assigner=AssignerConfig.from_dict(data["assigner"]),
            nms=NmsConfig.from_dict(data["nms"]),
            loss_weights=LossWeights.from_dict(data["loss_weights"]),
            focal=FocalParams.from_dict(data["focal"]),
            noise=NoiseModel.from_dict(data["noise"]),
            scene=SceneConfig.from_dict(data["scene"]),
            strategy=StrategyConfig.from_dict(data["strategy"]),
            trainer=TrainerConfig.from_dict(data["trainer"]),
            ablation=AblationConfig.from_dict(ablation),
            seed=seed,
            jobs=jobs,
        )

    @classmethod
    def load(cls, path=None, overrides=None):
        """Resolve the config file, apply dotted-key overrides, validate."""
        data = load_config(path)
        for key, value in (overrides or {}).items():
            section, _, name = key.partition(".")
            if not name or "." in name or section not in data or name not in data[section]:
                raise ConfigError(f"unknown config override {key!r}, expected section.name")
            data[section][name] = value
        return cls.from_dict(data)

    def to_dict(self):
        return {
            "skeleton": self.skeleton.to_dict(),
            "assigner": self.assigner.to_dict(),
            "nms": _section(self.nms),
            "loss_weights": _section(self.loss_weights),
            "focal": _section(self.focal),
            "noise": _section(self.noise),
            "scene": _section(self.scene),
            "strategy": self.strategy.to_dict(),
            "trainer": _section(self.trainer),
            "ablation": {
                "n_train": self.ablation.n_train,
                "n_test": self.ablation.n_test,
                "scoring_scenes": self.ablation.scoring_scenes,
                "sweep_thresholds": list(self.ablation.sweep_thresholds),
                "sweep_seeds": self.ablation.sweep_seeds,
                "strategies": [s.to_dict() for s in self.ablation.strategies],
            },
            "runtime": {"seed": self.seed, "jobs": self.jobs},
        }
