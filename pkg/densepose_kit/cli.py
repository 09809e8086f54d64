#!/usr/bin/env python3
"""
densepose-kit command line interface.

Every subcommand reads JSON fixtures, writes JSON (or CSV for ``ablate``) to
stdout and diagnostics to stderr. ``--out`` redirects the primary artifact to
a file.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from rich.table import Table

from .ablation import (
    ablation_csv,
    run_refine_threshold_sweep,
    run_strategy_ablation,
    scoring_experiment_from_config,
)
from .assign import assign_image
from .coco_eval import (
    TABLE_COLUMNS,
    EvalParams,
    evaluate,
    format_table_row,
    load_gt,
    load_results,
    read_json,
    require_field,
    require_number,
)
from .config import RunConfig
from .console import console, debug_print, error_print, info_print, set_verbose, warn_print
from .core import GroundTruthInstance, Pose
from .errors import DenseposeKitError, InvariantViolation, SchemaError, ShapeMismatch, UsageError
from .losses import (
    HeatmapTarget,
    bce_score_loss,
    focal_loss,
    gaussian_heatmap_targets,
    heatmap_loss,
    l1_regression_loss,
    total_loss,
)
from .oks import compute_oks, oks_matrix, scale_for_instance
from .postprocess import NMS_MODES, SCORE_MODES, hypotheses_to_detections, nms_per_image
from .simulator import (
    detections_to_results,
    generate_scene,
    hypotheses_from_records,
    hypothesis_from_record,
    hypothesis_records,
    scene_from_dataset,
    scenes_to_dataset,
    simulate_fields,
    stream_seed,
)

EXPERIMENTS = ("strategies", "scoring", "sweep")
LOSS_SECTIONS = ("classification", "heatmap", "regression", "psm")

# Stream identifiers for the simulate subcommand.
SCENE_STREAM, PREDICTION_STREAM = 0, 1


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting with status 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def _dumps(obj):
    return json.dumps(obj, default=_json_default)


def _emit(text, out=None):
    """Write the primary artifact to ``out`` or stdout."""
    if not text.endswith("\n"):
        text += "\n"
    if out:
        Path(out).write_text(text)
        info_print(f"wrote {out}")
    else:
        sys.stdout.write(text)


def _report(config, **payload):
    return _dumps({**payload, "config": config.to_dict()})


# oks


def _pose(flat, k, where):
    try:
        return Pose.from_flat(flat, k)
    except SchemaError as e:
        raise type(e)(f"{where}: {e}") from e


def _pose_records(data, k, where):
    """(Pose, area) pairs from a pose record, a bare flat array or a list of either."""
    if isinstance(data, dict) or (isinstance(data, list) and data and not isinstance(data[0], (dict, list))):
        data = [data]
    if not isinstance(data, list):
        raise SchemaError(f"{where}: expected a pose or a list of poses")
    poses = []
    for i, record in enumerate(data):
        item = f"{where}[{i}]"
        area = None
        if isinstance(record, dict):
            flat = require_field(record, "keypoints", item)
            if record.get("area") is not None:
                area = float(require_number(record["area"], f"{item}.area"))
        else:
            flat = record
        poses.append((_pose(flat, k, f"{item}.keypoints"), area))
    return poses


def cmd_oks(args, config):
    spec = config.skeleton
    gts = _pose_records(read_json(args.gt), spec.k, "gt")
    dts = _pose_records(read_json(args.dt), spec.k, "dt")
    if len(gts) != len(dts):
        raise ShapeMismatch(f"{len(gts)} ground-truth poses but {len(dts)} predictions")
    values = []
    for i, ((gt, area), (dt, _)) in enumerate(zip(gts, dts)):
        inst = GroundTruthInstance(gt, id=i, area=area)
        scale = scale_for_instance(inst, config.assigner.use_annotated_area)
        values.append(compute_oks(dt, gt, scale, spec))
    if len(values) == 1:
        _emit(repr(values[0]), args.out)
    else:
        _emit(_report(config, oks=values), args.out)
    return 0


# assign


def cmd_assign(args, config):
    spec = config.skeleton
    dataset = load_gt(args.gt, spec.k)
    predicted = {}
    if args.predictions:
        predicted = hypotheses_from_records(read_json(args.predictions), spec.k)
    lines = []
    for image_id in dataset.image_ids():
        scene = scene_from_dataset(dataset, image_id)
        if args.predictions:
            per_level = predicted.get(image_id, {})
            hypotheses = {h.location: h for hyps in per_level.values() for h in hyps}
        else:
            fields = simulate_fields(
                scene, config.noise, stream_seed(config.seed, image_id), config.assigner, spec
            )
            hypotheses = {h.location: h for field in fields.values() for h in field.hypotheses()}
        records = assign_image(
            scene.instances, scene.image_width, scene.image_height, config.assigner, spec, hypotheses
        )
        debug_print(f"image {image_id}: {sum(r.instance_id is not None for r in records)} assigned locations")
        lines.extend(_dumps({"image_id": image_id, **r.to_dict()}) for r in records)
    _emit("\n".join(lines), args.out)
    return 0


# nms


def _oracle_for(dataset, image_id, spec, use_area):
    instances = dataset.instances_for(image_id) if image_id in set(dataset.image_ids()) else []
    if not instances:
        return lambda pose: 0.0
    gt = np.stack([inst.pose.keypoints for inst in instances])
    vis = np.stack([inst.pose.visibility for inst in instances])
    s2 = np.array([scale_for_instance(inst, use_area).s_squared for inst in instances])
    return lambda pose: float(oks_matrix(pose.keypoints[None], gt, vis, s2, spec.kappas).max())


def cmd_nms(args, config):
    spec = config.skeleton
    mode = config.strategy.score_mode
    if mode == "gt-oks" and not args.gt:
        raise UsageError("--score-mode gt-oks needs --gt")
    dataset = load_gt(args.gt, spec.k) if args.gt else None
    grouped = hypotheses_from_records(read_json(args.detections), spec.k)
    dets = []
    for image_id in sorted(grouped):
        oracle = None
        if mode == "gt-oks":
            oracle = _oracle_for(dataset, image_id, spec, config.assigner.use_annotated_area)
        dets.extend(
            hypotheses_to_detections(grouped[image_id], mode, oracle, config.nms.score_floor, image_id)
        )
    survivors = nms_per_image(dets, config.nms, spec)
    info_print(f"{len(survivors)} of {len(dets)} candidates kept ({config.nms.mode} NMS)")
    _emit(_report(config, results=detections_to_results(survivors).to_list()), args.out)
    return 0


# eval


def _eval_table(result, label):
    table = Table(title="Keypoint evaluation")
    table.add_column("Run", style="cyan")
    for column in TABLE_COLUMNS:
        table.add_column(column, justify="right", style="green")
    table.add_row(label, *format_table_row(result).split(" | "))
    return table


def cmd_eval(args, config):
    spec = config.skeleton
    gt = load_gt(args.gt, spec.k)
    res = load_results(args.dt, spec.k)
    if not res.results:
        warn_print(f"{args.dt} holds no detections")
    result = evaluate(gt, res, spec, EvalParams(max_detections=args.max_dets))
    console.print(_eval_table(result, Path(args.dt).name))
    _emit(_report(config, metrics=result.to_dict()), args.out)
    return 0


# losses


def _array(section, key, where):
    try:
        return np.asarray(require_field(section, key, where), dtype=float)
    except (TypeError, ValueError) as e:
        raise SchemaError(f"{where}: {key} is not a numeric array") from e


def _heatmap_target(section, spec, sigma):
    if "target" in section:
        return HeatmapTarget(_array(section, "target", "heatmap"))
    flats = require_field(section, "instances", "heatmap")
    if not isinstance(flats, list):
        raise SchemaError("heatmap.instances: expected a list of flat keypoint arrays")
    poses = [_pose(flat, spec.k, f"heatmap.instances[{i}]") for i, flat in enumerate(flats)]
    instances = [GroundTruthInstance(pose, id=i) for i, pose in enumerate(poses)]
    return gaussian_heatmap_targets(
        instances,
        require_number(require_field(section, "image_width", "heatmap"), "heatmap.image_width"),
        require_number(require_field(section, "image_height", "heatmap"), "heatmap.image_height"),
        spec.k,
        sigma=sigma,
    )


def _integer(value, where):
    value = require_number(value, where)
    if value != int(value):
        raise SchemaError(f"{where}: expected an integer, got {value!r}")
    return int(value)


def _positive_pairs(pairs, where):
    if not isinstance(pairs, list):
        raise SchemaError(f"{where}: expected a list of [hypothesis index, instance id] pairs")
    positives = []
    for i, pair in enumerate(pairs):
        if not isinstance(pair, list) or len(pair) != 2:
            raise SchemaError(f"{where}[{i}]: expected a [hypothesis index, instance id] pair, got {pair!r}")
        positives.append((_integer(pair[0], f"{where}[{i}]"), _integer(pair[1], f"{where}[{i}]")))
    return positives


def _regression_losses(section, spec):
    gts = {}
    instances = require_field(section, "instances", "regression")
    if not isinstance(instances, list):
        raise SchemaError("regression.instances: expected a list")
    for i, record in enumerate(instances):
        where = f"regression.instances[{i}]"
        inst_id = _integer(require_field(record, "id", where), f"{where}.id")
        pose = _pose(require_field(record, "keypoints", where), spec.k, f"{where}.keypoints")
        gts[inst_id] = GroundTruthInstance(pose, inst_id)
    records = require_field(section, "hypotheses", "regression")
    if not isinstance(records, list):
        raise SchemaError("regression.hypotheses: expected a list")
    hyps = [hypothesis_from_record(r, spec.k, f"regression.hypotheses[{i}]") for i, r in enumerate(records)]
    values = []
    for stage, key in (("initial", "initial_positives"), ("refined", "refine_positives")):
        positives = _positive_pairs(section.get(key, []), f"regression.{key}")
        for index, inst_id in positives:
            if not 0 <= index < len(hyps) or inst_id not in gts:
                raise SchemaError(f"regression.{key}: unknown pair ({index}, {inst_id})")
        values.append(l1_regression_loss(hyps, positives, gts, stage).value)
    return values


def cmd_losses(args, config):
    spec = config.skeleton
    fixture = read_json(args.fixture)
    if not isinstance(fixture, dict):
        raise SchemaError("losses fixture: expected an object")
    unknown = sorted(set(fixture) - set(LOSS_SECTIONS))
    if unknown:
        raise SchemaError(f"losses fixture: unknown section(s) {', '.join(unknown)}")

    cls = hm = reg_initial = reg_refined = psm = 0.0
    if "classification" in fixture:
        section = fixture["classification"]
        cls = focal_loss(
            _array(section, "pred", "classification"), _array(section, "target", "classification"), config.focal
        )
    if "heatmap" in fixture:
        section = fixture["heatmap"]
        target = _heatmap_target(section, spec, config.focal.heatmap_sigma)
        hm = heatmap_loss(_array(section, "pred", "heatmap"), target, config.focal)
    if "regression" in fixture:
        reg_initial, reg_refined = _regression_losses(fixture["regression"], spec)
    if "psm" in fixture:
        section = fixture["psm"]
        psm = bce_score_loss(_array(section, "pred", "psm"), _array(section, "target", "psm"))

    components = {"cls": cls, "heatmap": hm, "reg_initial": reg_initial, "reg_refined": reg_refined, "psm": psm}
    total = total_loss(list(components.values()), config.loss_weights)
    _emit(_report(config, **components, total=total), args.out)
    return 0


# simulate


def cmd_simulate(args, config):
    spec = config.skeleton
    scenes = [
        generate_scene(stream_seed(config.seed, SCENE_STREAM, i), config.scene, spec) for i in range(args.scenes)
    ]
    floor = None if args.all_locations else config.nms.score_floor
    hypotheses = []
    for i, scene in enumerate(scenes):
        fields = simulate_fields(
            scene, config.noise, stream_seed(config.seed, PREDICTION_STREAM, i), config.assigner, spec
        )
        hypotheses.extend(hypothesis_records(fields, i + 1, floor))
    people = sum(len(scene.instances) for scene in scenes)
    info_print(f"{len(scenes)} scenes, {people} people, {len(hypotheses)} hypotheses")
    _emit(_report(config, gt=scenes_to_dataset(scenes, spec.k).to_dict(), hypotheses=hypotheses), args.out)
    return 0


# ablate


def _ablation_table(frame, title):
    table = Table(title=title)
    for column in frame.columns:
        numeric = column in TABLE_COLUMNS
        table.add_column(column, justify="right" if numeric else "left", style="green" if numeric else "cyan")
    for row in frame.itertuples(index=False):
        table.add_row(*(f"{v * 100:.1f}" if c in TABLE_COLUMNS else str(v) for c, v in zip(frame.columns, row)))
    return table


def cmd_ablate(args, config):
    if args.experiment == "strategies":
        frame = run_strategy_ablation(config)
    elif args.experiment == "scoring":
        frame = scoring_experiment_from_config(config)
    else:
        frame = run_refine_threshold_sweep(config)
    console.print(_ablation_table(frame, f"Ablation: {args.experiment} (seed {config.seed})"))
    sys.stdout.write(ablation_csv(frame))
    if args.out:
        report = {"experiment": args.experiment, "tables": {args.experiment: frame.to_dict(orient="records")}}
        _emit(_report(config, **report), args.out)
    return 0


COMMANDS = {
    "oks": cmd_oks,
    "assign": cmd_assign,
    "nms": cmd_nms,
    "eval": cmd_eval,
    "losses": cmd_losses,
    "simulate": cmd_simulate,
    "ablate": cmd_ablate,
}


def _common_options():
    common = CliParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="YAML/JSON config file (overrides the lookup order)")
    common.add_argument("--seed", type=int, default=None, help="Master seed for every stochastic path")
    common.add_argument("--jobs", type=int, default=None, help="Worker threads (default: logical cores)")
    common.add_argument("--out", type=str, default=None, help="Write the primary artifact to this file")
    common.add_argument("--verbose", "-v", action="store_true", help="Enable verbose output on stderr")
    return common


def build_parser():
    common = _common_options()
    parser = CliParser(
        prog="densepose-kit",
        description="🧍 densepose-kit - decision core of dense single-stage multi-person pose regression",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
📋 COMMAND EXAMPLES:

📐 GEOMETRY:
  %(prog)s oks --gt gt.json --dt dt.json          OKS of one pose pair (prints a float)
  %(prog)s assign --gt coco.json                  Per-location assignments as JSON lines

🎯 POST-PROCESSING & EVALUATION:
  %(prog)s nms --detections hyps.json             Score fusion + OKS-NMS, COCO results out
  %(prog)s nms --detections hyps.json --mode soft-gaussian
  %(prog)s eval --gt coco.json --dt results.json  AP, AP50, AP75, APM, APL, AR

🧮 LOSSES:
  %(prog)s losses --fixture losses.json           Five branch losses and the weighted total

🎲 SIMULATION & ABLATIONS:
  %(prog)s simulate --scenes 10 --seed 7          Synthetic COCO ground truth + hypotheses
  %(prog)s ablate --seed 7                        Positive-selection ladder as CSV
  %(prog)s ablate --experiment scoring            Ranking by gt-oks / fused / cls scores
  %(prog)s ablate --experiment sweep --out r.json AP against the refine OKS threshold

⚙️  CONFIG:
  --config file.yaml, else $DENSEPOSE_KIT_CONFIG, ~/.config/densepose-kit/config.yaml,
  ./config.yaml, built-in defaults. Flags override file values.
        """,
    )
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    oks_parser = subparsers.add_parser(
        "oks",
        parents=[common],
        help="Object keypoint similarity of pose pairs",
        description="📐 OKS of each predicted pose against the ground-truth pose at the same index.",
    )
    oks_parser.add_argument("--gt", required=True, help="Ground-truth pose(s): {keypoints, area?} or flat arrays")
    oks_parser.add_argument("--dt", required=True, help="Predicted pose(s), same layout as --gt")

    assign_parser = subparsers.add_parser(
        "assign",
        parents=[common],
        help="Positive-sample assignment per grid location",
        description="🗺️  Level, instance, initial/refine positive flags and PSM target for every location.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Without --predictions, hypotheses are drawn from the noise model with --seed.
        """,
    )
    assign_parser.add_argument("--gt", required=True, help="COCO keypoint annotations file")
    assign_parser.add_argument("--predictions", default=None, help="Hypotheses file as written by 'simulate'")

    nms_parser = subparsers.add_parser(
        "nms",
        parents=[common],
        help="Score fusion and OKS-based pose NMS",
        description="🎯 Decode hypotheses, fuse scores, suppress duplicates; prints COCO results.",
    )
    nms_parser.add_argument("--detections", required=True, help="Hypotheses file as written by 'simulate'")
    nms_parser.add_argument("--gt", default=None, help="COCO annotations (needed for --score-mode gt-oks)")
    nms_parser.add_argument("--oks-thr", type=float, default=None, help="Suppression OKS threshold")
    nms_parser.add_argument("--mode", choices=NMS_MODES, default=None, help="Suppression mode")
    nms_parser.add_argument("--score-mode", choices=SCORE_MODES, default=None, help="Ranking confidence")

    eval_parser = subparsers.add_parser(
        "eval",
        parents=[common],
        help="COCO keypoint AP/AR",
        description="📊 COCO-protocol keypoint evaluation; JSON on stdout, a table row on stderr.",
    )
    eval_parser.add_argument("--gt", required=True, help="COCO keypoint annotations file")
    eval_parser.add_argument("--dt", required=True, help="COCO keypoint results file")
    eval_parser.add_argument("--max-dets", type=int, default=100, help="Detections kept per image")

    losses_parser = subparsers.add_parser(
        "losses",
        parents=[common],
        help="Loss arithmetic on a fixture",
        description="🧮 Classification, heatmap, two regression and PSM losses plus the weighted total.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Fixture sections (all optional, missing ones count as 0):
  classification  {pred, target}
  heatmap         {pred, target} or {pred, instances, image_width, image_height}
  regression      {instances, hypotheses, initial_positives, refine_positives}
  psm             {pred, target}
        """,
    )
    losses_parser.add_argument("--fixture", required=True, help="Loss fixture JSON")

    simulate_parser = subparsers.add_parser(
        "simulate",
        parents=[common],
        help="Seeded synthetic scenes and dense predictions",
        description="🎲 COCO ground truth plus per-location hypotheses for seeded scenes.",
    )
    simulate_parser.add_argument("--scenes", type=int, default=1, help="Number of scenes")
    simulate_parser.add_argument(
        "--all-locations", action="store_true", help="Dump every location, not only cls >= score floor"
    )

    ablate_parser = subparsers.add_parser(
        "ablate",
        parents=[common],
        help="Ablation tables as CSV",
        description="🔬 Toy-trainer and scoring ablations; CSV on stdout, JSON report with --out.",
    )
    ablate_parser.add_argument("--experiment", choices=EXPERIMENTS, default="strategies", help="Which table")
    return parser


def _overrides(args):
    flags = {
        "runtime.seed": args.seed,
        "runtime.jobs": args.jobs,
        "nms.oks_threshold": getattr(args, "oks_thr", None),
        "nms.mode": getattr(args, "mode", None),
        "strategy.score_mode": getattr(args, "score_mode", None),
    }
    return {key: value for key, value in flags.items() if value is not None}


def run_command(argv=None):
    """Parse ``argv``, run one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return UsageError.exit_code
        if getattr(args, "scenes", 1) < 1:
            raise UsageError("--scenes must be >= 1")
        set_verbose(args.verbose)
        config = RunConfig.load(args.config, _overrides(args))
        debug_print(f"seed {config.seed}, jobs {config.jobs}")
        return COMMANDS[args.command](args, config)
    except DenseposeKitError as e:
        error_print(e)
        return e.exit_code
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 0
    except Exception as e:
        error_print(f"internal error: {type(e).__name__}: {e}")
        return InvariantViolation.exit_code


def main():
    """Main CLI interface."""
    sys.exit(run_command())


if __name__ == "__main__":
    main()
