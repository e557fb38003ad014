"""Command-line surface for the alignment/merge pipeline.

All subcommands are deterministic given their flags and input files.
Results go to stdout as JSON (or aligned text with --format text); errors
go to stderr as one line, `error:<category>: <message>`, with a nonzero
exit code.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import calibration, evaluate, planner
from .calibration import CalibrationSpec, all_clips, default_battery_spec, default_calibration_spec
from .encoder import ConfigError, EncoderConfig, EncoderWeights, WeightsError, init_toy, toy_config
from .lap import LapError
from .merger import MergeError, apply_plan, merge, merge_metadata, random_symmetry
from .plans import (
    MergeConfigKind,
    PlanError,
    invert_plan,
    plan_from_archive,
    plan_to_archive,
)
from .planner import PlanningError, build_plan, plan_report, report_json, report_text
from .corr_stats import StatsError
from .calibration import CalibrationError
from .evaluate import EvalError
from .tensor_store import (
    ArchiveError,
    archive_digest,
    load_archive,
    save_archive,
    tensor_digest,
)

_ERROR_CATEGORIES = [
    (ArchiveError, "archive"),
    (CalibrationError, "calibration"),
    (PlanningError, "planning"),
    (PlanError, "plan"),
    (MergeError, "merge"),
    (ConfigError, "config"),
    (WeightsError, "weights"),
    (StatsError, "stats"),
    (LapError, "lap"),
    (EvalError, "eval"),
    (FileNotFoundError, "io"),
    (OSError, "io"),
    (json.JSONDecodeError, "validation"),
    (ValueError, "validation"),
]


def _category(exc: BaseException) -> str:
    for cls, name in _ERROR_CATEGORIES:
        if isinstance(exc, cls):
            return name
    return "internal"


def _emit(obj, fmt: str, text_renderer=None) -> None:
    if fmt == "text" and text_renderer is not None:
        print(text_renderer(obj))
    else:
        print(json.dumps(obj, indent=2, sort_keys=True))


def _load_weights(path) -> EncoderWeights:
    return EncoderWeights.from_archive(load_archive(path))


def _load_calib(path, fallback: CalibrationSpec) -> CalibrationSpec:
    if path is None:
        return fallback
    return CalibrationSpec.from_json(Path(path).read_text())


def _resolve_threads(value) -> int:
    if value is not None:
        return max(1, int(value))
    env = os.environ.get("REBASIN_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _cmd_gen_toy(args) -> None:
    if args.config:
        config = EncoderConfig.from_json(Path(args.config).read_text())
    else:
        config = toy_config()
    weights = init_toy(config, args.seed)
    archive = weights.to_archive({"toy_seed": str(args.seed)})
    save_archive(archive, args.out)
    _emit({"out": args.out, "digest": archive_digest(archive)}, args.format)


def _cmd_permute_random(args) -> None:
    weights = _load_weights(args.model)
    symmetry = random_symmetry(weights.config, args.seed)
    permuted = apply_plan(weights, symmetry)
    save_archive(permuted.to_archive(), args.out)
    result = {"out": args.out}
    if args.plan_out:
        # the plan that aligns the permuted model back onto the input
        aligning = invert_plan(symmetry)
        save_archive(plan_to_archive(aligning), args.plan_out)
        result["plan_out"] = args.plan_out
    _emit(result, args.format)


def _cmd_plan(args) -> None:
    weights_a = _load_weights(args.model_a)
    weights_b = _load_weights(args.model_b)
    calib = _load_calib(args.calib, default_calibration_spec())
    plan = build_plan(
        weights_a, weights_b, MergeConfigKind(args.kind), calib, _resolve_threads(args.threads)
    )
    save_archive(plan_to_archive(plan), args.out)
    report = plan_report(plan)
    if args.report:
        Path(args.report).write_text(report_json(report))
    _emit(
        {"out": args.out, "report": report, "tap_totals": plan.provenance["tap_totals"]},
        args.format,
        lambda _: report_text(report),
    )


def _cmd_merge(args) -> None:
    weights_a = _load_weights(args.model_a)
    weights_b = _load_weights(args.model_b)
    plan = plan_from_archive(load_archive(args.plan)) if args.plan else None
    merged = merge(weights_a, weights_b, plan, args.lam, _resolve_threads(args.threads))
    archive = merged.to_archive(merge_metadata(weights_a, weights_b, plan, args.lam))
    save_archive(archive, args.out)
    _emit({"out": args.out, "lambda": args.lam, "digest": archive_digest(archive)}, args.format)


def _cmd_barrier(args) -> None:
    weights_a = _load_weights(args.model_a)
    weights_b = _load_weights(args.model_b)
    plan = plan_from_archive(load_archive(args.plan)) if args.plan else None
    battery = all_clips(_load_calib(args.battery, default_battery_spec()))
    lambdas = [float(x) for x in args.lambdas.split(",")] if args.lambdas else None
    curve = evaluate.barrier_curve(weights_a, weights_b, plan, lambdas, battery)
    payload = curve.to_json_dict()
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2))
    if args.csv:
        Path(args.csv).write_text(curve.to_csv())
    _emit(payload, args.format)


def _cmd_score(args) -> None:
    tasks = evaluate.load_task_scores(Path(args.input).read_text())
    score = evaluate.superb_score(tasks)
    _emit({"score": score, "tasks": len(tasks)}, args.format, lambda o: f"{o['score']:.2f}")


def _cmd_inspect(args) -> None:
    archive = load_archive(args.archive, allow_nonfinite=True)
    tensors = [
        {
            "name": name,
            "shape": list(arr.shape),
            "digest": tensor_digest(arr),
        }
        for name, arr in sorted(archive.entries.items())
    ]
    payload = {
        "archive_digest": archive_digest(archive),
        "metadata": archive.metadata,
        "tensors": tensors,
    }

    def text(obj):
        lines = [f"archive digest: {obj['archive_digest']}"]
        for k, v in sorted(obj["metadata"].items()):
            lines.append(f"meta {k} = {v}")
        for t in obj["tensors"]:
            shape = "x".join(str(d) for d in t["shape"])
            lines.append(f"{t['name']:<28} {shape:<16} {t['digest'][:16]}")
        return "\n".join(lines)

    _emit(payload, args.format, text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rebasin",
        description="Align and merge two same-architecture audio encoders "
        "via correlation-maximizing channel permutations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(fn=fn)
        p.add_argument("--format", choices=("json", "text"), default="json")
        return p

    p = add("gen-toy", _cmd_gen_toy, "generate a seeded toy encoder archive")
    p.add_argument("--config", help="EncoderConfig JSON file (default: built-in toy config)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)

    p = add("permute-random", _cmd_permute_random, "apply a random weight symmetry (test fixture)")
    p.add_argument("--model", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plan-out", help="write the ground-truth aligning plan here")

    p = add("plan", _cmd_plan, "compute a permutation plan from calibration statistics")
    p.add_argument("--model-a", required=True)
    p.add_argument("--model-b", required=True)
    p.add_argument("--kind", required=True, choices=[k.value for k in MergeConfigKind])
    p.add_argument("--calib", help="CalibrationSpec JSON file (default: built-in 128 clips)")
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="write the permuted-channel report JSON here")
    p.add_argument("--threads", type=int, help="worker count (or REBASIN_THREADS)")

    p = add("merge", _cmd_merge, "apply a plan to model B and interpolate with model A")
    p.add_argument("--model-a", required=True)
    p.add_argument("--model-b", required=True)
    p.add_argument("--plan")
    p.add_argument("--lambda", dest="lam", type=float, default=0.9,
                   help="weight on model A (default 0.9)")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, help="worker count (or REBASIN_THREADS)")

    p = add("barrier", _cmd_barrier, "functional-distance curve over the lambda grid")
    p.add_argument("--model-a", required=True)
    p.add_argument("--model-b", required=True)
    p.add_argument("--plan")
    p.add_argument("--battery", help="CalibrationSpec JSON for the input battery")
    p.add_argument("--lambdas", help="comma-separated grid (default 0.0..1.0 step 0.1)")
    p.add_argument("--out")
    p.add_argument("--csv")

    p = add("score", _cmd_score, "normalized benchmark score from a task metrics JSON")
    p.add_argument("--input", required=True)

    p = add("inspect", _cmd_inspect, "list names, shapes and digests of an archive")
    p.add_argument("--archive", required=True)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except Exception as exc:  # noqa: BLE001 - single reporting point for the CLI
        print(f"error:{_category(exc)}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
