"""Correlation-permutation alignment and merging for audio encoders."""

from .calibration import CalibrationSpec, SourceSpec, default_battery_spec, default_calibration_spec
from .corr_stats import CorrAccumulator, correlation_matrix, reshape_channels_major
from .encoder import (
    EncoderConfig,
    EncoderWeights,
    TapKind,
    TapPoint,
    forward,
    forward_with_taps,
    init_toy,
    toy_config,
)
from .evaluate import BarrierCurve, TaskScore, barrier_curve, functional_distance, superb_score
from .lap import Assignment, brute_force, solve_max
from .merger import apply_plan, interpolate, merge, random_symmetry
from .plans import (
    MergeConfigKind,
    PermutationPlan,
    compose_plans,
    identity_plan,
    invert_plan,
    plan_from_archive,
    plan_to_archive,
)
from .planner import build_plan, plan_report
from .tensor_store import TensorArchive, load_archive, read_archive, save_archive, write_archive

__version__ = "0.1.0"

__all__ = [
    "Assignment",
    "BarrierCurve",
    "CalibrationSpec",
    "CorrAccumulator",
    "EncoderConfig",
    "EncoderWeights",
    "MergeConfigKind",
    "PermutationPlan",
    "SourceSpec",
    "TapKind",
    "TapPoint",
    "TaskScore",
    "TensorArchive",
    "apply_plan",
    "barrier_curve",
    "brute_force",
    "build_plan",
    "compose_plans",
    "correlation_matrix",
    "default_battery_spec",
    "default_calibration_spec",
    "forward",
    "forward_with_taps",
    "functional_distance",
    "identity_plan",
    "init_toy",
    "interpolate",
    "invert_plan",
    "load_archive",
    "merge",
    "plan_from_archive",
    "plan_report",
    "plan_to_archive",
    "random_symmetry",
    "read_archive",
    "reshape_channels_major",
    "save_archive",
    "solve_max",
    "superb_score",
    "toy_config",
    "write_archive",
]
