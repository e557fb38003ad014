"""Merge-quality measurements: interpolation barrier curves and the
normalized benchmark score.

No training objective exists at desk scale, so the loss barrier is
operationalized as functional distance: mean-squared difference of output
features over a fixed input battery, measured against each interpolation
endpoint (model A and the aligned model B')."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderWeights, forward
from .merger import apply_plan, interpolate
from .plans import PermutationPlan, identity_plan

_CHUNK = 32


class EvalError(ValueError):
    pass


def _battery_features(weights: EncoderWeights, battery: np.ndarray) -> np.ndarray:
    battery = np.asarray(battery, dtype=np.float32)
    if battery.ndim != 2 or battery.shape[0] == 0:
        raise EvalError(f"battery must be a non-empty [clips, samples] array, got {battery.shape}")
    outs = [forward(weights, battery[i : i + _CHUNK]) for i in range(0, len(battery), _CHUNK)]
    return np.concatenate(outs, axis=0)


def functional_distance(
    w1: EncoderWeights, w2: EncoderWeights, battery: np.ndarray
) -> tuple[float, float]:
    """(mean squared difference, max abs difference) of output features."""
    f1 = _battery_features(w1, battery)
    f2 = _battery_features(w2, battery)
    diff = f1.astype(np.float64) - f2.astype(np.float64)
    return float(np.mean(diff * diff)), float(np.max(np.abs(diff)))


@dataclass
class BarrierCurve:
    lambdas: list[float]
    dist_to_a: list[float]
    dist_to_b: list[float]

    @property
    def peak_excess(self) -> float:
        return max(min(a, b) for a, b in zip(self.dist_to_a, self.dist_to_b))

    def to_json_dict(self) -> dict:
        return {
            "lambdas": self.lambdas,
            "dist_to_a": self.dist_to_a,
            "dist_to_b": self.dist_to_b,
            "peak_excess": self.peak_excess,
        }

    def to_csv(self) -> str:
        lines = ["lambda,dist_to_a,dist_to_b"]
        for lam, a, b in zip(self.lambdas, self.dist_to_a, self.dist_to_b):
            lines.append(f"{lam!r},{a!r},{b!r}")
        return "\n".join(lines) + "\n"


DEFAULT_LAMBDA_GRID = [round(0.1 * i, 1) for i in range(11)]


def barrier_curve(
    weights_a: EncoderWeights,
    weights_b: EncoderWeights,
    plan: PermutationPlan | None,
    lambdas: list[float] | None,
    battery: np.ndarray,
) -> BarrierCurve:
    """MSE of the merged model against both endpoints across the lambda grid.

    The B endpoint is the aligned model (plan applied, identity when None):
    it is the actual lambda=0 end of the interpolation path.
    """
    lambdas = DEFAULT_LAMBDA_GRID if lambdas is None else list(lambdas)
    if any(not 0.0 <= l <= 1.0 for l in lambdas):
        raise EvalError("lambda grid must lie within [0, 1]")
    aligned = apply_plan(weights_b, plan if plan is not None else identity_plan(weights_b.config))
    feats_a = _battery_features(weights_a, battery)
    feats_b = _battery_features(aligned, battery)
    dist_a, dist_b = [], []
    for lam in lambdas:
        merged = interpolate(weights_a, aligned, lam)
        feats = _battery_features(merged, battery)
        diff_a = feats.astype(np.float64) - feats_a.astype(np.float64)
        diff_b = feats.astype(np.float64) - feats_b.astype(np.float64)
        dist_a.append(float(np.mean(diff_a * diff_a)))
        dist_b.append(float(np.mean(diff_b * diff_b)))
    return BarrierCurve(lambdas=[float(l) for l in lambdas], dist_to_a=dist_a, dist_to_b=dist_b)


@dataclass(frozen=True)
class TaskScore:
    task: str
    u: float       # evaluated system's metric
    fbank: float   # filterbank baseline metric
    best: float    # best endpoint model's metric

    @classmethod
    def from_dict(cls, obj: dict) -> "TaskScore":
        try:
            return cls(str(obj["task"]), float(obj["u"]), float(obj["fbank"]), float(obj["best"]))
        except KeyError as exc:
            raise EvalError(f"task entry missing field {exc}") from exc


def superb_score(inputs: list[TaskScore]) -> float:
    """1000/|T| * sum_t (u - fbank)/(best - fbank).

    Lower-is-better metrics need no direction flag: numerator and
    denominator flip sign together.
    """
    if not inputs:
        raise EvalError("task list is empty")
    total = 0.0
    for t in inputs:
        denom = t.best - t.fbank
        if denom == 0.0:
            raise EvalError(f"task {t.task!r}: best equals fbank, normalization undefined")
        total += (t.u - t.fbank) / denom
    return 1000.0 / len(inputs) * total


def load_task_scores(text: str) -> list[TaskScore]:
    obj = json.loads(text)
    if not isinstance(obj, list):
        raise EvalError("score input must be a JSON list of task entries")
    return [TaskScore.from_dict(entry) for entry in obj]
