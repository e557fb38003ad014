"""Plan computation: calibrate, correlate, assign.

Both encoders see identical calibration batches in one clean forward pass
per batch; channel statistics are taken from unmodified activations. This
is equivalent to permuting each layer and un-permuting before the next
(the statistics either way describe the same activation pairs), without
ever mutating the models.

Conv taps sit after the group norm on layer 0 and directly after the conv
elsewhere. Attention alignment is hierarchical: an inner assignment per
(A-head, B-head) pair scores how well the pair could match, the resulting
head-quality matrix is solved for the head order, and each matched pair
keeps its inner channel assignment (stored per destination head). Layer-0
conv channels get the same two-level treatment over norm groups whenever a
group spans more than one channel, so planned permutations always stay
inside the symmetry group.
"""

from __future__ import annotations

import collections
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import corr_stats
from .calibration import CalibrationSpec, batches
from .corr_stats import CorrAccumulator, STD_FLOOR, channel_stds, correlation_matrix
from .encoder import EncoderWeights, TapKind, TapPoint, forward_with_taps
from .lap import solve_max
from .plans import MergeConfigKind, PermutationPlan, identity_plan, invert_permutation

MIN_POSITIONS_PER_CHANNEL = 10


class PlanningError(RuntimeError):
    pass


@dataclass(frozen=True)
class _StatSpec:
    """One correlation accumulator: which taps feed it and how to reshape."""

    key: str
    taps: tuple[TapPoint, ...]
    layout: str  # "bct" or "btc"


def _stat_specs(config, kind: MergeConfigKind) -> list[_StatSpec]:
    specs: list[_StatSpec] = []
    if kind.wants_cnn:
        specs.append(_StatSpec("conv.0", (TapPoint(TapKind.CONV_GN_OUT, 0),), "bct"))
        for l in range(1, len(config.conv_layers)):
            specs.append(_StatSpec(f"conv.{l}", (TapPoint(TapKind.CONV_OUT, l),), "bct"))
    for i in range(config.num_transformer_layers):
        if kind.wants_attention:
            heads = tuple(TapPoint(TapKind.HEAD_OUT, i, h) for h in range(config.heads))
            specs.append(_StatSpec(f"layer.{i}.attn", heads, "btc"))
        if kind.wants_ffn:
            specs.append(_StatSpec(f"layer.{i}.ffn", (TapPoint(TapKind.FFN_HIDDEN, i),), "btc"))
        if kind.wants_qkv:
            for m, tk in (("q", TapKind.Q_OUT), ("k", TapKind.K_OUT), ("v", TapKind.V_OUT)):
                specs.append(_StatSpec(f"layer.{i}.{m}", (TapPoint(tk, i),), "btc"))
    return specs


def _channels_major(spec: _StatSpec, captured: dict[TapPoint, np.ndarray]) -> np.ndarray:
    parts = [corr_stats.reshape_channels_major(captured[t], spec.layout) for t in spec.taps]
    return parts[0] if len(parts) == 1 else np.vstack(parts)


def _map_ordered(fn, iterable, threads: int):
    """Evaluate fn over an iterable, in order, with a bounded worker window."""
    if threads <= 1:
        for item in iterable:
            yield fn(item)
        return
    window = collections.deque()
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for item in iterable:
            window.append(pool.submit(fn, item))
            if len(window) > threads:
                yield window.popleft().result()
        while window:
            yield window.popleft().result()


def collect_correlation_stats(
    weights_a: EncoderWeights,
    weights_b: EncoderWeights,
    calib: CalibrationSpec,
    specs: list[_StatSpec],
    threads: int = 1,
) -> tuple[dict[str, CorrAccumulator], str]:
    """Accumulate every requested tap over the calibration stream.

    Per-batch accumulators are merged in emission order, so the result is
    bit-identical for any worker count. Returns the accumulators plus a
    sha256 digest of the raw calibration bytes.
    """
    if weights_a.config != weights_b.config:
        raise PlanningError("both encoders must share one architecture config")
    tap_set = frozenset(t for s in specs for t in s.taps)
    hasher = hashlib.sha256()

    def hashed_batches():
        for batch in batches(calib):
            hasher.update(np.ascontiguousarray(batch, dtype="<f4").tobytes())
            yield batch

    def batch_stats(batch: np.ndarray) -> dict[str, CorrAccumulator]:
        _, taps_a = forward_with_taps(weights_a, batch, tap_set)
        _, taps_b = forward_with_taps(weights_b, batch, tap_set)
        per_batch: dict[str, CorrAccumulator] = {}
        for spec in specs:
            a = _channels_major(spec, taps_a)
            b = _channels_major(spec, taps_b)
            acc = CorrAccumulator(a.shape[0], b.shape[0])
            corr_stats.update(acc, a, b)
            per_batch[spec.key] = acc
        return per_batch

    combined: dict[str, CorrAccumulator] = {}
    for per_batch in _map_ordered(batch_stats, hashed_batches(), threads):
        for key, acc in per_batch.items():
            combined[key] = corr_stats.combine(combined[key], acc) if key in combined else acc
    if not combined:
        raise PlanningError("calibration produced no batches")
    return combined, hasher.hexdigest()


def _tap_correlation(key: str, acc: CorrAccumulator) -> np.ndarray:
    if acc.n < MIN_POSITIONS_PER_CHANNEL * max(acc.c_a, acc.c_b):
        raise PlanningError(
            f"tap {key}: only {acc.n} calibration positions for {max(acc.c_a, acc.c_b)} "
            f"channels; need at least {MIN_POSITIONS_PER_CHANNEL}x as many positions"
        )
    std_a, std_b = channel_stds(acc)
    if (std_a < STD_FLOOR).all() or (std_b < STD_FLOOR).all():
        raise PlanningError(f"tap {key}: all channels are constant over the calibration set")
    return correlation_matrix(acc)


def _hierarchical_solve(
    corr: np.ndarray, blocks: int
) -> tuple[np.ndarray, list[np.ndarray], float]:
    """Outer assignment over equal blocks scored by inner assignments.

    Entry (k, j) of the quality matrix is the best within-block correlation
    total achievable if B's block j were matched to A's block k; the outer
    solve fixes the block order and each matched pair keeps its inner
    permutation (returned indexed by destination block).
    """
    n = corr.shape[0]
    size = n // blocks
    if size == 1:
        assignment = solve_max(corr)
        outer = np.array(assignment.perm, dtype=np.int64)
        return outer, [np.zeros(1, dtype=np.int64) for _ in range(blocks)], assignment.total
    quality = np.empty((blocks, blocks))
    inner: dict[tuple[int, int], np.ndarray] = {}
    for k in range(blocks):
        for j in range(blocks):
            sub = corr[k * size : (k + 1) * size, j * size : (j + 1) * size]
            a = solve_max(sub)
            quality[k, j] = a.total
            inner[(k, j)] = np.array(a.perm, dtype=np.int64)
    outer_assignment = solve_max(quality)
    outer = np.array(outer_assignment.perm, dtype=np.int64)
    inv = invert_permutation(outer)
    within = [inner[(k, int(inv[k]))] for k in range(blocks)]
    total = float(sum(quality[k, int(inv[k])] for k in range(blocks)))
    return outer, within, total


def _flatten_blocks(outer: np.ndarray, within: list[np.ndarray], size: int) -> np.ndarray:
    flat = np.empty(len(outer) * size, dtype=np.int64)
    for j in range(len(outer)):
        dest = outer[j]
        flat[j * size : (j + 1) * size] = dest * size + within[dest]
    return flat


def _solve_cnn(accs, config, totals) -> list[np.ndarray]:
    conv_perms = []
    c0 = config.conv_layers[0][0]
    corr0 = _tap_correlation("conv.0", accs["conv.0"])
    outer, within, total = _hierarchical_solve(corr0, config.groupnorm_groups)
    conv_perms.append(_flatten_blocks(outer, within, c0 // config.groupnorm_groups))
    totals["conv.0"] = total
    for l in range(1, len(config.conv_layers)):
        corr = _tap_correlation(f"conv.{l}", accs[f"conv.{l}"])
        assignment = solve_max(corr)
        conv_perms.append(np.array(assignment.perm, dtype=np.int64))
        totals[f"conv.{l}"] = assignment.total
    return conv_perms


def _solve_attention(accs, config, totals):
    head_perms, within_perms = [], []
    for i in range(config.num_transformer_layers):
        corr = _tap_correlation(f"layer.{i}.attn", accs[f"layer.{i}.attn"])
        outer, within, total = _hierarchical_solve(corr, config.heads)
        head_perms.append(outer)
        within_perms.append(within)
        totals[f"layer.{i}.attn"] = total
    return head_perms, within_perms


def _solve_ffn(accs, config, totals) -> list[np.ndarray]:
    perms = []
    for i in range(config.num_transformer_layers):
        assignment = solve_max(_tap_correlation(f"layer.{i}.ffn", accs[f"layer.{i}.ffn"]))
        perms.append(np.array(assignment.perm, dtype=np.int64))
        totals[f"layer.{i}.ffn"] = assignment.total
    return perms


def _solve_qkv(accs, config, totals) -> list[dict[str, np.ndarray]]:
    out = []
    for i in range(config.num_transformer_layers):
        entry = {}
        for m in ("q", "k", "v"):
            assignment = solve_max(_tap_correlation(f"layer.{i}.{m}", accs[f"layer.{i}.{m}"]))
            entry[m] = np.array(assignment.perm, dtype=np.int64)
            totals[f"layer.{i}.{m}"] = assignment.total
        out.append(entry)
    return out


def build_plan(
    weights_a: EncoderWeights,
    weights_b: EncoderWeights,
    kind: MergeConfigKind,
    calib: CalibrationSpec,
    threads: int = 1,
) -> PermutationPlan:
    """Compute the full permutation plan aligning B's channels to A's."""
    config = weights_a.config
    specs = _stat_specs(config, kind)
    accs, digest = collect_correlation_stats(weights_a, weights_b, calib, specs, threads)
    totals: dict[str, float] = {}
    plan = identity_plan(config, kind)
    if kind.wants_cnn:
        plan.conv_perms = _solve_cnn(accs, config, totals)
    if kind.wants_attention:
        plan.head_perms, plan.within_head_perms = _solve_attention(accs, config, totals)
    if kind.wants_ffn:
        plan.ffn_perms = _solve_ffn(accs, config, totals)
    if kind.wants_qkv:
        plan.qkv_perms = _solve_qkv(accs, config, totals)
    plan.provenance = {
        "kind": kind.value,
        "calibration_digest": digest,
        "tap_totals": {k: totals[k] for k in sorted(totals)},
        "non_symmetry": kind.wants_qkv,
        "within_head_index": "destination",
    }
    plan.validate()
    return plan


def plan_cnn(weights_a, weights_b, calib: CalibrationSpec, threads: int = 1):
    return build_plan(weights_a, weights_b, MergeConfigKind.CNN, calib, threads).conv_perms


def plan_attention(weights_a, weights_b, calib: CalibrationSpec, threads: int = 1):
    plan = build_plan(weights_a, weights_b, MergeConfigKind.FFN_ATTN, calib, threads)
    return plan.head_perms, plan.within_head_perms


def plan_ffn(weights_a, weights_b, calib: CalibrationSpec, threads: int = 1):
    return build_plan(weights_a, weights_b, MergeConfigKind.FFN_ATTN, calib, threads).ffn_perms


def plan_qkv_all(weights_a, weights_b, calib: CalibrationSpec, threads: int = 1):
    return build_plan(weights_a, weights_b, MergeConfigKind.CNN_ALL, calib, threads).qkv_perms


def _nonfixed_fraction(perm: np.ndarray) -> float:
    return float(np.mean(perm != np.arange(len(perm))))


def plan_report(plan: PermutationPlan) -> dict:
    """Fractions of moved channels, aggregated the way merge reports read."""
    detail: dict[str, float] = {}
    for l, perm in enumerate(plan.conv_perms):
        detail[f"conv.{l}"] = _nonfixed_fraction(perm)
    for i in range(plan.config.num_transformer_layers):
        detail[f"layer.{i}.attn"] = _nonfixed_fraction(plan.attention_flat_perm(i))
        detail[f"layer.{i}.ffn"] = _nonfixed_fraction(plan.ffn_perms[i])
        for m, perm in sorted(plan.qkv_perms[i].items()):
            detail[f"layer.{i}.qkv.{m}"] = _nonfixed_fraction(perm)
    n_conv = len(plan.config.conv_layers)
    rest = [detail[f"conv.{l}"] for l in range(1, n_conv)]
    attn = [detail[f"layer.{i}.attn"] for i in range(plan.config.num_transformer_layers)]
    ffn = [detail[f"layer.{i}.ffn"] for i in range(plan.config.num_transformer_layers)]
    qkv = [v for k, v in detail.items() if ".qkv." in k]
    sections = {
        "cnn_layer0": detail["conv.0"],
        "cnn_rest_avg": float(np.mean(rest)) if rest else None,
        "attention_avg": float(np.mean(attn)),
        "ffn_avg": float(np.mean(ffn)),
    }
    if qkv:
        sections["qkv_avg"] = float(np.mean(qkv))
    return {"sections": sections, "detail": detail}


def report_text(report: dict) -> str:
    rows = [("Model Section", "% Permuted Channels")]
    labels = {
        "cnn_layer0": "CNN layer 0",
        "cnn_rest_avg": "CNN layers 1+ (avg)",
        "attention_avg": "Attention output (avg)",
        "ffn_avg": "FFN hidden (avg)",
        "qkv_avg": "QKV rows (avg)",
    }
    for key, label in labels.items():
        if key not in report["sections"]:
            continue
        value = report["sections"][key]
        rows.append((label, "-" if value is None else f"{100.0 * value:.2f}%"))
    width = max(len(r[0]) for r in rows) + 2
    return "\n".join(f"{name:<{width}}{val}" for name, val in rows)


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
