"""Streaming sufficient statistics for channel-wise Pearson cross-correlation.

One accumulator tracks the C_A x C_B correlation between two models'
activations at a single tap. All moments are held in float64; float32 sums
over the ~1e5 batch*time positions of a calibration run would not keep the
assignment argmax stable.

update() consumes data in fixed column blocks copied to contiguous buffers,
so splitting a stream at block boundaries reproduces the unsplit sums
bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_store import TensorArchive

STD_FLOOR = 1e-8
_BLOCK = 2048


class StatsError(ValueError):
    pass


def reshape_channels_major(act: np.ndarray, layout: str) -> np.ndarray:
    """Reshape a batched activation tensor to [C, B*T].

    layout "bct" treats act as [B, C, T] (conv taps); "btc" as [B, T, C]
    (transformer taps). Output column order is batch-major then time:
    column b*T + t holds position t of sample b.
    """
    if act.ndim != 3:
        raise StatsError(f"expected a 3-d activation tensor, got shape {act.shape}")
    if layout == "bct":
        b, c, t = act.shape
        moved = act.transpose(1, 0, 2)  # [C, B, T]
    elif layout == "btc":
        b, t, c = act.shape
        moved = act.transpose(2, 0, 1)
    else:
        raise StatsError(f"unknown layout {layout!r}")
    return np.ascontiguousarray(moved).reshape(c, b * t)


@dataclass
class CorrAccumulator:
    c_a: int
    c_b: int
    n: int = 0
    sum_a: np.ndarray = field(init=False)
    sum_b: np.ndarray = field(init=False)
    sumsq_a: np.ndarray = field(init=False)
    sumsq_b: np.ndarray = field(init=False)
    cross: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.c_a < 1 or self.c_b < 1:
            raise StatsError("channel counts must be >= 1")
        self.sum_a = np.zeros(self.c_a)
        self.sum_b = np.zeros(self.c_b)
        self.sumsq_a = np.zeros(self.c_a)
        self.sumsq_b = np.zeros(self.c_b)
        self.cross = np.zeros((self.c_a, self.c_b))


def update(acc: CorrAccumulator, a: np.ndarray, b: np.ndarray) -> None:
    """Fold N aligned positions of both streams into the accumulator.

    a is [c_a, N], b is [c_b, N]; column j of each must come from the same
    clip position (both models fed identical batches).
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise StatsError("update expects 2-d [channels, positions] arrays")
    if a.shape[0] != acc.c_a or b.shape[0] != acc.c_b:
        raise StatsError(
            f"channel mismatch: got ({a.shape[0]}, {b.shape[0]}), "
            f"accumulator holds ({acc.c_a}, {acc.c_b})"
        )
    if a.shape[1] != b.shape[1]:
        raise StatsError(f"position mismatch: {a.shape[1]} vs {b.shape[1]}")
    n = a.shape[1]
    for start in range(0, n, _BLOCK):
        blk_a = np.ascontiguousarray(a[:, start : start + _BLOCK], dtype=np.float64)
        blk_b = np.ascontiguousarray(b[:, start : start + _BLOCK], dtype=np.float64)
        acc.sum_a += blk_a.sum(axis=1)
        acc.sum_b += blk_b.sum(axis=1)
        acc.sumsq_a += (blk_a * blk_a).sum(axis=1)
        acc.sumsq_b += (blk_b * blk_b).sum(axis=1)
        acc.cross += blk_a @ blk_b.T
    acc.n += n


def combine(acc1: CorrAccumulator, acc2: CorrAccumulator) -> CorrAccumulator:
    """Merge two independently accumulated streams (parallel calibration)."""
    if (acc1.c_a, acc1.c_b) != (acc2.c_a, acc2.c_b):
        raise StatsError("cannot combine accumulators with different channel counts")
    out = CorrAccumulator(acc1.c_a, acc1.c_b)
    out.n = acc1.n + acc2.n
    out.sum_a = acc1.sum_a + acc2.sum_a
    out.sum_b = acc1.sum_b + acc2.sum_b
    out.sumsq_a = acc1.sumsq_a + acc2.sumsq_a
    out.sumsq_b = acc1.sumsq_b + acc2.sumsq_b
    out.cross = acc1.cross + acc2.cross
    return out


def channel_stds(acc: CorrAccumulator) -> tuple[np.ndarray, np.ndarray]:
    """Population standard deviations of both streams' channels."""
    if acc.n < 1:
        raise StatsError("no positions accumulated")
    mean_a = acc.sum_a / acc.n
    mean_b = acc.sum_b / acc.n
    var_a = np.maximum(acc.sumsq_a / acc.n - mean_a * mean_a, 0.0)
    var_b = np.maximum(acc.sumsq_b / acc.n - mean_b * mean_b, 0.0)
    return np.sqrt(var_a), np.sqrt(var_b)


def correlation_matrix(acc: CorrAccumulator) -> np.ndarray:
    """Pearson correlation (population statistics) with entries in [-1, 1].

    Degenerate channels (std below 1e-8) yield an all-zero row or column:
    a constant channel carries no alignment evidence and must not inject
    NaNs into the assignment solve.
    """
    if acc.n < 2:
        raise StatsError(f"need at least 2 positions, have {acc.n}")
    mean_a = acc.sum_a / acc.n
    mean_b = acc.sum_b / acc.n
    std_a, std_b = channel_stds(acc)
    cov = acc.cross / acc.n - np.outer(mean_a, mean_b)
    denom = np.outer(np.maximum(std_a, STD_FLOOR), np.maximum(std_b, STD_FLOOR))
    corr = cov / denom
    corr[std_a < STD_FLOOR, :] = 0.0
    corr[:, std_b < STD_FLOOR] = 0.0
    return np.clip(corr, -1.0, 1.0)


_FIELDS = ("sum_a", "sum_b", "sumsq_a", "sumsq_b", "cross")


def to_archive(acc: CorrAccumulator) -> TensorArchive:
    """Persist as f32 tensors (lossy; the in-memory path stays float64)."""
    archive = TensorArchive(metadata={"n": str(acc.n)})
    for name in _FIELDS:
        archive.add(f"acc.{name}", getattr(acc, name))
    return archive


def from_archive(archive: TensorArchive) -> CorrAccumulator:
    try:
        cross = archive.entries["acc.cross"]
        acc = CorrAccumulator(cross.shape[0], cross.shape[1])
        for name in _FIELDS:
            setattr(acc, name, archive.entries[f"acc.{name}"].astype(np.float64))
        acc.n = int(archive.metadata["n"])
    except KeyError as exc:
        raise StatsError(f"archive is not a serialized accumulator: missing {exc}") from exc
    return acc
