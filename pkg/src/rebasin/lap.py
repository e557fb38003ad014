"""Exact maximization linear assignment with deterministic tie-breaking.

solve_max wraps scipy's O(n^3) shortest-augmenting-path solver (the same
routine used for per-layer channel matching at full scale) and then
canonicalizes ties so that equal-objective optima always come out as the
lexicographically smallest permutation. brute_force is the independent
test oracle; it never calls scipy.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import linear_sum_assignment

TIE_EPS = 1e-12


class LapError(ValueError):
    pass


@dataclass(frozen=True)
class Assignment:
    """perm[j] is the A-side row matched to B-side column j.

    Equivalently: B's channel j moves to slot perm[j] when the assignment
    is applied as an alignment.
    """

    perm: tuple[int, ...]
    total: float

    @property
    def n(self) -> int:
        return len(self.perm)


def _checked(score: np.ndarray) -> np.ndarray:
    score = np.asarray(score, dtype=np.float64)
    if score.ndim != 2 or score.shape[0] != score.shape[1]:
        raise LapError(f"score matrix must be square, got shape {score.shape}")
    if not np.isfinite(score).all():
        raise LapError("score matrix contains non-finite entries")
    return score


def _total(score: np.ndarray, perm: np.ndarray) -> float:
    return float(score[perm, np.arange(len(perm))].sum())


def _canonicalize(score: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Reduce to the lexicographically smallest equal-objective permutation.

    Swapping the rows assigned to two columns is gain-free when
    score[p_j,j] + score[p_k,k] == score[p_k,j] + score[p_j,k]; any such
    swap that lowers lexicographic order is applied until a fixed point.
    """
    perm = perm.copy()
    n = len(perm)
    changed = True
    while changed:
        changed = False
        for j in range(n):
            for k in range(j + 1, n):
                if perm[k] >= perm[j]:
                    continue
                keep = score[perm[j], j] + score[perm[k], k]
                swap = score[perm[k], j] + score[perm[j], k]
                if abs(keep - swap) <= TIE_EPS:
                    perm[j], perm[k] = perm[k], perm[j]
                    changed = True
    return perm


def solve_max(score: np.ndarray) -> Assignment:
    """Globally maximize sum_j score[p[j], j] over permutations p."""
    score = _checked(score)
    row_ind, col_ind = linear_sum_assignment(score, maximize=True)
    perm = np.empty(len(row_ind), dtype=np.int64)
    perm[col_ind] = row_ind
    perm = _canonicalize(score, perm)
    return Assignment(tuple(int(i) for i in perm), _total(score, perm))


@lru_cache(maxsize=None)
def _all_perms(n: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n))), dtype=np.int64)


def brute_force(score: np.ndarray) -> Assignment:
    """Exhaustive maximum for n <= 8; ties resolve to the lex-smallest p."""
    score = _checked(score)
    n = score.shape[0]
    if n > 8:
        raise LapError(f"brute_force is limited to n <= 8, got {n}")
    perms = _all_perms(n)
    totals = score[perms, np.arange(n)].sum(axis=1)
    best = totals.max()
    # permutations() emits tuples in lexicographic order, so the first
    # index within the tie tolerance is the canonical winner
    idx = int(np.nonzero(totals >= best - TIE_EPS)[0][0])
    perm = perms[idx]
    return Assignment(tuple(int(i) for i in perm), _total(score, perm))
