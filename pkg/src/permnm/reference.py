"""Grouping baselines and exact oracles.

A block-respecting permutation of input channels only matters through
the grouping it induces: which channels share each group of M columns.
This module counts those groupings exactly, enumerates them for an
exhaustive oracle, and provides a score-maximizing two-stage heuristic
baseline that permutes channels to raise the total retained importance
score (which, notably, can still worsen the output loss).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations, product

import numpy as np

from .numerics import as_matrix, validate_permutation
from .sparsity import NMConfig, magnitude_scores, wanda_scores
from scipy.optimize import linear_sum_assignment

__all__ = [
    "PartitionOracleResult",
    "count_partitions",
    "grouping_from_permutation",
    "heuristic_cp",
    "iter_group_partitions",
    "oracle_best_partition",
    "permutation_from_grouping",
]

_ORACLE_LIMIT = 10_000_000


def count_partitions(c_in: int, m: int) -> int:
    """Number of ways to split c_in channels into unordered groups of m.

    Exact integer c_in! / ((m!)**g * g!) with g = c_in / m.
    """
    if c_in <= 0 or m <= 0:
        raise ValueError(f"need positive sizes, got c_in={c_in}, m={m}")
    if c_in % m != 0:
        raise ValueError(f"group size {m} does not divide {c_in} channels")
    g = c_in // m
    return math.factorial(c_in) // (math.factorial(m) ** g * math.factorial(g))


def iter_group_partitions(n: int, m: int):
    """Yield canonical set partitions of range(n) into groups of size m.

    Each group is an ascending tuple; the first group contains the
    smallest unplaced element, so every partition appears exactly once.
    """
    if n % m != 0:
        raise ValueError(f"group size {m} does not divide {n} channels")

    def rec(remaining: tuple[int, ...]):
        if not remaining:
            yield ()
            return
        anchor = remaining[0]
        rest = remaining[1:]
        for others in combinations(rest, m - 1):
            group = (anchor,) + others
            left = tuple(c for c in rest if c not in others)
            for tail in rec(left):
                yield (group,) + tail

    yield from rec(tuple(range(n)))


def _block_ranges(boundaries, c_in: int) -> list[tuple[int, int]]:
    starts = list(boundaries)
    if not starts or starts[0] != 0:
        raise ValueError(f"block boundaries must start at 0, got {starts}")
    if any(b >= e for b, e in zip(starts, starts[1:] + [c_in])):
        raise ValueError(f"block boundaries must increase within [0, {c_in})")
    return list(zip(starts, starts[1:] + [c_in]))


def grouping_from_permutation(perm, cfg: NMConfig) -> tuple[tuple[int, ...], ...]:
    """Groups of source channels induced by a permutation, each ascending."""
    p = validate_permutation(perm)
    if p.size % cfg.group != 0:
        raise ValueError(
            f"permutation length {p.size} not divisible by group size {cfg.group}"
        )
    groups = p.reshape(-1, cfg.group)
    return tuple(tuple(sorted(int(c) for c in row)) for row in groups)


def permutation_from_grouping(grouping, c_in: int) -> np.ndarray:
    """Permutation laying out each group's channels contiguously, ascending."""
    flat = [c for group in grouping for c in sorted(group)]
    perm = np.asarray(flat, dtype=np.int64)
    return validate_permutation(perm, c_in)


def _topk_sum(values: np.ndarray, keep: int) -> np.ndarray:
    # sum of the `keep` largest entries along the last axis
    if keep >= values.shape[-1]:
        return values.sum(axis=-1)
    part = np.partition(values, values.shape[-1] - keep, axis=-1)
    return part[..., values.shape[-1] - keep :].sum(axis=-1)


def heuristic_cp(s, cfg: NMConfig, boundaries) -> np.ndarray:
    """Two-stage score-maximizing channel permutation (block-respecting).

    Stage 1 ranks each block's channels by total column score and deals
    them round-robin across the block's groups, so top channels stop
    competing for the same retained slots. Stage 2 refines one rank
    stratum at a time: the g-th ranked channels (one per group) are
    reassigned across groups by a linear sum assignment whose benefit
    is the exact retained score with the other strata held fixed.

    The refinement never lowers the block's retained score because the
    incumbent assignment is a feasible candidate. This is one
    documented interpretation of score-maximizing refinement; callers
    can swap in alternatives, the training loop only needs some
    block-respecting permutation to compare against.
    """
    s = as_matrix(s, "s")
    c_in = s.shape[1]
    perm = np.empty(c_in, dtype=np.int64)
    for start, end in _block_ranges(boundaries, c_in):
        size = end - start
        if size % cfg.group != 0:
            raise ValueError(
                f"block [{start}, {end}) size {size} not divisible by {cfg.group}"
            )
        n_groups = size // cfg.group
        block_scores = s[:, start:end]
        totals = block_scores.sum(axis=0)
        ranked = np.argsort(-totals, kind="stable")
        # groups[g] lists local channel indices, one from each stratum
        groups = [list(ranked[g::n_groups]) for g in range(n_groups)]
        for stratum in range(cfg.group):
            candidates = [groups[g][stratum] for g in range(n_groups)]
            benefit = np.zeros((n_groups, n_groups))
            for g in range(n_groups):
                fixed = [c for k, c in enumerate(groups[g]) if k != stratum]
                fixed_scores = block_scores[:, fixed]
                for i, c in enumerate(candidates):
                    merged = np.concatenate(
                        [fixed_scores, block_scores[:, [c]]], axis=1
                    )
                    benefit[i, g] = _topk_sum(merged, cfg.keep).sum()
            rows, cols = linear_sum_assignment(benefit.max() - benefit)
            new_home = np.empty(n_groups, dtype=np.int64)
            new_home[rows] = cols
            for i, c in enumerate(candidates):
                groups[new_home[i]][stratum] = c
        flat = [start + c for group in groups for c in sorted(group)]
        perm[start:end] = flat
    return validate_permutation(perm, c_in)


@dataclass
class PartitionOracleResult:
    """Exhaustive minimum over block-respecting groupings."""

    best_grouping: tuple[tuple[int, ...], ...]
    best_loss: float
    evaluated_count: int


def _resolve_metric(metric):
    if callable(metric):
        return metric
    if metric == "magnitude":
        return lambda w, x: magnitude_scores(w)
    if metric == "wanda":
        return wanda_scores
    raise ValueError(f"unknown metric {metric!r}")


def oracle_best_partition(
    w,
    x,
    metric,
    cfg: NMConfig,
    boundaries,
    loss: str = "cosine",
    max_candidates: int = _ORACLE_LIMIT,
) -> PartitionOracleResult:
    """Exact minimum output loss over every block-respecting grouping.

    Enumerates the cartesian product of each block's canonical
    partitions, derives the mask for each candidate exactly as the
    training forward would, and evaluates the true output loss through
    the same code path. Refuses when the candidate count exceeds
    `max_candidates`. Ties keep the first candidate in enumeration
    order. The result is a true lower bound for any method that picks
    a block-respecting permutation and masks by top scores per group.
    """
    from .permlearn import evaluate_permutation

    w = as_matrix(w, "w")
    x = as_matrix(x, "x")
    scores = _resolve_metric(metric)(w, x)
    ranges = _block_ranges(boundaries, w.shape[1])
    total = 1
    for start, end in ranges:
        total *= count_partitions(end - start, cfg.group)
    if total > max_candidates:
        raise ValueError(
            f"refusing oracle enumeration: {total} candidates exceed "
            f"the limit of {max_candidates}"
        )
    per_block = [
        [
            tuple(tuple(start + c for c in group) for group in part)
            for part in iter_group_partitions(end - start, cfg.group)
        ]
        for start, end in ranges
    ]
    y = x @ w.T
    best_loss = np.inf
    best_grouping: tuple[tuple[int, ...], ...] | None = None
    evaluated = 0
    for combo in product(*per_block):
        grouping = tuple(group for block in combo for group in block)
        perm = permutation_from_grouping(grouping, w.shape[1])
        cand_loss, _, _ = evaluate_permutation(w, x, y, perm, cfg, scores, loss=loss)
        evaluated += 1
        if cand_loss < best_loss:
            best_loss = cand_loss
            best_grouping = grouping
    assert best_grouping is not None
    return PartitionOracleResult(best_grouping, float(best_loss), evaluated)
