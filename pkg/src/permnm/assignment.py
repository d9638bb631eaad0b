"""Hardening soft permutations into exact ones.

A soft doubly stochastic matrix p_hat is rounded to the closest hard
permutation by solving a linear sum assignment: maximize
sum_j p_hat[perm[j], j], i.e. the trace of P^T @ p_hat over permutation
matrices P. Permutations use the index convention perm[j] = source
index mapped to position j, so dense_permutation(perm) has ones at
(perm[j], j) and w @ dense_permutation(perm) reorders columns.
"""

from __future__ import annotations

from itertools import islice, permutations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .numerics import as_matrix, validate_permutation

__all__ = [
    "dense_permutation",
    "exhaustive_lsa",
    "indices_from_dense",
    "perm_objective",
    "solve_lsa",
]

_EXHAUSTIVE_LIMIT = 10
_CHUNK = 100_000


def _square(p_hat) -> np.ndarray:
    p = as_matrix(p_hat, "p_hat")
    if p.shape[0] != p.shape[1]:
        raise ValueError(f"p_hat must be square, got shape {p.shape}")
    if p.shape[0] == 0:
        raise ValueError("p_hat must be non-empty")
    return p


def perm_objective(p_hat, perm) -> float:
    """Assignment objective sum_j p_hat[perm[j], j] for a given permutation."""
    p = _square(p_hat)
    q = validate_permutation(perm, p.shape[0])
    return float(p[q, np.arange(q.size)].sum())


def solve_lsa(p_hat) -> tuple[np.ndarray, float]:
    """Best hard permutation for a soft one, with its objective value.

    Maximization is run as minimization of (max_entry - p_hat) so a
    standard minimizing solver applies. On a totally tied input the
    solver's scan order yields the identity permutation.
    """
    p = _square(p_hat)
    cost = p.max() - p
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(p.shape[0], dtype=np.int64)
    perm[cols] = rows
    return perm, perm_objective(p, perm)


def _batched(iterable, size):
    it = iter(iterable)
    while chunk := tuple(islice(it, size)):
        yield chunk


def exhaustive_lsa(p_hat) -> tuple[np.ndarray, float]:
    """Brute-force assignment maximizer over all n! permutations (n <= 10).

    Ties resolve to the lexicographically smallest permutation, matching
    solve_lsa's identity result on totally tied inputs.
    """
    p = _square(p_hat)
    n = p.shape[0]
    if n > _EXHAUSTIVE_LIMIT:
        raise ValueError(
            f"refusing exhaustive enumeration for n={n}: "
            f"limit is n <= {_EXHAUSTIVE_LIMIT} ({n}! permutations)"
        )
    cols = np.arange(n)
    best_perm: np.ndarray | None = None
    best_obj = -np.inf
    for chunk in _batched(permutations(range(n)), _CHUNK):
        arr = np.asarray(chunk, dtype=np.int64)
        objs = p[arr, cols].sum(axis=1)
        i = int(np.argmax(objs))
        if objs[i] > best_obj:
            best_obj = float(objs[i])
            best_perm = arr[i].copy()
    assert best_perm is not None
    return best_perm, perm_objective(p, best_perm)


def dense_permutation(perm, dtype=np.float64) -> np.ndarray:
    """Dense matrix form of an index permutation: ones at (perm[j], j)."""
    p = validate_permutation(perm)
    out = np.zeros((p.size, p.size), dtype=dtype)
    out[p, np.arange(p.size)] = 1
    return out


def indices_from_dense(mat) -> np.ndarray:
    """Recover index form from a dense permutation matrix."""
    m = as_matrix(mat, "mat")
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"permutation matrix must be square, got {m.shape}")
    perm = np.argmax(m, axis=0).astype(np.int64)
    expect = dense_permutation(perm, dtype=m.dtype)
    if not np.array_equal(expect, m):
        raise ValueError("matrix is not a permutation matrix")
    return perm
