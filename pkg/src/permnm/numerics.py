"""Dense matrix primitives shared by every other module.

Matrices are 2-D numpy arrays. float32 is the working precision;
verification code passes float64 arrays and every operation preserves
the dtype it was given. All functions are pure: they never mutate
their arguments.

Randomness comes from numpy's Philox generator, a counter-based
bit generator whose stream for a given seed is identical across
platforms and runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "AdamWState",
    "adamw_init",
    "adamw_step",
    "as_matrix",
    "gather_columns",
    "gather_rows",
    "invert_permutation",
    "make_rng",
    "matmul",
    "softmax",
    "validate_permutation",
]


def make_rng(seed) -> np.random.Generator:
    """Seeded Philox generator; identical seeds reproduce identical streams."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate that `a` is a finite 2-D float array and return it as ndarray."""
    m = np.asarray(a)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.issubdtype(m.dtype, np.floating):
        m = m.astype(np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with shape validation."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: {a.shape} x {b.shape}"
        )
    return a @ b


def validate_permutation(perm, n: int | None = None) -> np.ndarray:
    """Check that `perm` is a bijection of range(len(perm)) and return it as int64."""
    p = np.asarray(perm)
    if p.ndim != 1:
        raise ValueError(f"permutation must be 1-D, got shape {p.shape}")
    if not np.issubdtype(p.dtype, np.integer):
        raise ValueError(f"permutation must be integer, got dtype {p.dtype}")
    p = p.astype(np.int64)
    if n is not None and p.size != n:
        raise ValueError(f"permutation has length {p.size}, expected {n}")
    seen = np.zeros(p.size, dtype=bool)
    if p.size and (p.min() < 0 or p.max() >= p.size):
        raise ValueError("permutation entries out of range")
    seen[p] = True
    if not seen.all():
        raise ValueError("permutation is not a bijection")
    return p


def invert_permutation(perm) -> np.ndarray:
    """Inverse permutation: invert(p)[p[j]] == j."""
    p = validate_permutation(perm)
    inv = np.empty_like(p)
    inv[p] = np.arange(p.size, dtype=np.int64)
    return inv


def gather_columns(w, perm) -> np.ndarray:
    """Reorder columns so that output column j is input column perm[j].

    Index-gather implementation of w @ dense_permutation(perm); the two
    agree exactly because each output entry is a single input entry.
    """
    w = as_matrix(w, "w")
    p = validate_permutation(perm, w.shape[1])
    return w[:, p]


def gather_rows(w, perm) -> np.ndarray:
    """Reorder rows so that input row j lands at output row perm[j].

    Index-gather implementation of dense_permutation(perm) @ w.
    """
    w = as_matrix(w, "w")
    p = validate_permutation(perm, w.shape[0])
    out = np.empty_like(w)
    out[p] = w
    return out


def softmax(v) -> np.ndarray:
    """Numerically stable softmax of a 1-D vector (max-subtracted)."""
    x = np.asarray(v)
    if x.ndim != 1:
        raise ValueError(f"softmax expects a 1-D vector, got shape {x.shape}")
    if x.size == 0:
        raise ValueError("softmax of an empty vector is undefined")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax input contains non-finite entries")
    e = np.exp(x - x.max())
    return e / e.sum()


@dataclass
class AdamWState:
    """First/second moment estimates and step counter, one slot per block."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0


def adamw_init(params: list[np.ndarray]) -> AdamWState:
    """Zeroed optimizer state matching a list of parameter blocks."""
    return AdamWState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        step=0,
    )


def adamw_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[list[np.ndarray], AdamWState]:
    """One decoupled-weight-decay Adam update over parameter blocks.

    Returns fresh parameter arrays and a fresh state; inputs are not
    mutated. The decay term uses the pre-update parameters.
    """
    if len(params) != len(grads):
        raise ValueError(
            f"got {len(params)} parameter blocks but {len(grads)} gradient blocks"
        )
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter block {i}")
    t = state.step + 1
    new_params: list[np.ndarray] = []
    new_m: list[np.ndarray] = []
    new_v: list[np.ndarray] = []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * np.square(g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        update = m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p
        new_params.append(p - lr * update)
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamWState(m=new_m, v=new_v, step=t)
