"""Doubly stochastic relaxation of permutations.

A square logit matrix is mapped through exp and then alternately
row- and column-normalized. Truncated at a fixed iteration count the
output is approximately doubly stochastic: column sums are exact right
after a column step, row sums converge geometrically. Dividing the
logits by a temperature before normalization controls hardness; as the
temperature shrinks the output approaches a hard permutation matrix.

Besides the plain forward functions this module exposes forward/vjp
pairs for every step so a reverse-mode tape can differentiate through
the unrolled iterations exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .numerics import as_matrix

__all__ = [
    "TemperatureSchedule",
    "col_normalize",
    "row_normalize",
    "sinkhorn_normalize",
    "soft_permutation",
    "tau_at",
]


def _square(x, name: str = "x") -> np.ndarray:
    m = as_matrix(x, name)
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    if m.shape[0] == 0:
        raise ValueError(f"{name} must be non-empty")
    return m


def row_normalize(a) -> np.ndarray:
    """Divide each row by its sum. Rows must have positive sums."""
    out, _ = row_normalize_fwd(as_matrix(a, "a"))
    return out


def col_normalize(a) -> np.ndarray:
    """Divide each column by its sum. Columns must have positive sums."""
    out, _ = col_normalize_fwd(as_matrix(a, "a"))
    return out


def sinkhorn_normalize(x, iterations: int) -> np.ndarray:
    """exp followed by `iterations` rounds of row then column normalization.

    iterations=0 returns exp(x) itself. For iterations >= 1 the global
    max is subtracted before exp; the shift is a positive scaling that
    cancels at the first row normalization, so values are unchanged
    while overflow is avoided.
    """
    x = _square(x)
    if iterations < 0:
        raise ValueError(f"iterations must be >= 0, got {iterations}")
    if iterations == 0:
        with np.errstate(over="ignore"):
            out = np.exp(x)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(
                "exp overflow in sinkhorn_normalize(iterations=0); "
                "scale the input logits down before normalizing"
            )
        return out
    a, _ = exp_guarded_fwd(x)
    for _ in range(iterations):
        a, _ = row_normalize_fwd(a)
        a, _ = col_normalize_fwd(a)
    return a


def soft_permutation(w_p, tau: float, iterations: int, noise=None) -> np.ndarray:
    """Soft permutation from logits: sinkhorn_normalize(w_p / tau).

    `noise` (same shape as w_p, added to the scaled logits) is a hook
    for stochastic relaxations; it defaults to off.
    """
    w = _square(w_p, "w_p")
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    scaled = w / tau
    if noise is not None:
        scaled = scaled + as_matrix(noise, "noise")
    return sinkhorn_normalize(scaled, iterations)


@dataclass(frozen=True)
class TemperatureSchedule:
    """Linear temperature decay from tau_start to tau_end over total_steps."""

    tau_start: float = 1.0
    tau_end: float = 0.1
    total_steps: int = 50

    def __post_init__(self):
        if not (self.tau_start > 0 and self.tau_end > 0):
            raise ValueError("temperatures must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def tau_at(schedule: TemperatureSchedule, step: int) -> float:
    """Temperature at a step; tau_start at 0, tau_end at total_steps.

    Out-of-range steps clamp to the nearest endpoint with a warning.
    """
    if step < 0 or step > schedule.total_steps:
        warnings.warn(
            f"step {step} outside [0, {schedule.total_steps}]; clamping",
            stacklevel=2,
        )
        step = min(max(step, 0), schedule.total_steps)
    frac = step / schedule.total_steps
    return float(schedule.tau_start + (schedule.tau_end - schedule.tau_start) * frac)


# Forward/vjp pairs. Each forward returns (output, cache); each vjp maps
# the output adjoint back to the input adjoint using only the cache.


def exp_guarded_fwd(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    """exp(x - max(x)) with the argmax cached for the exact pullback."""
    idx = np.unravel_index(int(np.argmax(x)), x.shape)
    out = np.exp(x - x[idx])
    return out, (out, idx)


def exp_guarded_vjp(cache: tuple, dout: np.ndarray) -> np.ndarray:
    # d/dx exp(x - m(x)) has an extra -exp(x - m) term against the argmax
    # coordinate; including it keeps the pullback exact in isolation.
    out, idx = cache
    dx = out * dout
    dx[idx] -= dx.sum()
    return dx


def row_normalize_fwd(a: np.ndarray) -> tuple[np.ndarray, tuple]:
    s = a.sum(axis=1, keepdims=True)
    if not np.all(s > 0):
        raise FloatingPointError(
            "row sum not positive during normalization; "
            "scale the input logits down before normalizing"
        )
    out = a / s
    return out, (out, s)


def row_normalize_vjp(cache: tuple, dout: np.ndarray) -> np.ndarray:
    out, s = cache
    inner = (dout * out).sum(axis=1, keepdims=True)
    return (dout - inner) / s


def col_normalize_fwd(a: np.ndarray) -> tuple[np.ndarray, tuple]:
    s = a.sum(axis=0, keepdims=True)
    if not np.all(s > 0):
        raise FloatingPointError(
            "column sum not positive during normalization; "
            "scale the input logits down before normalizing"
        )
    out = a / s
    return out, (out, s)


def col_normalize_vjp(cache: tuple, dout: np.ndarray) -> np.ndarray:
    out, s = cache
    inner = (dout * out).sum(axis=0, keepdims=True)
    return (dout - inner) / s


def sinkhorn_fwd(x: np.ndarray, iterations: int) -> tuple[np.ndarray, list]:
    """Guarded exp plus unrolled iterations, caching every step."""
    if iterations < 1:
        raise ValueError("sinkhorn_fwd requires iterations >= 1")
    a, exp_cache = exp_guarded_fwd(x)
    caches: list = [exp_cache]
    for _ in range(iterations):
        a, rc = row_normalize_fwd(a)
        a, cc = col_normalize_fwd(a)
        caches.append((rc, cc))
    return a, caches


def sinkhorn_vjp(caches: list, dout: np.ndarray) -> np.ndarray:
    da = dout
    for rc, cc in reversed(caches[1:]):
        da = col_normalize_vjp(cc, da)
        da = row_normalize_vjp(rc, da)
    return exp_guarded_vjp(caches[0], da)
