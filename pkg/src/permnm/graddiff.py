"""Reverse-mode differentiation for a fixed, hand-assembled pipeline.

This is not a general autodiff engine. A Tape is an ordered list of
stages; the value flowing between stages is a dict mapping names to
arrays (or to lists of per-block arrays). Each stage consumes some
keys, produces others, and leaves the rest untouched; by construction
every key has a single producer and a single consumer, so adjoints
never need to accumulate.

Straight-through stages (ste=True) discretize in the forward pass and
pass adjoints through unchanged in the backward pass.
"""

from __future__ import annotations

from typing import Any, Callable

import numpy as np

__all__ = [
    "Stage",
    "Tape",
    "TapeError",
    "finite_diff_check",
    "run_backward",
    "run_forward",
]

Value = dict[str, Any]


class TapeError(RuntimeError):
    pass


class Stage:
    """One pipeline step.

    forward: value dict -> (value dict, cache)
    pullback: (adjoint dict, cache) -> (adjoint dict, param grads or None)
    """

    def __init__(
        self,
        name: str,
        forward: Callable[[Value], tuple[Value, Any]],
        pullback: Callable[[Value, Any], tuple[Value, Any]],
        ste: bool = False,
    ):
        self.name = name
        self._forward = forward
        self._pullback = pullback
        self.ste = ste

    def forward(self, value: Value) -> tuple[Value, Any]:
        return self._forward(value)

    def pullback(self, adjoint: Value, cache: Any) -> tuple[Value, Any]:
        return self._pullback(adjoint, cache)

    def __repr__(self):
        return f"Stage({self.name!r}, ste={self.ste})"


class Tape:
    """Ordered stages plus the caches of the most recent forward pass."""

    def __init__(self, stages: list[Stage]):
        names = [s.name for s in stages]
        if len(set(names)) != len(names):
            raise TapeError(f"duplicate stage names: {names}")
        self.stages = list(stages)
        self.caches: list | None = None

    def run_forward(self, value: Value) -> Value:
        caches = []
        current = dict(value)
        prev_name = "<input>"
        for stage in self.stages:
            try:
                current, cache = stage.forward(current)
            except (KeyError, ValueError) as e:
                raise TapeError(
                    f"stage '{stage.name}' rejected the output of "
                    f"'{prev_name}': {e}"
                ) from e
            caches.append(cache)
            prev_name = stage.name
        self.caches = caches
        return current

    def run_backward(self, output_adjoint: Value) -> tuple[Value, dict[str, Any]]:
        if self.caches is None:
            raise TapeError("run_backward called before run_forward")
        adjoint = dict(output_adjoint)
        param_grads: dict[str, Any] = {}
        for stage, cache in zip(reversed(self.stages), reversed(self.caches)):
            adjoint, grads = stage.pullback(adjoint, cache)
            if grads is not None:
                param_grads[stage.name] = grads
        return adjoint, param_grads


def run_forward(tape: Tape, value: Value) -> Value:
    """Run every stage in order; stores caches on the tape."""
    return tape.run_forward(value)


def run_backward(tape: Tape, output_adjoint: Value) -> tuple[Value, dict[str, Any]]:
    """Run pullbacks in reverse order using the stored caches.

    Returns (input adjoint, {stage name: parameter grads}).
    """
    return tape.run_backward(output_adjoint)


def finite_diff_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    point: np.ndarray,
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between f's analytic gradient and central differences.

    `f` maps a 1-D float64 parameter vector to (scalar value, gradient
    vector). The relative error at each coordinate is
    |analytic - numeric| / (|numeric| + 1e-12).
    """
    p = np.asarray(point, dtype=np.float64).ravel()
    _, analytic = f(p)
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if analytic.size != p.size:
        raise ValueError(
            f"gradient has {analytic.size} entries for {p.size} parameters"
        )
    numeric = np.empty_like(p)
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = epsilon
        hi, _ = f(p + e)
        lo, _ = f(p - e)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError(
                f"non-finite value while probing coordinate {i}"
            )
        numeric[i] = (hi - lo) / (2.0 * epsilon)
    if not np.all(np.isfinite(analytic)):
        raise FloatingPointError("analytic gradient contains non-finite entries")
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-12)))
