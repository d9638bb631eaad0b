"""Learnable block-wise channel permutation for N:M pruning.

Each block of input channels owns a square logit matrix. A forward
pass scales the logits by a temperature, relaxes them to a doubly
stochastic matrix, hardens that to an exact permutation, permutes the
importance scores, selects the N:M mask from the permuted scores, and
compares the masked layer output against the dense output with a
cosine loss. Hardening and mask selection are straight-through
stages: the forward is hard, the backward treats them as the identity
(hardening) and as the per-group softmax surrogate (masking), so
gradients reach the logits.

Reported losses are always hard evaluations (hard permutation, hard
mask) through one shared code path, `evaluate_permutation`, which
canonicalizes the permutation (each group's sources ascending) so that
methods inducing the same grouping report bitwise-identical losses.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .assignment import solve_lsa
from .graddiff import Stage, Tape
from .numerics import (
    adamw_init,
    adamw_step,
    as_matrix,
    gather_columns,
    gather_rows,
    invert_permutation,
    validate_permutation,
)
from .reference import heuristic_cp
from .sinkhorn import (
    TemperatureSchedule,
    col_normalize_fwd,
    col_normalize_vjp,
    exp_guarded_fwd,
    exp_guarded_vjp,
    row_normalize_fwd,
    row_normalize_vjp,
    tau_at,
)
from .sparsity import (
    CompressedNM,
    NMConfig,
    compress_nm,
    magnitude_scores,
    nm_mask,
    retained_score,
    soft_mask,
    validate_nm_mask,
    wanda_scores,
)

__all__ = [
    "BlockPermutationParams",
    "Model",
    "ModelLayer",
    "PermutationSolution",
    "TrainConfig",
    "block_boundaries",
    "build_layer_stages",
    "canonicalize_permutation",
    "evaluate_permutation",
    "fold_and_export",
    "folded_forward",
    "forward_sparse",
    "init_params",
    "loss_cosine",
    "loss_mse",
    "metric_scores",
    "soft_surrogate_loss_fn",
    "sparse_forward",
    "train",
]

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# parameters and configuration


@dataclass
class BlockPermutationParams:
    """Per-block permutation logits over contiguous channel blocks.

    `boundaries` holds each block's start offset; block i covers
    [boundaries[i], boundaries[i] + blocks[i].shape[0]). Together the
    blocks partition [0, c_in), so the parameter count for a uniform
    block size B over c_in channels is c_in * B.
    """

    blocks: list[np.ndarray]
    boundaries: list[int]

    def __post_init__(self):
        if len(self.blocks) != len(self.boundaries):
            raise ValueError(
                f"{len(self.blocks)} blocks but {len(self.boundaries)} boundaries"
            )
        if not self.blocks:
            raise ValueError("need at least one block")
        offset = 0
        for i, (b, start) in enumerate(zip(self.blocks, self.boundaries)):
            if b.ndim != 2 or b.shape[0] != b.shape[1]:
                raise ValueError(f"block {i} must be square, got shape {b.shape}")
            if start != offset:
                raise ValueError(
                    f"block {i} starts at {start}, expected {offset}"
                )
            offset += b.shape[0]

    @property
    def c_in(self) -> int:
        return self.boundaries[-1] + self.blocks[-1].shape[0]

    def ranges(self) -> list[tuple[int, int]]:
        return [
            (start, start + b.shape[0])
            for start, b in zip(self.boundaries, self.blocks)
        ]

    def parameter_count(self) -> int:
        return sum(b.size for b in self.blocks)


def block_boundaries(c_in: int, block_size: int, group: int | None = None) -> list[int]:
    """Start offsets of contiguous blocks; the last block may be ragged.

    When `group` is given, every block size must be divisible by it so
    no N:M group straddles a block edge.
    """
    if block_size < 1:
        raise ValueError(f"block_size must be >= 1, got {block_size}")
    if block_size > c_in:
        raise ValueError(
            f"block size {block_size} exceeds input width {c_in}"
        )
    starts = list(range(0, c_in, block_size))
    if group is not None:
        for start in starts:
            size = min(block_size, c_in - start)
            if size % group != 0:
                raise ValueError(
                    f"group size {group} must divide block size {size} "
                    f"(block at offset {start})"
                )
    return starts


def init_params(
    c_in: int,
    block_size: int,
    rng: np.random.Generator,
    sigma: float = 0.01,
    dtype=np.float32,
) -> BlockPermutationParams:
    """Gaussian-initialized logits (std `sigma`), one square block per chunk."""
    starts = block_boundaries(c_in, block_size)
    blocks = []
    for start in starts:
        size = min(block_size, c_in - start)
        blocks.append(sigma * rng.standard_normal((size, size)).astype(dtype))
    return BlockPermutationParams(blocks=blocks, boundaries=starts)


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults follow the reference recipe."""

    learning_rate: float = 1e-3
    steps: int = 50
    sinkhorn_iters: int = 5
    tau_start: float = 1.0
    tau_end: float = 0.1
    block_size: int = 64
    metric: str = "wanda"
    mode: str = "layerwise"
    seed: int = 0
    partial_layers: str | None = None
    score_grad: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.sinkhorn_iters < 0:
            raise ValueError("sinkhorn_iters must be >= 0")
        if self.mode not in ("layerwise", "endtoend"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.metric not in ("magnitude", "wanda"):
            raise ValueError(f"unknown metric {self.metric!r}")


@dataclass
class PermutationSolution:
    """Best hard permutation found for one layer, with its mask and losses.

    `permutation` is canonical (each group's source channels ascend) and
    `mask` is in permuted column order. `achieved_loss` is a hard
    evaluation and never exceeds baseline_losses['identity'] because
    best-tracking is seeded with the identity baseline.
    """

    permutation: np.ndarray
    mask: np.ndarray
    boundaries: list[int]
    nm: NMConfig
    achieved_loss: float
    retained_score: float
    baseline_losses: dict[str, float]
    trained: bool = True
    note: str | None = None


# ---------------------------------------------------------------------------
# model container


@dataclass
class ModelLayer:
    name: str
    weight: np.ndarray
    predecessor: str | None = None


@dataclass
class Model:
    """A chain of linear layers; layer l consumes layer l-1's output."""

    layers: list[ModelLayer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model has no layers")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names: {names}")
        prev: ModelLayer | None = None
        for layer in self.layers:
            layer.weight = as_matrix(layer.weight, f"weight of {layer.name}")
            if prev is None:
                if layer.predecessor is not None:
                    raise ValueError(
                        f"first layer {layer.name} must mark the model input "
                        f"(predecessor None), got {layer.predecessor!r}"
                    )
            else:
                if layer.predecessor != prev.name:
                    raise ValueError(
                        f"layer {layer.name} must link its predecessor "
                        f"{prev.name!r}, got {layer.predecessor!r}"
                    )
                if layer.weight.shape[1] != prev.weight.shape[0]:
                    raise ValueError(
                        f"layer {layer.name} expects {layer.weight.shape[1]} "
                        f"input channels but {prev.name} emits "
                        f"{prev.weight.shape[0]}"
                    )
            prev = layer

    def layer(self, name: str) -> ModelLayer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(f"no layer named {name!r}")

    def forward(self, x) -> np.ndarray:
        z = as_matrix(x, "x")
        for layer in self.layers:
            z = z @ layer.weight.T
        return z

    def activations(self, x) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Dense per-layer (input, output) pairs for calibration input."""
        z = as_matrix(x, "x")
        acts: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for layer in self.layers:
            out = z @ layer.weight.T
            acts[layer.name] = (z, out)
            z = out
        return acts


def metric_scores(metric: str, w: np.ndarray, x: np.ndarray) -> np.ndarray:
    if metric == "magnitude":
        return magnitude_scores(w)
    if metric == "wanda":
        return wanda_scores(w, x)
    raise ValueError(f"unknown metric {metric!r}")


# ---------------------------------------------------------------------------
# losses


def loss_cosine_fwd(y: np.ndarray, y_tilde: np.ndarray) -> tuple[float, tuple]:
    y = as_matrix(y, "y")
    y_tilde = np.asarray(y_tilde)
    if y_tilde.shape != y.shape:
        raise ValueError(
            f"y_tilde shape {y_tilde.shape} != y shape {y.shape}"
        )
    na = np.sqrt(np.square(y).sum(axis=1))
    nb = np.sqrt(np.square(y_tilde).sum(axis=1))
    if not np.any(na > 0):
        raise ValueError("y must have at least one nonzero row")
    valid = (na > 0) & (nb > 0)
    dot = (y * y_tilde).sum(axis=1)
    cos = np.zeros_like(dot)
    cos[valid] = dot[valid] / (na[valid] * nb[valid])
    loss = float(np.mean(1.0 - cos))
    return loss, (y, y_tilde, na, nb, dot, valid)


def loss_cosine_vjp(cache: tuple, dloss: float) -> np.ndarray:
    # rows with zero norm contribute a constant 1, hence zero gradient
    y, y_tilde, na, nb, dot, valid = cache
    d = np.zeros_like(y_tilde)
    v = valid
    scale = na[v] * nb[v]
    d[v] = -(y[v] / scale[:, None] - (dot[v] / (scale * np.square(nb[v])))[:, None] * y_tilde[v])
    return d * (dloss / y.shape[0])


def loss_cosine(y, y_tilde) -> float:
    """Mean over sample rows of 1 - cosine similarity; in [0, 2].

    Rows whose dense or sparse output has zero norm contribute 1.
    """
    loss, _ = loss_cosine_fwd(y, np.asarray(y_tilde))
    return loss


def loss_mse(y, y_tilde) -> float:
    """Mean squared error over all entries."""
    y = as_matrix(y, "y")
    y_tilde = np.asarray(y_tilde)
    if y_tilde.shape != y.shape:
        raise ValueError(f"y_tilde shape {y_tilde.shape} != y shape {y.shape}")
    return float(np.mean(np.square(y - y_tilde)))


_LOSSES = {"cosine": loss_cosine, "mse": loss_mse}


# ---------------------------------------------------------------------------
# canonical hard evaluation (shared by training, baselines, oracle, reports)


def canonicalize_permutation(perm, cfg: NMConfig) -> np.ndarray:
    """Unique representative of a permutation's grouping.

    Sorts each group's source channels ascending, then orders groups by
    their smallest element. The induced grouping (hence mask pattern and
    every masked sum) is unchanged, but any two permutations with the
    same grouping map to the same array, so their evaluations agree
    bitwise. Groups never straddle block boundaries, and blocks hold
    consecutive channel ranges, so the group sort preserves
    block-respecting order.
    """
    p = validate_permutation(perm)
    if p.size % cfg.group != 0:
        raise ValueError(
            f"permutation length {p.size} not divisible by group size {cfg.group}"
        )
    g = np.sort(p.reshape(-1, cfg.group), axis=1)
    return g[np.argsort(g[:, 0], kind="stable")].reshape(-1)


def evaluate_permutation(
    w,
    x,
    y,
    perm,
    cfg: NMConfig,
    scores,
    loss: str = "cosine",
) -> tuple[float, np.ndarray, float]:
    """Hard loss, mask and retained score for a permutation's grouping.

    The permutation is canonicalized first, so any two permutations
    inducing the same grouping produce bitwise-identical results.
    Returns (loss, mask in permuted order, retained score).
    """
    w = as_matrix(w, "w")
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    scores = as_matrix(scores, "scores")
    p = canonicalize_permutation(perm, cfg)
    s_hat = scores[:, p]
    mask = nm_mask(s_hat, cfg)
    y_tilde = x[:, p] @ (w[:, p] * mask).T
    loss_fn = _LOSSES.get(loss)
    if loss_fn is None:
        raise ValueError(f"unknown loss {loss!r}")
    return loss_fn(y, y_tilde), mask, retained_score(s_hat, mask)


# ---------------------------------------------------------------------------
# pipeline stages


def _param_source_stage(prefix: str, blocks: list[np.ndarray]) -> Stage:
    def fwd(value):
        out = dict(value)
        out[prefix + "logits"] = list(blocks)
        return out, None

    def bwd(adjoint, cache):
        adj = dict(adjoint)
        grads = adj.pop(prefix + "logits")
        return adj, grads

    return Stage(prefix + "params", fwd, bwd)


def _scale_stage(prefix: str, tau: float) -> Stage:
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")

    def fwd(value):
        out = dict(value)
        logits = out.pop(prefix + "logits")
        out[prefix + "p_soft"] = [b / tau for b in logits]
        return out, None

    def bwd(adjoint, cache):
        adj = dict(adjoint)
        d = adj.pop(prefix + "p_soft")
        adj[prefix + "logits"] = [g / tau for g in d]
        return adj, None

    return Stage(prefix + "scale", fwd, bwd)


def _exp_stage(prefix: str) -> Stage:
    def fwd(value):
        out = dict(value)
        blocks = out.pop(prefix + "p_soft")
        results, caches = [], []
        for b in blocks:
            r, c = exp_guarded_fwd(b)
            results.append(r)
            caches.append(c)
        out[prefix + "p_soft"] = results
        return out, caches

    def bwd(adjoint, caches):
        adj = dict(adjoint)
        d = adj.pop(prefix + "p_soft")
        adj[prefix + "p_soft"] = [exp_guarded_vjp(c, g) for c, g in zip(caches, d)]
        return adj, None

    return Stage(prefix + "exp", fwd, bwd)


def _sinkhorn_iter_stage(prefix: str, k: int) -> Stage:
    def fwd(value):
        out = dict(value)
        blocks = out.pop(prefix + "p_soft")
        results, caches = [], []
        for b in blocks:
            r, rc = row_normalize_fwd(b)
            c, cc = col_normalize_fwd(r)
            results.append(c)
            caches.append((rc, cc))
        out[prefix + "p_soft"] = results
        return out, caches

    def bwd(adjoint, caches):
        adj = dict(adjoint)
        d = adj.pop(prefix + "p_soft")
        grads = []
        for (rc, cc), g in zip(caches, d):
            g = col_normalize_vjp(cc, g)
            g = row_normalize_vjp(rc, g)
            grads.append(g)
        adj[prefix + "p_soft"] = grads
        return adj, None

    return Stage(f"{prefix}sinkhorn[{k}]", fwd, bwd)


def _harden_stage(prefix: str, starts: list[int], soft: bool) -> Stage:
    def fwd(value):
        out = dict(value)
        blocks = out.pop(prefix + "p_soft")
        if soft:
            out[prefix + "perm"] = blocks
            return out, None
        block_perms = [solve_lsa(b)[0] for b in blocks]
        out[prefix + "perm"] = np.concatenate(
            [start + bp for start, bp in zip(starts, block_perms)]
        )
        return out, block_perms

    def bwd(adjoint, cache):
        # straight-through: the permutation's adjoint (a list of dense
        # per-block matrices) passes to the soft permutation unchanged
        adj = dict(adjoint)
        adj[prefix + "p_soft"] = adj.pop(prefix + "perm")
        return adj, None

    return Stage(prefix + "harden", fwd, bwd, ste=not soft)


def _permute_apply_stage(
    prefix: str,
    w: np.ndarray,
    scores: np.ndarray,
    ranges: list[tuple[int, int]],
    score_grad: bool,
) -> Stage:
    def fwd(value):
        out = dict(value)
        x = out.pop("x")
        perm = out.pop(prefix + "perm")
        if isinstance(perm, np.ndarray):
            s_hat = scores[:, perm]
            w_hat = w[:, perm]
            x_hat = x[:, perm]
        else:
            s_hat = np.empty_like(scores)
            w_hat = np.empty_like(w)
            x_hat = np.empty_like(x)
            for (start, end), p in zip(ranges, perm):
                s_hat[:, start:end] = scores[:, start:end] @ p
                w_hat[:, start:end] = w[:, start:end] @ p
                x_hat[:, start:end] = x[:, start:end] @ p
        out[prefix + "s_hat"] = s_hat
        out[prefix + "w_hat"] = w_hat
        out[prefix + "x_hat"] = x_hat
        return out, (perm, x)

    def bwd(adjoint, cache):
        perm, x = cache
        adj = dict(adjoint)
        ds_hat = adj.pop(prefix + "s_hat")
        dw_hat = adj.pop(prefix + "w_hat")
        dx_hat = adj.pop(prefix + "x_hat")
        d_blocks = []
        for start, end in ranges:
            dp = (
                w[:, start:end].T @ dw_hat[:, start:end]
                + x[:, start:end].T @ dx_hat[:, start:end]
            )
            if score_grad:
                dp = dp + scores[:, start:end].T @ ds_hat[:, start:end]
            d_blocks.append(dp)
        dx = np.zeros_like(x)
        if isinstance(perm, np.ndarray):
            dx[:, perm] = dx_hat
        else:
            for (start, end), p in zip(ranges, perm):
                dx[:, start:end] = dx_hat[:, start:end] @ p.T
        adj[prefix + "perm"] = d_blocks
        adj["x"] = dx
        return adj, None

    return Stage(prefix + "permute", fwd, bwd)


def _group_softmax_stage(prefix: str, cfg: NMConfig) -> Stage:
    def fwd(value):
        out = dict(value)
        s_hat = out.pop(prefix + "s_hat")
        m = soft_mask(s_hat, cfg)
        out[prefix + "m_soft"] = m
        return out, m

    def bwd(adjoint, m):
        adj = dict(adjoint)
        dm = adj.pop(prefix + "m_soft")
        rows, cols = m.shape
        p = m.reshape(rows, -1, cfg.group)
        g = dm.reshape(rows, -1, cfg.group)
        inner = (g * p).sum(axis=-1, keepdims=True)
        adj[prefix + "s_hat"] = (p * (g - inner)).reshape(rows, cols)
        return adj, None

    return Stage(prefix + "group_softmax", fwd, bwd)


def _mask_stage(prefix: str, cfg: NMConfig, soft: bool) -> Stage:
    def fwd(value):
        out = dict(value)
        m_soft = out.pop(prefix + "m_soft")
        if soft:
            out[prefix + "mask"] = m_soft
        else:
            # the per-group softmax is monotone, so selecting on the soft
            # mask picks the same entries as selecting on permuted scores
            mask = nm_mask(m_soft, cfg)
            if __debug__:
                validate_nm_mask(mask, cfg)
            out[prefix + "mask"] = mask
        return out, None

    def bwd(adjoint, cache):
        adj = dict(adjoint)
        adj[prefix + "m_soft"] = adj.pop(prefix + "mask")
        return adj, None

    return Stage(prefix + "mask", fwd, bwd, ste=not soft)


def _masked_matvec_stage(prefix: str) -> Stage:
    def fwd(value):
        out = dict(value)
        mask = out.pop(prefix + "mask")
        w_hat = out.pop(prefix + "w_hat")
        x_hat = out.pop(prefix + "x_hat")
        u = w_hat * mask
        out["x"] = x_hat @ u.T
        return out, (mask, w_hat, x_hat, u)

    def bwd(adjoint, cache):
        mask, w_hat, x_hat, u = cache
        adj = dict(adjoint)
        dy = adj.pop("x")
        du = dy.T @ x_hat
        adj[prefix + "mask"] = du * w_hat
        adj[prefix + "w_hat"] = du * mask
        adj[prefix + "x_hat"] = dy @ u
        return adj, None

    return Stage(prefix + "matvec", fwd, bwd)


def _loss_stage(y: np.ndarray) -> Stage:
    def fwd(value):
        out = dict(value)
        y_tilde = out.pop("x")
        loss, cache = loss_cosine_fwd(y, y_tilde)
        out["loss"] = loss
        return out, cache

    def bwd(adjoint, cache):
        adj = dict(adjoint)
        dloss = adj.pop("loss")
        adj["x"] = loss_cosine_vjp(cache, float(dloss))
        return adj, None

    return Stage("loss", fwd, bwd)


def _frozen_layer_stage(prefix: str, w: np.ndarray, perm: np.ndarray, mask: np.ndarray) -> Stage:
    """Apply a fixed permutation and mask; differentiable only in the input."""
    u = w[:, perm] * mask

    def fwd(value):
        out = dict(value)
        x = out.pop("x")
        out["x"] = x[:, perm] @ u.T
        return out, None

    def bwd(adjoint, cache):
        adj = dict(adjoint)
        dy = adj.pop("x")
        dx_hat = dy @ u
        dx = np.zeros((dy.shape[0], w.shape[1]), dtype=dx_hat.dtype)
        dx[:, perm] = dx_hat
        adj["x"] = dx
        return adj, None

    return Stage(prefix + "frozen", fwd, bwd)


def build_layer_stages(
    prefix: str,
    w: np.ndarray,
    scores: np.ndarray,
    blocks: list[np.ndarray],
    starts: list[int],
    tau: float,
    cfg: NMConfig,
    iterations: int,
    score_grad: bool = True,
    soft: bool = False,
) -> list[Stage]:
    """The fixed per-layer pipeline: scale, exp, sinkhorn iterations,
    harden (STE), permute scores/weights/input, group softmax, mask
    (STE), masked matvec. `soft=True` swaps both STE stages for their
    differentiable surrogates (used by gradient checks)."""
    ranges = [(s, s + b.shape[0]) for s, b in zip(starts, blocks)]
    stages = [
        _param_source_stage(prefix, blocks),
        _scale_stage(prefix, tau),
        _exp_stage(prefix),
    ]
    stages += [_sinkhorn_iter_stage(prefix, k) for k in range(iterations)]
    stages += [
        _harden_stage(prefix, starts, soft),
        _permute_apply_stage(prefix, w, scores, ranges, score_grad),
        _group_softmax_stage(prefix, cfg),
        _mask_stage(prefix, cfg, soft),
        _masked_matvec_stage(prefix),
    ]
    return stages


def _stage_cache(tape: Tape, name: str):
    for stage, cache in zip(tape.stages, tape.caches):
        if stage.name == name:
            return cache
    raise KeyError(f"no stage named {name!r}")


def forward_sparse(
    w,
    x,
    params: BlockPermutationParams,
    tau: float,
    cfg: NMConfig,
    scores,
    iterations: int = 5,
) -> tuple[np.ndarray, dict]:
    """Hard sparse forward for one layer.

    Returns (y_tilde, cache) where the cache carries the assembled tape
    (for a backward pass) plus the hardened permutation, permuted
    scores, mask, and permuted weight/input actually used.
    """
    w = as_matrix(w, "w")
    x = as_matrix(x, "x")
    scores = as_matrix(scores, "scores")
    if scores.shape != w.shape:
        raise ValueError(f"scores shape {scores.shape} != weight shape {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"input has {x.shape[1]} channels, weight expects {w.shape[1]}"
        )
    if params.c_in != w.shape[1]:
        raise ValueError(
            f"params cover {params.c_in} channels, weight expects {w.shape[1]}"
        )
    if w.shape[1] % cfg.group != 0:
        raise ValueError(
            f"input width {w.shape[1]} not divisible by group size {cfg.group}"
        )
    tape = Tape(
        build_layer_stages(
            "", w, scores, params.blocks, params.boundaries, tau, cfg, iterations
        )
    )
    out = tape.run_forward({"x": x})
    block_perms = _stage_cache(tape, "harden")
    perm = np.concatenate(
        [start + bp for start, bp in zip(params.boundaries, block_perms)]
    )
    mask, w_hat, x_hat, _ = _stage_cache(tape, "matvec")
    cache = {
        "tape": tape,
        "perm": perm,
        "mask": mask,
        "s_hat": scores[:, perm],
        "w_hat": w_hat,
        "x_hat": x_hat,
        "m_soft": _stage_cache(tape, "group_softmax"),
    }
    return out["x"], cache


def soft_surrogate_loss_fn(
    w,
    x,
    y,
    params: BlockPermutationParams,
    tau: float,
    cfg: NMConfig,
    scores,
    iterations: int = 5,
    score_grad: bool = True,
):
    """Closure f(flat logits) -> (loss, gradient) on the fully soft pipeline.

    Both straight-through stages are replaced by their differentiable
    surrogates (soft permutation used directly, per-group softmax as the
    mask), which is exactly the function the straight-through backward
    pretends to differentiate. Everything is evaluated in float64.
    """
    w64 = as_matrix(w, "w").astype(np.float64)
    x64 = as_matrix(x, "x").astype(np.float64)
    y64 = as_matrix(y, "y").astype(np.float64)
    s64 = as_matrix(scores, "scores").astype(np.float64)
    shapes = [b.shape for b in params.blocks]
    starts = list(params.boundaries)

    def unflatten(flat: np.ndarray) -> list[np.ndarray]:
        blocks = []
        pos = 0
        for shape in shapes:
            n = shape[0] * shape[1]
            blocks.append(flat[pos : pos + n].reshape(shape).astype(np.float64))
            pos += n
        if pos != flat.size:
            raise ValueError(f"expected {pos} parameters, got {flat.size}")
        return blocks

    def f(flat: np.ndarray) -> tuple[float, np.ndarray]:
        blocks = unflatten(np.asarray(flat, dtype=np.float64))
        stages = build_layer_stages(
            "", w64, s64, blocks, starts, tau, cfg, iterations,
            score_grad=score_grad, soft=True,
        )
        tape = Tape(stages + [_loss_stage(y64)])
        out = tape.run_forward({"x": x64})
        _, pgrads = tape.run_backward({"loss": 1.0})
        grad = np.concatenate([g.ravel() for g in pgrads["params"]])
        return float(out["loss"]), grad

    return f


# ---------------------------------------------------------------------------
# training


def _select_layers(model: Model, selector: str | None) -> set[str]:
    names = [l.name for l in model.layers]
    if selector is None or selector.strip() == "":
        return set(names)
    selector = selector.strip()
    if selector.startswith("last:"):
        try:
            k = int(selector.split(":", 1)[1])
        except ValueError as e:
            raise ValueError(f"bad partial layer selector {selector!r}") from e
        if k < 0:
            raise ValueError(f"bad partial layer selector {selector!r}")
        return set(names[len(names) - min(k, len(names)) :])
    chosen: set[str] = set()
    for token in selector.split(","):
        token = token.strip()
        if not token:
            continue
        if token.lstrip("-").isdigit():
            idx = int(token)
            if not -len(names) <= idx < len(names):
                raise ValueError(f"layer index {idx} out of range")
            chosen.add(names[idx])
        elif token in names:
            chosen.add(token)
        else:
            raise ValueError(f"unknown layer {token!r} in partial selector")
    return chosen


def _identity_perm(c_in: int) -> np.ndarray:
    return np.arange(c_in, dtype=np.int64)


def _train_layer(
    w: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    tcfg: TrainConfig,
    cfg: NMConfig,
    seed_seq: np.random.SeedSequence,
    trained: bool,
) -> PermutationSolution:
    c_in = w.shape[1]
    starts = block_boundaries(c_in, tcfg.block_size, cfg.group)
    scores = metric_scores(tcfg.metric, w, x)
    identity = _identity_perm(c_in)
    id_loss, id_mask, id_ret = evaluate_permutation(w, x, y, identity, cfg, scores)
    heur_perm = heuristic_cp(scores, cfg, starts)
    heur_loss, heur_mask, heur_ret = evaluate_permutation(w, x, y, heur_perm, cfg, scores)
    baselines = {"identity": id_loss, "heuristic_cp": heur_loss}
    best = (id_loss, identity, id_mask, id_ret)
    note = None

    if not trained:
        if heur_loss < id_loss:
            best = (
                heur_loss,
                canonicalize_permutation(heur_perm, cfg),
                heur_mask,
                heur_ret,
            )
        note = "not selected for training; traditional channel permutation applied"
    elif tcfg.steps > 0:
        rng = np.random.Generator(np.random.Philox(seed_seq))
        params = init_params(c_in, tcfg.block_size, rng, dtype=w.dtype)
        blocks = params.blocks
        state = adamw_init(blocks)
        # the last step index must land exactly on tau_end
        schedule = TemperatureSchedule(
            tcfg.tau_start, tcfg.tau_end, max(tcfg.steps - 1, 1)
        )
        for step in range(tcfg.steps):
            tau = tau_at(schedule, step)
            tape = Tape(
                build_layer_stages(
                    "", w, scores, blocks, starts, tau, cfg,
                    tcfg.sinkhorn_iters, score_grad=tcfg.score_grad,
                )
                + [_loss_stage(y)]
            )
            out = tape.run_forward({"x": x})
            hard_loss = float(out["loss"])
            if not np.isfinite(hard_loss):
                note = f"aborted at step {step}: non-finite loss"
                log.warning("layer training %s", note)
                break
            block_perms = _stage_cache(tape, "harden")
            perm = np.concatenate([s + bp for s, bp in zip(starts, block_perms)])
            cand_loss, cand_mask, cand_ret = evaluate_permutation(
                w, x, y, perm, cfg, scores
            )
            if cand_loss < best[0]:
                best = (
                    cand_loss,
                    canonicalize_permutation(perm, cfg),
                    cand_mask,
                    cand_ret,
                )
            _, pgrads = tape.run_backward({"loss": 1.0})
            grads = pgrads["params"]
            if not all(np.all(np.isfinite(g)) for g in grads):
                note = f"aborted at step {step}: non-finite gradient"
                log.warning("layer training %s", note)
                break
            blocks, state = adamw_step(
                blocks, grads, state, lr=tcfg.learning_rate, weight_decay=0.0
            )
    else:
        note = "steps=0; identity baseline returned"

    return PermutationSolution(
        permutation=best[1],
        mask=best[2],
        boundaries=starts,
        nm=cfg,
        achieved_loss=best[0],
        retained_score=best[3],
        baseline_losses=baselines,
        trained=trained and tcfg.steps > 0,
        note=note,
    )


def _chain_eval(
    model: Model,
    perms: dict[str, np.ndarray],
    cfg: NMConfig,
    scores: dict[str, np.ndarray],
    x: np.ndarray,
    y_final: np.ndarray,
) -> tuple[float, dict[str, tuple[np.ndarray, np.ndarray, float]]]:
    """Hard end-to-end loss for given per-layer permutations.

    Returns (loss, {layer: (canonical perm, mask, retained score)}).
    """
    z = x
    detail: dict[str, tuple[np.ndarray, np.ndarray, float]] = {}
    for layer in model.layers:
        p = canonicalize_permutation(perms[layer.name], cfg)
        s_hat = scores[layer.name][:, p]
        mask = nm_mask(s_hat, cfg)
        detail[layer.name] = (p, mask, retained_score(s_hat, mask))
        z = z[:, p] @ (layer.weight[:, p] * mask).T
    return loss_cosine(y_final, z), detail


def _train_endtoend(
    model: Model,
    calib: np.ndarray,
    tcfg: TrainConfig,
    cfg: NMConfig,
    selected: set[str],
    seeds: list[np.random.SeedSequence],
) -> dict[str, PermutationSolution]:
    acts = model.activations(calib)
    y_final = acts[model.layers[-1].name][1]
    scores = {
        l.name: metric_scores(tcfg.metric, l.weight, acts[l.name][0])
        for l in model.layers
    }
    boundaries = {}
    baselines: dict[str, dict[str, float]] = {}
    fixed_perms: dict[str, np.ndarray] = {}
    for layer in model.layers:
        c_in = layer.weight.shape[1]
        starts = block_boundaries(c_in, tcfg.block_size, cfg.group)
        boundaries[layer.name] = starts
        x_l, y_l = acts[layer.name]
        id_loss, _, _ = evaluate_permutation(
            layer.weight, x_l, y_l, _identity_perm(c_in), cfg, scores[layer.name]
        )
        heur = heuristic_cp(scores[layer.name], cfg, starts)
        heur_loss, _, _ = evaluate_permutation(
            layer.weight, x_l, y_l, heur, cfg, scores[layer.name]
        )
        baselines[layer.name] = {"identity": id_loss, "heuristic_cp": heur_loss}
        if layer.name not in selected:
            fixed_perms[layer.name] = (
                heur if heur_loss < id_loss else _identity_perm(c_in)
            )

    identity_perms = {
        l.name: _identity_perm(l.weight.shape[1]) for l in model.layers
    }
    start_perms = dict(identity_perms)
    start_perms.update(fixed_perms)
    best_loss, best_detail = _chain_eval(
        model, start_perms, cfg, scores, calib, y_final
    )
    note: str | None = None

    trained_layers = [l for l in model.layers if l.name in selected]
    if trained_layers and tcfg.steps > 0:
        params: dict[str, list[np.ndarray]] = {}
        for layer, seed in zip(model.layers, seeds):
            if layer.name in selected:
                rng = np.random.Generator(np.random.Philox(seed))
                params[layer.name] = init_params(
                    layer.weight.shape[1], tcfg.block_size, rng, dtype=layer.weight.dtype
                ).blocks
        flat_names = [l.name for l in trained_layers]
        flat_params = [b for n in flat_names for b in params[n]]
        state = adamw_init(flat_params)
        schedule = TemperatureSchedule(
            tcfg.tau_start, tcfg.tau_end, max(tcfg.steps - 1, 1)
        )
        for step in range(tcfg.steps):
            tau = tau_at(schedule, step)
            stages: list[Stage] = []
            for layer in model.layers:
                prefix = layer.name + ":"
                if layer.name in selected:
                    stages += build_layer_stages(
                        prefix, layer.weight, scores[layer.name],
                        params[layer.name], boundaries[layer.name], tau, cfg,
                        tcfg.sinkhorn_iters, score_grad=tcfg.score_grad,
                    )
                else:
                    p = fixed_perms[layer.name]
                    pc = canonicalize_permutation(p, cfg)
                    mask = nm_mask(scores[layer.name][:, pc], cfg)
                    stages.append(
                        _frozen_layer_stage(prefix, layer.weight, pc, mask)
                    )
            tape = Tape(stages + [_loss_stage(y_final)])
            out = tape.run_forward({"x": calib})
            hard_loss = float(out["loss"])
            if not np.isfinite(hard_loss):
                note = f"aborted at step {step}: non-finite loss"
                log.warning("endtoend training %s", note)
                break
            step_perms = dict(start_perms)
            for layer in trained_layers:
                block_perms = _stage_cache(tape, layer.name + ":harden")
                step_perms[layer.name] = np.concatenate(
                    [s + bp for s, bp in zip(boundaries[layer.name], block_perms)]
                )
            cand_loss, cand_detail = _chain_eval(
                model, step_perms, cfg, scores, calib, y_final
            )
            if cand_loss < best_loss:
                best_loss, best_detail = cand_loss, cand_detail
            _, pgrads = tape.run_backward({"loss": 1.0})
            grads = []
            for name in flat_names:
                grads.extend(pgrads[name + ":params"])
            if not all(np.all(np.isfinite(g)) for g in grads):
                note = f"aborted at step {step}: non-finite gradient"
                log.warning("endtoend training %s", note)
                break
            flat_params, state = adamw_step(
                flat_params, grads, state, lr=tcfg.learning_rate, weight_decay=0.0
            )
            pos = 0
            for name in flat_names:
                k = len(params[name])
                params[name] = flat_params[pos : pos + k]
                pos += k

    solutions: dict[str, PermutationSolution] = {}
    for layer in model.layers:
        p, mask, ret = best_detail[layer.name]
        layer_note = note
        if layer.name not in selected:
            layer_note = (
                "not selected for training; traditional channel permutation applied"
            )
        solutions[layer.name] = PermutationSolution(
            permutation=p,
            mask=mask,
            boundaries=boundaries[layer.name],
            nm=cfg,
            achieved_loss=best_loss,
            retained_score=ret,
            baseline_losses=baselines[layer.name],
            trained=layer.name in selected and tcfg.steps > 0,
            note=layer_note,
        )
    return solutions


def train(
    model: Model,
    calib,
    tcfg: TrainConfig,
    nm: NMConfig | str,
    threads: int = 1,
) -> dict[str, PermutationSolution]:
    """Learn a block-respecting permutation and N:M mask per layer.

    Layerwise mode trains each layer against its dense output on dense
    calibration activations (layers are independent and may run on
    `threads` workers); endtoend trains all selected layers jointly
    against the final dense output. Importance scores are computed once
    from the dense calibration pass. Best-so-far tracking is seeded
    with the identity baseline, so every solution's achieved_loss is at
    most the identity loss; with steps=0 the identity baseline itself
    is returned. Non-finite losses or gradients abort the affected
    training loop, keeping the last good solution and a note.
    """
    calib = as_matrix(calib, "calib")
    cfg = NMConfig.parse(nm) if isinstance(nm, str) else nm
    if calib.shape[1] != model.layers[0].weight.shape[1]:
        raise ValueError(
            f"calibration has {calib.shape[1]} channels, model expects "
            f"{model.layers[0].weight.shape[1]}"
        )
    selected = _select_layers(model, tcfg.partial_layers)
    seeds = np.random.SeedSequence(tcfg.seed).spawn(len(model.layers))
    if tcfg.mode == "endtoend":
        return _train_endtoend(model, calib, tcfg, cfg, selected, seeds)

    acts = model.activations(calib)

    def job(idx: int) -> tuple[str, PermutationSolution]:
        layer = model.layers[idx]
        x_l, y_l = acts[layer.name]
        sol = _train_layer(
            layer.weight, x_l, y_l, tcfg, cfg, seeds[idx],
            trained=layer.name in selected,
        )
        return layer.name, sol

    indices = range(len(model.layers))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, indices))
    else:
        results = [job(i) for i in indices]
    return dict(results)


# ---------------------------------------------------------------------------
# folding and export


def sparse_forward(model: Model, solutions: dict[str, PermutationSolution], x) -> np.ndarray:
    """Training-time sparse forward: each solved layer permutes its input
    and applies its masked permuted weight; unsolved layers stay dense."""
    z = as_matrix(x, "x")
    for layer in model.layers:
        sol = solutions.get(layer.name)
        if sol is None:
            z = z @ layer.weight.T
        else:
            p = sol.permutation
            z = z[:, p] @ (layer.weight[:, p] * sol.mask).T
    return z


def fold_and_export(
    model: Model,
    solutions: dict[str, PermutationSolution],
) -> tuple[Model, dict[str, CompressedNM], dict]:
    """Bake permutations into weights and compress the pruned layers.

    Each solved layer stores mask * (weight with permuted columns); its
    predecessor's rows are reordered so the channel orders line up, a
    reordering that cannot break the predecessor's own N:M pattern
    because groups live along rows. The first solved layer has no
    predecessor to fold into, so the sidecar records an explicit
    input gather for it. The folded model's forward (`folded_forward`)
    matches the training-time sparse forward exactly.
    """
    new_weights: dict[str, np.ndarray] = {}
    for layer in model.layers:
        sol = solutions.get(layer.name)
        if sol is None:
            new_weights[layer.name] = layer.weight.copy()
        else:
            validate_nm_mask(sol.mask, sol.nm)
            new_weights[layer.name] = (
                gather_columns(layer.weight, sol.permutation) * sol.mask
            )
    sidecar: dict = {"layers": {}}
    for layer in model.layers:
        sol = solutions.get(layer.name)
        if sol is None:
            continue
        input_gather = layer.predecessor is None
        if not input_gather:
            new_weights[layer.predecessor] = gather_rows(
                new_weights[layer.predecessor],
                invert_permutation(sol.permutation),
            )
        sidecar["layers"][layer.name] = {
            "permutation": [int(v) for v in sol.permutation],
            "block_boundaries": [int(v) for v in sol.boundaries],
            "nm": str(sol.nm),
            "input_gather": input_gather,
        }
    folded = Model(
        layers=[
            ModelLayer(l.name, new_weights[l.name], l.predecessor)
            for l in model.layers
        ]
    )
    exports: dict[str, CompressedNM] = {}
    for layer in folded.layers:
        sol = solutions.get(layer.name)
        if sol is None:
            continue
        w = layer.weight
        if w.dtype != np.float32:
            w = w.astype(np.float32)
        exports[layer.name] = compress_nm(w, sol.nm)
    return folded, exports, sidecar


def folded_forward(folded: Model, sidecar: dict, x) -> np.ndarray:
    """Run a folded model, applying the sidecar's explicit input gathers."""
    z = as_matrix(x, "x")
    for layer in folded.layers:
        entry = sidecar.get("layers", {}).get(layer.name)
        if entry is not None and entry.get("input_gather"):
            perm = validate_permutation(
                np.asarray(entry["permutation"], dtype=np.int64), z.shape[1]
            )
            z = z[:, perm]
        z = z @ layer.weight.T
    return z
