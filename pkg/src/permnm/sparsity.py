"""Importance scores, N:M masks, and the compressed sparse codec.

An N:M pattern zeroes N weights in every group of M consecutive
entries along the input dimension (matrix columns). Masks are boolean
arrays with exactly M-N True entries per group; score ties break
toward the lower column index so selection is deterministic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .numerics import as_matrix

__all__ = [
    "CompressedNM",
    "NMConfig",
    "compress_nm",
    "decompress_nm",
    "magnitude_scores",
    "nm_mask",
    "retained_score",
    "soft_mask",
    "validate_nm_mask",
    "wanda_scores",
]

_MAGIC = b"PNMC"
_VERSION = 1
_HEADER = struct.Struct("<4sHIIBB")


@dataclass(frozen=True)
class NMConfig:
    """N:M sparsity pattern: n_zero zeros per group of `group` columns."""

    n_zero: int
    group: int

    def __post_init__(self):
        if not (0 < self.n_zero < self.group):
            raise ValueError(
                f"need 0 < n_zero < group, got {self.n_zero}:{self.group}"
            )
        if self.group > 255:
            raise ValueError("group sizes above 255 do not fit the codec index byte")

    @classmethod
    def parse(cls, text: str) -> "NMConfig":
        """Parse 'N:M' notation, e.g. '2:4'."""
        parts = text.split(":")
        if len(parts) != 2:
            raise ValueError(f"expected 'N:M', got {text!r}")
        try:
            n, m = int(parts[0]), int(parts[1])
        except ValueError as e:
            raise ValueError(f"expected 'N:M' integers, got {text!r}") from e
        return cls(n, m)

    @property
    def keep(self) -> int:
        return self.group - self.n_zero

    @property
    def density(self) -> float:
        return self.keep / self.group

    def __str__(self):
        return f"{self.n_zero}:{self.group}"


def _grouped(s: np.ndarray, cfg: NMConfig) -> np.ndarray:
    rows, cols = s.shape
    if cols % cfg.group != 0:
        raise ValueError(
            f"column count {cols} is not divisible by group size {cfg.group}"
        )
    return s.reshape(rows, cols // cfg.group, cfg.group)


def magnitude_scores(w) -> np.ndarray:
    """Importance = |w|."""
    return np.abs(as_matrix(w, "w"))


def wanda_scores(w, x) -> np.ndarray:
    """Importance = |w| scaled by the L2 norm of each input channel.

    `x` holds calibration activations, one sample per row, one column
    per input channel of `w`.
    """
    w = as_matrix(w, "w")
    x = as_matrix(x, "x")
    if x.shape[0] == 0:
        raise ValueError("wanda_scores needs at least one calibration sample")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"calibration has {x.shape[1]} channels, weight has {w.shape[1]}"
        )
    norms = np.sqrt(np.square(x).sum(axis=0))
    return np.abs(w) * norms[None, :]


def nm_mask(s, cfg: NMConfig) -> np.ndarray:
    """Boolean mask keeping the top (M-N) scores per group, ties to lower index."""
    s = as_matrix(s, "s")
    g = _grouped(s, cfg)
    # stable argsort of the negated scores: equal scores keep ascending
    # column order, so ties resolve toward the lower index
    order = np.argsort(-g, axis=-1, kind="stable")
    keep = order[..., : cfg.keep]
    mask = np.zeros(g.shape, dtype=bool)
    np.put_along_axis(mask, keep, True, axis=-1)
    return mask.reshape(s.shape)


def soft_mask(s_hat, cfg: NMConfig) -> np.ndarray:
    """Per-group softmax of scores: the differentiable mask surrogate."""
    s = as_matrix(s_hat, "s_hat")
    g = _grouped(s, cfg)
    e = np.exp(g - g.max(axis=-1, keepdims=True))
    return (e / e.sum(axis=-1, keepdims=True)).reshape(s.shape)


def retained_score(s, mask) -> float:
    """Total score surviving the mask."""
    s = as_matrix(s, "s")
    mask = np.asarray(mask)
    if mask.shape != s.shape:
        raise ValueError(f"mask shape {mask.shape} != scores shape {s.shape}")
    return float((s * mask).sum())


def validate_nm_mask(mask, cfg: NMConfig) -> None:
    """Raise unless every group has exactly (M-N) retained entries."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    g = _grouped(m.astype(np.float64), cfg)
    counts = (g != 0).sum(axis=-1)
    bad = np.argwhere(counts != cfg.keep)
    if bad.size:
        r, k = bad[0]
        raise ValueError(
            f"mask violates {cfg}: group (row {r}, group {k}) has "
            f"{counts[r, k]} retained entries, expected {cfg.keep}"
        )


@dataclass
class CompressedNM:
    """N:M compressed matrix: retained values plus within-group positions.

    Byte layout: header (magic 'PNMC', version u16, rows u32, cols u32,
    N u8, M u8, all little-endian), then the retained values as LE
    float32 in row-major, group-major order, then one index byte per
    retained value giving its position within its group.
    """

    rows: int
    cols: int
    cfg: NMConfig
    values: np.ndarray
    indices: np.ndarray

    def count(self) -> int:
        return self.rows * (self.cols // self.cfg.group) * self.cfg.keep

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(
            _MAGIC, _VERSION, self.rows, self.cols, self.cfg.n_zero, self.cfg.group
        )
        return header + self.values.tobytes() + self.indices.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CompressedNM":
        if len(data) < _HEADER.size:
            raise ValueError("buffer shorter than the codec header")
        magic, version, rows, cols, n_zero, group = _HEADER.unpack_from(data)
        if magic != _MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {_MAGIC!r}")
        if version != _VERSION:
            raise ValueError(f"unsupported codec version {version}")
        cfg = NMConfig(n_zero, group)
        if cols % group != 0:
            raise ValueError(
                f"column count {cols} is not divisible by group size {group}"
            )
        count = rows * (cols // group) * cfg.keep
        expect = _HEADER.size + 4 * count + count
        if len(data) != expect:
            raise ValueError(
                f"buffer has {len(data)} bytes, expected {expect} "
                f"for a {rows}x{cols} {cfg} matrix"
            )
        values = np.frombuffer(data, dtype="<f4", count=count, offset=_HEADER.size)
        indices = np.frombuffer(
            data, dtype=np.uint8, count=count, offset=_HEADER.size + 4 * count
        )
        if indices.size and indices.max() >= group:
            raise ValueError("index byte out of range for the group size")
        return cls(rows, cols, cfg, values.copy(), indices.copy())

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "CompressedNM":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def compress_nm(w_masked, cfg: NMConfig) -> CompressedNM:
    """Compress a matrix that satisfies the N:M invariant.

    Retained positions are the nonzeros of each group, padded with the
    lowest-index zero positions when retained values are themselves
    zero, so an all-zero group stores positions 0..(M-N-1).
    """
    w = np.asarray(w_masked)
    if w.ndim != 2:
        raise ValueError(f"w_masked must be 2-D, got shape {w.shape}")
    if w.dtype != np.float32:
        raise TypeError(
            f"codec stores float32; cast the {w.dtype} input before compressing"
        )
    g = _grouped(w, cfg)
    nonzero = g != 0
    counts = nonzero.sum(axis=-1)
    bad = np.argwhere(counts > cfg.keep)
    if bad.size:
        r, k = bad[0]
        raise ValueError(
            f"input violates {cfg}: group (row {r}, group {k}) has "
            f"{counts[r, k]} nonzeros, more than {cfg.keep}"
        )
    # order positions with nonzeros first, each side by ascending index
    pos = np.arange(cfg.group, dtype=np.int64)
    key = (~nonzero) * cfg.group + pos
    sel = np.sort(np.argsort(key, axis=-1)[..., : cfg.keep], axis=-1)
    values = np.take_along_axis(g, sel, axis=-1).ravel().astype(np.float32)
    indices = sel.astype(np.uint8).ravel()
    return CompressedNM(w.shape[0], w.shape[1], cfg, values, indices)


def decompress_nm(c: CompressedNM) -> np.ndarray:
    """Reconstruct the dense masked matrix, bit-identical to the input."""
    groups = c.cols // c.cfg.group
    out = np.zeros((c.rows, groups, c.cfg.group), dtype=np.float32)
    vals = c.values.reshape(c.rows, groups, c.cfg.keep)
    idx = c.indices.reshape(c.rows, groups, c.cfg.keep).astype(np.int64)
    np.put_along_axis(out, idx, vals, axis=-1)
    return out.reshape(c.rows, c.cols)
