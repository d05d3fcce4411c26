"""
Truncated signatures of piecewise-linear paths.

A signature truncated at depth N is stored as a tuple of N flat arrays. Level
``i`` holds ``dim**i`` entries in row-major multi-index order: the entry for the
0-based word ``(j_1, ..., j_i)`` sits at ``sum_k j_k * dim**(i-k)``. The level-0
scalar is always 1 and is never stored.

Every array may carry leading batch axes, so ``levels[i].shape == (*batch, dim**(i+1))``.
All functions are pure and operate in float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class TruncatedSignature:
    levels: tuple[np.ndarray, ...]

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def dim(self) -> int:
        return self.levels[0].shape[-1]

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.levels[0].shape[:-1]

    def flat(self, with_level0: bool = False) -> np.ndarray:
        """All stored levels concatenated along the last axis."""
        parts = list(self.levels)
        if with_level0:
            parts.insert(0, np.ones(self.batch_shape + (1,)))
        return np.concatenate(parts, axis=-1)

    def __getitem__(self, idx) -> TruncatedSignature:
        """Index the batch axes."""
        return TruncatedSignature(tuple(lvl[idx] for lvl in self.levels))


def identity(dim: int, depth: int, batch_shape: tuple[int, ...] = ()) -> TruncatedSignature:
    """The unit of the truncated tensor algebra (all stored levels zero)."""
    return TruncatedSignature(
        tuple(np.zeros(batch_shape + (dim**i,)) for i in range(1, depth + 1))
    )


def tensor_exp(increment, depth: int) -> TruncatedSignature:
    """Signature of a single straight segment: level ``i`` is ``increment**(⊗i) / i!``."""
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    inc = np.asarray(increment, dtype=np.float64)
    _check_finite(inc, "increment")
    levels = [inc]
    for i in range(2, depth + 1):
        prev = levels[-1]
        nxt = (prev[..., :, None] * inc[..., None, :]) / i
        levels.append(nxt.reshape(inc.shape[:-1] + (-1,)))
    return TruncatedSignature(tuple(levels))


def _outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = a[..., :, None] * b[..., None, :]
    return out.reshape(out.shape[:-2] + (-1,))


def chen_product(a: TruncatedSignature, b: TruncatedSignature) -> TruncatedSignature:
    """Truncated tensor product ``a ⊗ b``; the signature of the concatenated path."""
    if a.depth != b.depth or a.dim != b.dim:
        raise ValueError(
            f"shape mismatch: (dim={a.dim}, depth={a.depth}) vs (dim={b.dim}, depth={b.depth})"
        )
    out = []
    for n in range(1, a.depth + 1):
        acc = a.levels[n - 1] + b.levels[n - 1]
        for i in range(1, n):
            acc = acc + _outer(a.levels[i - 1], b.levels[n - i - 1])
        out.append(acc)
    return TruncatedSignature(tuple(out))


def _as_path(path) -> np.ndarray:
    x = np.asarray(path, dtype=np.float64)
    if x.ndim < 2:
        raise ValueError(f"path must have shape (..., n_points, dim), got {x.shape}")
    if x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ValueError(f"path needs n_points >= 1 and dim >= 1, got {x.shape}")
    _check_finite(x, "path")
    return x


def signature(path, depth: int) -> TruncatedSignature:
    """Signature of the piecewise-linear interpolation of ``path``.

    Paths with fewer than two points have the identity signature.
    """
    x = _as_path(path)
    dim = x.shape[-1]
    sig = identity(dim, depth, x.shape[:-2])
    increments = np.diff(x, axis=-2)
    for k in range(increments.shape[-2]):
        sig = chen_product(sig, tensor_exp(increments[..., k, :], depth))
    return sig


@dataclass(frozen=True)
class SignatureStream:
    """Prefix signatures of a path.

    ``levels[i]`` has shape ``(*batch, n_points - 1, dim**(i+1))``; entry ``k`` along the
    stream axis is the signature of the prefix through sample ``k + 1``.
    """

    levels: tuple[np.ndarray, ...]

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def dim(self) -> int:
        return self.levels[0].shape[-1]

    def __len__(self) -> int:
        return self.levels[0].shape[-2]

    def __getitem__(self, k: int) -> TruncatedSignature:
        return TruncatedSignature(tuple(lvl[..., k, :] for lvl in self.levels))


def stream_signature(path, depth: int) -> SignatureStream:
    """Signatures of every prefix with at least two points, built by one Chen fold."""
    x = _as_path(path)
    if x.shape[-2] < 2:
        raise ValueError("stream_signature needs n_points >= 2")
    increments = np.diff(x, axis=-2)
    n = increments.shape[-2]
    dim = x.shape[-1]
    batch = x.shape[:-2]
    out = [np.empty(batch + (n, dim**i)) for i in range(1, depth + 1)]
    sig = identity(dim, depth, batch)
    for k in range(n):
        sig = chen_product(sig, tensor_exp(increments[..., k, :], depth))
        for i, lvl in enumerate(sig.levels):
            out[i][..., k, :] = lvl
    return SignatureStream(tuple(out))


def flatten_level(sig: TruncatedSignature, level: int) -> np.ndarray:
    """Level ``level`` (1-based) as a flat row-major vector of length ``dim**level``."""
    if not 1 <= level <= sig.depth:
        raise IndexError(f"level {level} outside 1..{sig.depth}")
    return sig.levels[level - 1]


def scale_path(path, lam: float) -> np.ndarray:
    return np.asarray(path, dtype=np.float64) * lam


def signature_length(dim: int, depth: int, with_level0: bool = False) -> int:
    return sum(dim**i for i in range(0 if with_level0 else 1, depth + 1))


def word_index(word: tuple[int, ...], dim: int) -> int:
    """Flat position of a 0-based word within its level."""
    idx = 0
    for j in word:
        idx = idx * dim + j
    return idx

