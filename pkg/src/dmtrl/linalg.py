"""Thin SVD and energy-based rank truncation.

One numerical kernel backs every factorisation in the package: a thin
singular value decomposition with a deterministic sign convention, plus the
rule that picks the smallest rank whose discarded tail keeps the relative
reconstruction error under a bound.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import tensor

__all__ = ["SvdResult", "SvdError", "thin_svd", "rank_for_error"]


class SvdError(RuntimeError):
    """Raised when the decomposition backend fails to converge."""


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD m = u @ diag(s) @ v.T with r = min(rows, cols).

    u is rows x r and v is cols x r, both with orthonormal columns; s is
    non-negative and sorted non-increasing.
    """

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T

    def truncated(self, k: int) -> "SvdResult":
        if not 1 <= k <= self.s.size:
            raise ValueError(f"rank {k} outside [1, {self.s.size}]")
        return SvdResult(self.u[:, :k].copy(), self.s[:k].copy(), self.v[:, :k].copy())


def thin_svd(m: np.ndarray) -> SvdResult:
    """Thin SVD of a matrix with finite entries.

    Columns of u are sign-normalised so their largest-magnitude entry is
    positive, making the factors deterministic across runs and platforms.
    """
    m = tensor(m)
    if m.ndim != 2:
        raise ValueError(f"thin_svd expects a matrix, got a {m.ndim}-way tensor")
    if not np.all(np.isfinite(m)):
        raise ValueError("thin_svd requires finite entries")
    try:
        u, s, vh = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as e:
        raise SvdError(f"SVD failed to converge: {e}") from e
    v = vh.T
    # sign convention: flip column pairs so max-|entry| of each u column is positive
    pivot = np.abs(u).argmax(axis=0)
    flip = u[pivot, np.arange(u.shape[1])] < 0.0
    u = np.where(flip, -u, u)
    v = np.where(flip, -v, v)
    return SvdResult(np.ascontiguousarray(u), s.copy(), np.ascontiguousarray(v))


def rank_for_error(s: np.ndarray, epsilon: float) -> int:
    """Smallest k with sqrt(sum_{i>k} s_i^2) / sqrt(sum_i s_i^2) <= epsilon.

    Always returns at least 1, including for an all-zero spectrum.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0:
        raise ValueError("empty singular value list")
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1); got {epsilon}")
    total = float(np.dot(s, s))
    if total == 0.0:
        return 1
    # tail[k] = energy strictly after the first k values
    tail = total - np.cumsum(s * s)
    ok = np.flatnonzero(tail <= (epsilon * epsilon) * total)
    k = int(ok[0]) + 1 if ok.size else s.size
    return max(k, 1)
