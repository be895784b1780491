"""Dense N-way tensor values and the reshaping/contraction algebra.

Tensors are plain C-contiguous float64 numpy arrays: ``shape`` carries the
extents (D1, ..., DN) and the flat buffer is row-major, so the last index
varies fastest.  All axis arguments in this module are 1-based to match the
usual mode-n notation; negative axes count from the end (-1 is the last
axis).  Every function returns a fresh array and never mutates its inputs.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "tensor",
    "mode_n_flatten",
    "mode_n_unflatten",
    "tensor_dot",
    "frobenius_norm",
]


def tensor(values) -> np.ndarray:
    """Coerce ``values`` to a valid dense tensor (float64, C order, N >= 1).

    Raises ValueError for scalars or arrays with a zero extent.
    """
    t = np.asarray(values, dtype=np.float64)
    if t.ndim < 1:
        raise ValueError("a tensor needs at least one axis; got a scalar")
    if any(d < 1 for d in t.shape):
        raise ValueError(f"every extent must be >= 1; got shape {t.shape}")
    return np.ascontiguousarray(t)


def _resolve_axis(n: int, ndim: int) -> int:
    """Map a 1-based (or negative) axis to the 0-based numpy axis."""
    if n < 0:
        axis = ndim + n
    else:
        axis = n - 1
    if not 0 <= axis < ndim:
        raise ValueError(f"axis {n} out of range for a {ndim}-way tensor")
    return axis


def mode_n_flatten(t: np.ndarray, n: int) -> np.ndarray:
    """Mode-n flattening: the Dn x prod(D_i, i != n) matrix of mode-n fibres.

    Column j holds the fibre whose fixed indices enumerate the remaining
    axes in ascending order, last axis varying fastest.
    """
    t = tensor(t)
    axis = _resolve_axis(n, t.ndim)
    return np.ascontiguousarray(np.moveaxis(t, axis, 0).reshape(t.shape[axis], -1))


def mode_n_unflatten(m: np.ndarray, shape, n: int) -> np.ndarray:
    """Inverse of :func:`mode_n_flatten` for the given target ``shape``."""
    m = tensor(m)
    shape = tuple(int(d) for d in shape)
    axis = _resolve_axis(n, len(shape))
    rest = shape[:axis] + shape[axis + 1 :]
    if m.ndim != 2 or m.shape[0] != shape[axis] or m.shape[1] != int(np.prod(rest)):
        raise ValueError(
            f"matrix of shape {m.shape} does not unflatten to {shape} along axis {n}"
        )
    t = m.reshape((shape[axis],) + rest)
    return np.ascontiguousarray(np.moveaxis(t, 0, axis))


def tensor_dot(a: np.ndarray, b: np.ndarray, i: int, j: int) -> np.ndarray:
    """Contract axis ``i`` of ``a`` with axis ``j`` of ``b``.

    The result carries a's axes with ``i`` removed followed by b's axes
    with ``j`` removed; its values equal flatten(a, i)^T @ flatten(b, j)
    reshaped back to that shape.
    """
    a = tensor(a)
    b = tensor(b)
    ax_a = _resolve_axis(i, a.ndim)
    ax_b = _resolve_axis(j, b.ndim)
    if a.shape[ax_a] != b.shape[ax_b]:
        raise ValueError(
            f"contracted extents differ: {a.shape[ax_a]} (axis {i} of {a.shape}) "
            f"vs {b.shape[ax_b]} (axis {j} of {b.shape})"
        )
    return np.tensordot(a, b, axes=(ax_a, ax_b))


def frobenius_norm(t: np.ndarray) -> float:
    """sqrt of the sum of squared entries."""
    t = tensor(t)
    return float(np.linalg.norm(t.ravel()))
