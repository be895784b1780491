"""Factorised weight structures: last-axis flattening (LAF), Tucker, and
tensor-train (TT).

Each structure comes as a matched pair of operations: ``compose_*`` builds a
full weight tensor from learnable factors (the direction used on every
forward pass), and ``*_decompose`` recovers factors from a given tensor (used
for initialisation only, with ranks selected by a relative-error budget).
``compose_backward`` maps a gradient with respect to the composed tensor onto
gradients for every factor, which is all that standard backpropagation needs
since the compositions are multilinear.

Rank-selection convention: ``epsilon`` bounds the relative Frobenius
reconstruction error.  Tucker truncates each mode at ``epsilon`` (overall
bound sqrt(N) * epsilon); TT truncates each sweep step at
``epsilon / sqrt(N - 1)`` (overall bound epsilon).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import rank_for_error, thin_svd
from .tensor_core import mode_n_flatten, tensor, tensor_dot

__all__ = [
    "LAFFactors",
    "TuckerFactors",
    "TTFactors",
    "compose_laf",
    "compose_tucker",
    "compose_tt",
    "laf_decompose",
    "tucker_decompose",
    "tt_decompose",
    "compose_backward",
]


@dataclass
class LAFFactors:
    """Shared latent basis ``l`` (D1 x ... x D_{N-1} x K) and task mixing
    matrix ``s`` (K x T)."""

    l: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        self.l = tensor(self.l)
        self.s = tensor(self.s)
        if self.s.ndim != 2:
            raise ValueError("mixing factor must be a K x T matrix")
        if self.l.shape[-1] != self.s.shape[0]:
            raise ValueError(
                f"latent count mismatch: basis has K={self.l.shape[-1]}, "
                f"mixing matrix has K={self.s.shape[0]} rows"
            )

    @property
    def out_shape(self) -> tuple:
        return self.l.shape[:-1] + (self.s.shape[1],)


@dataclass
class TuckerFactors:
    """Core tensor (K1 x ... x KN) and one Dn x Kn factor matrix per mode."""

    core: np.ndarray
    u: list

    def __post_init__(self):
        self.core = tensor(self.core)
        self.u = [tensor(m) for m in self.u]
        if len(self.u) != self.core.ndim:
            raise ValueError(
                f"need one factor matrix per mode: core is {self.core.ndim}-way, "
                f"got {len(self.u)} matrices"
            )
        for n, m in enumerate(self.u):
            if m.ndim != 2 or m.shape[1] != self.core.shape[n]:
                raise ValueError(
                    f"factor {n + 1} must be D{n + 1} x {self.core.shape[n]}, got {m.shape}"
                )

    @property
    def out_shape(self) -> tuple:
        return tuple(m.shape[0] for m in self.u)


@dataclass
class TTFactors:
    """Boundary matrices plus a chain of 3-way cores.

    ``head`` is D1 x K1, ``cores[n]`` is K_n x D_{n+2} x K_{n+1}, and ``tail``
    is K_{N-1} x DN; adjacent bond extents must match along the chain.
    """

    head: np.ndarray
    cores: list
    tail: np.ndarray

    def __post_init__(self):
        self.head = tensor(self.head)
        self.cores = [tensor(c) for c in self.cores]
        self.tail = tensor(self.tail)
        if self.head.ndim != 2 or self.tail.ndim != 2:
            raise ValueError("head and tail must be matrices")
        bond = self.head.shape[1]
        for n, c in enumerate(self.cores):
            if c.ndim != 3 or c.shape[0] != bond:
                raise ValueError(
                    f"core {n + 1} must start with bond extent {bond}, got shape {c.shape}"
                )
            bond = c.shape[2]
        if self.tail.shape[0] != bond:
            raise ValueError(
                f"tail must start with bond extent {bond}, got shape {self.tail.shape}"
            )

    @property
    def out_shape(self) -> tuple:
        mids = tuple(c.shape[1] for c in self.cores)
        return (self.head.shape[0],) + mids + (self.tail.shape[1],)


def compose_laf(f: LAFFactors) -> np.ndarray:
    """Weight tensor whose task slice i is sum_k l[..., k] * s[k, i]."""
    return tensor_dot(f.l, f.s, -1, 1)


def compose_tucker(f: TuckerFactors) -> np.ndarray:
    """Contract the core with every factor matrix along its mode.

    Each step contracts the current leading axis with the column axis of the
    next factor and appends the new Dn axis at the end, so after N steps the
    axes come back in order (D1, ..., DN).
    """
    w = f.core
    for m in f.u:
        w = tensor_dot(w, m, 1, 2)
    return w


def compose_tt(f: TTFactors) -> np.ndarray:
    """Collapse the bond axes of the chain head . cores . tail."""
    w = f.head
    for c in f.cores:
        w = tensor_dot(w, c, -1, 1)
    return tensor_dot(w, f.tail, -1, 1)


def _zero_rank1_like(shape) -> np.ndarray:
    return np.zeros(shape, dtype=np.float64)


def laf_decompose(w: np.ndarray, epsilon: float) -> LAFFactors:
    """Factor the transposed last-mode flattening of ``w`` at relative error
    ``epsilon``.

    Singular values are absorbed into the shared basis, leaving the mixing
    matrix with orthonormal rows at initialisation.
    """
    w = tensor(w)
    if w.ndim < 2:
        raise ValueError("LAF needs a tensor with at least 2 axes")
    n_tasks = w.shape[-1]
    lead = w.shape[:-1]
    m = mode_n_flatten(w, -1).T  # prod(lead) x T
    if not m.any():
        return LAFFactors(_zero_rank1_like(lead + (1,)), np.zeros((1, n_tasks)))
    res = thin_svd(m)
    k = rank_for_error(res.s, epsilon)
    cut = res.truncated(k)
    basis = (cut.u * cut.s).reshape(lead + (k,))
    return LAFFactors(basis, np.ascontiguousarray(cut.v.T))


def tucker_decompose(w: np.ndarray, epsilon: float) -> TuckerFactors:
    """Higher-order SVD with per-mode truncation at ``epsilon``.

    Factor n is the truncated left factor of the mode-n flattening; the core
    is the tensor contracted with every factor along its mode.  Overall
    relative error is bounded by sqrt(N) * epsilon.
    """
    w = tensor(w)
    n_way = w.ndim
    if not w.any():
        core = _zero_rank1_like((1,) * n_way)
        return TuckerFactors(core, [np.zeros((d, 1)) for d in w.shape])
    us = []
    for n in range(1, n_way + 1):
        res = thin_svd(mode_n_flatten(w, n))
        k = rank_for_error(res.s, epsilon)
        us.append(res.u[:, :k].copy())
    core = w
    for m in us:
        core = tensor_dot(core, m, 1, 1)
    return TuckerFactors(core, us)


def tt_decompose(w: np.ndarray, epsilon: float) -> TTFactors:
    """Left-to-right SVD sweep with per-step truncation at
    ``epsilon / sqrt(N - 1)``; overall relative error is bounded by
    ``epsilon``."""
    w = tensor(w)
    n_way = w.ndim
    if n_way < 2:
        raise ValueError("TT needs a tensor with at least 2 axes")
    shape = w.shape
    if not w.any():
        head = np.zeros((shape[0], 1))
        cores = [np.zeros((1, d, 1)) for d in shape[1:-1]]
        return TTFactors(head, cores, np.zeros((1, shape[-1])))
    step_eps = epsilon / math.sqrt(n_way - 1)
    factors = []
    bond = 1
    rest = w.reshape(1, -1)
    for n in range(n_way - 1):
        m = rest.reshape(bond * shape[n], -1)
        res = thin_svd(m)
        k = rank_for_error(res.s, step_eps)
        cut = res.truncated(k)
        factors.append(cut.u.reshape(bond, shape[n], k))
        rest = (cut.s[:, None] * cut.v.T)
        bond = k
    head = factors[0].reshape(shape[0], -1)
    cores = factors[1:]
    tail = rest.reshape(bond, shape[-1])
    return TTFactors(head, cores, tail)


def _tucker_grads(f: TuckerFactors, grad_w: np.ndarray):
    n_way = grad_w.ndim
    grad_core = grad_w
    for m in f.u:
        grad_core = tensor_dot(grad_core, m, 1, 1)
    grad_u = []
    for n in range(n_way):
        # core contracted with every factor except mode n+1, identity there
        b = TuckerFactors(
            f.core,
            [np.eye(f.core.shape[i]) if i == n else f.u[i] for i in range(n_way)],
        )
        partial = compose_tucker(b)  # axes: D1 .. Kn .. DN
        keep = [a for a in range(n_way) if a != n]
        grad_u.append(np.tensordot(grad_w, partial, axes=(keep, keep)))
    return grad_core, grad_u


def compose_backward(f, grad_w: np.ndarray):
    """Gradients of a scalar loss with respect to every factor, given the
    gradient ``grad_w`` with respect to the composed tensor.

    Returns a factor record of the same type as ``f`` whose fields hold the
    gradients.  Because composition is multilinear, each factor's gradient is
    ``grad_w`` contracted with all the other factors.
    """
    grad_w = tensor(grad_w)
    if isinstance(f, LAFFactors):
        if grad_w.shape != f.out_shape:
            raise ValueError(f"gradient shape {grad_w.shape} != composed {f.out_shape}")
        grad_l = tensor_dot(grad_w, f.s, -1, 2)
        lead = list(range(f.l.ndim - 1))
        grad_s = np.tensordot(f.l, grad_w, axes=(lead, lead))
        return LAFFactors(grad_l, grad_s)
    if isinstance(f, TuckerFactors):
        if grad_w.shape != f.out_shape:
            raise ValueError(f"gradient shape {grad_w.shape} != composed {f.out_shape}")
        grad_core, grad_u = _tucker_grads(f, grad_w)
        return TuckerFactors(grad_core, grad_u)
    if isinstance(f, TTFactors):
        if grad_w.shape != f.out_shape:
            raise ValueError(f"gradient shape {grad_w.shape} != composed {f.out_shape}")
        n_way = grad_w.ndim
        # left[i]: chain up to and including piece i, shape (D1..D_{i+1}, K)
        left = [f.head]
        for c in f.cores:
            left.append(tensor_dot(left[-1], c, -1, 1))
        # right[i]: chain from piece i to the end, shape (K, D..DN)
        right = [f.tail]
        for c in reversed(f.cores):
            right.insert(0, tensor_dot(c, right[0], 3, 1))
        grad_head = np.tensordot(grad_w, right[0],
                                 axes=(list(range(1, n_way)), list(range(1, n_way))))
        grad_cores = []
        for i in range(len(f.cores)):
            lt = left[i]          # (D1..D_{i+1}, K_{i+1})
            rt = right[i + 1]     # (K_{i+2}, D_{i+3}..DN)
            n_left = lt.ndim - 1
            g = np.tensordot(lt, grad_w, axes=(list(range(n_left)), list(range(n_left))))
            # g axes: (K_{i+1}, D_{i+2}, .., DN)
            g = np.tensordot(g, rt, axes=(list(range(2, g.ndim)), list(range(1, rt.ndim))))
            grad_cores.append(np.ascontiguousarray(g))
        lt = left[-1]
        n_left = lt.ndim - 1
        grad_tail = np.tensordot(lt, grad_w,
                                 axes=(list(range(n_left)), list(range(n_left))))
        return TTFactors(grad_head, grad_cores, grad_tail)
    raise TypeError(f"unknown factor record: {type(f).__name__}")
