"""Shared oracles and helpers.

The oracles here are deliberately slow and dumb: nested index loops and
central finite differences that never touch the vectorised code paths they
are used to check.
"""

import itertools

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def fibre_oracle(t: np.ndarray, n: int) -> np.ndarray:
    """Mode-n flattening by explicit fibre extraction, one column at a time."""
    axis = n - 1 if n > 0 else t.ndim + n
    rest = [d for i, d in enumerate(t.shape) if i != axis]
    out = np.empty((t.shape[axis], int(np.prod(rest))), dtype=np.float64)
    for col, fixed in enumerate(itertools.product(*[range(d) for d in rest])):
        idx = list(fixed)
        for k in range(t.shape[axis]):
            out[k, col] = t[tuple(idx[:axis]) + (k,) + tuple(idx[axis:])]
    return out


def contraction_oracle(a: np.ndarray, b: np.ndarray, i: int, j: int) -> np.ndarray:
    """tensor_dot by explicit summation over every free index combination."""
    ax_a = i - 1 if i > 0 else a.ndim + i
    ax_b = j - 1 if j > 0 else b.ndim + j
    shape_a = [d for k, d in enumerate(a.shape) if k != ax_a]
    shape_b = [d for k, d in enumerate(b.shape) if k != ax_b]
    out = np.zeros(shape_a + shape_b, dtype=np.float64)
    for ia in itertools.product(*[range(d) for d in shape_a]):
        for ib in itertools.product(*[range(d) for d in shape_b]):
            acc = 0.0
            for p in range(a.shape[ax_a]):
                ia_full = ia[:ax_a] + (p,) + ia[ax_a:]
                ib_full = ib[:ax_b] + (p,) + ib[ax_b:]
                acc += a[ia_full] * b[ib_full]
            out[ia + ib] = acc
    return out


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Elementwise central finite-difference gradient of scalar f at x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f()
        flat[i] = keep - h
        down = f()
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * h)
    return g


def assert_grads_close(analytic, numeric, rtol=1e-6, atol=1e-8):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    assert analytic.shape == numeric.shape
    err = np.abs(analytic - numeric)
    bound = atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))
    worst = (err - bound).max()
    assert np.all(err <= bound), f"gradient mismatch, worst excess {worst:.3e}"


def random_shape(rng, max_way=5, max_extent=4, min_way=1):
    n = int(rng.integers(min_way, max_way + 1))
    return tuple(int(rng.integers(1, max_extent + 1)) for _ in range(n))
