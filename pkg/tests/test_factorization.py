import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from dmtrl.factorization import (
    LAFFactors,
    TTFactors,
    TuckerFactors,
    compose_backward,
    compose_laf,
    compose_tt,
    compose_tucker,
    laf_decompose,
    tt_decompose,
    tucker_decompose,
)
from dmtrl.linalg import thin_svd
from dmtrl.tensor_core import frobenius_norm

from conftest import assert_grads_close, central_difference


def rel_error(approx, exact):
    return frobenius_norm(approx - exact) / frobenius_norm(exact)


def laf_oracle(l, s):
    """Per-element summation over the latent axis."""
    out = np.zeros(l.shape[:-1] + (s.shape[1],))
    for idx in itertools.product(*[range(d) for d in l.shape[:-1]]):
        for t in range(s.shape[1]):
            out[idx + (t,)] = sum(l[idx + (k,)] * s[k, t] for k in range(s.shape[0]))
    return out


def tucker_oracle(core, us):
    """Direct evaluation of the full multi-sum."""
    out_shape = tuple(m.shape[0] for m in us)
    out = np.zeros(out_shape)
    for d in itertools.product(*[range(x) for x in out_shape]):
        acc = 0.0
        for k in itertools.product(*[range(x) for x in core.shape]):
            term = core[k]
            for n in range(len(us)):
                term *= us[n][d[n], k[n]]
            acc += term
        out[d] = acc
    return out


def tt_oracle(head, cores, tail):
    """Entry (d1..dN) as the explicit sum over all bond index tuples."""
    shape = (head.shape[0],) + tuple(c.shape[1] for c in cores) + (tail.shape[1],)
    bonds = [head.shape[1]] + [c.shape[2] for c in cores]
    out = np.zeros(shape)
    for d in itertools.product(*[range(x) for x in shape]):
        acc = 0.0
        for ks in itertools.product(*[range(b) for b in bonds]):
            term = head[d[0], ks[0]]
            for i, c in enumerate(cores):
                term *= c[ks[i], d[i + 1], ks[i + 1]]
            term *= tail[ks[-1], d[-1]]
            acc += term
        out[d] = acc
    return out


class TestComposeLaf:
    def test_identity_mixing(self, rng):
        l = rng.normal(size=(3, 2, 4))
        f = LAFFactors(l, np.eye(4))
        w = compose_laf(f)
        for t in range(4):
            assert_allclose(w[:, :, t], l[:, :, t], rtol=1e-15)

    def test_full_sharing(self, rng):
        l = rng.normal(size=(3, 2, 1))
        f = LAFFactors(l, np.ones((1, 4)))
        w = compose_laf(f)
        for t in range(4):
            assert_allclose(w[:, :, t], l[:, :, 0], rtol=1e-15)

    def test_matches_oracle(self, rng):
        l = rng.normal(size=(3, 2, 2))
        s = rng.normal(size=(2, 4))
        assert_allclose(compose_laf(LAFFactors(l, s)), laf_oracle(l, s),
                        rtol=1e-12, atol=1e-14)

    def test_latent_count_mismatch(self, rng):
        with pytest.raises(ValueError):
            LAFFactors(rng.normal(size=(3, 2)), rng.normal(size=(3, 4)))


class TestComposeTucker:
    def test_rank_one(self):
        a, b, c = np.array([1.0, 2.0]), np.array([0.5, -1.0, 2.0]), np.array([3.0, 1.0])
        f = TuckerFactors(np.full((1, 1, 1), 2.0),
                          [a[:, None], b[:, None], c[:, None]])
        want = 2.0 * np.einsum("i,j,k->ijk", a, b, c)
        assert_allclose(compose_tucker(f), want, rtol=1e-14)

    def test_full_rank_round_trip(self, rng):
        w = rng.normal(size=(3, 4, 2))
        f = tucker_decompose(w, 1e-12)
        assert rel_error(compose_tucker(f), w) <= 1e-10

    def test_matches_oracle(self, rng):
        core = rng.normal(size=(2, 3, 2))
        us = [rng.normal(size=(3, 2)), rng.normal(size=(4, 3)), rng.normal(size=(2, 2))]
        assert_allclose(compose_tucker(TuckerFactors(core, us)),
                        tucker_oracle(core, us), rtol=1e-12, atol=1e-13)


class TestComposeTT:
    def test_rank_one_chain_is_outer_product(self):
        a = np.array([1.0, -2.0])
        b = np.array([0.5, 3.0, 1.0])
        c = np.array([2.0, 0.25])
        f = TTFactors(a[:, None], [b[None, :, None]], c[None, :])
        assert_allclose(compose_tt(f), np.einsum("i,j,k->ijk", a, b, c), rtol=1e-14)

    def test_round_trip(self, rng):
        w = rng.normal(size=(4, 3, 2, 3))
        f = tt_decompose(w, 1e-12)
        assert rel_error(compose_tt(f), w) <= 1e-10

    def test_matches_oracle(self, rng):
        head = rng.normal(size=(3, 2))
        cores = [rng.normal(size=(2, 4, 3))]
        tail = rng.normal(size=(3, 2))
        assert_allclose(compose_tt(TTFactors(head, cores, tail)),
                        tt_oracle(head, cores, tail), rtol=1e-12, atol=1e-13)

    def test_bond_mismatch(self, rng):
        with pytest.raises(ValueError):
            TTFactors(rng.normal(size=(3, 2)),
                      [rng.normal(size=(3, 4, 2))],
                      rng.normal(size=(2, 5)))


class TestLafDecompose:
    def test_identical_slices_rank_one(self, rng):
        sl = rng.normal(size=(4, 3))
        w = np.stack([sl] * 5, axis=-1)
        f = laf_decompose(w, 0.1)
        assert f.s.shape == (1, 5)
        assert rel_error(compose_laf(f), w) <= 1e-10

    def test_orthogonal_slices_full_rank(self, rng):
        # orthonormal columns of a 12x4 matrix give 4 mutually orthogonal slices
        q, _ = np.linalg.qr(rng.normal(size=(12, 4)))
        w = q.reshape(4, 3, 4)
        f = laf_decompose(w, 0.01)
        assert f.s.shape[0] == 4
        # oracle: all singular values equal 1, so no truncation can occur
        s = thin_svd(q).s
        assert_allclose(s, np.ones(4), atol=1e-10)

    def test_reconstruction_bound(self, rng):
        w = rng.normal(size=(4, 3, 5))
        f = laf_decompose(w, 0.5)
        assert rel_error(compose_laf(f), w) <= 0.5

    def test_zero_input(self):
        f = laf_decompose(np.zeros((3, 2, 4)), 0.1)
        assert f.s.shape == (1, 4)
        assert_array_equal(compose_laf(f), np.zeros((3, 2, 4)))

    def test_scale_lives_in_shared_factor(self, rng):
        w = rng.normal(size=(4, 3, 5))
        f = laf_decompose(w, 1e-12)
        # mixing matrix has orthonormal rows; scale sits in the basis
        assert_allclose(f.s @ f.s.T, np.eye(f.s.shape[0]), atol=1e-10)


class TestTuckerDecompose:
    def test_exact_at_tiny_epsilon(self, rng):
        w = rng.normal(size=(3, 2, 4, 2))
        assert rel_error(compose_tucker(tucker_decompose(w, 1e-12)), w) <= 1e-10

    def test_rank_one_input(self):
        a, b, c = np.array([3.0, 4.0]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 2.0])
        w = np.einsum("i,j,k->ijk", a, b, c)
        f = tucker_decompose(w, 0.1)
        assert f.core.shape == (1, 1, 1)
        assert abs(abs(f.core[0, 0, 0]) - 5.0 * 1.0 * 2.0) <= 1e-10

    def test_error_bound(self, rng):
        for _ in range(5):
            w = rng.normal(size=(5, 4, 3))
            f = tucker_decompose(w, 0.1)
            assert rel_error(compose_tucker(f), w) <= np.sqrt(3) * 0.1

    def test_zero_input(self):
        f = tucker_decompose(np.zeros((2, 3, 2)), 0.1)
        assert f.core.shape == (1, 1, 1)
        assert_array_equal(compose_tucker(f), np.zeros((2, 3, 2)))


class TestTTDecompose:
    def test_exact_at_tiny_epsilon(self, rng):
        w = rng.normal(size=(2, 3, 4, 2))
        assert rel_error(compose_tt(tt_decompose(w, 1e-12)), w) <= 1e-10

    def test_outer_product_all_bonds_one(self, rng):
        vs = [rng.normal(size=3), rng.normal(size=4), rng.normal(size=2)]
        w = np.einsum("i,j,k->ijk", *vs)
        f = tt_decompose(w, 0.1)
        assert f.head.shape[1] == 1
        assert all(c.shape[2] == 1 for c in f.cores)
        assert rel_error(compose_tt(f), w) <= 1e-10

    def test_error_bound(self, rng):
        for _ in range(5):
            w = rng.normal(size=(4, 3, 5))
            f = tt_decompose(w, 0.2)
            assert rel_error(compose_tt(f), w) <= 0.2

    def test_zero_input(self):
        f = tt_decompose(np.zeros((2, 3, 4)), 0.1)
        assert_array_equal(compose_tt(f), np.zeros((2, 3, 4)))


class TestComposeBackward:
    def test_zero_gradient_gives_zero(self, rng):
        f = LAFFactors(rng.normal(size=(3, 2, 2)), rng.normal(size=(2, 4)))
        g = compose_backward(f, np.zeros((3, 2, 4)))
        assert_array_equal(g.l, np.zeros_like(f.l))
        assert_array_equal(g.s, np.zeros_like(f.s))

    def test_laf_identity_mixing_passes_gradient_through(self, rng):
        f = LAFFactors(rng.normal(size=(3, 2, 4)), np.eye(4))
        grad_w = rng.normal(size=(3, 2, 4))
        g = compose_backward(f, grad_w)
        assert_allclose(g.l, grad_w, rtol=1e-15)

    def test_laf_finite_differences(self, rng):
        f = LAFFactors(rng.normal(size=(3, 2, 2)), rng.normal(size=(2, 4)))
        grad_w = rng.normal(size=(3, 2, 4))
        loss = lambda: float(np.sum(compose_laf(f) * grad_w))
        g = compose_backward(f, grad_w)
        assert_grads_close(g.l, central_difference(loss, f.l))
        assert_grads_close(g.s, central_difference(loss, f.s))

    def test_tucker_finite_differences(self, rng):
        f = TuckerFactors(rng.normal(size=(2, 2, 3)),
                          [rng.normal(size=(3, 2)),
                           rng.normal(size=(2, 2)),
                           rng.normal(size=(4, 3))])
        grad_w = rng.normal(size=(3, 2, 4))
        loss = lambda: float(np.sum(compose_tucker(f) * grad_w))
        g = compose_backward(f, grad_w)
        assert_grads_close(g.core, central_difference(loss, f.core))
        for n in range(3):
            assert_grads_close(g.u[n], central_difference(loss, f.u[n]))

    def test_tt_finite_differences(self, rng):
        f = TTFactors(rng.normal(size=(3, 2)),
                      [rng.normal(size=(2, 4, 2))],
                      rng.normal(size=(2, 3)))
        grad_w = rng.normal(size=(3, 4, 3))
        loss = lambda: float(np.sum(compose_tt(f) * grad_w))
        g = compose_backward(f, grad_w)
        assert_grads_close(g.head, central_difference(loss, f.head))
        assert_grads_close(g.cores[0], central_difference(loss, f.cores[0]))
        assert_grads_close(g.tail, central_difference(loss, f.tail))

    def test_tt_two_way_no_cores(self, rng):
        f = TTFactors(rng.normal(size=(3, 2)), [], rng.normal(size=(2, 5)))
        grad_w = rng.normal(size=(3, 5))
        loss = lambda: float(np.sum(compose_tt(f) * grad_w))
        g = compose_backward(f, grad_w)
        assert_grads_close(g.head, central_difference(loss, f.head))
        assert_grads_close(g.tail, central_difference(loss, f.tail))

    def test_shape_mismatch_rejected(self, rng):
        f = LAFFactors(rng.normal(size=(3, 2, 2)), rng.normal(size=(2, 4)))
        with pytest.raises(ValueError):
            compose_backward(f, np.zeros((3, 2, 5)))


class TestStructuralProperties:
    def test_compose_decompose_identity_up_to_5way(self, rng):
        for shape in [(3, 4), (2, 3, 4), (3, 2, 2, 3), (2, 2, 3, 2, 2)]:
            w = rng.normal(size=shape)
            if len(shape) >= 2:
                assert rel_error(compose_laf(laf_decompose(w, 1e-12)), w) <= 1e-10
                assert rel_error(compose_tt(tt_decompose(w, 1e-12)), w) <= 1e-10
            assert rel_error(compose_tucker(tucker_decompose(w, 1e-12)), w) <= 1e-10

    def test_multilinearity_exact_scaling(self, rng):
        # doubling one factor doubles the output bit-exactly
        f = TuckerFactors(rng.normal(size=(2, 2, 2)),
                          [rng.normal(size=(3, 2)) for _ in range(3)])
        base = compose_tucker(f)
        f2 = TuckerFactors(f.core * 2.0, f.u)
        assert_array_equal(compose_tucker(f2), base * 2.0)
        f3 = TuckerFactors(f.core, [f.u[0] * 2.0, f.u[1], f.u[2]])
        assert_array_equal(compose_tucker(f3), base * 2.0)

    def test_ranks_monotone_in_epsilon(self, rng):
        w = rng.normal(size=(5, 4, 6))
        eps_grid = (0.01, 0.1, 0.3, 0.6)
        laf_ranks = [laf_decompose(w, e).s.shape[0] for e in eps_grid]
        assert laf_ranks == sorted(laf_ranks, reverse=True)
        tucker_ranks = [
            sum(tucker_decompose(w, e).core.shape) for e in eps_grid
        ]
        assert tucker_ranks == sorted(tucker_ranks, reverse=True)
        tt_ranks = [
            tt_decompose(w, e).head.shape[1] + tt_decompose(w, e).tail.shape[0]
            for e in eps_grid
        ]
        assert tt_ranks == sorted(tt_ranks, reverse=True)
