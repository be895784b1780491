import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from dmtrl.factorization import LAFFactors, TTFactors, compose_laf, compose_tucker, compose_tt
from dmtrl.layers import conv2d_forward, fc_forward, maxpool2_forward, relu_forward
from dmtrl.network import (
    FC,
    Activation,
    Conv,
    LayerSpec,
    MaxPool,
    MultiTaskNetwork,
    NetworkSpec,
    SharingMode,
    build_network,
    count_parameters,
)
from dmtrl.training import PlainRandom, RandomDecompose

from conftest import assert_grads_close, central_difference

I, T, LAF, TUK, TT = (SharingMode.INDEPENDENT, SharingMode.TIED,
                      SharingMode.SOFT_LAF, SharingMode.SOFT_TUCKER, SharingMode.SOFT_TT)


def vector_spec(mode_hidden, mode_head, tasks=3, d=6, hidden=4, out=2):
    return NetworkSpec(
        (d,),
        [LayerSpec(FC(d, hidden), mode_hidden),
         LayerSpec(Activation("tanh")),
         LayerSpec(FC(hidden, out), mode_head)],
        tasks,
    )


def conv_spec(mode, tasks=2):
    return NetworkSpec(
        (8, 8, 1),
        [LayerSpec(Conv(3, 3, 1, 2), mode),
         LayerSpec(Activation("relu")),
         LayerSpec(MaxPool()),
         LayerSpec(FC(18, 3), mode)],
        tasks,
    )


class TestSpecValidation:
    def test_single_task_independent_builds(self):
        net = build_network(vector_spec(I, I, tasks=1), PlainRandom(), 0)
        assert net.tasks == 1

    def test_shape_chain_violation(self):
        with pytest.raises(ValueError):
            NetworkSpec((5,), [LayerSpec(FC(6, 2), I)], 2)

    def test_conv_channel_mismatch(self):
        with pytest.raises(ValueError):
            NetworkSpec((8, 8, 3), [LayerSpec(Conv(3, 3, 1, 2), I),
                                    LayerSpec(FC(72, 2), I)], 2)

    def test_heterogeneous_head_must_be_independent(self):
        with pytest.raises(ValueError):
            NetworkSpec((4,), [LayerSpec(FC(4, 1), LAF)], 2, head_dims=[2, 8])

    def test_heterogeneous_head_independent_ok(self):
        spec = NetworkSpec(
            (4,),
            [LayerSpec(FC(4, 3), LAF), LayerSpec(FC(3, 1), I)],
            2,
            head_dims=[2, 8],
        )
        net = build_network(spec, RandomDecompose(0.1), 1)
        assert net.forward(0, np.zeros((3, 4))).shape == (3, 2)
        assert net.forward(1, np.zeros((3, 4))).shape == (3, 8)

    def test_missing_mode_on_param_layer(self):
        with pytest.raises(ValueError):
            NetworkSpec((4,), [LayerSpec(FC(4, 2))], 2)


class TestBuild:
    def test_tied_except_head(self):
        spec = vector_spec(T, I)
        net = build_network(spec, PlainRandom(), 3)
        x = np.random.default_rng(0).normal(size=(5, 6))
        # tied trunk plus identically initialised heads: outputs coincide
        assert_allclose(net.forward(0, x), net.forward(1, x), rtol=1e-15)

    def test_plain_random_rejects_soft_layers(self):
        with pytest.raises(ValueError):
            build_network(vector_spec(LAF, I), PlainRandom(), 0)

    def test_soft_tt_composed_shape(self):
        spec = NetworkSpec((6,), [LayerSpec(FC(6, 4), TT)], 3)
        net = MultiTaskNetwork(spec)
        f = TTFactors(np.random.default_rng(0).normal(size=(6, 2)),
                      [np.random.default_rng(1).normal(size=(2, 4, 2))],
                      np.random.default_rng(2).normal(size=(2, 3)))
        net.set_layer_factors(0, f, biases=[np.zeros(4)] * 3)
        assert net.layer_state(0).composed().shape == (6, 4, 3)

    def test_build_deterministic(self):
        a = build_network(conv_spec(TUK), RandomDecompose(0.2), 9)
        b = build_network(conv_spec(TUK), RandomDecompose(0.2), 9)
        for (na, pa), (nb, pb) in zip(a.parameters().items(), b.parameters().items()):
            assert na == nb
            assert_array_equal(pa, pb)

    def test_independent_tasks_start_identical(self):
        net = build_network(vector_spec(I, I), PlainRandom(), 5)
        l0 = net.layer_state(0)
        assert_array_equal(l0.weights[0], l0.weights[1])


class TestForward:
    def test_laf_identity_mixing_equals_independent(self, rng):
        tasks = 3
        spec = NetworkSpec((5,), [LayerSpec(FC(5, 2), LAF)], tasks)
        net = MultiTaskNetwork(spec)
        l = rng.normal(size=(5, 2, tasks))
        net.set_layer_factors(0, LAFFactors(l, np.eye(tasks)),
                              biases=[np.zeros(2)] * tasks)
        x = rng.normal(size=(4, 5))
        for t in range(tasks):
            assert_allclose(net.forward(t, x), x @ l[:, :, t], rtol=1e-12)

    def test_matches_compose_then_run_oracle(self, rng):
        net = build_network(conv_spec(TT), RandomDecompose(0.3), 7)
        x = rng.normal(size=(2, 8, 8, 1))
        conv_w = compose_tt(net.layer_state(0).factors)
        fc_w = compose_tt(net.layer_state(3).factors)
        for t in range(net.tasks):
            h, _ = conv2d_forward(x, np.ascontiguousarray(conv_w[..., t]),
                                  net.layer_state(0).biases[t])
            h, _ = relu_forward(h)
            h, _ = maxpool2_forward(h)
            h, _ = fc_forward(h.reshape(2, -1), np.ascontiguousarray(fc_w[..., t]),
                              net.layer_state(3).biases[t])
            got = net.forward(t, x)
            assert np.max(np.abs(got - h)) <= 1e-12

    def test_task_out_of_range(self):
        net = build_network(vector_spec(I, I), PlainRandom(), 0)
        with pytest.raises(ValueError):
            net.forward(5, np.zeros((1, 6)))


class TestBackward:
    def test_requires_forward(self):
        net = build_network(vector_spec(I, I), PlainRandom(), 0)
        with pytest.raises(RuntimeError):
            net.backward(0, np.zeros((1, 2)))

    def test_zero_loss_gradient_gives_zero_grads(self, rng):
        net = build_network(vector_spec(T, I), PlainRandom(), 0)
        out = net.forward(1, rng.normal(size=(3, 6)))
        net.backward(1, np.zeros_like(out))
        for name, g in net.gradients().items():
            assert not g.any(), name

    def test_two_task_accumulation_is_sum(self, rng):
        spec = vector_spec(LAF, I, tasks=2)
        x = rng.normal(size=(3, 6))
        g_out = rng.normal(size=(3, 2))

        def grads_after(tasks):
            net = build_network(spec, RandomDecompose(0.5), 11)
            for t in tasks:
                net.forward(t, x)
                net.backward(t, g_out)
            return net.gradients()

        g0, g1, gboth = grads_after([0]), grads_after([1]), grads_after([0, 1])
        for name in gboth:
            assert_allclose(gboth[name], g0[name] + g1[name], rtol=1e-12, atol=1e-13)

    def test_end_to_end_soft_tucker_gradient(self, rng):
        spec = NetworkSpec(
            (4,),
            [LayerSpec(FC(4, 3), TUK),
             LayerSpec(Activation("tanh")),
             LayerSpec(FC(3, 2), TUK)],
            2,
        )
        net = build_network(spec, RandomDecompose(0.4), 13)
        x = rng.normal(size=(3, 4))
        co = rng.normal(size=(3, 2))
        task = 1

        def loss():
            net.invalidate()
            return float(np.sum(net.forward(task, x) * co))

        net.forward(task, x)
        net.backward(task, co)
        grads = net.gradients()
        for name, p in net.parameters().items():
            num = central_difference(loss, p)
            assert_grads_close(grads[name], num, rtol=1e-5, atol=1e-7)


class TestCountParameters:
    def make_net(self, mode, k=None):
        spec = NetworkSpec((3,), [LayerSpec(FC(3, 2), mode)], 4)
        net = MultiTaskNetwork(spec)
        if mode is LAF:
            net.set_layer_factors(
                0,
                LAFFactors(np.zeros((3, 2, k)), np.zeros((k, 4))),
                biases=[np.zeros(2)] * 4,
            )
        elif mode is I:
            net.layer_state(0).weights = [np.zeros((3, 2)) for _ in range(4)]
            net.layer_state(0).biases = [np.zeros(2) for _ in range(4)]
        elif mode is T:
            net.layer_state(0).weights = np.zeros((3, 2))
            net.layer_state(0).biases = np.zeros(2)
        return net

    def test_independent(self):
        assert count_parameters(self.make_net(I))["total"] == 3 * 2 * 4 + 2 * 4

    def test_tied(self):
        assert count_parameters(self.make_net(T))["total"] == 3 * 2 + 2

    def test_laf(self):
        got = count_parameters(self.make_net(LAF, k=2))
        assert got["total"] == 3 * 2 * 2 + 2 * 4 + 2 * 4
        assert got["ratio_vs_independent"] == pytest.approx(28 / 32)

    def test_ordering_tied_soft_independent(self, rng):
        # truncation only pays off when task weights are correlated, which is
        # the regime the factorised initialisation produces: a shared draw
        # plus small per-task deviations
        from dmtrl.factorization import laf_decompose, tt_decompose, tucker_decompose

        tasks, eps = 6, 0.1
        spec_of = lambda m: NetworkSpec(
            (10,), [LayerSpec(FC(10, 8), m), LayerSpec(FC(8, 1), I)], tasks
        )
        base = rng.normal(size=(10, 8))
        stacked = np.stack(
            [base + 0.05 * rng.normal(size=(10, 8)) for _ in range(tasks)], axis=-1
        )
        tied = build_network(spec_of(T), PlainRandom(), 0)
        ind = build_network(spec_of(I), PlainRandom(), 0)
        soft_counts = []
        for m, decomp in ((LAF, laf_decompose), (TUK, tucker_decompose), (TT, tt_decompose)):
            net = MultiTaskNetwork(spec_of(m))
            net.set_layer_factors(0, decomp(stacked, eps), biases=[np.zeros(8)] * tasks)
            net.layer_state(1).weights = [np.zeros((8, 1)) for _ in range(tasks)]
            net.layer_state(1).biases = [np.zeros(1) for _ in range(tasks)]
            soft_counts.append(count_parameters(net)["total"])
        assert count_parameters(tied)["total"] < min(soft_counts)
        assert max(soft_counts) < count_parameters(ind)["total"]


class TestReductionToMatrixCase:
    """With no hidden layer and a single output, the LAF model is exactly
    the factorised linear multi-task model W = L S."""

    def test_loss_trajectory_matches_direct_implementation(self, rng):
        d, k, tasks, n, steps, lr = 5, 2, 3, 12, 100, 0.05
        x = rng.normal(size=(tasks, n, d))
        y = np.where(rng.random((tasks, n)) < 0.5, -1.0, 1.0)
        l0 = rng.normal(size=(d, k))
        s0 = rng.normal(size=(k, tasks))

        spec = NetworkSpec((d,), [LayerSpec(FC(d, 1), LAF)], tasks)
        net = MultiTaskNetwork(spec)
        net.set_layer_factors(0, LAFFactors(l0.reshape(d, 1, k).copy(), s0.copy()),
                              biases=[np.zeros(1)] * tasks)

        # direct matrix implementation updated by plain SGD
        L, S = l0.copy(), s0.copy()
        b = np.zeros(tasks)

        from dmtrl.layers import hinge_loss

        net_losses, ref_losses = [], []
        for step in range(steps):
            t = step % tasks
            out = net.forward(t, x[t])
            losses, g = hinge_loss(out[:, 0], y[t])
            net_losses.append(losses.mean())
            grad = np.zeros_like(out)
            grad[:, 0] = g / n
            net.backward(t, grad)
            params, grads = net.parameters(), net.gradients()
            for name, p in params.items():
                p -= lr * grads[name]
            net.zero_grads()
            net.invalidate()

            w_t = L @ S[:, t]
            scores = x[t] @ w_t + b[t]
            ref_l, ref_g = hinge_loss(scores, y[t])
            ref_losses.append(ref_l.mean())
            gw = x[t].T @ (ref_g / n)        # d loss / d w_t
            gL = np.outer(gw, S[:, t])
            gS = L.T @ gw
            L -= lr * gL
            S[:, t] -= lr * gS
            b[t] -= lr * (ref_g / n).sum()

        assert np.max(np.abs(np.array(net_losses) - np.array(ref_losses))) <= 1e-10
