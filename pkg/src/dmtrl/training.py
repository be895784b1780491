"""Optimisers, initialisation pipelines and the multi-task training loop.

Two ways to initialise a softly shared network:

* ``pretrain_stl`` + ``init_from_stl``: train one independent network per
  task, stack each layer's weights with the task index as the last axis,
  and factorise the stack at a relative-error budget ``epsilon``.  The
  truncation picks every layer's ranks, so ``epsilon`` is the only
  structural hyperparameter.
* ``init_random_decompose``: skip pretraining; sample the stacked weight
  tensors from a fan-scaled uniform distribution, factorise at ``epsilon``
  and keep the factors, so the recomposed tensors approximate the intended
  distribution.

Training interleaves tasks round-robin, one minibatch per task per cycle,
with an optimiser step after each minibatch.  All randomness flows from the
config seed; each task draws from its own identically seeded stream, so
tasks with identical data see identical batch orders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import TaskDataset, OneVsAllSuite
from .layers import hinge_loss, softmax_ce_loss
from .network import (
    FC,
    LayerSpec,
    MultiTaskNetwork,
    NetworkSpec,
    SharingMode,
    build_network,
)
from .factorization import laf_decompose, tt_decompose, tucker_decompose

__all__ = [
    "StlInit", "RandomDecompose", "PlainRandom", "TrainConfig", "TrainRecord",
    "pretrain_stl", "init_from_stl", "init_random_decompose",
    "train", "evaluate_tasks", "multiclass_ranking_error", "evaluate_suite",
]


@dataclass(frozen=True)
class StlInit:
    pretrain_epochs: int = 10
    epsilon: float = 0.10

    def __post_init__(self):
        _check_epsilon(self.epsilon)


@dataclass(frozen=True)
class RandomDecompose:
    epsilon: float = 0.10

    def __post_init__(self):
        _check_epsilon(self.epsilon)


@dataclass(frozen=True)
class PlainRandom:
    pass


def _check_epsilon(epsilon):
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"      # "sgd" | "momentum" | "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    task_sampling: str = "round_robin"

    def __post_init__(self):
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer '{self.optimizer}'")
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning rate, batch size and epochs must be non-negative")
        if self.task_sampling != "round_robin":
            raise ValueError(f"unknown task sampling rule '{self.task_sampling}'")


@dataclass(frozen=True)
class TrainRecord:
    epoch: int
    task: int
    loss: float
    error: float


class _Sgd:
    def __init__(self, cfg):
        self.lr = cfg.lr

    def step(self, params, grads):
        for name, p in params.items():
            p -= self.lr * grads[name]


class _Momentum:
    def __init__(self, cfg):
        self.lr, self.mu = cfg.lr, cfg.momentum
        self.v = {}

    def step(self, params, grads):
        for name, p in params.items():
            v = self.v.get(name)
            if v is None:
                v = self.v[name] = np.zeros_like(p)
            v *= self.mu
            v += grads[name]
            p -= self.lr * v


class _Adam:
    """Adam with a per-parameter step count: a parameter's moment estimates
    and bias corrections advance only when that parameter is stepped, so a
    task's private weights follow the same schedule however tasks are
    interleaved."""

    def __init__(self, cfg):
        self.lr, self.b1, self.b2, self.eps = cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps
        self.m, self.v, self.t = {}, {}, {}

    def step(self, params, grads):
        for name, p in params.items():
            g = grads[name]
            t = self.t[name] = self.t.get(name, 0) + 1
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            c1 = 1.0 - self.b1 ** t
            c2 = 1.0 - self.b2 ** t
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg: TrainConfig):
    return {"sgd": _Sgd, "momentum": _Momentum, "adam": _Adam}[cfg.optimizer](cfg)


def task_loss(out: np.ndarray, ds: TaskDataset, idx: np.ndarray):
    """Mean loss, gradient w.r.t. the network output, and batch error rate."""
    y = ds.labels[idx]
    if ds.binary:
        scores = out[:, 0]
        losses, g = hinge_loss(scores, y)
        grad = np.zeros_like(out)
        grad[:, 0] = g / len(idx)
        pred = np.where(scores > 0, 1, -1)
        return float(losses.mean()), grad, float(np.mean(pred != y))
    losses, grad = softmax_ce_loss(out, y)
    return float(losses.mean()), grad / len(idx), float(np.mean(out.argmax(1) != y))


class _BatchStream:
    """Shuffled index batches, reshuffling whenever the pass completes."""

    def __init__(self, n, batch, rng):
        self.n, self.batch, self.rng = n, batch, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self):
        if self.pos >= self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos : self.pos + self.batch]
        self.pos += len(idx)
        return idx


def train(net: MultiTaskNetwork, datasets, config: TrainConfig):
    """Round-robin multi-task training; returns per-epoch, per-task records."""
    if len(datasets) != net.tasks:
        raise ValueError(f"{net.tasks} tasks but {len(datasets)} datasets")
    for ds in datasets:
        if len(ds) == 0:
            raise ValueError(f"task {ds.task_id} has no training data")
    opt = make_optimizer(config)
    streams = [
        _BatchStream(len(ds), config.batch_size, np.random.default_rng(config.seed))
        for ds in datasets
    ]
    cycles = max(1, math.ceil(max(len(ds) for ds in datasets) / config.batch_size))
    log = []
    step = 0
    for epoch in range(config.epochs):
        loss_sum = np.zeros(net.tasks)
        err_sum = np.zeros(net.tasks)
        for _ in range(cycles):
            for t in range(net.tasks):
                idx = streams[t].next()
                out = net.forward(t, datasets[t].inputs[idx])
                loss, grad, err = task_loss(out, datasets[t], idx)
                if not np.isfinite(loss):
                    raise RuntimeError(f"non-finite loss at step {step} (task {t})")
                net.backward(t, grad)
                # update only the parameters on this task's forward path:
                # other tasks' private weights must not see optimiser steps
                active = net.task_param_names(t)
                params, grads = net.parameters(), net.gradients()
                opt.step({k: params[k] for k in active},
                         {k: grads[k] for k in active})
                net.zero_grads()
                net.invalidate()
                loss_sum[t] += loss
                err_sum[t] += err
                step += 1
        for t in range(net.tasks):
            log.append(TrainRecord(epoch, t, loss_sum[t] / cycles, err_sum[t] / cycles))
    return log


def _all_independent(spec: NetworkSpec) -> NetworkSpec:
    layers = [
        LayerSpec(ls.kind, SharingMode.INDEPENDENT if ls.mode is not None else None)
        for ls in spec.layers
    ]
    return NetworkSpec(spec.input_shape, layers, spec.tasks, spec.head_dims)


def pretrain_stl(spec: NetworkSpec, datasets, config: TrainConfig) -> MultiTaskNetwork:
    """Train one independent network per task (same architecture, shared
    random starting point); the result feeds :func:`init_from_stl`."""
    cfg = replace(config, epochs=config.epochs)
    net = build_network(_all_independent(spec), PlainRandom(), cfg.seed)
    train(net, datasets, cfg)
    return net


def _stack_task_weights(stl_net: MultiTaskNetwork, index) -> np.ndarray:
    layer = stl_net.layer_state(index)
    return np.stack([layer.weight_for(t) for t in range(stl_net.tasks)], axis=-1)


def init_from_stl(stl_net: MultiTaskNetwork, target_spec: NetworkSpec,
                  epsilon: float) -> MultiTaskNetwork:
    """Build a sharing network from per-task pretrained weights.

    Every softly shared layer stacks the task weights with the task index as
    the last axis and factorises the stack at ``epsilon``; the truncation
    rule picks the ranks.  Biases are copied per task (averaged for tied
    layers, which share everything).
    """
    _check_epsilon(epsilon)
    if [type(ls.kind) for ls in target_spec.layers] != [
        type(ls.kind) for ls in stl_net.spec.layers
    ]:
        raise ValueError("target architecture differs from the pretrained one")
    net = MultiTaskNetwork(target_spec)
    for i, layer in net.param_layers.items():
        src = stl_net.layer_state(i)
        if layer.mode is SharingMode.INDEPENDENT:
            layer.weights = [src.weight_for(t).copy() for t in range(net.tasks)]
            layer.biases = [src.bias_for(t).copy() for t in range(net.tasks)]
            continue
        if layer.mode is SharingMode.TIED:
            layer.weights = np.mean(
                [src.weight_for(t) for t in range(net.tasks)], axis=0
            )
            layer.biases = np.mean(
                [src.bias_for(t) for t in range(net.tasks)], axis=0
            )
            continue
        stacked = _stack_task_weights(stl_net, i)
        if layer.mode is SharingMode.SOFT_LAF:
            layer.factors = laf_decompose(stacked, epsilon)
        elif layer.mode is SharingMode.SOFT_TUCKER:
            layer.factors = tucker_decompose(stacked, epsilon)
        else:
            layer.factors = tt_decompose(stacked, epsilon)
        layer.biases = [src.bias_for(t).copy() for t in range(net.tasks)]
    return net


def init_random_decompose(spec: NetworkSpec, epsilon: float, seed: int) -> MultiTaskNetwork:
    """Pretraining-free initialisation: sample, factorise, keep the factors."""
    return build_network(spec, RandomDecompose(epsilon), seed)


def evaluate_tasks(net: MultiTaskNetwork, datasets, batch: int = 512):
    """Per-task error rates (sign mismatches for binary tasks, argmax
    mismatches for multi-class ones)."""
    errors = []
    for t, ds in enumerate(datasets):
        if len(ds) == 0:
            raise ValueError(f"task {ds.task_id} has an empty evaluation set")
        wrong = 0
        for lo in range(0, len(ds), batch):
            idx = np.arange(lo, min(lo + batch, len(ds)))
            out = net.forward(t, ds.inputs[idx])
            if ds.binary:
                pred = np.where(out[:, 0] > 0, 1, -1)
            else:
                pred = out.argmax(1)
            wrong += int(np.sum(pred != ds.labels[idx]))
        errors.append(wrong / len(ds))
    net._tape = None
    return errors


def multiclass_ranking_error(net: MultiTaskNetwork, raw, batch: int = 512) -> float:
    """Classify by ranking the per-task scores; ties go to the lowest task."""
    inputs = raw.float_inputs()
    n = len(raw)
    if n == 0:
        raise ValueError("empty evaluation set")
    wrong = 0
    for lo in range(0, n, batch):
        x = inputs[lo : min(lo + batch, n)]
        scores = np.column_stack(
            [net.forward(t, x)[:, 0] for t in range(net.tasks)]
        )
        wrong += int(np.sum(scores.argmax(1) != raw.labels[lo : lo + len(x)]))
    net._tape = None
    return wrong / n


def evaluate_suite(net: MultiTaskNetwork, suite: OneVsAllSuite, batch: int = 512) -> dict:
    """Binary error per task, their mean, and the ranking multi-class error.

    Every suite task shares the source images, so one scoring pass per task
    serves both metrics."""
    inputs = suite.source.float_inputs()
    n = len(suite.source)
    if n == 0:
        raise ValueError("empty evaluation set")
    scores = np.empty((n, net.tasks))
    for lo in range(0, n, batch):
        x = inputs[lo : min(lo + batch, n)]
        for t in range(net.tasks):
            scores[lo : lo + len(x), t] = net.forward(t, x)[:, 0]
    net._tape = None
    per_task = [
        float(np.mean(np.where(scores[:, t] > 0, 1, -1) != suite.tasks[t].labels))
        for t in range(net.tasks)
    ]
    return {
        "per_task": per_task,
        "mean_binary": float(np.mean(per_task)),
        "multiclass": float(np.mean(scores.argmax(1) != suite.source.labels)),
    }
