"""Multi-task networks whose parametrised layers draw their weights from a
per-layer sharing structure.

A network holds T task heads over common storage.  Each fully connected or
convolutional layer is either Independent (T private weight tensors), Tied
(one tensor reused by every task), or softly shared: the T per-task weights
are slices of a single stacked tensor composed on demand from LAF, Tucker or
TT factors.  Forward passes synthesise the stacked tensor once per
optimisation step and slice out the requested task; backward passes
accumulate slice gradients and map them back onto the factors.

Biases are per-task everywhere except Tied layers, which share one bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import layers as nn
from .factorization import (
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

__all__ = [
    "FC", "Conv", "MaxPool", "Activation",
    "SharingMode", "LayerSpec", "NetworkSpec",
    "MultiTaskNetwork", "build_network", "count_parameters",
]


@dataclass(frozen=True)
class FC:
    d_in: int
    d_out: int


@dataclass(frozen=True)
class Conv:
    h: int
    w: int
    in_ch: int
    out_ch: int


@dataclass(frozen=True)
class MaxPool:
    pass


@dataclass(frozen=True)
class Activation:
    fn: str  # "relu" | "tanh"

    def __post_init__(self):
        if self.fn not in ("relu", "tanh"):
            raise ValueError(f"unknown activation '{self.fn}'")


class SharingMode(Enum):
    INDEPENDENT = "independent"
    TIED = "tied"
    SOFT_LAF = "soft_laf"
    SOFT_TUCKER = "soft_tucker"
    SOFT_TT = "soft_tt"

    @property
    def soft(self) -> bool:
        return self in (SharingMode.SOFT_LAF, SharingMode.SOFT_TUCKER, SharingMode.SOFT_TT)


@dataclass(frozen=True)
class LayerSpec:
    kind: object
    mode: SharingMode | None = None  # None only for parameterless layers


@dataclass
class NetworkSpec:
    """Architecture shared by all T task networks.

    ``input_shape`` is (H, W, C) for image input or (D,) for vectors.
    ``head_dims``, when given, overrides the final FC layer's output width
    per task; unequal head widths force that layer to be Independent.
    """

    input_shape: tuple
    layers: list
    tasks: int
    head_dims: list | None = None

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if self.tasks < 1:
            raise ValueError("need at least one task")
        if self.head_dims is not None and len(self.head_dims) != self.tasks:
            raise ValueError("head_dims must list one output width per task")
        self._validate_chain()

    def head_dim(self, task: int) -> int | None:
        return None if self.head_dims is None else int(self.head_dims[task])

    def parametrised_indices(self) -> list:
        return [i for i, ls in enumerate(self.layers) if isinstance(ls.kind, (FC, Conv))]

    def _validate_chain(self):
        param_idx = self.parametrised_indices()
        if not param_idx:
            raise ValueError("network needs at least one parametrised layer")
        last_param = param_idx[-1]
        heterogeneous = self.head_dims is not None and len(set(self.head_dims)) > 1
        for task in range(self.tasks):
            shape = self.input_shape
            for i, ls in enumerate(self.layers):
                kind, mode = ls.kind, ls.mode
                if isinstance(kind, (FC, Conv)) and mode is None:
                    raise ValueError(f"layer {i} needs a sharing mode")
                if isinstance(kind, Conv):
                    if len(shape) != 3:
                        raise ValueError(f"layer {i}: conv needs (H, W, C) input, got {shape}")
                    h, w, c = shape
                    if c != kind.in_ch:
                        raise ValueError(f"layer {i}: {c} channels flowing into conv expecting {kind.in_ch}")
                    if h < kind.h or w < kind.w:
                        raise ValueError(f"layer {i}: kernel {kind.h}x{kind.w} larger than input {h}x{w}")
                    shape = (h - kind.h + 1, w - kind.w + 1, kind.out_ch)
                elif isinstance(kind, FC):
                    d = int(np.prod(shape))
                    if d != kind.d_in:
                        raise ValueError(f"layer {i}: fc expects {kind.d_in} inputs, receives {d}")
                    d_out = kind.d_out
                    if i == last_param and self.head_dims is not None:
                        d_out = self.head_dim(task)
                    shape = (d_out,)
                elif isinstance(kind, MaxPool):
                    if len(shape) != 3 or shape[0] < 2 or shape[1] < 2:
                        raise ValueError(f"layer {i}: cannot 2x2-pool input of shape {shape}")
                    shape = (shape[0] // 2, shape[1] // 2, shape[2])
                elif not isinstance(kind, Activation):
                    raise ValueError(f"layer {i}: unknown layer kind {kind!r}")
                if i == last_param and isinstance(kind, FC) and heterogeneous:
                    if mode is not SharingMode.INDEPENDENT:
                        raise ValueError(
                            "tasks with different head widths need an Independent head layer"
                        )


def _glorot_bound(kind) -> float:
    if isinstance(kind, FC):
        return math.sqrt(6.0 / (kind.d_in + kind.d_out))
    hw = kind.h * kind.w
    return math.sqrt(6.0 / (hw * kind.in_ch + hw * kind.out_ch))


def _weight_shape(kind, d_out=None):
    if isinstance(kind, FC):
        return (kind.d_in, d_out if d_out is not None else kind.d_out)
    return (kind.h, kind.w, kind.in_ch, kind.out_ch)


class _ParamLayer:
    """Storage, gradient accumulators and composition cache for one layer."""

    def __init__(self, index, kind, mode, tasks, head_dim_of=None):
        self.index = index
        self.kind = kind
        self.mode = mode
        self.tasks = tasks
        self.name = f"layer{index}.{'fc' if isinstance(kind, FC) else 'conv'}"
        self._head_dim_of = head_dim_of  # task -> output width override
        self.factors = None          # soft modes
        self.weights = None          # list (independent) or single array (tied)
        self.biases = None           # list of per-task arrays, or one array (tied)
        self._composed = None
        self.zero_grads()

    # -- shapes ---------------------------------------------------------
    def weight_shape(self, task):
        d_out = self._head_dim_of(task) if self._head_dim_of else None
        return _weight_shape(self.kind, d_out)

    def bias_width(self, task):
        return self.weight_shape(task)[-1]

    @property
    def stacked_shape(self):
        return self.weight_shape(0) + (self.tasks,)

    # -- parameter access -----------------------------------------------
    def composed(self) -> np.ndarray:
        if self._composed is None:
            if self.mode is SharingMode.SOFT_LAF:
                self._composed = compose_laf(self.factors)
            elif self.mode is SharingMode.SOFT_TUCKER:
                self._composed = compose_tucker(self.factors)
            else:
                self._composed = compose_tt(self.factors)
        return self._composed

    def weight_for(self, task) -> np.ndarray:
        if self.mode is SharingMode.INDEPENDENT:
            return self.weights[task]
        if self.mode is SharingMode.TIED:
            return self.weights
        return np.ascontiguousarray(self.composed()[..., task])

    def bias_for(self, task) -> np.ndarray:
        return self.biases if self.mode is SharingMode.TIED else self.biases[task]

    def invalidate(self):
        self._composed = None

    # -- gradients --------------------------------------------------------
    def zero_grads(self):
        if self.mode.soft:
            self._gw = np.zeros(self.stacked_shape)
            self._gb = [np.zeros(self.bias_width(t)) for t in range(self.tasks)]
        elif self.mode is SharingMode.TIED:
            self._gw = np.zeros(self.weight_shape(0))
            self._gb = np.zeros(self.bias_width(0))
        else:
            self._gw = [np.zeros(self.weight_shape(t)) for t in range(self.tasks)]
            self._gb = [np.zeros(self.bias_width(t)) for t in range(self.tasks)]

    def accumulate(self, task, grad_w, grad_b):
        if self.mode.soft:
            self._gw[..., task] += grad_w
            self._gb[task] += grad_b
        elif self.mode is SharingMode.TIED:
            self._gw += grad_w
            self._gb += grad_b
        else:
            self._gw[task] += grad_w
            self._gb[task] += grad_b

    # -- named parameter / gradient maps ---------------------------------
    def param_items(self):
        n = self.name
        if self.mode is SharingMode.TIED:
            yield f"{n}.w", self.weights
            yield f"{n}.b", self.biases
            return
        if self.mode is SharingMode.INDEPENDENT:
            for t in range(self.tasks):
                yield f"{n}.w{t}", self.weights[t]
        elif self.mode is SharingMode.SOFT_LAF:
            yield f"{n}.laf.l", self.factors.l
            yield f"{n}.laf.s", self.factors.s
        elif self.mode is SharingMode.SOFT_TUCKER:
            yield f"{n}.tucker.core", self.factors.core
            for i, u in enumerate(self.factors.u):
                yield f"{n}.tucker.u{i}", u
        else:
            yield f"{n}.tt.head", self.factors.head
            for i, c in enumerate(self.factors.cores):
                yield f"{n}.tt.core{i}", c
            yield f"{n}.tt.tail", self.factors.tail
        for t in range(self.tasks):
            yield f"{n}.b{t}", self.biases[t]

    def names_for_task(self, task):
        """Parameter names the given task's forward pass depends on."""
        n = self.name
        if self.mode is SharingMode.TIED:
            yield f"{n}.w"
            yield f"{n}.b"
            return
        if self.mode is SharingMode.INDEPENDENT:
            yield f"{n}.w{task}"
        elif self.mode is SharingMode.SOFT_LAF:
            yield f"{n}.laf.l"
            yield f"{n}.laf.s"
        elif self.mode is SharingMode.SOFT_TUCKER:
            yield f"{n}.tucker.core"
            for i in range(len(self.factors.u)):
                yield f"{n}.tucker.u{i}"
        else:
            yield f"{n}.tt.head"
            for i in range(len(self.factors.cores)):
                yield f"{n}.tt.core{i}"
            yield f"{n}.tt.tail"
        yield f"{n}.b{task}"

    def grad_items(self):
        n = self.name
        if self.mode is SharingMode.TIED:
            yield f"{n}.w", self._gw
            yield f"{n}.b", self._gb
            return
        if self.mode is SharingMode.INDEPENDENT:
            for t in range(self.tasks):
                yield f"{n}.w{t}", self._gw[t]
        else:
            g = compose_backward(self.factors, self._gw)
            if self.mode is SharingMode.SOFT_LAF:
                yield f"{n}.laf.l", g.l
                yield f"{n}.laf.s", g.s
            elif self.mode is SharingMode.SOFT_TUCKER:
                yield f"{n}.tucker.core", g.core
                for i, u in enumerate(g.u):
                    yield f"{n}.tucker.u{i}", u
            else:
                yield f"{n}.tt.head", g.head
                for i, c in enumerate(g.cores):
                    yield f"{n}.tt.core{i}", c
                yield f"{n}.tt.tail", g.tail
        for t in range(self.tasks):
            yield f"{n}.b{t}", self._gb[t]


class MultiTaskNetwork:
    """T task networks over the storage described by a :class:`NetworkSpec`."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self.param_layers = {}
        head_idx = spec.parametrised_indices()[-1]
        for i, ls in enumerate(spec.layers):
            if isinstance(ls.kind, (FC, Conv)):
                head_of = None
                if i == head_idx and spec.head_dims is not None:
                    head_of = spec.head_dim
                self.param_layers[i] = _ParamLayer(i, ls.kind, ls.mode, spec.tasks, head_of)
        self._tape = None

    @property
    def tasks(self) -> int:
        return self.spec.tasks

    def layer_state(self, index) -> _ParamLayer:
        if index not in self.param_layers:
            raise ValueError(f"layer {index} has no parameters")
        return self.param_layers[index]

    def set_layer_factors(self, index, factors, biases=None):
        """Install soft-sharing factors (and optionally per-task biases)."""
        layer = self.layer_state(index)
        if not layer.mode.soft:
            raise ValueError(f"layer {index} is {layer.mode.value}, not softly shared")
        expected = layer.stacked_shape
        if tuple(factors.out_shape) != expected:
            raise ValueError(f"factors compose to {factors.out_shape}, layer needs {expected}")
        layer.factors = factors
        if biases is not None:
            layer.biases = [np.asarray(b, dtype=np.float64).copy() for b in biases]
        layer.invalidate()

    # -- forward / backward ----------------------------------------------
    def forward(self, task: int, x: np.ndarray) -> np.ndarray:
        if not 0 <= task < self.tasks:
            raise ValueError(f"task {task} out of range [0, {self.tasks})")
        h = np.asarray(x, dtype=np.float64)
        tape = []
        for i, ls in enumerate(self.spec.layers):
            kind = ls.kind
            if isinstance(kind, Conv):
                layer = self.param_layers[i]
                h, cache = nn.conv2d_forward(h, layer.weight_for(task), layer.bias_for(task))
                tape.append(("conv", i, cache))
            elif isinstance(kind, FC):
                layer = self.param_layers[i]
                folded = None
                if h.ndim > 2:
                    folded = h.shape
                    h = h.reshape(h.shape[0], -1)
                h, cache = nn.fc_forward(h, layer.weight_for(task), layer.bias_for(task))
                tape.append(("fc", i, (cache, folded)))
            elif isinstance(kind, MaxPool):
                h, cache = nn.maxpool2_forward(h)
                tape.append(("pool", i, cache))
            else:
                if kind.fn == "relu":
                    h, cache = nn.relu_forward(h)
                else:
                    h, cache = nn.tanh_forward(h)
                tape.append(("act:" + kind.fn, i, cache))
        self._tape = (task, tape)
        return h

    def backward(self, task: int, grad_out: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients from one forward pass.

        Gradients add onto the existing accumulators, so several tasks can
        contribute before an optimisation step consumes them.
        """
        if self._tape is None:
            raise RuntimeError("backward called without a cached forward pass")
        tape_task, tape = self._tape
        if tape_task != task:
            raise RuntimeError(f"forward cached for task {tape_task}, backward asked for {task}")
        self._tape = None
        g = np.asarray(grad_out, dtype=np.float64)
        for pos, (op, i, cache) in reversed(list(enumerate(tape))):
            need_gx = pos > 0  # nothing consumes the input gradient
            if op == "conv":
                g, gw, gb = nn.conv2d_backward(g, cache, need_grad_x=need_gx)
                self.param_layers[i].accumulate(task, gw, gb)
            elif op == "fc":
                fc_cache, folded = cache
                g, gw, gb = nn.fc_backward(g, fc_cache, need_grad_x=need_gx)
                self.param_layers[i].accumulate(task, gw, gb)
                if folded is not None and g is not None:
                    g = g.reshape(folded)
            elif op == "pool":
                g = nn.maxpool2_backward(g, cache)
            elif op == "act:relu":
                g = nn.relu_backward(g, cache)
            else:
                g = nn.tanh_backward(g, cache)
        return g

    # -- parameter plumbing ------------------------------------------------
    def parameters(self) -> dict:
        out = {}
        for i in sorted(self.param_layers):
            out.update(self.param_layers[i].param_items())
        return out

    def gradients(self) -> dict:
        out = {}
        for i in sorted(self.param_layers):
            out.update(self.param_layers[i].grad_items())
        return out

    def task_param_names(self, task: int) -> list:
        """Names of every parameter on the given task's forward path.

        Optimisers should restrict a per-task step to this set so the
        private parameters of the other tasks stay untouched.
        """
        names = []
        for i in sorted(self.param_layers):
            names.extend(self.param_layers[i].names_for_task(task))
        return names

    def zero_grads(self):
        for layer in self.param_layers.values():
            layer.zero_grads()

    def invalidate(self):
        for layer in self.param_layers.values():
            layer.invalidate()

    def load_parameters(self, arrays: dict):
        """Overwrite parameters in place from a name -> array mapping."""
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)[:4]}...")
        for name, p in params.items():
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != p.shape:
                raise ValueError(f"{name}: stored shape {a.shape} != expected {p.shape}")
            p[...] = a
        self.invalidate()


def build_network(spec: NetworkSpec, init, seed: int) -> MultiTaskNetwork:
    """Allocate and randomly initialise a network.

    ``init`` is a policy record from :mod:`dmtrl.training` (PlainRandom or
    RandomDecompose).  Weights are uniform in +-sqrt(6 / (fan_in + fan_out));
    biases start at zero.  Independent layers with equal shapes across tasks
    share one draw, so identically configured task networks start identical.
    Softly shared layers need a rank-selecting policy: under RandomDecompose
    each task slice is sampled independently and the stacked tensor is
    factorised at the policy's epsilon.
    """
    from .training import PlainRandom, RandomDecompose  # cycle-free at call time

    net = MultiTaskNetwork(spec)
    rng = np.random.default_rng(seed)
    for i in sorted(net.param_layers):
        layer = net.param_layers[i]
        bound = _glorot_bound(layer.kind)
        draw = lambda shape: rng.uniform(-bound, bound, size=shape)
        if layer.mode is SharingMode.TIED:
            layer.weights = draw(layer.weight_shape(0))
            layer.biases = np.zeros(layer.bias_width(0))
            continue
        if layer.mode is SharingMode.INDEPENDENT:
            shapes = [layer.weight_shape(t) for t in range(spec.tasks)]
            if all(s == shapes[0] for s in shapes):
                w0 = draw(shapes[0])
                layer.weights = [w0.copy() for _ in range(spec.tasks)]
            else:
                layer.weights = [draw(s) for s in shapes]
        else:
            if isinstance(init, PlainRandom):
                raise ValueError(
                    f"layer {i} is softly shared; PlainRandom cannot pick its ranks "
                    "(use RandomDecompose or an STL-based initialisation)"
                )
            if not isinstance(init, RandomDecompose):
                raise ValueError(f"unsupported init policy {init!r} for build_network")
            stacked = np.stack([draw(layer.weight_shape(0)) for _ in range(spec.tasks)], axis=-1)
            if layer.mode is SharingMode.SOFT_LAF:
                layer.factors = laf_decompose(stacked, init.epsilon)
            elif layer.mode is SharingMode.SOFT_TUCKER:
                layer.factors = tucker_decompose(stacked, init.epsilon)
            else:
                layer.factors = tt_decompose(stacked, init.epsilon)
        layer.biases = [np.zeros(layer.bias_width(t)) for t in range(spec.tasks)]
    return net


def _factor_param_count(layer: _ParamLayer) -> int:
    if layer.mode is SharingMode.SOFT_LAF:
        return layer.factors.l.size + layer.factors.s.size
    if layer.mode is SharingMode.SOFT_TUCKER:
        return layer.factors.core.size + sum(u.size for u in layer.factors.u)
    return (layer.factors.head.size
            + sum(c.size for c in layer.factors.cores)
            + layer.factors.tail.size)


def count_parameters(net: MultiTaskNetwork) -> dict:
    """Exact learnable-scalar counts, per layer and total, plus the ratio
    against an all-Independent network of the same architecture."""
    by_layer = {}
    independent_total = 0
    for i in sorted(net.param_layers):
        layer = net.param_layers[i]
        ind = sum(
            int(np.prod(layer.weight_shape(t))) + layer.bias_width(t)
            for t in range(net.tasks)
        )
        independent_total += ind
        if layer.mode is SharingMode.INDEPENDENT:
            n = ind
        elif layer.mode is SharingMode.TIED:
            n = int(np.prod(layer.weight_shape(0))) + layer.bias_width(0)
        else:
            n = _factor_param_count(layer) + sum(
                layer.bias_width(t) for t in range(net.tasks)
            )
        by_layer[layer.name] = n
    total = sum(by_layer.values())
    return {
        "total": total,
        "by_layer": by_layer,
        "independent_total": independent_total,
        "ratio_vs_independent": total / independent_total,
    }
