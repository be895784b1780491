"""Experiment configuration: strict JSON parsing and preset expansion.

Configs are UTF-8 JSON with exactly the documented fields; unknown fields
are rejected by name so a typo cannot silently change an experiment.  The
``sharing`` entry is either an explicit list with one mode per parametrised
layer or a named preset:

* ``stl``: every layer independent (one private network per task).
* ``udmtl-N``: the first N parametrised layers tied across tasks, the rest
  independent (user-defined hard sharing); needs 1 <= N < layer count.
* ``dmtrl-laf`` / ``dmtrl-tucker`` / ``dmtrl-tt``: every parametrised layer
  softly shared with the named structure (the head stays independent when
  tasks have different output widths).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .network import FC, Activation, Conv, LayerSpec, MaxPool, NetworkSpec, SharingMode
from .training import PlainRandom, RandomDecompose, StlInit, TrainConfig

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "load_config"]

PRESETS = ("stl", "udmtl", "dmtrl-laf", "dmtrl-tucker", "dmtrl-tt")

_SOFT_OF = {
    "dmtrl-laf": SharingMode.SOFT_LAF,
    "dmtrl-tucker": SharingMode.SOFT_TUCKER,
    "dmtrl-tt": SharingMode.SOFT_TT,
}

_MODE_NAMES = {
    "independent": SharingMode.INDEPENDENT,
    "tied": SharingMode.TIED,
    "soft_laf": SharingMode.SOFT_LAF,
    "soft_tucker": SharingMode.SOFT_TUCKER,
    "soft_tt": SharingMode.SOFT_TT,
}


class ConfigError(ValueError):
    pass


def _require_keys(obj: dict, where: str, required, optional=()):
    unknown = set(obj) - set(required) - set(optional)
    if unknown:
        raise ConfigError(f"unknown field '{sorted(unknown)[0]}' in {where}")
    missing = set(required) - set(obj)
    if missing:
        raise ConfigError(f"missing field '{sorted(missing)[0]}' in {where}")


def _parse_layer(entry: dict, i: int):
    if "kind" not in entry:
        raise ConfigError(f"missing field 'kind' in architecture[{i}]")
    kind = entry["kind"]
    if kind == "fc":
        _require_keys(entry, f"architecture[{i}]", ("kind", "d_in", "d_out"))
        return FC(int(entry["d_in"]), int(entry["d_out"]))
    if kind == "conv":
        _require_keys(entry, f"architecture[{i}]", ("kind", "h", "w", "in_ch", "out_ch"))
        return Conv(int(entry["h"]), int(entry["w"]), int(entry["in_ch"]), int(entry["out_ch"]))
    if kind == "maxpool":
        _require_keys(entry, f"architecture[{i}]", ("kind",))
        return MaxPool()
    if kind in ("relu", "tanh"):
        _require_keys(entry, f"architecture[{i}]", ("kind",))
        return Activation(kind)
    raise ConfigError(f"unknown layer kind '{kind}' in architecture[{i}]")


def expand_sharing(sharing, n_param_layers: int, heterogeneous: bool):
    """Map a preset name or an explicit mode list to per-layer modes."""
    if isinstance(sharing, str):
        if sharing == "stl":
            return [SharingMode.INDEPENDENT] * n_param_layers
        if sharing.startswith("udmtl-"):
            try:
                n = int(sharing.split("-", 1)[1])
            except ValueError:
                raise ConfigError(f"bad preset in field 'sharing': '{sharing}'")
            if not 1 <= n < n_param_layers:
                raise ConfigError(
                    f"field 'sharing': udmtl-{n} needs 1 <= N < {n_param_layers} "
                    f"parametrised layers"
                )
            return [SharingMode.TIED] * n + [SharingMode.INDEPENDENT] * (n_param_layers - n)
        if sharing in _SOFT_OF:
            modes = [_SOFT_OF[sharing]] * n_param_layers
            if heterogeneous:
                modes[-1] = SharingMode.INDEPENDENT
            return modes
        raise ConfigError(f"field 'sharing': unknown preset '{sharing}'")
    if isinstance(sharing, list):
        if len(sharing) != n_param_layers:
            raise ConfigError(
                f"field 'sharing': {len(sharing)} modes for {n_param_layers} "
                f"parametrised layers"
            )
        try:
            return [_MODE_NAMES[m] for m in sharing]
        except KeyError as e:
            raise ConfigError(f"field 'sharing': unknown mode {e.args[0]!r}")
    raise ConfigError("field 'sharing' must be a preset name or a list of modes")


def _parse_init(obj: dict):
    if "policy" not in obj:
        raise ConfigError("missing field 'policy' in init")
    policy = obj["policy"]
    if policy == "stl":
        _require_keys(obj, "init", ("policy",), ("pretrain_epochs", "epsilon"))
        return StlInit(int(obj.get("pretrain_epochs", 10)), float(obj.get("epsilon", 0.10)))
    if policy == "random_decompose":
        _require_keys(obj, "init", ("policy",), ("epsilon",))
        return RandomDecompose(float(obj.get("epsilon", 0.10)))
    if policy == "plain_random":
        _require_keys(obj, "init", ("policy",))
        return PlainRandom()
    raise ConfigError(f"unknown init policy '{policy}'")


def _parse_train(obj: dict) -> TrainConfig:
    allowed = ("optimizer", "lr", "momentum", "beta1", "beta2", "adam_eps",
               "batch_size", "epochs", "seed", "task_sampling")
    _require_keys(obj, "train", (), allowed)
    try:
        return TrainConfig(**obj)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad train settings: {e}")


_DATA_FIELDS = {
    "idx": (("source", "train_images", "train_labels", "test_images", "test_labels"), ()),
    "synthetic_digits": (("source",),
                         ("n_train", "n_test", "noise", "jitter", "class_seed")),
    "synthetic_heterogeneous": (("source",),
                                ("n_train_per_task", "n_test_per_task", "noise", "class_seed")),
}


def _parse_data(obj: dict) -> dict:
    if "source" not in obj:
        raise ConfigError("missing field 'source' in data")
    source = obj["source"]
    if source not in _DATA_FIELDS:
        raise ConfigError(f"unknown data source '{source}'")
    required, optional = _DATA_FIELDS[source]
    _require_keys(obj, "data", required, optional)
    return dict(obj)


@dataclass
class ExperimentConfig:
    tasks: int
    input_shape: tuple
    architecture: list          # LayerKind records, in order
    sharing: object             # preset string or explicit mode list
    init: object                # StlInit | RandomDecompose | PlainRandom
    train: TrainConfig
    data: dict
    head_dims: list | None = None
    fractions: list = field(default_factory=lambda: [1.0])
    repeats: int = 1
    presets: list | None = None   # sweep only
    name: str = "run"

    def n_param_layers(self) -> int:
        return sum(1 for k in self.architecture if isinstance(k, (FC, Conv)))

    def network_spec(self, sharing=None) -> NetworkSpec:
        modes = expand_sharing(
            self.sharing if sharing is None else sharing,
            self.n_param_layers(),
            self.head_dims is not None and len(set(self.head_dims)) > 1,
        )
        it = iter(modes)
        layers = [
            LayerSpec(k, next(it)) if isinstance(k, (FC, Conv)) else LayerSpec(k)
            for k in self.architecture
        ]
        return NetworkSpec(self.input_shape, layers, self.tasks, self.head_dims)


def parse_config(obj: dict) -> ExperimentConfig:
    _require_keys(
        obj, "config",
        ("tasks", "input_shape", "architecture", "sharing", "init", "train", "data"),
        ("head_dims", "fractions", "repeats", "presets", "name"),
    )
    if not isinstance(obj["architecture"], list) or not obj["architecture"]:
        raise ConfigError("field 'architecture' must be a non-empty list")
    arch = [_parse_layer(e, i) for i, e in enumerate(obj["architecture"])]
    cfg = ExperimentConfig(
        tasks=int(obj["tasks"]),
        input_shape=tuple(obj["input_shape"]),
        architecture=arch,
        sharing=obj["sharing"],
        init=_parse_init(obj["init"]),
        train=_parse_train(obj["train"]),
        data=_parse_data(obj["data"]),
        head_dims=obj.get("head_dims"),
        fractions=[float(f) for f in obj.get("fractions", [1.0])],
        repeats=int(obj.get("repeats", 1)),
        presets=obj.get("presets"),
        name=obj.get("name", "run"),
    )
    if cfg.repeats < 1:
        raise ConfigError("field 'repeats' must be at least 1")
    for f in cfg.fractions:
        if not 0.0 < f <= 1.0:
            raise ConfigError(f"field 'fractions': {f} outside (0, 1]")
    cfg.network_spec()  # validates sharing expansion and the shape chain
    if cfg.presets is not None:
        for p in cfg.presets:
            cfg.network_spec(sharing=p)
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}")
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    return parse_config(obj)
