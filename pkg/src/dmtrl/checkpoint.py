"""Binary checkpoint container for named float64 tensors.

Layout (all integers little-endian):

    magic "DMTL" | u32 version=1 | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | rank x u64 extents
                | raw little-endian float64 data
    u32 CRC32 of every preceding byte

Tensors are written in sorted name order, so the bytes for a given set of
arrays are unique and round trips are bit-exact.  A JSON manifest written
next to the checkpoint (``<path>.manifest.json``) carries the architecture
needed to rebuild a network from the stored parameters.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .factorization import LAFFactors, TTFactors, TuckerFactors
from .network import FC, Activation, Conv, MaxPool, LayerSpec, MultiTaskNetwork, NetworkSpec, SharingMode

__all__ = [
    "CheckpointError", "save_checkpoint", "load_checkpoint",
    "manifest_path", "save_network", "load_network",
]

MAGIC = b"DMTL"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict):
    payload = bytearray()
    payload += MAGIC
    payload += struct.pack("<II", VERSION, len(arrays))
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype=np.float64)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        if a.ndim > 0xFF:
            raise CheckpointError(f"tensor rank {a.ndim} exceeds format limit")
        payload += struct.pack("<H", len(encoded))
        payload += encoded
        payload += struct.pack("<B", a.ndim)
        payload += struct.pack(f"<{a.ndim}Q", *a.shape)
        payload += a.astype("<f8").tobytes()
    payload += struct.pack("<I", zlib.crc32(bytes(payload)) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(payload)


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise CheckpointError("checkpoint truncated before header")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, want {MAGIC!r}")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    actual_crc = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CheckpointError(
            f"CRC mismatch: stored 0x{stored_crc:08x}, computed 0x{actual_crc:08x}"
        )
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version}, reader supports {VERSION}")
    arrays = {}
    off = 12
    end = len(blob) - 4
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(blob, dtype="<f8", count=n, offset=off)
        off += 8 * n
        if off > end:
            raise CheckpointError(f"checkpoint truncated inside tensor '{name}'")
        arrays[name] = data.reshape(shape).astype(np.float64)
    if off != end:
        raise CheckpointError(f"{end - off} trailing bytes after the last tensor")
    return arrays


def manifest_path(ckpt_path) -> str:
    return f"{ckpt_path}.manifest.json"


_KIND_TAG = {FC: "fc", Conv: "conv", MaxPool: "maxpool"}


def _kind_to_json(kind):
    if isinstance(kind, FC):
        return {"kind": "fc", "d_in": kind.d_in, "d_out": kind.d_out}
    if isinstance(kind, Conv):
        return {"kind": "conv", "h": kind.h, "w": kind.w,
                "in_ch": kind.in_ch, "out_ch": kind.out_ch}
    if isinstance(kind, MaxPool):
        return {"kind": "maxpool"}
    return {"kind": kind.fn}


def _kind_from_json(entry):
    kind = entry["kind"]
    if kind == "fc":
        return FC(entry["d_in"], entry["d_out"])
    if kind == "conv":
        return Conv(entry["h"], entry["w"], entry["in_ch"], entry["out_ch"])
    if kind == "maxpool":
        return MaxPool()
    return Activation(kind)


def spec_to_json(spec: NetworkSpec) -> dict:
    return {
        "input_shape": list(spec.input_shape),
        "tasks": spec.tasks,
        "head_dims": list(spec.head_dims) if spec.head_dims is not None else None,
        "layers": [
            {"mode": ls.mode.value if ls.mode else None, **_kind_to_json(ls.kind)}
            for ls in spec.layers
        ],
    }


def spec_from_json(obj: dict) -> NetworkSpec:
    layers = [
        LayerSpec(_kind_from_json(e), SharingMode(e["mode"]) if e["mode"] else None)
        for e in obj["layers"]
    ]
    return NetworkSpec(tuple(obj["input_shape"]), layers, obj["tasks"], obj["head_dims"])


def layer_ranks(net: MultiTaskNetwork) -> dict:
    """Factorisation ranks per softly shared layer, for the manifest."""
    out = {}
    for i in sorted(net.param_layers):
        layer = net.param_layers[i]
        if not layer.mode.soft:
            continue
        f = layer.factors
        if layer.mode is SharingMode.SOFT_LAF:
            ranks = [int(f.s.shape[0])]
        elif layer.mode is SharingMode.SOFT_TUCKER:
            ranks = [int(k) for k in f.core.shape]
        else:
            ranks = [int(f.head.shape[1])] + [int(c.shape[2]) for c in f.cores]
        out[layer.name] = {"scheme": layer.mode.value, "ranks": ranks}
    return out


def save_network(ckpt_path, net: MultiTaskNetwork, extra: dict | None = None):
    """Write parameters as a checkpoint plus a JSON manifest beside it."""
    save_checkpoint(ckpt_path, net.parameters())
    manifest = {
        "format_version": VERSION,
        "spec": spec_to_json(net.spec),
        "ranks": layer_ranks(net),
    }
    if extra:
        manifest.update(extra)
    with open(manifest_path(ckpt_path), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_network(ckpt_path):
    """Rebuild a network (and its manifest) from a checkpoint pair."""
    arrays = load_checkpoint(ckpt_path)
    with open(manifest_path(ckpt_path), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format_version") != VERSION:
        raise CheckpointError(
            f"manifest version {manifest.get('format_version')}, reader supports {VERSION}"
        )
    spec = spec_from_json(manifest["spec"])
    net = MultiTaskNetwork(spec)
    for i, layer in net.param_layers.items():
        n = layer.name
        if layer.mode is SharingMode.TIED:
            layer.weights = arrays[f"{n}.w"].copy()
            layer.biases = arrays[f"{n}.b"].copy()
            continue
        if layer.mode is SharingMode.INDEPENDENT:
            layer.weights = [arrays[f"{n}.w{t}"].copy() for t in range(net.tasks)]
        elif layer.mode is SharingMode.SOFT_LAF:
            layer.factors = LAFFactors(arrays[f"{n}.laf.l"], arrays[f"{n}.laf.s"])
        elif layer.mode is SharingMode.SOFT_TUCKER:
            u = []
            j = 0
            while f"{n}.tucker.u{j}" in arrays:
                u.append(arrays[f"{n}.tucker.u{j}"])
                j += 1
            layer.factors = TuckerFactors(arrays[f"{n}.tucker.core"], u)
        else:
            cores = []
            j = 0
            while f"{n}.tt.core{j}" in arrays:
                cores.append(arrays[f"{n}.tt.core{j}"])
                j += 1
            layer.factors = TTFactors(arrays[f"{n}.tt.head"], cores, arrays[f"{n}.tt.tail"])
        layer.biases = [arrays[f"{n}.b{t}"].copy() for t in range(net.tasks)]
    return net, manifest
