"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"NLTM" | u32 version (=1) | u64 header length | UTF-8 JSON header
    then, for every tensor of every layer in order:
        float32 LE blob | u32 CRC32 of that blob

The header records the layer list, each layer's configuration and the names
and shapes of its tensors, so blob sizes are known before reading them.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .model_ir import (
    LAYER_TYPES,
    Conv2D,
    Dense,
    DecomposedConv2D,
    DecomposedDense,
    MaxPool2D,
    Model,
)
from .tensor_core import ConvGeometry

MAGIC = b"NLTM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _layer_config(layer) -> dict:
    if isinstance(layer, (Conv2D, DecomposedConv2D)):
        cfg = {"geom": dict(vars(layer.geom))}
        if isinstance(layer, DecomposedConv2D):
            cfg["rank"] = layer.rank
        return cfg
    if isinstance(layer, Dense):
        return {"in_features": layer.in_features, "out_features": layer.out_features}
    if isinstance(layer, DecomposedDense):
        return {
            "in_features": layer.in_features,
            "out_features": layer.out_features,
            "rank": layer.rank,
        }
    if isinstance(layer, MaxPool2D):
        return {"k": layer.k, "stride": layer.stride}
    return {}


def _header(model: Model) -> dict:
    layers = []
    for layer in model.layers:
        layers.append(
            {
                "type": type(layer).__name__,
                "config": _layer_config(layer),
                "tensors": [
                    {"name": n, "shape": list(getattr(layer, n).shape)}
                    for n in layer.param_names
                ],
            }
        )
    return {
        "name": model.name,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "norm_mean": None if model.norm_mean is None else list(model.norm_mean),
        "norm_std": None if model.norm_std is None else list(model.norm_std),
        "layers": layers,
    }


def to_bytes(model: Model) -> bytes:
    header = json.dumps(_header(model), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(header)), header]
    for layer in model.layers:
        for name in layer.param_names:
            blob = np.ascontiguousarray(getattr(layer, name), dtype="<f4").tobytes()
            parts.append(blob)
            parts.append(struct.pack("<I", zlib.crc32(blob)))
    return b"".join(parts)


def save(model: Model, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def _build_layer(entry: dict, tensors: dict):
    kind = entry["type"]
    cfg = entry["config"]
    cls = LAYER_TYPES.get(kind)
    if cls is None:
        raise CheckpointError(f"unknown layer type {kind!r}")
    if "geom" in cfg:
        cfg = dict(cfg, geom=ConvGeometry(**cfg["geom"]))
    return cls(**cfg, **tensors)


def from_bytes(data: bytes) -> Model:
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic")
    if len(data) < 16:
        raise CheckpointError("truncated checkpoint preamble")
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != VERSION:
        raise CheckpointError(f"version mismatch: file has {version}, reader supports {VERSION}")
    pos = 16
    if len(data) < pos + hlen:
        raise CheckpointError("truncated header")
    try:
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    pos += hlen

    layers = []
    for i, entry in enumerate(header["layers"]):
        tensors = {}
        for t in entry["tensors"]:
            nbytes = 4 * int(np.prod(t["shape"]))
            if len(data) < pos + nbytes + 4:
                raise CheckpointError(
                    f"truncated parameter blob in layer {i} ({entry['type']}.{t['name']})"
                )
            blob = data[pos : pos + nbytes]
            (crc,) = struct.unpack_from("<I", data, pos + nbytes)
            if zlib.crc32(blob) != crc:
                raise CheckpointError(
                    f"checksum failure in layer {i} ({entry['type']}.{t['name']})"
                )
            arr = np.frombuffer(blob, dtype="<f4").astype(np.float64).reshape(t["shape"])
            tensors[t["name"]] = arr
            pos += nbytes + 4
        layers.append(_build_layer(entry, tensors))
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after last tensor")

    mean, std = header.get("norm_mean"), header.get("norm_std")
    return Model(
        layers=layers,
        input_shape=tuple(header["input_shape"]),
        num_classes=header["num_classes"],
        name=header["name"],
        norm_mean=None if mean is None else tuple(mean),
        norm_std=None if std is None else tuple(std),
    )


def load(path) -> Model:
    return from_bytes(Path(path).read_bytes())


def round_to_f32(model: Model) -> Model:
    """The model exactly as it would come back from a save/load roundtrip."""
    return from_bytes(to_bytes(model))
