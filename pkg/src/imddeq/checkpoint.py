"""Plain-text, versioned model checkpoints (INI dialect, floats as repr)."""

from __future__ import annotations

import configparser
import io

import numpy as np

from .cnn import Cnn, ConvLayerSpec
from .volterra import VolterraSpec

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _floats(a) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(a))


def _parse_floats(text: str) -> np.ndarray:
    return np.array([float(t) for t in text.split()], dtype=float)


def dumps(model) -> str:
    cp = configparser.ConfigParser()
    if isinstance(model, Cnn):
        cp["checkpoint"] = {"version": str(FORMAT_VERSION), "type": "cnn",
                            "layers": str(len(model.layers))}
        for i, (spec, k) in enumerate(zip(model.layers, model.weights)):
            cp[f"layer{i}"] = {
                "in_channels": str(spec.in_channels),
                "out_channels": str(spec.out_channels),
                "kernel_size": str(spec.kernel_size),
                "padding": str(spec.padding),
                "stride": str(spec.stride),
                "dilation": str(spec.dilation),
                "relu": str(spec.relu).lower(),
                "weights": _floats(k),
            }
    elif isinstance(model, VolterraSpec):
        if model.weights is None:
            raise CheckpointError("untrained Volterra model")
        cp["checkpoint"] = {"version": str(FORMAT_VERSION), "type": "volterra"}
        cp["volterra"] = {
            "memory": ", ".join(map(str, model.memory)),
            "include_bias": str(model.include_bias).lower(),
            "weights": _floats(model.weights),
        }
        if model.scales is not None:
            cp["volterra"]["scales"] = _floats(model.scales)
    else:
        raise CheckpointError(f"cannot serialize {type(model).__name__}")
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def loads(text: str):
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
        head = cp["checkpoint"]
    except (configparser.Error, KeyError) as exc:
        raise CheckpointError(f"not a checkpoint: {exc}") from exc
    version = head.getint("version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    kind = head.get("type")
    if kind == "cnn":
        layers, weights = [], []
        for i in range(head.getint("layers")):
            sec = cp[f"layer{i}"]
            spec = ConvLayerSpec(sec.getint("in_channels"), sec.getint("out_channels"),
                                 sec.getint("kernel_size"), sec.getint("padding"),
                                 sec.getint("stride"), sec.getint("dilation"),
                                 sec.getboolean("relu"))
            layers.append(spec)
            weights.append(_parse_floats(sec["weights"]).reshape(spec.weight_shape))
        return Cnn(layers, weights)
    if kind == "volterra":
        sec = cp["volterra"]
        spec = VolterraSpec(
            tuple(int(v) for v in sec["memory"].split(",")),
            _parse_floats(sec["weights"]),
            sec.getboolean("include_bias"),
            _parse_floats(sec["scales"]) if "scales" in sec else None,
        )
        if len(spec.weights) != spec.n_features:
            raise CheckpointError("weight count does not match the Volterra memory")
        return spec
    raise CheckpointError(f"unknown model type {kind!r}")


def save(model, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(model))


def load(path):
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())
