"""Layer-chain model IR, validation and the manifest + blob file format.

A model is a straight chain of Conv2D / Dense layers. Weights live in float32
arrays that are frozen (non-writeable) once a layer is built, so graphs can be
shared freely; every rewrite returns a new graph.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ChainBroken, IoFailure, MalformedManifest, ShapeMismatch

CONV2D = "Conv2D"
DENSE = "Dense"
RELU = "ReLU"
IDENTITY = "Identity"
KINDS = (CONV2D, DENSE)
ACTIVATIONS = (RELU, IDENTITY)

MANIFEST_VERSION = 1
BLOB_DTYPE = np.dtype("<f4")

_LAYER_FIELDS = (
    "id", "kind", "in_channels", "out_channels", "kernel", "stride",
    "out_spatial", "activation", "prunable_out",
    "weights_offset", "weights_len", "bias_offset", "bias_len",
)


def _frozen(values, shape=None) -> np.ndarray:
    arr = np.array(values, dtype=np.float32, copy=True)
    if shape is not None:
        arr = arr.reshape(shape)
    arr.flags.writeable = False
    return arr


def _bits_equal(a: np.ndarray, b: np.ndarray) -> bool:
    # bitwise so that NaN payloads and signed zeros count
    return a.shape == b.shape and np.array_equal(
        np.ascontiguousarray(a, dtype=np.float32).view(np.uint32),
        np.ascontiguousarray(b, dtype=np.float32).view(np.uint32),
    )


@dataclass(frozen=True, eq=False)
class LayerNode:
    id: str
    kind: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    out_spatial: int
    weights: np.ndarray
    bias: np.ndarray
    activation: str = RELU
    prunable_out: bool = True

    def __post_init__(self):
        object.__setattr__(self, "weights", _frozen(self.weights))
        object.__setattr__(self, "bias", _frozen(self.bias))

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == CONV2D:
            return (self.out_channels, self.in_channels, self.kernel, self.kernel)
        return (self.out_channels, self.in_channels)

    def with_weights(self, weights, bias) -> "LayerNode":
        """Copy of this layer resized to the given weight/bias arrays."""
        weights = np.asarray(weights)
        return replace(
            self,
            out_channels=int(weights.shape[0]),
            in_channels=int(weights.shape[1]),
            weights=weights,
            bias=bias,
        )

    def __eq__(self, other):
        if not isinstance(other, LayerNode):
            return NotImplemented
        scalars = ("id", "kind", "in_channels", "out_channels", "kernel", "stride",
                   "out_spatial", "activation", "prunable_out")
        return (all(getattr(self, f) == getattr(other, f) for f in scalars)
                and _bits_equal(self.weights, other.weights)
                and _bits_equal(self.bias, other.bias))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ModelGraph:
    layers: tuple[LayerNode, ...]
    input_shape: tuple[int, int, int]
    num_classes: int
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "_index", {layer.id: i for i, layer in enumerate(self.layers)})

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, i) -> LayerNode:
        return self.layers[i]

    def index_of(self, layer_id: str) -> int:
        return self._index[layer_id]

    def with_layers(self, layers: Iterable[LayerNode]) -> "ModelGraph":
        return ModelGraph(tuple(layers), self.input_shape, self.num_classes)

    def input_spatial(self, i: int) -> int:
        """Spatial size (height == width) of the tensor entering layer ``i``."""
        return self.input_shape[1] if i == 0 else self.layers[i - 1].out_spatial

    def __eq__(self, other):
        if not isinstance(other, ModelGraph):
            return NotImplemented
        return (self.input_shape == other.input_shape
                and self.num_classes == other.num_classes
                and len(self.layers) == len(other.layers)
                and all(a == b for a, b in zip(self.layers, other.layers)))

    __hash__ = None


def validate_graph(graph: ModelGraph) -> list[str]:
    """Return one human-readable diagnostic per violated invariant.

    An empty list means the graph is well formed. Nothing is raised.
    """
    diags: list[str] = []
    shape = graph.input_shape
    if len(shape) != 3 or any(int(v) <= 0 for v in shape):
        diags.append(f"input_shape {list(shape)} must be three positive ints")
        return diags
    if shape[1] != shape[2]:
        diags.append(f"input_shape {list(shape)} must be square")
    if graph.num_classes <= 0:
        diags.append(f"num_classes {graph.num_classes} must be positive")
    if not graph.layers:
        diags.append("graph has no layers")
        return diags

    seen: set[str] = set()
    prev_out = shape[0]
    spatial = shape[1]
    last = len(graph.layers) - 1
    for i, layer in enumerate(graph.layers):
        tag = f"layer {layer.id!r}"
        if layer.id in seen:
            diags.append(f"{tag}: duplicate id")
        seen.add(layer.id)
        if layer.kind not in KINDS:
            diags.append(f"{tag}: unknown kind {layer.kind!r}")
            continue
        if layer.activation not in ACTIVATIONS:
            diags.append(f"{tag}: unknown activation {layer.activation!r}")
        dims = (layer.in_channels, layer.out_channels, layer.kernel, layer.stride, layer.out_spatial)
        if any(int(d) <= 0 for d in dims):
            diags.append(f"{tag}: channel/kernel/stride/spatial values must be positive")
            continue
        if layer.in_channels != prev_out:
            diags.append(f"{tag}: in_channels {layer.in_channels} != previous out_channels {prev_out}")
        if tuple(layer.weights.shape) != layer.weight_shape:
            diags.append(f"{tag}: weights shape {list(layer.weights.shape)} != {list(layer.weight_shape)}")
        if tuple(layer.bias.shape) != (layer.out_channels,):
            diags.append(f"{tag}: bias shape {list(layer.bias.shape)} != [{layer.out_channels}]")
        if not (np.all(np.isfinite(layer.weights)) and np.all(np.isfinite(layer.bias))):
            diags.append(f"{tag}: non-finite weight or bias values")
        if layer.kind == CONV2D:
            if layer.kernel > spatial:
                diags.append(f"{tag}: kernel {layer.kernel} larger than input spatial {spatial}")
            else:
                expect = (spatial - layer.kernel) // layer.stride + 1
                if layer.out_spatial != expect:
                    diags.append(f"{tag}: out_spatial {layer.out_spatial} != {expect} for valid convolution")
        else:
            if spatial != 1:
                diags.append(f"{tag}: Dense layer needs a 1x1 input, got spatial {spatial}")
            if (layer.kernel, layer.stride, layer.out_spatial) != (1, 1, 1):
                diags.append(f"{tag}: Dense layer needs kernel=stride=out_spatial=1")
        if i == last:
            if layer.kind != DENSE:
                diags.append(f"{tag}: final layer must be Dense")
            if layer.out_channels != graph.num_classes:
                diags.append(f"{tag}: final out_channels {layer.out_channels} != num_classes {graph.num_classes}")
            if layer.activation != IDENTITY:
                diags.append(f"{tag}: final layer activation must be Identity")
            if layer.prunable_out:
                diags.append(f"{tag}: final layer must not be output-prunable")
        prev_out = layer.out_channels
        spatial = layer.out_spatial
    return diags


def check_graph(graph: ModelGraph) -> ModelGraph:
    """Raise on an invalid graph; chain breaks get their own exception type."""
    diags = validate_graph(graph)
    if diags:
        chain = [d for d in diags if "previous out_channels" in d]
        exc = ChainBroken if chain else MalformedManifest
        raise exc("; ".join(chain or diags))
    return graph


# -- manifest + blob ---------------------------------------------------------

def _blob_path(manifest_path: Path) -> Path:
    return manifest_path.with_suffix(".bin")


def save_model(graph: ModelGraph, path) -> None:
    """Write ``graph`` as ``path`` (JSON manifest) plus a sibling ``.bin`` blob."""
    path = Path(path)
    blob_path = _blob_path(path)
    chunks: list[np.ndarray] = []
    offset = 0
    entries = []
    for layer in graph.layers:
        w = np.ascontiguousarray(layer.weights, dtype=BLOB_DTYPE).ravel()
        b = np.ascontiguousarray(layer.bias, dtype=BLOB_DTYPE).ravel()
        entries.append({
            "id": layer.id,
            "kind": layer.kind,
            "in_channels": int(layer.in_channels),
            "out_channels": int(layer.out_channels),
            "kernel": int(layer.kernel),
            "stride": int(layer.stride),
            "out_spatial": int(layer.out_spatial),
            "activation": layer.activation,
            "prunable_out": bool(layer.prunable_out),
            "weights_offset": offset,
            "weights_len": int(w.size),
            "bias_offset": offset + int(w.size),
            "bias_len": int(b.size),
        })
        offset += w.size + b.size
        chunks.extend((w, b))
    manifest = {
        "version": MANIFEST_VERSION,
        "input_shape": [int(v) for v in graph.input_shape],
        "num_classes": int(graph.num_classes),
        "blob_file": blob_path.name,
        "layers": entries,
    }
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype=BLOB_DTYPE)
    try:
        blob_path.write_bytes(blob.astype(BLOB_DTYPE).tobytes())
        path.write_text(json.dumps(manifest, indent=2) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write model to {path}: {exc}") from exc


def read_blob(path: Path) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise MalformedManifest(f"cannot read blob {path}: {exc}") from exc
    if len(raw) % BLOB_DTYPE.itemsize:
        raise ShapeMismatch(f"blob {path} size {len(raw)} is not a multiple of 4 bytes")
    return np.frombuffer(raw, dtype=BLOB_DTYPE)


def read_manifest(path) -> tuple[dict, Path]:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, UnicodeDecodeError) as exc:
        raise MalformedManifest(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedManifest(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(manifest, dict):
        raise MalformedManifest(f"{path}: manifest must be a JSON object")
    if manifest.get("version") != MANIFEST_VERSION:
        raise MalformedManifest(f"{path}: unsupported version {manifest.get('version')!r}")
    if "blob_file" not in manifest:
        raise MalformedManifest(f"{path}: missing field 'blob_file'")
    return manifest, path.parent / str(manifest["blob_file"])


def _int_field(entry: dict, name: str, where: str) -> int:
    value = entry.get(name)
    if isinstance(value, bool) or not isinstance(value, int):
        raise MalformedManifest(f"{where}: field {name!r} must be an integer, got {value!r}")
    return value


def _slice(blob: np.ndarray, offset: int, length: int, shape: Sequence[int], where: str) -> np.ndarray:
    expected = math.prod(shape)
    if length != expected:
        raise ShapeMismatch(f"{where}: {length} values stored for declared shape {list(shape)} ({expected})")
    if offset < 0 or offset + length > blob.size:
        raise ShapeMismatch(f"{where}: range [{offset}, {offset + length}) outside blob of {blob.size} values")
    return blob[offset:offset + length].reshape(shape)


def load_model(manifest_path) -> ModelGraph:
    manifest, blob_path = read_manifest(manifest_path)
    for name in ("input_shape", "num_classes", "layers"):
        if name not in manifest:
            raise MalformedManifest(f"{manifest_path}: missing field {name!r}")
    input_shape = manifest["input_shape"]
    if not (isinstance(input_shape, list) and len(input_shape) == 3
            and all(isinstance(v, int) and not isinstance(v, bool) for v in input_shape)):
        raise MalformedManifest(f"{manifest_path}: input_shape must be a list of three ints")
    num_classes = _int_field(manifest, "num_classes", str(manifest_path))
    if not isinstance(manifest["layers"], list):
        raise MalformedManifest(f"{manifest_path}: layers must be a list")
    blob = read_blob(blob_path)

    layers = []
    for i, entry in enumerate(manifest["layers"]):
        where = f"{manifest_path}: layers[{i}]"
        if not isinstance(entry, dict):
            raise MalformedManifest(f"{where}: must be an object")
        missing = [f for f in _LAYER_FIELDS if f not in entry]
        if missing:
            raise MalformedManifest(f"{where}: missing fields {missing}")
        kind = entry["kind"]
        if kind not in KINDS:
            raise MalformedManifest(f"{where}: unknown kind {kind!r}")
        if entry["activation"] not in ACTIVATIONS:
            raise MalformedManifest(f"{where}: unknown activation {entry['activation']!r}")
        if not isinstance(entry["prunable_out"], bool):
            raise MalformedManifest(f"{where}: prunable_out must be a boolean")
        ints = {name: _int_field(entry, name, where) for name in _LAYER_FIELDS
                if name not in ("id", "kind", "activation", "prunable_out")}
        if any(ints[k] <= 0 for k in ("in_channels", "out_channels", "kernel", "stride", "out_spatial")):
            raise MalformedManifest(f"{where}: channel/kernel/stride/spatial values must be positive")
        out_c, in_c, k = ints["out_channels"], ints["in_channels"], ints["kernel"]
        wshape = (out_c, in_c, k, k) if kind == CONV2D else (out_c, in_c)
        weights = _slice(blob, ints["weights_offset"], ints["weights_len"], wshape, f"{where} weights")
        bias = _slice(blob, ints["bias_offset"], ints["bias_len"], (out_c,), f"{where} bias")
        layers.append(LayerNode(
            id=str(entry["id"]), kind=kind, in_channels=in_c, out_channels=out_c,
            kernel=k, stride=ints["stride"], out_spatial=ints["out_spatial"],
            weights=weights, bias=bias, activation=entry["activation"],
            prunable_out=entry["prunable_out"],
        ))
    return check_graph(ModelGraph(tuple(layers), tuple(input_shape), num_classes))
