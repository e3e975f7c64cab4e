"""Forward pass over a layer chain and the validation-accuracy reward."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import IoFailure, MalformedManifest, ShapeError, ShapeMismatch
from .graph import BLOB_DTYPE, CONV2D, RELU, ModelGraph, read_blob, read_manifest

TRAIN_PROXY = "train-proxy"
VALIDATION = "validation"


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    inputs: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = VALIDATION

    def __post_init__(self):
        inputs = np.array(self.inputs, dtype=np.float32)
        labels = np.array(self.labels, dtype=np.int64)
        if inputs.ndim != 4:
            raise ShapeError(f"inputs must be (N, C, H, W), got shape {inputs.shape}")
        if labels.shape != (inputs.shape[0],):
            raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for {inputs.shape[0]} inputs")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ShapeError(f"labels must lie in [0, {self.num_classes})")
        inputs.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(int(v) for v in self.inputs.shape[1:])

    def subset(self, n: int) -> "LabeledDataset":
        return LabeledDataset(self.inputs[:n], self.labels[:n], self.num_classes, self.split)


def _conv2d(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    k = w.shape[-1]
    windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.einsum("nchwij,ocij->nohw", windows, w, optimize=True)


def forward(graph: ModelGraph, inputs) -> np.ndarray:
    """Logits for one ``(C, H, W)`` input or a batch ``(N, C, H, W)``."""
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(graph.input_shape):
        raise ShapeError(f"input shape {list(np.shape(inputs))} does not match model input {list(graph.input_shape)}")
    for layer in graph.layers:
        w = layer.weights.astype(np.float64)
        b = layer.bias.astype(np.float64)
        if layer.kind == CONV2D:
            if x.shape[1] != layer.in_channels:
                raise ShapeError(f"layer {layer.id!r} expects {layer.in_channels} channels, got {x.shape[1]}")
            x = _conv2d(x, w, layer.stride)
            if x.shape[-1] != layer.out_spatial:
                raise ShapeError(f"layer {layer.id!r} produced spatial {x.shape[-1]}, declared {layer.out_spatial}")
            x = x + b[None, :, None, None]
        else:
            x = x.reshape(x.shape[0], -1)
            if x.shape[1] != layer.in_channels:
                raise ShapeError(f"layer {layer.id!r} expects {layer.in_channels} features, got {x.shape[1]}")
            x = x @ w.T + b
        if layer.activation == RELU:
            x = np.maximum(x, 0.0)
    logits = x.reshape(x.shape[0], -1)
    return logits[0] if single else logits


def predict(graph: ModelGraph, inputs) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class
    return np.argmax(forward(graph, inputs), axis=-1)


def evaluate_accuracy(graph: ModelGraph, dataset: LabeledDataset, batch_size: int = 1024) -> float:
    if len(dataset) == 0:
        raise ValueError("cannot score an empty dataset")
    correct = 0
    for start in range(0, len(dataset), batch_size):
        stop = start + batch_size
        correct += int(np.sum(predict(graph, dataset.inputs[start:stop]) == dataset.labels[start:stop]))
    return correct / len(dataset)


def reward(accuracy: float) -> float:
    return float(accuracy)


def save_dataset(dataset: LabeledDataset, path) -> None:
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    manifest = {
        "version": 1,
        "input_shape": list(dataset.input_shape),
        "num_classes": int(dataset.num_classes),
        "count": len(dataset),
        "split": dataset.split,
        "blob_file": blob_path.name,
        "labels": [int(v) for v in dataset.labels],
    }
    try:
        blob_path.write_bytes(np.ascontiguousarray(dataset.inputs, dtype=BLOB_DTYPE).tobytes())
        path.write_text(json.dumps(manifest) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write dataset to {path}: {exc}") from exc


def load_dataset(path) -> LabeledDataset:
    manifest, blob_path = read_manifest(path)
    for name in ("input_shape", "num_classes", "count", "labels"):
        if name not in manifest:
            raise MalformedManifest(f"{path}: missing field {name!r}")
    shape = manifest["input_shape"]
    count = manifest["count"]
    labels = manifest["labels"]
    if not (isinstance(shape, list) and len(shape) == 3 and isinstance(count, int) and isinstance(labels, list)):
        raise MalformedManifest(f"{path}: bad input_shape/count/labels")
    if len(labels) != count:
        raise MalformedManifest(f"{path}: {len(labels)} labels for count {count}")
    blob = read_blob(blob_path)
    expected = count * int(np.prod(shape))
    if blob.size != expected:
        raise ShapeMismatch(f"{path}: blob holds {blob.size} values, expected {expected}")
    try:
        return LabeledDataset(
            blob.reshape([count, *shape]), labels, int(manifest["num_classes"]),
            manifest.get("split", VALIDATION),
        )
    except ShapeError as exc:
        raise MalformedManifest(f"{path}: {exc}") from exc
