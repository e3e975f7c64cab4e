"""Synthetic models with planted, provably removable channels.

In every output-prunable layer a fraction ``redundancy`` of the channels are
copies of real channels scaled by 0.01, so they rank last under L1. Their
outgoing weights in the next layer are zero, so removing them leaves every
logit untouched. Labels are the unpruned model's own predictions, balanced
across classes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidSpec
from .graph import CONV2D, DENSE, IDENTITY, RELU, LayerNode, ModelGraph, validate_graph
from .inference import LabeledDataset, forward, predict

DUPLICATE_SCALE = 0.01


@dataclass(frozen=True)
class FixtureSpec:
    widths: tuple[int, ...] = (8, 16, 16)
    redundancy: float = 0.5
    seed: int = 0
    in_channels: int = 3
    num_classes: int = 4
    kernel: int = 3
    n_samples: int = 512

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or any(w < 1 for w in self.widths):
            raise InvalidSpec(f"widths must be positive ints, got {list(self.widths)}")
        if not 0 <= self.redundancy < 1:
            raise InvalidSpec(f"redundancy must lie in [0, 1), got {self.redundancy}")
        if self.in_channels < 1 or self.num_classes < 2 or self.kernel < 1:
            raise InvalidSpec("in_channels >= 1, num_classes >= 2 and kernel >= 1 required")
        if self.n_samples < self.num_classes:
            raise InvalidSpec("need at least one sample per class")


def planted_channels(graph: ModelGraph) -> dict[str, tuple[int, ...]]:
    """Indices of channels whose weights are a 0.01-scaled copy of another row."""
    found = {}
    for layer in graph.layers:
        if not layer.prunable_out:
            continue
        rows = layer.weights.reshape(layer.out_channels, -1)
        dups = []
        for c in range(layer.out_channels):
            for s in range(layer.out_channels):
                if s != c and np.any(rows[s]) and np.array_equal(
                        rows[c], (rows[s] * np.float32(DUPLICATE_SCALE)).astype(np.float32)):
                    dups.append(c)
                    break
        found[layer.id] = tuple(dups)
    return found


def fixture_redundant_model(spec: FixtureSpec) -> tuple[ModelGraph, LabeledDataset]:
    rng = np.random.default_rng(spec.seed)
    n_conv = len(spec.widths)
    spatial = (spec.kernel - 1) * n_conv + 1
    input_shape = (spec.in_channels, spatial, spatial)

    layers: list[LayerNode] = []
    prev_dups = np.zeros(0, dtype=np.intp)
    prev_out = spec.in_channels
    for i, width in enumerate(spec.widths):
        fan_in = prev_out * spec.kernel * spec.kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(width, prev_out, spec.kernel, spec.kernel))
        b = rng.normal(0.0, 0.1, size=width)
        w[:, prev_dups] = 0.0
        n_dup = int(np.floor(spec.redundancy * width))
        if n_dup >= width:
            raise InvalidSpec(f"layer {i}: redundancy leaves no real channel out of {width}")
        order = rng.permutation(width)
        dups, real = np.sort(order[:n_dup]), order[n_dup:]
        sources = rng.choice(real, size=n_dup)
        w = w.astype(np.float32)
        b = b.astype(np.float32)
        w[dups] = w[sources] * np.float32(DUPLICATE_SCALE)
        b[dups] = b[sources] * np.float32(DUPLICATE_SCALE)
        layers.append(LayerNode(
            id=f"conv{i}", kind=CONV2D, in_channels=prev_out, out_channels=width,
            kernel=spec.kernel, stride=1, out_spatial=spatial - (spec.kernel - 1) * (i + 1),
            weights=w, bias=b, activation=RELU, prunable_out=True,
        ))
        prev_dups, prev_out = dups, width

    w = rng.normal(0.0, np.sqrt(1.0 / prev_out), size=(spec.num_classes, prev_out)).astype(np.float32)
    w[:, prev_dups] = 0.0
    head = LayerNode(
        id="fc", kind=DENSE, in_channels=prev_out, out_channels=spec.num_classes,
        kernel=1, stride=1, out_spatial=1, weights=w, bias=np.zeros(spec.num_classes),
        activation=IDENTITY, prunable_out=False,
    )
    graph = ModelGraph((*layers, head), input_shape, spec.num_classes)
    bias = _balancing_bias(graph, rng, 8 * spec.n_samples)
    graph = graph.with_layers((*layers, head.with_weights(w, bias)))
    diags = validate_graph(graph)
    if diags:
        raise InvalidSpec("; ".join(diags))
    return graph, _balanced_dataset(graph, spec, rng)


def _balancing_bias(graph: ModelGraph, rng: np.random.Generator, n: int) -> np.ndarray:
    """Classifier bias under which every class wins about equally often."""
    xs = rng.normal(size=(n, *graph.input_shape))
    logits = forward(graph, xs)
    k = logits.shape[1]
    bias = -logits.mean(axis=0)
    step = 0.5 * float(logits.std())
    for _ in range(200):
        freq = np.bincount(np.argmax(logits + bias, axis=1), minlength=k) / n
        if np.all(np.abs(freq - 1.0 / k) < 0.25 / k):
            break
        bias += step * (1.0 / k - freq)
    return bias.astype(np.float32)


def _balanced_dataset(graph: ModelGraph, spec: FixtureSpec, rng: np.random.Generator) -> LabeledDataset:
    per_class = spec.n_samples // spec.num_classes
    extra = spec.n_samples - per_class * spec.num_classes
    want = np.full(spec.num_classes, per_class)
    want[:extra] += 1
    picked: list[list[np.ndarray]] = [[] for _ in range(spec.num_classes)]
    have = np.zeros(spec.num_classes, dtype=int)
    for _ in range(200):
        xs = rng.normal(size=(4 * spec.n_samples, *graph.input_shape)).astype(np.float32)
        ys = predict(graph, xs)
        for x, y in zip(xs, ys):
            if have[y] < want[y]:
                picked[y].append(x)
                have[y] += 1
        if np.all(have >= want):
            break
    else:
        raise InvalidSpec(f"could not balance classes for seed {spec.seed}; per-class counts {have.tolist()}")
    inputs = np.stack([x for cls in picked for x in cls])
    labels = np.concatenate([np.full(len(cls), c) for c, cls in enumerate(picked)])
    order = rng.permutation(len(labels))
    return LabeledDataset(inputs[order], labels[order], spec.num_classes)
