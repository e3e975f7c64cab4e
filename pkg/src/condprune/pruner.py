"""L1 channel ranking, rate discretisation and structured removal."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .cost import as_fraction
from .exceptions import EmptyLayer, IoFailure, MalformedManifest, PlanMismatch
from .graph import LayerNode, ModelGraph


@dataclass(frozen=True)
class PlanEntry:
    layer_id: str
    alpha: float
    kept: tuple[int, ...]


@dataclass(frozen=True)
class PruningPlan:
    beta: float
    entries: tuple[PlanEntry, ...]

    @property
    def alphas(self) -> tuple[float, ...]:
        return tuple(e.alpha for e in self.entries)

    @property
    def kept_counts(self) -> tuple[int, ...]:
        return tuple(len(e.kept) for e in self.entries)

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "layers": [{"id": e.layer_id, "alpha": e.alpha, "kept": list(e.kept)} for e in self.entries],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PruningPlan":
        try:
            entries = tuple(
                PlanEntry(str(e["id"]), float(e["alpha"]), tuple(int(k) for k in e["kept"]))
                for e in data["layers"]
            )
            return cls(float(data["beta"]), entries)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedManifest(f"malformed plan: {exc}") from exc

    @classmethod
    def identity(cls, graph: ModelGraph, beta: float = 0.0) -> "PruningPlan":
        return cls(beta, tuple(PlanEntry(l.id, 0.0, tuple(range(l.out_channels))) for l in graph.layers))


def save_plan(plan: PruningPlan, path) -> None:
    try:
        Path(path).write_text(json.dumps(plan.to_dict(), indent=2) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write plan to {path}: {exc}") from exc


def load_plan(path) -> PruningPlan:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedManifest(f"cannot read plan {path}: {exc}") from exc
    return PruningPlan.from_dict(data)


def channel_importance(layer: LayerNode) -> np.ndarray:
    w = np.abs(layer.weights.astype(np.float64))
    return w.reshape(w.shape[0], -1).sum(axis=1)


def rate_to_keep_count(out_channels: int, alpha) -> int:
    # floor, not round: the removed fraction stays >= alpha unless the 1-channel floor binds
    alpha = alpha if isinstance(alpha, Fraction) else as_fraction(alpha)
    return max(1, math.floor((1 - alpha) * out_channels))


def select_channels(scores: Sequence[float], keep: int) -> tuple[int, ...]:
    """Indices of the ``keep`` largest scores, ascending; ties keep the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= keep <= scores.size:
        raise ValueError(f"keep={keep} outside [0, {scores.size}]")
    order = np.argsort(-scores, kind="stable")
    return tuple(sorted(int(i) for i in order[:keep]))


def _check_kept(layer: LayerNode, kept: Sequence[int]) -> tuple[int, ...]:
    kept = tuple(int(k) for k in kept)
    if not kept:
        raise EmptyLayer(f"layer {layer.id!r}: kept set is empty")
    if any(b <= a for a, b in zip(kept, kept[1:])):
        raise PlanMismatch(f"layer {layer.id!r}: kept indices must be strictly increasing")
    if kept[0] < 0 or kept[-1] >= layer.out_channels:
        raise PlanMismatch(f"layer {layer.id!r}: kept index outside [0, {layer.out_channels})")
    if not layer.prunable_out and len(kept) != layer.out_channels:
        raise PlanMismatch(f"layer {layer.id!r} is not output-prunable but the plan drops channels")
    return kept


def prune_layer(graph: ModelGraph, index: int, kept: Sequence[int]) -> ModelGraph:
    """Keep only ``kept`` outputs of layer ``index`` and the matching inputs of its successor."""
    layer = graph.layers[index]
    kept = _check_kept(layer, kept)
    if len(kept) == layer.out_channels:
        return graph
    idx = np.asarray(kept, dtype=np.intp)
    layers = list(graph.layers)
    layers[index] = layer.with_weights(layer.weights[idx], layer.bias[idx])
    if index + 1 < len(layers):
        nxt = layers[index + 1]
        layers[index + 1] = nxt.with_weights(nxt.weights[:, idx], nxt.bias)
    return graph.with_layers(layers)


def apply_plan(graph: ModelGraph, plan: PruningPlan) -> ModelGraph:
    ids = [layer.id for layer in graph.layers]
    plan_ids = [e.layer_id for e in plan.entries]
    if plan_ids != ids:
        unknown = sorted(set(plan_ids) - set(ids))
        detail = f"unknown layer ids {unknown}" if unknown else f"plan layers {plan_ids} != graph layers {ids}"
        raise PlanMismatch(detail)
    for i, entry in enumerate(plan.entries):
        graph = prune_layer(graph, i, entry.kept)
    return graph


def zero_pruned(graph: ModelGraph, plan: PruningPlan) -> ModelGraph:
    """Same architecture, but every channel the plan drops has zero weights and bias."""
    layers = []
    for layer, entry in zip(graph.layers, plan.entries):
        mask = np.zeros(layer.out_channels, dtype=bool)
        mask[list(_check_kept(layer, entry.kept))] = True
        w = np.array(layer.weights)
        b = np.array(layer.bias)
        w[~mask] = 0.0
        b[~mask] = 0.0
        layers.append(layer.with_weights(w, b))
    return graph.with_layers(layers)
