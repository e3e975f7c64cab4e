"""Input checks shared by the estimator and the CLI, in the spirit of sklearn's check_array."""
from __future__ import annotations

from typing import Iterable

from .exceptions import InvalidRate, MalformedManifest, ShapeError
from .graph import ModelGraph, check_graph
from .inference import LabeledDataset


def check_rate(value, name: str = "beta", *, allow_zero: bool = False) -> float:
    try:
        rate = float(value)
    except (TypeError, ValueError) as exc:
        raise InvalidRate(f"{name} must be a number, got {value!r}") from exc
    low_ok = rate >= 0 if allow_zero else rate > 0
    if not (low_ok and rate < 1):
        raise InvalidRate(f"{name}={rate} outside {'[0, 1)' if allow_zero else '(0, 1)'}")
    return rate


def check_support(values: Iterable) -> tuple[float, ...]:
    support = tuple(sorted({check_rate(v) for v in values}))
    if not support:
        raise InvalidRate("at least one target rate is required")
    return support


def check_model(model) -> ModelGraph:
    if not isinstance(model, ModelGraph):
        raise TypeError(f"expected a ModelGraph, got {type(model).__name__}")
    return check_graph(model)


def check_dataset(model: ModelGraph, dataset) -> LabeledDataset:
    if not isinstance(dataset, LabeledDataset):
        raise TypeError(f"expected a LabeledDataset, got {type(dataset).__name__}")
    if len(dataset) == 0:
        raise ShapeError("dataset is empty")
    if dataset.input_shape != tuple(model.input_shape):
        raise ShapeError(f"dataset inputs {list(dataset.input_shape)} do not match model {list(model.input_shape)}")
    if dataset.num_classes != model.num_classes:
        raise MalformedManifest(f"dataset has {dataset.num_classes} classes, model {model.num_classes}")
    return dataset
