"""Exact MAC / parameter accounting and the per-layer budget floor.

Costs are plain Python ints (multiply-accumulate counts). Rates are handled as
``fractions.Fraction`` so the clamp decision is the same on every platform.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Sequence

from .exceptions import CursorMismatch, InfeasibleBudget, InvalidRate
from .graph import CONV2D, LayerNode, ModelGraph


def as_fraction(value) -> Fraction:
    """Rational view of a rate.

    Floats go through their shortest decimal repr, so ``0.3`` becomes ``3/10``
    rather than the binary expansion.
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    return Fraction(repr(float(value)))


def layer_cost(layer: LayerNode, in_ch: int | None = None, out_ch: int | None = None) -> int:
    in_ch = layer.in_channels if in_ch is None else int(in_ch)
    out_ch = layer.out_channels if out_ch is None else int(out_ch)
    if layer.kind == CONV2D:
        return layer.kernel * layer.kernel * in_ch * out_ch * layer.out_spatial * layer.out_spatial
    return in_ch * out_ch


def layer_costs(graph: ModelGraph) -> tuple[int, ...]:
    return tuple(layer_cost(layer) for layer in graph.layers)


def total_cost(graph: ModelGraph) -> int:
    return sum(layer_costs(graph))


def params_count(graph: ModelGraph) -> int:
    return sum(int(layer.weights.size) + int(layer.bias.size) for layer in graph.layers)


def prunable_cost(graph: ModelGraph) -> int:
    return sum(layer_cost(layer) for layer in graph.layers if layer.prunable_out)


def max_feasible_rate(graph: ModelGraph, alpha_max) -> Fraction:
    """Largest target rate the floor can always honour on ``graph``."""
    c_all = total_cost(graph)
    if c_all == 0:
        return Fraction(0)
    return as_fraction(alpha_max) * Fraction(prunable_cost(graph), c_all)


def rounding_slack(graph: ModelGraph, kept_counts: Sequence[int]) -> float:
    """Bound on the reduction lost to keeping whole channels.

    Sums, over output-prunable layers, the cost of one output channel at the
    moment that layer is decided (its inputs already shrunk by the previous
    decision), relative to the cost of ``graph``.
    """
    c_all = total_cost(graph)
    if c_all == 0:
        return 0.0
    slack = Fraction(0)
    in_ch = graph.input_shape[0]
    for layer, kept in zip(graph.layers, kept_counts):
        if layer.prunable_out:
            slack += Fraction(layer_cost(layer, in_ch, layer.out_channels), c_all * layer.out_channels)
        in_ch = kept
    return float(slack)


@dataclass(frozen=True)
class BudgetLedger:
    """Per-episode cost bookkeeping.

    ``c_rest`` is the current cost of every layer strictly after ``cursor``;
    ``c_fixed`` is the part of it held by layers that are not output-prunable.
    The floor only credits ``c_rest - c_fixed`` as removable later: with that
    credit, a floor that fits under ``alpha_max`` at every step carries the
    episode to a reduction of at least ``beta``.
    """

    beta: Fraction
    alpha_max: Fraction
    c_all: int
    current_costs: tuple[int, ...]
    cursor: int
    c_reduced: int
    c_rest: int
    c_fixed: int = 0
    prunable: tuple[bool, ...] = ()

    @property
    def n_layers(self) -> int:
        return len(self.current_costs)

    def conserved(self) -> bool:
        decided = sum(self.current_costs[: self.cursor + 1])
        return self.c_all == self.c_reduced + decided + self.c_rest


def _fixed_after(costs: Sequence[int], prunable: Sequence[bool], cursor: int) -> int:
    return sum(c for c, p in zip(costs[cursor + 1:], prunable[cursor + 1:]) if not p)


def _check_rate(value, name: str, *, allow_one: bool) -> Fraction:
    rate = as_fraction(value)
    upper_ok = rate <= 1 if allow_one else rate < 1
    if not (rate > 0 and upper_ok):
        bound = "(0, 1]" if allow_one else "(0, 1)"
        raise InvalidRate(f"{name}={float(rate)} outside {bound}")
    return rate


def ledger_init(graph: ModelGraph, beta, alpha_max) -> BudgetLedger:
    beta = _check_rate(beta, "beta", allow_one=False)
    alpha_max = _check_rate(alpha_max, "alpha_max", allow_one=True)
    costs = layer_costs(graph)
    prunable = tuple(layer.prunable_out for layer in graph.layers)
    c_all = sum(costs)
    return BudgetLedger(
        beta=beta,
        alpha_max=alpha_max,
        c_all=c_all,
        current_costs=costs,
        cursor=0,
        c_reduced=0,
        c_rest=c_all - (costs[0] if costs else 0),
        c_fixed=_fixed_after(costs, prunable, 0),
        prunable=prunable,
    )


def _check_cursor(ledger: BudgetLedger, l: int) -> None:
    if l != ledger.cursor:
        raise CursorMismatch(f"layer {l} requested but ledger cursor is at {ledger.cursor}")


def min_reduction(ledger: BudgetLedger, l: int) -> Fraction:
    """Cost layer ``l`` must remove so that the rest can still reach beta.

    ``beta * c_all - alpha_max * (c_rest - c_fixed) - c_reduced``; negative
    when no floor binds.
    """
    _check_cursor(ledger, l)
    reducible_rest = ledger.c_rest - ledger.c_fixed
    return ledger.beta * ledger.c_all - ledger.alpha_max * reducible_rest - ledger.c_reduced


def clamp_rate(ledger: BudgetLedger, l: int, proposed) -> Fraction:
    """Raise the proposed rate to the budget floor, then clip to [0, alpha_max]."""
    _check_cursor(ledger, l)
    proposed = as_fraction(proposed)
    c_l = ledger.current_costs[l]
    floor = min_reduction(ledger, l) / c_l if c_l > 0 else Fraction(0)
    if floor > ledger.alpha_max:
        raise InfeasibleBudget(
            f"layer {l} must prune {float(floor):.4f} of its cost, above alpha_max={float(ledger.alpha_max)}"
        )
    rate = max(proposed, floor)
    return min(max(rate, Fraction(0)), ledger.alpha_max)


def ledger_advance(ledger: BudgetLedger, l: int, achieved_graph: ModelGraph) -> BudgetLedger:
    _check_cursor(ledger, l)
    costs = layer_costs(achieved_graph)
    if len(costs) != ledger.n_layers:
        raise CursorMismatch(f"achieved graph has {len(costs)} layers, ledger tracks {ledger.n_layers}")
    cursor = l + 1
    prunable = ledger.prunable or tuple(layer.prunable_out for layer in achieved_graph.layers)
    return replace(
        ledger,
        current_costs=costs,
        cursor=cursor,
        c_reduced=ledger.c_all - sum(costs),
        c_rest=sum(costs[cursor + 1:]),
        c_fixed=_fixed_after(costs, prunable, cursor),
        prunable=prunable,
    )
