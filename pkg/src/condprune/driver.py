"""Episode orchestration: search, training over a rate distribution, inference-time compression."""
from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import policy as pol
from .cost import (as_fraction, clamp_rate, ledger_advance, ledger_init, max_feasible_rate,
                   params_count, rounding_slack, total_cost)
from .exceptions import InfeasibleBudget, InvalidRate, NoFeasibleAssignment
from .graph import ModelGraph
from .inference import LabeledDataset, evaluate_accuracy, reward
from .pruner import (PlanEntry, PruningPlan, channel_importance, prune_layer, rate_to_keep_count,
                     select_channels)

logger = logging.getLogger(__name__)

DEFAULT_SUPPORT = (0.3, 0.5, 0.7)


@dataclass(frozen=True)
class TrainConfig:
    beta_support: tuple[float, ...] = DEFAULT_SUPPORT
    alpha_max: float = 0.8
    episodes: int = 400
    warmup_episodes: int = 100
    seed: int = 0
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    discount: float = 1.0
    tau: float = 0.01
    sigma: float = 0.5
    sigma_decay: float = 0.99
    buffer_size: int = 2000
    batch_size: int = 64
    updates_per_episode: int = 20
    action_reg: float = 0.05
    hidden: int = 64
    jobs: int = 1
    reward_samples: int = 0  # search reward uses the first n samples; 0 means all of them

    def __post_init__(self):
        object.__setattr__(self, "beta_support", tuple(float(b) for b in self.beta_support))
        support = self.beta_support
        if not support:
            raise InvalidRate("beta_support must not be empty")
        if any(not 0 < b < 1 for b in support):
            raise InvalidRate(f"beta_support values must lie in (0, 1): {list(support)}")
        if any(b >= c for b, c in zip(support, support[1:])):
            raise InvalidRate(f"beta_support must be strictly increasing: {list(support)}")
        if not 0 < self.alpha_max <= 1:
            raise InvalidRate(f"alpha_max={self.alpha_max} outside (0, 1]")
        if self.episodes < 0 or self.warmup_episodes < 0:
            raise ValueError("episodes and warmup_episodes must be non-negative")
        if self.batch_size < 1 or self.buffer_size < 1 or self.jobs < 1 or self.updates_per_episode < 0:
            raise ValueError("batch_size, buffer_size and jobs must be positive")
        if self.reward_samples < 0:
            raise ValueError("reward_samples must be non-negative")

    def check_feasible(self, graph: ModelGraph) -> None:
        for beta in self.beta_support:
            check_feasible(graph, beta, self.alpha_max)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CompressionReport:
    beta: float
    method: str
    accuracy: float
    flops_drop_pct: float
    params_drop_pct: float
    rounding_slack: float
    plan: PruningPlan

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "method": self.method,
            "accuracy": self.accuracy,
            "flops_drop_pct": self.flops_drop_pct,
            "params_drop_pct": self.params_drop_pct,
            "rounding_slack": self.rounding_slack,
        }


@dataclass
class Episode:
    plan: PruningPlan
    reward: float
    transitions: list[pol.Transition]
    model: ModelGraph
    reduction: float


def check_feasible(graph: ModelGraph, beta, alpha_max) -> None:
    beta_f = as_fraction(beta)
    limit = max_feasible_rate(graph, alpha_max)
    if beta_f > limit:
        raise InfeasibleBudget(
            f"beta={float(beta_f)} exceeds alpha_max * prunable cost fraction = {float(limit):.4f}"
        )


def _select(graph: ModelGraph, i: int, alpha) -> tuple[int, ...]:
    layer = graph.layers[i]
    keep = rate_to_keep_count(layer.out_channels, alpha)
    return select_channels(channel_importance(layer), keep)


def run_episode(graph: ModelGraph, theta: pol.PolicyParams, beta: float, dataset: LabeledDataset,
                rng: np.random.Generator | None = None, explore_flag: bool = False,
                propose: Callable[[np.ndarray], float] | None = None) -> Episode:
    """Walk the layers once, deciding and applying a rate per prunable layer.

    ``propose`` overrides the actor (used for randomized checks of the floor).
    """
    alpha_max = theta.alpha_max
    check_feasible(graph, beta, alpha_max)
    ledger = ledger_init(graph, beta, alpha_max)
    current = graph
    entries: list[PlanEntry] = []
    steps: list[tuple[np.ndarray, float]] = []
    prev_action = 0.0
    for l, layer in enumerate(graph.layers):
        if not layer.prunable_out:
            entries.append(PlanEntry(layer.id, 0.0, tuple(range(layer.out_channels))))
            ledger = ledger_advance(ledger, l, current)
            continue
        state = pol.featurize(ledger, current, l, prev_action, beta, original=graph)
        proposed = propose(state) if propose is not None else pol.act(theta, state)
        if explore_flag:
            proposed = pol.explore(proposed, theta.sigma, rng, alpha_max)
        alpha = clamp_rate(ledger, l, Fraction(proposed))
        kept = _select(current, l, alpha)
        current = prune_layer(current, l, kept)
        ledger = ledger_advance(ledger, l, current)
        prev_action = float(alpha)
        entries.append(PlanEntry(layer.id, prev_action, kept))
        steps.append((state, prev_action))

    accuracy = evaluate_accuracy(current, dataset)
    r = reward(accuracy)
    transitions = [
        pol.Transition(s, a, r, steps[i + 1][0] if i + 1 < len(steps) else None, float(beta))
        for i, (s, a) in enumerate(steps)
    ]
    c_all = ledger.c_all
    reduction = (c_all - total_cost(current)) / c_all if c_all else 0.0
    return Episode(PruningPlan(float(beta), tuple(entries)), r, transitions, current, reduction)


class ReplayBuffer:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self.items: list[pol.Transition] = []
        self._next = 0

    def __len__(self):
        return len(self.items)

    def push(self, transition: pol.Transition) -> None:
        if len(self.items) < self.capacity:
            self.items.append(transition)
        else:
            self.items[self._next] = transition
        self._next = (self._next + 1) % self.capacity

    def sample(self, rng: np.random.Generator, n: int) -> list[pol.Transition]:
        idx = rng.choice(len(self.items), size=min(n, len(self.items)), replace=False)
        return [self.items[i] for i in idx]


def train(graph: ModelGraph, dataset: LabeledDataset, config: TrainConfig,
          log: Callable[[dict], None] | None = None,
          theta: pol.PolicyParams | None = None) -> pol.PolicyParams:
    """Fit the conditional policy with rates drawn uniformly from ``config.beta_support``.

    With ``jobs > 1`` each round runs ``jobs`` episodes against the same policy
    in worker threads, then applies their updates in episode order. Each log
    record carries the episode's exploration seed, so any episode can be
    replayed with ``run_episode`` given the policy it ran against.
    """
    config.check_feasible(graph)
    rng = np.random.default_rng(config.seed)
    if theta is None:
        theta = pol.PolicyParams.initialize(config.seed, config.alpha_max, config.sigma, config.hidden)
    if config.episodes == 0:
        return theta
    theta = theta.copy()
    if config.reward_samples:
        dataset = dataset.subset(config.reward_samples)
    buffer = ReplayBuffer(config.buffer_size)
    support = config.beta_support

    def one(beta, episode_rng, th):
        return run_episode(graph, th, beta, dataset, episode_rng, explore_flag=True)

    episode = 0
    pool = ThreadPoolExecutor(config.jobs) if config.jobs > 1 else None
    try:
        while episode < config.episodes:
            n = min(config.jobs, config.episodes - episode)
            betas = [support[int(rng.integers(len(support)))] for _ in range(n)]
            seeds = [int(s) for s in rng.integers(0, 2**63, size=n)]
            rngs = [np.random.default_rng(s) for s in seeds]
            if pool is None:
                results = [one(betas[0], rngs[0], theta)]
            else:
                results = list(pool.map(one, betas, rngs, [theta] * n))
            for beta, seed, ep in zip(betas, seeds, results):
                for t in ep.transitions:
                    buffer.push(t)
                losses = {}
                if episode >= config.warmup_episodes:
                    for _ in range(config.updates_per_episode):
                        theta, losses = pol.update(
                            theta, buffer.sample(rng, config.batch_size), config.lr_actor,
                            config.lr_critic, config.discount, config.tau, config.action_reg,
                        )
                    theta.sigma *= config.sigma_decay
                record = {
                    "episode": episode,
                    "beta": beta,
                    "seed": seed,
                    "reward": ep.reward,
                    "flops_drop_pct": 100.0 * ep.reduction,
                    "sigma": theta.sigma,
                }
                if log is not None:
                    log(record)
                logger.debug("episode %d beta=%.2f reward=%.4f %s", episode, beta, ep.reward, losses)
                episode += 1
    finally:
        if pool is not None:
            pool.shutdown()
    return theta.rounded()


def cost_summary(graph: ModelGraph, pruned: ModelGraph, plan: PruningPlan) -> dict:
    """Percent MAC and parameter drop of ``pruned`` against ``graph``, plus the rounding slack."""
    c_all, p_all = total_cost(graph), params_count(graph)
    return {
        "flops_drop_pct": 100.0 * (c_all - total_cost(pruned)) / c_all,
        "params_drop_pct": 100.0 * (p_all - params_count(pruned)) / p_all,
        "rounding_slack": rounding_slack(graph, plan.kept_counts),
    }


def _report(graph: ModelGraph, pruned: ModelGraph, plan: PruningPlan, beta: float, method: str,
            dataset: LabeledDataset) -> CompressionReport:
    return CompressionReport(beta=float(beta), method=method, accuracy=evaluate_accuracy(pruned, dataset),
                             plan=plan, **cost_summary(graph, pruned, plan))


def compress(graph: ModelGraph, theta: pol.PolicyParams, beta: float,
             dataset: LabeledDataset) -> tuple[ModelGraph, CompressionReport]:
    ep = run_episode(graph, theta, beta, dataset, explore_flag=False)
    return ep.model, _report(graph, ep.model, ep.plan, beta, "cacp", dataset)


def plan_from_rates(graph: ModelGraph, rates: Sequence, beta: float = 0.0) -> tuple[ModelGraph, PruningPlan]:
    """Prune output-prunable layers at fixed ``rates`` (one per prunable layer), in order."""
    rates = list(rates)
    current = graph
    entries = []
    for l, layer in enumerate(graph.layers):
        if not layer.prunable_out:
            entries.append(PlanEntry(layer.id, 0.0, tuple(range(layer.out_channels))))
            continue
        alpha = rates.pop(0)
        kept = _select(current, l, alpha)
        current = prune_layer(current, l, kept)
        entries.append(PlanEntry(layer.id, float(alpha), kept))
    if rates:
        raise ValueError(f"{len(rates)} rates left over; graph has fewer prunable layers")
    return current, PruningPlan(float(beta), tuple(entries))


def n_prunable(graph: ModelGraph) -> int:
    return sum(layer.prunable_out for layer in graph.layers)


def baseline_uniform(graph: ModelGraph, beta: float,
                     dataset: LabeledDataset) -> tuple[ModelGraph, CompressionReport]:
    """The same rate ``beta`` at every prunable layer, no budget floor."""
    pruned, plan = plan_from_rates(graph, [as_fraction(beta)] * n_prunable(graph), beta)
    return pruned, _report(graph, pruned, plan, beta, "uniform", dataset)


def brute_force_oracle(graph: ModelGraph, beta: float, grid: Sequence[float],
                       dataset: LabeledDataset) -> tuple[PruningPlan, float]:
    """Best reward over every assignment of grid rates that meets ``beta``.

    Ties go to the lexicographically smallest rate vector.
    """
    plan, r, _ = oracle_search(graph, beta, grid, dataset)
    return plan, r


def oracle_search(graph: ModelGraph, beta: float, grid: Sequence[float], dataset: LabeledDataset):
    n = n_prunable(graph)
    grid = sorted(as_fraction(g) for g in grid)
    if len(grid) ** n > 10**6:
        raise ValueError(f"{len(grid)}^{n} assignments is too many to enumerate")
    c_all = total_cost(graph)
    need = as_fraction(beta) * c_all
    best = None
    for rates in itertools.product(grid, repeat=n):
        pruned, plan = plan_from_rates(graph, rates, beta)
        if c_all - total_cost(pruned) < need:
            continue
        r = reward(evaluate_accuracy(pruned, dataset))
        # product() yields rate vectors in lexicographic order, so strict > keeps the smallest
        if best is None or r > best[1]:
            best = (plan, r, pruned)
    if best is None:
        raise NoFeasibleAssignment(f"no assignment from grid {[float(g) for g in grid]} reaches beta={beta}")
    return best


def oracle_report(graph: ModelGraph, beta: float, grid: Sequence[float],
                  dataset: LabeledDataset) -> tuple[ModelGraph, CompressionReport]:
    plan, _, pruned = oracle_search(graph, beta, grid, dataset)
    return pruned, _report(graph, pruned, plan, beta, "oracle", dataset)
