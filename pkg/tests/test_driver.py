import itertools
import math
from fractions import Fraction

import numpy as np
import pytest

from condprune import driver
from condprune.cost import ledger_init, params_count, rounding_slack, total_cost
from condprune.driver import (TrainConfig, baseline_uniform, brute_force_oracle, compress, plan_from_rates,
                              run_episode, train)
from condprune.exceptions import InfeasibleBudget, InvalidRate, NoFeasibleAssignment
from condprune.graph import IDENTITY, ModelGraph, validate_graph
from condprune.inference import evaluate_accuracy
from condprune.policy import PARAM_NAMES, PolicyParams, act, featurize
from condprune.pruner import PlanEntry, PruningPlan, apply_plan, channel_importance, select_channels

from helpers import conv, dense, random_dataset


def tiny_graph():
    return ModelGraph((conv("c0", 2, 4, 3, 3), dense("head", 4, 2, prunable=False, activation=IDENTITY)),
                      (2, 3, 3), 2)


def test_untrained_episode_is_deterministic_and_meets_budget(fixture_model):
    graph, dataset = fixture_model
    theta = PolicyParams.initialize(1)
    a = run_episode(graph, theta, 0.5, dataset, np.random.default_rng(0))
    b = run_episode(graph, theta, 0.5, dataset, np.random.default_rng(0))
    assert a.plan == b.plan and a.reward == b.reward
    c_all = total_cost(graph)
    assert a.reduction == (c_all - total_cost(a.model)) / c_all
    assert a.reduction >= 0.5 - rounding_slack(graph, a.plan.kept_counts)


def test_explored_episode_is_seeded(fixture_model):
    graph, dataset = fixture_model
    theta = PolicyParams.initialize(1)
    a = run_episode(graph, theta, 0.3, dataset, np.random.default_rng(5), explore_flag=True)
    b = run_episode(graph, theta, 0.3, dataset, np.random.default_rng(5), explore_flag=True)
    assert a.plan == b.plan


def test_largest_rate_gives_valid_model(fixture_model):
    graph, dataset = fixture_model
    for seed in range(5):
        ep = run_episode(graph, PolicyParams.initialize(seed), 0.7, dataset, np.random.default_rng(seed),
                         explore_flag=True)
        assert validate_graph(ep.model) == []
        assert all(k >= 1 for k in ep.plan.kept_counts)
        assert ep.model == apply_plan(graph, ep.plan)


def test_transitions(fixture_model):
    graph, dataset = fixture_model
    ep = run_episode(graph, PolicyParams.initialize(2), 0.5, dataset)
    assert len(ep.transitions) == 3  # the head is fixed and takes no decision
    assert [t.action for t in ep.transitions] == list(ep.plan.alphas[:3])
    assert all(t.reward == ep.reward and t.beta == 0.5 for t in ep.transitions)
    assert ep.transitions[-1].next_state is None
    assert np.array_equal(ep.transitions[0].next_state, ep.transitions[1].state)
    assert ep.plan.entries[-1].alpha == 0.0 and len(ep.plan.entries[-1].kept) == graph.layers[-1].out_channels


def test_infeasible_rate_fails_fast(fixture_model):
    graph, dataset = fixture_model
    with pytest.raises(InfeasibleBudget):
        run_episode(graph, PolicyParams.initialize(0, alpha_max=0.5), 0.95, dataset)


def test_no_episodes_returns_fresh_policy(fixture_model):
    graph, dataset = fixture_model
    theta = train(graph, dataset, TrainConfig(episodes=0, seed=4))
    fresh = PolicyParams.initialize(4)
    for name in ("actor", "critic"):
        for k in PARAM_NAMES:
            assert np.array_equal(getattr(theta, name)[k], getattr(fresh, name)[k])


def test_train_does_not_touch_given_policy(fixture_model):
    graph, dataset = fixture_model
    theta = PolicyParams.initialize(0)
    train(graph, dataset.subset(16), TrainConfig(episodes=3, warmup_episodes=1, updates_per_episode=0),
          theta=theta)
    assert theta.sigma == 0.5


def test_rewards_improve(fixture_model):
    graph, dataset = fixture_model
    history = []
    train(graph, dataset, TrainConfig(beta_support=(0.3, 0.5), episodes=400, seed=7), log=history.append)
    rewards = [h["reward"] for h in history]
    assert len(rewards) == 400
    assert np.mean(rewards[-50:]) >= np.mean(rewards[:50])


def test_rate_draws_are_uniform():
    rng = np.random.default_rng(0)
    graph = tiny_graph()
    history = []
    config = TrainConfig(episodes=10_000, warmup_episodes=10_000, seed=3)
    train(graph, random_dataset(rng, graph, 1), config, log=history.append)
    counts = np.array([sum(h["beta"] == b for h in history) for b in config.beta_support])
    n, p = 10_000, 1 / 3
    assert np.all(np.abs(counts - n * p) <= 3 * math.sqrt(n * p * (1 - p)))


def test_log_replays_exploration(fixture_model):
    graph, dataset = fixture_model
    config = TrainConfig(episodes=6, warmup_episodes=6, seed=2)
    history = []
    train(graph, dataset, config, log=history.append)
    theta = PolicyParams.initialize(config.seed, config.alpha_max, config.sigma, config.hidden)
    for h in history:
        ep = run_episode(graph, theta, h["beta"], dataset, np.random.default_rng(h["seed"]), explore_flag=True)
        assert ep.reward == h["reward"]
        assert 100 * ep.reduction == h["flops_drop_pct"]


def test_sigma_decays(trained_policy):
    _, history = trained_policy
    sigmas = [h["sigma"] for h in history]
    assert all(b <= a for a, b in zip(sigmas, sigmas[1:]))
    assert sigmas[-1] < sigmas[0]


def test_parallel_episodes(fixture_model):
    graph, dataset = fixture_model
    history = []
    theta = train(graph, dataset.subset(64), TrainConfig(episodes=8, warmup_episodes=2, jobs=3, batch_size=8),
                  log=history.append)
    assert [h["episode"] for h in history] == list(range(8))
    assert theta.is_finite()


@pytest.mark.parametrize("kwargs", [
    {"beta_support": ()}, {"beta_support": (0.5, 0.3)}, {"beta_support": (0.3, 1.0)},
    {"alpha_max": 0.0}, {"alpha_max": 1.2},
])
def test_bad_rates_in_config(kwargs):
    with pytest.raises(InvalidRate):
        TrainConfig(**kwargs)


@pytest.mark.parametrize("kwargs", [{"episodes": -1}, {"batch_size": 0}, {"jobs": 0}, {"reward_samples": -1}])
def test_bad_counts_in_config(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_infeasible_support_rejected_before_training(fixture_model):
    graph, dataset = fixture_model
    with pytest.raises(InfeasibleBudget):
        train(graph, dataset, TrainConfig(beta_support=(0.3, 0.95), alpha_max=0.5))


def test_one_policy_serves_every_rate(fixture_model, trained_policy):
    graph, dataset = fixture_model
    theta, _ = trained_policy
    for beta in (0.3, 0.5, 0.7):
        model, report = compress(graph, theta, beta, dataset)
        assert report.flops_drop_pct >= 100 * (beta - report.rounding_slack)
        assert report.flops_drop_pct == pytest.approx(100 * (1 - total_cost(model) / total_cost(graph)))
        assert report.params_drop_pct == pytest.approx(100 * (1 - params_count(model) / params_count(graph)))
        assert report.method == "cacp"


def test_half_rate_keeps_accuracy(fixture_model, trained_policy):
    graph, dataset = fixture_model
    _, report = compress(graph, trained_policy[0], 0.5, dataset)
    assert report.accuracy >= evaluate_accuracy(graph, dataset) - 0.02


def test_compress_is_repeatable(fixture_model, trained_policy):
    graph, dataset = fixture_model
    a = compress(graph, trained_policy[0], 0.5, dataset)[1]
    b = compress(graph, trained_policy[0], 0.5, dataset)[1]
    assert a == b


def test_rate_condition_changes_actions(fixture_model, trained_policy):
    graph, _ = fixture_model
    theta = trained_policy[0]
    actions = [act(theta, featurize(ledger_init(graph, b, 0.8), graph, 0, 0.0, b)) for b in (0.3, 0.5, 0.7)]
    # only the last feature differs between these states
    assert len(set(actions)) == 3


def test_largest_rate_removes_most(fixture_model, trained_policy):
    graph, dataset = fixture_model
    reports = {b: compress(graph, trained_policy[0], b, dataset)[1] for b in (0.3, 0.5, 0.7)}
    assert max(reports, key=lambda b: reports[b].flops_drop_pct) == 0.7
    assert reports[0.7].flops_drop_pct >= 100 * (0.7 - reports[0.7].rounding_slack)


def test_uniform_at_zero_is_identity(fixture_model):
    graph, dataset = fixture_model
    model, report = baseline_uniform(graph, 0.0, dataset)
    assert model == graph
    assert report.flops_drop_pct == 0.0 and report.accuracy == evaluate_accuracy(graph, dataset)


def test_uniform_halves_even_layers():
    rng = np.random.default_rng(0)
    graph = ModelGraph((conv("c0", 2, 4, 3, 5, rng=rng), conv("c1", 4, 6, 3, 3, rng=rng),
                        dense("d", 6, 8, rng=rng), dense("head", 8, 2, rng=rng, prunable=False,
                                                         activation=IDENTITY)), (2, 5, 5), 2)
    model, report = baseline_uniform(graph, 0.5, random_dataset(rng, graph))
    assert [l.out_channels for l in model.layers] == [2, 3, 4, 2]
    assert report.method == "uniform"


def test_searched_not_worse_than_uniform(fixture_model, trained_policy):
    graph, dataset = fixture_model
    for beta in (0.3, 0.5, 0.7):
        searched = compress(graph, trained_policy[0], beta, dataset)[1].accuracy
        uniform = baseline_uniform(graph, beta, dataset)[1].accuracy
        assert searched >= uniform - 0.01


def exhaustive_best(graph, beta, grid, dataset):
    """Independent enumeration: discretise, rank and remove with the public pruner primitives."""
    prunable = [i for i, l in enumerate(graph.layers) if l.prunable_out]
    c_all = total_cost(graph)
    best = None
    for rates in itertools.product(sorted(grid), repeat=len(prunable)):
        current = graph
        for i, rate in zip(prunable, rates):
            layer = current.layers[i]
            keep = max(1, math.floor((1 - Fraction(str(rate))) * layer.out_channels))
            kept = select_channels(channel_importance(layer), keep)
            entries = [PlanEntry(l.id, 0.0, kept if j == i else tuple(range(l.out_channels)))
                       for j, l in enumerate(current.layers)]
            current = apply_plan(current, PruningPlan(0.0, tuple(entries)))
        if Fraction(c_all - total_cost(current), c_all) < Fraction(str(beta)):
            continue
        acc = evaluate_accuracy(current, dataset)
        if best is None or acc > best[0]:
            best = (acc, rates)
    return best


def test_oracle_matches_enumeration(fixture_model):
    graph, dataset = fixture_model
    grid = (0.0, 0.25, 0.5, 0.75)
    plan, reward = brute_force_oracle(graph, 0.7, grid, dataset)
    acc, rates = exhaustive_best(graph, 0.7, grid, dataset)
    assert reward == acc
    assert plan.alphas[:3] == rates


def test_oracle_infeasible(fixture_model):
    graph, dataset = fixture_model
    with pytest.raises(NoFeasibleAssignment):
        brute_force_oracle(graph, 0.9, (0.0, 0.25), dataset)


def test_oracle_zero_grid(fixture_model):
    graph, dataset = fixture_model
    plan, reward = brute_force_oracle(graph, 0.0, (0.0,), dataset)
    assert plan == PruningPlan.identity(graph)
    assert reward == evaluate_accuracy(graph, dataset)


def test_oracle_refuses_huge_grids(fixture_model):
    graph, dataset = fixture_model
    with pytest.raises(ValueError):
        brute_force_oracle(graph, 0.5, np.linspace(0, 0.8, 101), dataset)


def test_plan_from_rates_needs_one_rate_per_layer(fixture_model):
    with pytest.raises(ValueError):
        plan_from_rates(fixture_model[0], [0.1] * 4)


def test_report_fields(fixture_model, trained_policy):
    graph, dataset = fixture_model
    report = compress(graph, trained_policy[0], 0.3, dataset)[1]
    assert set(report.to_dict()) == {"beta", "method", "accuracy", "flops_drop_pct", "params_drop_pct",
                                     "rounding_slack"}
    assert driver.cost_summary(graph, apply_plan(graph, report.plan), report.plan)["flops_drop_pct"] == \
        report.flops_drop_pct


def test_reward_samples_limits_search_data(fixture_model):
    graph, dataset = fixture_model
    few = dataset.subset(16)
    quick = dict(episodes=3, warmup_episodes=1, batch_size=4, updates_per_episode=1, hidden=8, seed=2)
    limited, full = [], []
    theta_a = train(graph, dataset, TrainConfig(reward_samples=16, **quick), log=limited.append)
    theta_b = train(graph, few, TrainConfig(**quick), log=full.append)
    assert limited == full
    assert np.array_equal(theta_a.actor["W1"], theta_b.actor["W1"])
