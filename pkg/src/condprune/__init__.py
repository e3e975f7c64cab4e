"""Rate-conditioned structured channel pruning for small convolutional chains.

One policy is trained over a set of target cost-reduction rates; afterwards a
model compressed to any of those rates is produced without retraining.
"""
from .cost import (BudgetLedger, clamp_rate, layer_cost, ledger_advance, ledger_init, min_reduction,
                   params_count, rounding_slack, total_cost)
from .driver import (CompressionReport, TrainConfig, baseline_uniform, brute_force_oracle, compress,
                     run_episode, train)
from .estimator import ConditionalChannelPruner
from .exceptions import *  # noqa: F401,F403
from .fixtures import FixtureSpec, fixture_redundant_model
from .graph import LayerNode, ModelGraph, load_model, save_model, validate_graph
from .inference import LabeledDataset, evaluate_accuracy, forward, load_dataset, save_dataset
from .policy import PolicyParams, Transition, load_policy, save_policy, update
from .pruner import PruningPlan, apply_plan, channel_importance, select_channels, zero_pruned

__version__ = "0.1.0"
