"""Random graph generators and slow reference implementations used as test oracles."""
from __future__ import annotations

import itertools

import numpy as np

from condprune.graph import CONV2D, DENSE, IDENTITY, RELU, LayerNode, ModelGraph
from condprune.inference import LabeledDataset


def conv(id_, in_ch, out_ch, kernel, in_spatial, stride=1, rng=None, prunable=True, activation=RELU):
    rng = rng or np.random.default_rng(0)
    out_spatial = (in_spatial - kernel) // stride + 1
    return LayerNode(id_, CONV2D, in_ch, out_ch, kernel, stride, out_spatial,
                     rng.standard_normal((out_ch, in_ch, kernel, kernel)) * 0.5,
                     rng.standard_normal(out_ch) * 0.1, activation, prunable)


def dense(id_, in_ch, out_ch, rng=None, prunable=True, activation=RELU):
    rng = rng or np.random.default_rng(0)
    return LayerNode(id_, DENSE, in_ch, out_ch, 1, 1, 1,
                     rng.standard_normal((out_ch, in_ch)) * 0.5,
                     rng.standard_normal(out_ch) * 0.1, activation, prunable)


def random_graph(rng: np.random.Generator, n_layers: int | None = None, max_ch: int = 5,
                 max_spatial: int = 6, nonprunable_prob: float = 0.2) -> ModelGraph:
    """A valid chain of convolutions, optional hidden Dense layers and a Dense head.

    The last convolution's kernel covers its whole input, so the head always
    sees a 1x1 map.
    """
    n_layers = int(rng.integers(3, 9)) if n_layers is None else n_layers
    n_hidden_dense = int(rng.integers(0, n_layers - 1))
    n_conv = n_layers - 1 - n_hidden_dense
    in_ch = int(rng.integers(1, max_ch + 1))
    spatial = int(rng.integers(1, max_spatial + 1)) if n_conv else 1
    input_shape = (in_ch, spatial, spatial)

    layers = []
    for i in range(n_layers - 1):
        out_ch = int(rng.integers(1, max_ch + 1))
        prunable = bool(rng.random() >= nonprunable_prob)
        act = RELU if rng.random() < 0.8 else IDENTITY
        if i < n_conv:
            if i == n_conv - 1:
                kernel, stride = spatial, 1
            else:
                kernel = int(rng.integers(1, min(3, spatial) + 1))
                stride = int(rng.integers(1, 3))
            layer = conv(f"l{i}", in_ch, out_ch, kernel, spatial, stride, rng, prunable, act)
            spatial = layer.out_spatial
        else:
            layer = dense(f"l{i}", in_ch, out_ch, rng, prunable, act)
        layers.append(layer)
        in_ch = out_ch
    num_classes = int(rng.integers(2, 5))
    layers.append(dense("head", in_ch, num_classes, rng, prunable=False, activation=IDENTITY))
    return ModelGraph(tuple(layers), input_shape, num_classes)


def random_dataset(rng: np.random.Generator, graph: ModelGraph, n: int = 4) -> LabeledDataset:
    x = rng.standard_normal((n, *graph.input_shape)).astype(np.float32)
    y = rng.integers(0, graph.num_classes, size=n)
    return LabeledDataset(x, y, graph.num_classes)


def naive_forward(graph: ModelGraph, x) -> tuple[list[float], int]:
    """Logits for one input by explicit loops, plus the number of multiply-accumulates performed."""
    a = np.asarray(x, dtype=np.float64)
    macs = 0
    for layer in graph.layers:
        w = layer.weights.astype(np.float64)
        b = layer.bias.astype(np.float64)
        if layer.kind == CONV2D:
            s, k, n = layer.stride, layer.kernel, layer.out_spatial
            out = np.zeros((layer.out_channels, n, n))
            for o in range(layer.out_channels):
                for y in range(n):
                    for xx in range(n):
                        acc = b[o]
                        for c in range(layer.in_channels):
                            for ky in range(k):
                                for kx in range(k):
                                    acc += w[o, c, ky, kx] * a[c, y * s + ky, xx * s + kx]
                                    macs += 1
                        out[o, y, xx] = acc
        else:
            flat = a.reshape(-1)
            out = np.zeros(layer.out_channels)
            for o in range(layer.out_channels):
                acc = b[o]
                for c in range(layer.in_channels):
                    acc += w[o, c] * flat[c]
                    macs += 1
                out[o] = acc
        if layer.activation == RELU:
            out = np.where(out > 0, out, 0.0)
        a = out
    return list(a.reshape(-1)), macs


def count_macs(graph: ModelGraph) -> int:
    """MACs of one pass, counted by walking every output/input/kernel index."""
    total = 0
    for layer in graph.layers:
        k = layer.kernel if layer.kind == CONV2D else 1
        n = layer.out_spatial if layer.kind == CONV2D else 1
        for _ in itertools.product(range(layer.out_channels), range(n), range(n),
                                   range(layer.in_channels), range(k), range(k)):
            total += 1
    return total


def count_params(graph: ModelGraph) -> int:
    total = 0
    for layer in graph.layers:
        for _ in np.ndindex(*layer.weights.shape):
            total += 1
        for _ in np.ndindex(*layer.bias.shape):
            total += 1
    return total


def random_rate_episode(rng: np.random.Generator, beta: float, alpha_max: float = 0.8, max_ch: int = 8):
    """Run one episode on a fresh feasible random graph with uniformly random proposed rates.

    Returns ``(graph, episode, ledgers)`` where ``ledgers`` holds the ledger
    after every step, recomputed independently from the emitted plan.
    """
    from condprune.cost import ledger_advance, ledger_init
    from condprune.driver import check_feasible, run_episode
    from condprune.exceptions import InfeasibleBudget
    from condprune.policy import PolicyParams
    from condprune.pruner import prune_layer

    while True:
        graph = random_graph(rng, max_ch=max_ch)
        try:
            check_feasible(graph, beta, alpha_max)
        except InfeasibleBudget:
            continue
        break
    theta = PolicyParams.initialize(0, alpha_max, hidden=4)
    proposals = iter(rng.uniform(0.0, alpha_max, size=len(graph.layers)))
    episode = run_episode(graph, theta, beta, random_dataset(rng, graph, 1), propose=lambda s: next(proposals))
    ledger = ledger_init(graph, beta, alpha_max)
    current = graph
    ledgers = [ledger]
    for l, entry in enumerate(episode.plan.entries):
        current = prune_layer(current, l, entry.kept)
        ledger = ledger_advance(ledger, l, current)
        ledgers.append(ledger)
    return graph, episode, ledgers


def cli_pipeline(workdir, episodes: int | None = None, seed: int = 0, fixture_seed: int = 7):
    """fixture -> train -> compress (with both baselines) through the command line; returns the paths."""
    from condprune.cli import main

    fx, run, art = workdir / "fixture", workdir / "run", workdir / "artifacts"
    assert main(["fixture", "--seed", str(fixture_seed), "--out", str(fx)]) == 0
    train = ["train", "--model", str(fx / "model.json"), "--dataset", str(fx / "dataset.json"),
             "--seed", str(seed), "--jobs", "1", "--out", str(run)]
    if episodes is not None:
        train += ["--episodes", str(episodes)]
    assert main(train) == 0
    assert main(["compress", "--model", str(fx / "model.json"), "--dataset", str(fx / "dataset.json"),
                 "--policy", str(run / "policy.bin"), "--beta", "0.3", "--beta", "0.5", "--beta", "0.7",
                 "--baseline", "uniform", "--baseline", "oracle", "--out", str(art)]) == 0
    return {"model": fx / "model.json", "dataset": fx / "dataset.json", "policy": run / "policy.bin",
            "log": run / "episodes.jsonl", "artifacts": art}
