"""The conditional rate function: layer features, actor-critic and its updates.

Both networks are small tanh MLPs written against numpy with hand-derived
gradients. The actor maps an 11-feature layer state (the last feature is the
target rate) to a rate in ``[0, alpha_max]``; the critic scores a
state/rate pair. Training follows the deterministic actor-critic recipe:
squared TD error for the critic, ascent on the critic's value for the actor,
soft-updated target copies of both.
"""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import truncnorm

from .cost import BudgetLedger
from .exceptions import CorruptPolicy, DivergedParameters, IoFailure
from .graph import CONV2D, ModelGraph

STATE_DIM = 11
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")
NETWORKS = ("actor", "critic", "actor_target", "critic_target")

MAGIC = b"CPPOLICY"
FORMAT_VERSION = 1

Params = dict[str, np.ndarray]


def featurize(ledger: BudgetLedger, graph: ModelGraph, l: int, prev_action: float, beta: float,
              original: ModelGraph | None = None) -> np.ndarray:
    """State vector of layer ``l``; ``graph`` is the partially pruned model.

    Normalisers (widest layer, total cost) come from ``original`` so that the
    features keep their scale over an episode.
    """
    original = graph if original is None else original
    layer = graph.layers[l]
    max_ch = max(max(x.in_channels, x.out_channels) for x in original.layers)
    c_all = ledger.c_all or 1
    state = np.array([
        l / len(graph.layers),
        1.0 if layer.kind == CONV2D else 0.0,
        layer.in_channels / max_ch,
        layer.out_channels / max_ch,
        layer.kernel / 7,
        layer.stride / 4,
        ledger.current_costs[l] / c_all,
        ledger.c_reduced / c_all,
        ledger.c_rest / c_all,
        float(prev_action),
        float(beta),
    ], dtype=np.float64)
    np.clip(state[:10], 0.0, 1.0, out=state[:10])
    return state


# -- networks -----------------------------------------------------------------

def init_mlp(rng: np.random.Generator, sizes: Sequence[int], final_scale: float = 3e-3) -> Params:
    params = {}
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        bound = final_scale if i == n_layers - 1 else 1.0 / np.sqrt(fan_in)
        params[f"W{i + 1}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"b{i + 1}"] = rng.uniform(-bound, bound, size=fan_out)
    return params


def mlp_forward(p: Params, x: np.ndarray):
    h1 = np.tanh(x @ p["W1"] + p["b1"])
    h2 = np.tanh(h1 @ p["W2"] + p["b2"])
    out = h2 @ p["W3"] + p["b3"]
    return out, (x, h1, h2)


def mlp_backward(p: Params, cache, dout: np.ndarray):
    x, h1, h2 = cache
    grads = {"W3": h2.T @ dout, "b3": dout.sum(axis=0)}
    dz2 = (dout @ p["W3"].T) * (1.0 - h2 * h2)
    grads["W2"] = h1.T @ dz2
    grads["b2"] = dz2.sum(axis=0)
    dz1 = (dz2 @ p["W2"].T) * (1.0 - h1 * h1)
    grads["W1"] = x.T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    return grads, dz1 @ p["W1"].T


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class PolicyParams:
    actor: Params
    critic: Params
    actor_target: Params
    critic_target: Params
    alpha_max: float = 0.8
    sigma: float = 0.5
    step: int = 0
    adam: dict = field(default_factory=dict, repr=False)

    @classmethod
    def initialize(cls, seed: int, alpha_max: float = 0.8, sigma: float = 0.5, hidden: int = 64) -> "PolicyParams":
        rng = np.random.default_rng(seed)
        actor = init_mlp(rng, (STATE_DIM, hidden, hidden, 1))
        critic = init_mlp(rng, (STATE_DIM + 1, hidden, hidden, 1))
        return cls(actor, critic, _copy(actor), _copy(critic), float(alpha_max), float(sigma))

    def copy(self) -> "PolicyParams":
        return replace(
            self,
            actor=_copy(self.actor), critic=_copy(self.critic),
            actor_target=_copy(self.actor_target), critic_target=_copy(self.critic_target),
            adam=copy.deepcopy(self.adam),
        )

    def networks(self) -> dict[str, Params]:
        return {name: getattr(self, name) for name in NETWORKS}

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for net in self.networks().values() for a in net.values())

    def rounded(self) -> "PolicyParams":
        """Copy with every weight rounded to float32, i.e. what a file round trip yields."""
        out = self.copy()
        for name in NETWORKS:
            setattr(out, name, {k: v.astype(np.float32).astype(np.float64) for k, v in getattr(out, name).items()})
        return out


def _copy(params: Params) -> Params:
    return {k: np.array(v, copy=True) for k, v in params.items()}


def actor_forward(theta: PolicyParams, states: np.ndarray, target: bool = False):
    net = theta.actor_target if target else theta.actor
    z, cache = mlp_forward(net, states)
    sig = _sigmoid(z)
    return theta.alpha_max * sig, (cache, sig, z)


def critic_forward(theta: PolicyParams, states: np.ndarray, actions: np.ndarray, target: bool = False):
    net = theta.critic_target if target else theta.critic
    x = np.concatenate([states, actions.reshape(-1, 1)], axis=1)
    return mlp_forward(net, x)


def act(theta: PolicyParams, state: np.ndarray) -> float:
    a, _ = actor_forward(theta, np.asarray(state, dtype=np.float64).reshape(1, -1))
    return float(min(max(a[0, 0], 0.0), theta.alpha_max))


def explore(action: float, sigma: float, rng: np.random.Generator, alpha_max: float = 0.8) -> float:
    """Perturb ``action`` with Gaussian noise truncated to ``[0, alpha_max]``."""
    if sigma <= 0:
        return action
    lo, hi = (0.0 - action) / sigma, (alpha_max - action) / sigma
    noisy = truncnorm.rvs(lo, hi, loc=action, scale=sigma, random_state=rng)
    return float(np.clip(noisy, 0.0, alpha_max))


# -- losses and gradients -----------------------------------------------------

@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: float
    reward: float
    next_state: np.ndarray | None
    beta: float


@dataclass(frozen=True)
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminal: np.ndarray

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]) -> "Batch":
        states = np.stack([t.state for t in transitions])
        nxt = np.stack([t.state if t.next_state is None else t.next_state for t in transitions])
        return cls(
            states=states,
            actions=np.array([t.action for t in transitions], dtype=np.float64),
            rewards=np.array([t.reward for t in transitions], dtype=np.float64),
            next_states=nxt,
            terminal=np.array([t.next_state is None for t in transitions]),
        )


def td_targets(theta: PolicyParams, batch: Batch, discount: float) -> np.ndarray:
    next_a, _ = actor_forward(theta, batch.next_states, target=True)
    next_q, _ = critic_forward(theta, batch.next_states, next_a, target=True)
    return batch.rewards + discount * (~batch.terminal) * next_q[:, 0]


def critic_loss_and_grads(theta: PolicyParams, batch: Batch, targets: np.ndarray):
    q, cache = critic_forward(theta, batch.states, batch.actions)
    err = q[:, 0] - targets
    loss = float(np.mean(err * err))
    dq = (2.0 / err.size) * err[:, None]
    grads, _ = mlp_backward(theta.critic, cache, dq)
    return loss, grads


def actor_loss_and_grads(theta: PolicyParams, states: np.ndarray, action_reg: float = 0.0):
    """Minus the mean critic value at the actor's own rates.

    ``action_reg`` adds ``action_reg * mean(z**2)`` on the pre-squash output
    ``z`` so the sigmoid cannot saturate while the critic is still wrong.
    """
    a, (acache, sig, z) = actor_forward(theta, states)
    q, ccache = critic_forward(theta, states, a[:, 0])
    n = q.shape[0]
    loss = -float(np.mean(q)) + action_reg * float(np.mean(z * z))
    dq = np.full_like(q, -1.0 / n)
    _, dx = mlp_backward(theta.critic, ccache, dq)
    dz = dx[:, -1:] * theta.alpha_max * sig * (1.0 - sig) + (2.0 * action_reg / n) * z
    grads, _ = mlp_backward(theta.actor, acache, dz)
    return loss, grads


def _adam(params: Params, grads: Params, state: dict, lr: float, t: int,
          b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8) -> None:
    m, v = state.setdefault("m", {}), state.setdefault("v", {})
    for k, g in grads.items():
        m[k] = b1 * m.get(k, 0.0) + (1 - b1) * g
        v[k] = b2 * v.get(k, 0.0) + (1 - b2) * g * g
        m_hat = m[k] / (1 - b1 ** t)
        v_hat = v[k] / (1 - b2 ** t)
        params[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + eps)


def _soft_update(target: Params, online: Params, tau: float) -> None:
    for k in target:
        target[k] = (1.0 - tau) * target[k] + tau * online[k]


def update(theta: PolicyParams, batch: Sequence[Transition] | Batch, lr_actor: float = 1e-4,
           lr_critic: float = 1e-3, discount: float = 1.0, tau: float = 0.01, action_reg: float = 0.0):
    """One critic step, one actor step, then soft target updates.

    Returns ``(new_theta, {"critic": loss, "actor": loss})``; ``theta`` itself
    is left untouched.
    """
    if not isinstance(batch, Batch):
        if not batch:
            raise ValueError("update needs a non-empty batch")
        batch = Batch.from_transitions(batch)
    new = theta.copy()
    new.step += 1
    targets = td_targets(new, batch, discount)
    critic_loss, cgrads = critic_loss_and_grads(new, batch, targets)
    _adam(new.critic, cgrads, new.adam.setdefault("critic", {}), lr_critic, new.step)
    actor_loss, agrads = actor_loss_and_grads(new, batch.states, action_reg)
    _adam(new.actor, agrads, new.adam.setdefault("actor", {}), lr_actor, new.step)
    _soft_update(new.critic_target, new.critic, tau)
    _soft_update(new.actor_target, new.actor, tau)
    if not (new.is_finite() and np.isfinite(critic_loss) and np.isfinite(actor_loss)):
        raise DivergedParameters(f"non-finite parameters after update {new.step}")
    return new, {"critic": critic_loss, "actor": actor_loss}


# -- file format --------------------------------------------------------------
# MAGIC | u32 version | u32 header length | JSON header | float32 LE payload

def save_policy(theta: PolicyParams, path) -> None:
    tensors, chunks = [], []
    for net in NETWORKS:
        params = getattr(theta, net)
        for name in PARAM_NAMES:
            arr = np.ascontiguousarray(params[name], dtype="<f4")
            tensors.append({"net": net, "name": name, "shape": list(arr.shape)})
            chunks.append(arr.tobytes())
    header = json.dumps({
        "version": FORMAT_VERSION,
        "state_dim": STATE_DIM,
        "hidden": int(theta.actor["W1"].shape[1]),
        "alpha_max": theta.alpha_max,
        "sigma": theta.sigma,
        "tensors": tensors,
    }, sort_keys=True).encode()
    payload = b"".join(chunks)
    try:
        Path(path).write_bytes(MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + payload)
    except OSError as exc:
        raise IoFailure(f"cannot write policy to {path}: {exc}") from exc


def load_policy(path) -> PolicyParams:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptPolicy(f"cannot read policy {path}: {exc}") from exc
    head = len(MAGIC) + 8
    if len(raw) < head or raw[:len(MAGIC)] != MAGIC:
        raise CorruptPolicy(f"{path}: not a policy file")
    version, header_len = struct.unpack("<II", raw[len(MAGIC):head])
    if version != FORMAT_VERSION:
        raise CorruptPolicy(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[head:head + header_len])
        tensors = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptPolicy(f"{path}: bad header: {exc}") from exc
    payload = raw[head + header_len:]
    expected = sum(4 * int(np.prod(t["shape"], dtype=np.int64)) for t in tensors)
    if len(payload) != expected:
        raise CorruptPolicy(f"{path}: payload has {len(payload)} bytes, header describes {expected}")
    nets: dict[str, Params] = {n: {} for n in NETWORKS}
    offset = 0
    try:
        for t in tensors:
            n = 4 * int(np.prod(t["shape"], dtype=np.int64))
            arr = np.frombuffer(payload[offset:offset + n], dtype="<f4").reshape(t["shape"])
            nets[t["net"]][t["name"]] = arr.astype(np.float64)
            offset += n
        alpha_max, sigma = float(header["alpha_max"]), float(header["sigma"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptPolicy(f"{path}: bad tensor table: {exc}") from exc
    if any(set(nets[n]) != set(PARAM_NAMES) for n in NETWORKS):
        raise CorruptPolicy(f"{path}: missing tensors")
    theta = PolicyParams(**nets, alpha_max=alpha_max, sigma=sigma)
    if not theta.is_finite():
        raise CorruptPolicy(f"{path}: non-finite weights")
    return theta
