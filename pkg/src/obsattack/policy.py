"""Differentiable policies over observations.

Two kinds are supported: a softmax table indexed by the decoded state, and a
small tanh feedforward network. The network carries hand-written reverse-mode
differentiation so attacks can take gradients with respect to the input
observation.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .envs import ObservationEmbedding
from .errors import NumericError, UnsupportedOperationError, ValidationError

CHECKPOINT_FORMAT = "obsattack-policy/1"
PROB_FLOOR = 1e-12
LOSS_KINDS = ("kl_to_target", "kl_from_target", "neg_log_prob_of_action", "entropy")


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    m = np.max(z, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = z - m
    with np.errstate(divide="ignore"):
        return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=float)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def kl_divergence(p: np.ndarray, q: np.ndarray, floor: float | None = None) -> float:
    """KL(p || q). Without ``floor`` returns inf where q = 0 < p."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if floor is not None:
        q = np.maximum(q, floor)
    nz = p > 0
    if np.any(q[nz] <= 0):
        return math.inf
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Softmax over a per-state logit table; ``-inf`` logits give exact zeros."""

    logits: np.ndarray
    embedding: ObservationEmbedding
    temperature: float = 1.0
    metadata: dict = field(default_factory=dict)

    kind = "tabular_softmax"

    def __post_init__(self):
        z = np.array(self.logits, dtype=float)
        if z.ndim != 2 or z.shape[0] != self.embedding.num_states:
            raise ValidationError("logit table must have one row per embedded state")
        if np.any(np.isnan(z)) or np.any(z == np.inf) or np.any(np.all(z == -np.inf, axis=1)):
            raise ValidationError("logit table rows must contain a finite maximum")
        if not self.temperature > 0:
            raise ValidationError("temperature must be positive")
        z.setflags(write=False)
        object.__setattr__(self, "logits", z)

    @classmethod
    def from_probs(cls, probs, embedding: ObservationEmbedding, **kw) -> "TabularPolicy":
        with np.errstate(divide="ignore"):
            return cls(np.log(np.asarray(probs, dtype=float)), embedding, **kw)

    @property
    def input_dim(self) -> int:
        return self.embedding.dim

    @property
    def num_actions(self) -> int:
        return self.logits.shape[1]

    def table(self) -> np.ndarray:
        return softmax(self.logits / self.temperature)

    def act_probs(self, observation) -> np.ndarray:
        s = self.embedding.decode_nearest(observation)
        return softmax(self.logits[s] / self.temperature)

    def with_temperature(self, temperature: float) -> "TabularPolicy":
        return TabularPolicy(self.logits, self.embedding, temperature, dict(self.metadata))


@dataclass(frozen=True, eq=False)
class FeedforwardPolicy:
    """tanh MLP producing action logits; ``weights[i]`` has shape (fan_in, fan_out)."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    temperature: float = 1.0
    metadata: dict = field(default_factory=dict)

    kind = "feedforward"
    activation = "tanh"

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=float) for w in self.weights)
        bs = tuple(np.array(b, dtype=float) for b in self.biases)
        if not ws or len(ws) != len(bs):
            raise ValidationError("need matching, non-empty weight and bias lists")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValidationError(f"layer {i} has inconsistent shapes {w.shape}, {b.shape}")
            if i and w.shape[0] != ws[i - 1].shape[1]:
                raise ValidationError(f"layer {i} fan-in does not match previous layer")
            w.setflags(write=False)
            b.setflags(write=False)
        if not self.temperature > 0:
            raise ValidationError("temperature must be positive")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @classmethod
    def init(cls, sizes: Sequence[int], seed: int, temperature: float = 1.0,
             scale: float = 1.0) -> "FeedforwardPolicy":
        """Glorot-uniform weights and zero biases for layer ``sizes``."""
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            lim = scale * math.sqrt(6.0 / (fan_in + fan_out))
            ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
            bs.append(np.zeros(fan_out))
        return cls(tuple(ws), tuple(bs), temperature)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def num_actions(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[np.ndarray]:
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    def with_parameters(self, params: Sequence[np.ndarray]) -> "FeedforwardPolicy":
        return FeedforwardPolicy(tuple(params[0::2]), tuple(params[1::2]),
                                 self.temperature, dict(self.metadata))

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Logits (already divided by temperature) and hidden activations."""
        acts = [x]
        h = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ w + b)
            acts.append(h)
        return (h @ self.weights[-1] + self.biases[-1]) / self.temperature, acts

    def backward(self, acts: list[np.ndarray], dlogits: np.ndarray):
        """Gradients w.r.t. the input and every parameter, given dL/dlogits."""
        dz = dlogits / self.temperature
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            h = acts[i]
            grads[2 * i] = h.T @ dz if dz.ndim == 2 else np.outer(h, dz)
            grads[2 * i + 1] = dz.sum(axis=0) if dz.ndim == 2 else dz.copy()
            dh = dz @ self.weights[i].T
            dz = dh * (1.0 - h * h) if i > 0 else dh
        return dz, grads

    def act_probs(self, observation) -> np.ndarray:
        x = _as_observation(self, observation)
        return softmax(self.forward(x)[0])

    def batch_probs(self, observations: np.ndarray) -> np.ndarray:
        return softmax(self.forward(np.asarray(observations, dtype=float))[0])

    def with_temperature(self, temperature: float) -> "FeedforwardPolicy":
        return FeedforwardPolicy(self.weights, self.biases, temperature, dict(self.metadata))


Policy = TabularPolicy | FeedforwardPolicy


def _as_observation(policy, observation) -> np.ndarray:
    x = np.asarray(observation, dtype=float)
    if x.shape != (policy.input_dim,):
        raise ValidationError(f"observation has shape {x.shape}, policy expects ({policy.input_dim},)")
    return x


def act_probs(policy: Policy, observation) -> np.ndarray:
    return policy.act_probs(_as_observation(policy, observation))


def tabulate(policy: Policy, embedding: ObservationEmbedding) -> np.ndarray:
    """``pi[s, a] = act_probs(policy, encode(s))`` for every state."""
    if isinstance(policy, TabularPolicy) and policy.embedding is embedding:
        return policy.table()
    return np.array([act_probs(policy, embedding.encode(s)) for s in range(embedding.num_states)])


@dataclass(frozen=True, eq=False)
class GradientBundle:
    loss: float
    grad_wrt_observation: np.ndarray
    grad_wrt_parameters: list[np.ndarray]


def loss_and_logit_grad(logits: np.ndarray, loss_kind: str, target=None):
    """Scalar loss of ``softmax(logits)`` and its gradient w.r.t. the logits.

    ``kl_to_target`` is KL(pi || target), ``kl_from_target`` is KL(target || pi);
    target probabilities are floored at ``PROB_FLOOR`` so both stay finite.
    """
    logp = log_softmax(logits)
    p = np.exp(logp)
    if loss_kind == "kl_to_target":
        logq = np.log(np.maximum(np.asarray(target, dtype=float), PROB_FLOOR))
        ratio = logp - logq
        loss = float(np.sum(p * ratio))
        grad = p * (ratio - loss)
    elif loss_kind == "kl_from_target":
        q = np.asarray(target, dtype=float)
        nz = q > 0
        loss = float(np.sum(q[nz] * (np.log(q[nz]) - logp[nz])))
        grad = p * q.sum() - q
    elif loss_kind == "neg_log_prob_of_action":
        a = int(target)
        loss = float(-logp[a])
        grad = p.copy()
        grad[a] -= 1.0
    elif loss_kind == "entropy":
        loss = float(-np.sum(p * logp))
        grad = -p * (logp + loss)
    else:
        raise ValidationError(f"unknown loss kind {loss_kind!r}")
    return loss, grad


def input_gradient(policy: Policy, observation, loss_kind: str, target=None) -> GradientBundle:
    """Loss of ``policy`` at ``observation`` and its gradients."""
    if not isinstance(policy, FeedforwardPolicy):
        raise UnsupportedOperationError(
            f"{policy.kind} policies are not differentiable in the observation")
    x = _as_observation(policy, observation)
    logits, acts = policy.forward(x)
    loss, dlogits = loss_and_logit_grad(logits, loss_kind, target)
    dx, dparams = policy.backward(acts, dlogits)
    if not (np.isfinite(loss) and np.all(np.isfinite(dx))):
        raise NumericError(f"non-finite {loss_kind} gradient")
    return GradientBundle(loss, dx, dparams)


def _encode_array(a: np.ndarray) -> list:
    return [None if v == -np.inf else float(v) for v in np.ravel(a)]


def _decode_array(vals: list, shape) -> np.ndarray:
    return np.array([-np.inf if v is None else v for v in vals], dtype=float).reshape(shape)


def policy_to_dict(policy: Policy) -> dict[str, Any]:
    if isinstance(policy, FeedforwardPolicy):
        arch = {"sizes": policy.sizes, "activation": policy.activation}
        flat = np.concatenate([p.ravel() for p in policy.parameters()])
        extra = {}
    else:
        arch = {"num_states": policy.logits.shape[0], "num_actions": policy.logits.shape[1]}
        flat = policy.logits
        extra = {"embedding": policy.embedding.to_dict()}
    return {
        "format": CHECKPOINT_FORMAT,
        "kind": policy.kind,
        "architecture": arch,
        "temperature": policy.temperature,
        "parameters": _encode_array(flat),
        "metadata": policy.metadata,
        **extra,
    }


def policy_from_dict(d: dict[str, Any]) -> Policy:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"unsupported checkpoint format {d.get('format')!r}")
    arch = d["architecture"]
    if d["kind"] == "feedforward":
        sizes = arch["sizes"]
        flat = _decode_array(d["parameters"], (-1,))
        params, pos = [], 0
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            params.append(flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out))
            pos += fan_in * fan_out
            params.append(flat[pos:pos + fan_out])
            pos += fan_out
        if pos != flat.size:
            raise ValidationError("parameter array length does not match architecture")
        return FeedforwardPolicy(tuple(params[0::2]), tuple(params[1::2]),
                                 d["temperature"], dict(d.get("metadata", {})))
    if d["kind"] == "tabular_softmax":
        logits = _decode_array(d["parameters"], (arch["num_states"], arch["num_actions"]))
        emb = ObservationEmbedding.from_dict(d["embedding"])
        return TabularPolicy(logits, emb, d["temperature"], dict(d.get("metadata", {})))
    raise ValidationError(f"unknown policy kind {d['kind']!r}")


def save_policy(policy: Policy, path) -> None:
    with open(path, "w") as fh:
        json.dump(policy_to_dict(policy), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_policy(path) -> Policy:
    with open(path) as fh:
        return policy_from_dict(json.load(fh))
