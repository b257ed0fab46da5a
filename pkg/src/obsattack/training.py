"""Toy-scale trainers: tabular Q-learning, one-step actor-critic, REINFORCE,
the deceptive-policy stage of the two-stage attack, and distillation of a
tabular policy into a feedforward victim."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .envs import ObservationEmbedding
from .errors import TrainingError, ValidationError
from .mdp import MdpSpec, deterministic_table, evaluate_policy, flip_rewards, greedy_actions
from .policy import FeedforwardPolicy, TabularPolicy, log_softmax, softmax

log = logging.getLogger(__name__)

ALGORITHMS = ("q_learning", "actor_critic", "policy_gradient")


@dataclass(frozen=True)
class TrainConfig:
    algorithm: str = "q_learning"
    steps: int = 50_000
    learning_rate: float = 0.5
    entropy_bonus: float = 0.0
    seed: int = 0
    evaluation_interval: int = 0
    exploration: float = 0.2
    episode_horizon: int = 100
    # greedy extraction gives a deterministic policy; otherwise the softmax is kept
    greedy: bool = True

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValidationError(f"unknown algorithm {self.algorithm!r}")
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")
        if self.entropy_bonus < 0 or not 0 <= self.exploration <= 1:
            raise ValidationError("entropy_bonus must be >= 0 and exploration in [0, 1]")


def _episode_start(mdp: MdpSpec, rng, nonterminal: np.ndarray) -> int:
    # exploring starts on half of the episodes so every state gets visited
    if nonterminal.size and rng.random() < 0.5:
        return int(nonterminal[rng.integers(nonterminal.size)])
    return int(rng.choice(mdp.num_states, p=mdp.initial_dist))


def _step(mdp: MdpSpec, s: int, a: int, rng) -> tuple[int, float]:
    s2 = int(rng.choice(mdp.num_states, p=mdp.transition[s, a]))
    return s2, float(mdp.reward[s, a])


def _check_finite(arr: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(arr)):
        raise TrainingError("training diverged: non-finite parameters", step)


def _greedy_table(scores: np.ndarray) -> np.ndarray:
    return deterministic_table(greedy_actions(scores), scores.shape[1])


def _run(mdp: MdpSpec, config: TrainConfig, history: list) -> np.ndarray:
    """Train and return either a Q table or actor logits (both argmax-able)."""
    rng = np.random.default_rng(config.seed)
    S, A = mdp.num_states, mdp.num_actions
    nonterminal = np.flatnonzero(~mdp.terminal)
    g = mdp.gamma
    lr = config.learning_rate
    scores = np.zeros((S, A))
    values = np.zeros(S)
    step = 0
    while step < config.steps:
        s = _episode_start(mdp, rng, nonterminal)
        episode = []
        for _ in range(config.episode_horizon):
            if mdp.terminal[s] or step >= config.steps:
                break
            if config.algorithm == "q_learning":
                if rng.random() < config.exploration:
                    a = int(rng.integers(A))
                else:
                    a = int(greedy_actions(scores[s:s + 1])[0])
            else:
                a = int(rng.choice(A, p=softmax(scores[s])))
            s2, r = _step(mdp, s, a, rng)
            done = bool(mdp.terminal[s2])
            if config.algorithm == "q_learning":
                target = r + (0.0 if done else g * scores[s2].max())
                scores[s, a] += lr * (target - scores[s, a])
            elif config.algorithm == "actor_critic":
                delta = r + (0.0 if done else g * values[s2]) - values[s]
                values[s] += lr * delta
                p = softmax(scores[s])
                grad = -p
                grad[a] += 1.0
                logp = log_softmax(scores[s])
                ent = -np.sum(p * logp)
                scores[s] += lr * delta * grad + lr * config.entropy_bonus * (-p * (logp + ent))
            else:
                episode.append((s, a, r))
            step += 1
            if config.evaluation_interval and step % config.evaluation_interval == 0:
                _check_finite(scores, step)
                history.append((step, evaluate_policy(mdp, _greedy_table(scores)).return_value))
            s = s2
        if config.algorithm == "policy_gradient" and episode:
            ret = 0.0
            for t in range(len(episode) - 1, -1, -1):
                st, at, rt = episode[t]
                ret = rt + g * ret
                delta = ret - values[st]
                values[st] += lr * delta
                p = softmax(scores[st])
                grad = -p
                grad[at] += 1.0
                scores[st] += lr * (g ** t) * delta * grad
        _check_finite(scores, step)
    return scores


def train_policy(mdp: MdpSpec, embedding: ObservationEmbedding, config: TrainConfig) -> TabularPolicy:
    """Train a tabular policy on ``mdp``; its exact return is stored in metadata."""
    if embedding.num_states != mdp.num_states:
        raise ValidationError("embedding and MDP disagree on the number of states")
    history: list = []
    scores = _run(mdp, config, history)
    if config.greedy:
        policy = TabularPolicy.from_probs(_greedy_table(scores), embedding)
    else:
        policy = TabularPolicy(scores, embedding)
    ret = evaluate_policy(mdp, policy.table()).return_value
    policy.metadata.update(algorithm=config.algorithm, seed=config.seed, exact_return=ret,
                           history=history)
    log.info("trained %s (seed %d): exact return %.6f", config.algorithm, config.seed, ret)
    return policy


def train_deceptive(mdp: MdpSpec, embedding: ObservationEmbedding, config: TrainConfig,
                    ensemble: int = 1) -> TabularPolicy:
    """Reward-minimising policy: train on the flipped MDP, keep the median member.

    Members use seeds ``config.seed + i``; the member whose exact return on the
    original MDP is the median (lower median for even counts) is returned.
    """
    if ensemble < 1:
        raise ValidationError("ensemble must be >= 1")
    flipped = flip_rewards(mdp)
    members = []
    for i in range(ensemble):
        pol = train_policy(flipped, embedding, replace(config, seed=config.seed + i))
        members.append((evaluate_policy(mdp, pol.table()).return_value, i, pol))
    members.sort(key=lambda m: (m[0], m[1]))
    ret, idx, chosen = members[(ensemble - 1) // 2]
    chosen.metadata.update(deceptive=True, exact_return=ret, ensemble=ensemble,
                           member_returns=[m[0] for m in sorted(members, key=lambda m: m[1])])
    return chosen


def distill_feedforward(target_probs, embedding: ObservationEmbedding,
                        hidden: tuple[int, ...] = (32, 32), steps: int = 5000,
                        learning_rate: float = 0.01, seed: int = 0,
                        temperature: float = 1.0) -> FeedforwardPolicy:
    """Fit a tanh MLP to ``target_probs`` at the embedded states (Adam, full batch).

    Minimises the mean cross-entropy between the target rows and the network.
    """
    q = np.asarray(target_probs, dtype=float)
    if q.shape[0] != embedding.num_states:
        raise ValidationError("target table must have one row per embedded state")
    if len(hidden) > 3 or any(h > 64 or h < 1 for h in hidden):
        raise ValidationError("at most 3 hidden layers of at most 64 units")
    X = embedding.points
    net = FeedforwardPolicy.init([embedding.dim, *hidden, q.shape[1]], seed, temperature)
    params = [p.copy() for p in net.parameters()]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    n = X.shape[0]
    for t in range(1, steps + 1):
        logits, acts = net.forward(X)
        p = softmax(logits)
        _, grads = net.backward(acts, (p * q.sum(axis=1, keepdims=True) - q) / n)
        for i, gr in enumerate(grads):
            m[i] = b1 * m[i] + (1 - b1) * gr
            v[i] = b2 * v[i] + (1 - b2) * gr * gr
            params[i] -= learning_rate * (m[i] / (1 - b1 ** t)) / (np.sqrt(v[i] / (1 - b2 ** t)) + eps)
        if not all(np.all(np.isfinite(pp)) for pp in params):
            raise TrainingError("distillation diverged", t)
        net = net.with_parameters(params)
    net.metadata.update(distilled=True, steps=steps, seed=seed, hidden=list(hidden))
    return net
