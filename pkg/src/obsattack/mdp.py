"""Finite MDPs and exact dynamic-programming evaluation of (attacked) policies.

Everything here works on tabular action distributions ``pi[s, a]``. Policies
over observations are first materialised into such a table (see
:func:`obsattack.attacks.induced_tabular_policy`), then evaluated exactly.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Any, Iterable, NamedTuple

import numpy as np

from .errors import NumericError, ValidationError

ROW_TOL = 1e-9
RESIDUAL_TOL = 1e-10
# |S|*|A| above this switches evaluation from a direct solve to iteration
DIRECT_SOLVE_LIMIT = 10_000
DEFAULT_HORIZON = 1000


@dataclass(frozen=True, eq=False)
class MdpSpec:
    """A finite discounted MDP.

    ``transition[s, a, s']`` holds P(s'|s, a) and ``reward[s, a]`` the
    expected immediate reward. Terminal states are absorbing with zero reward
    so that infinite-horizon formulas apply unchanged.
    """

    num_states: int
    num_actions: int
    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    initial_dist: np.ndarray
    terminal: np.ndarray
    state_labels: tuple[str, ...] = field(default=())
    action_labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        S, A = int(self.num_states), int(self.num_actions)
        P = np.array(self.transition, dtype=float)
        r = np.array(self.reward, dtype=float)
        mu = np.array(self.initial_dist, dtype=float)
        term = np.array(self.terminal, dtype=bool)
        if S < 1 or A < 1:
            raise ValidationError("MDP needs at least one state and one action")
        if P.shape != (S, A, S):
            raise ValidationError(f"transition has shape {P.shape}, expected {(S, A, S)}")
        if r.shape != (S, A):
            raise ValidationError(f"reward has shape {r.shape}, expected {(S, A)}")
        if mu.shape != (S,) or term.shape != (S,):
            raise ValidationError("initial_dist and terminal must have one entry per state")
        if not 0.0 <= self.gamma < 1.0:
            raise ValidationError(f"gamma must lie in [0, 1), got {self.gamma}")
        bad_rows = (P < 0).any(axis=2) | (np.abs(P.sum(axis=2) - 1.0) > ROW_TOL)
        if bad_rows.any():
            s, a = np.argwhere(bad_rows)[0]
            raise ValidationError(f"transition row (state {s}, action {a}) is not a distribution")
        if np.any(mu < 0) or abs(mu.sum() - 1.0) > ROW_TOL:
            raise ValidationError("initial_dist is not a distribution")
        for s in np.flatnonzero(term):
            if not np.all(P[s, :, s] == 1.0) or np.any(r[s] != 0.0):
                raise ValidationError(f"terminal state {s} must self-loop with zero reward")
        for arr in (P, r, mu, term):
            arr.setflags(write=False)
        object.__setattr__(self, "num_states", S)
        object.__setattr__(self, "num_actions", A)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "initial_dist", mu)
        object.__setattr__(self, "terminal", term)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "state_labels", tuple(self.state_labels))
        object.__setattr__(self, "action_labels", tuple(self.action_labels))

    def replace(self, **changes) -> "MdpSpec":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return MdpSpec(**fields)

    def equals(self, other: "MdpSpec") -> bool:
        """Bitwise equality of every field."""
        return (
            self.num_states == other.num_states
            and self.num_actions == other.num_actions
            and self.gamma == other.gamma
            and np.array_equal(self.transition, other.transition)
            and np.array_equal(self.reward, other.reward)
            and np.array_equal(self.initial_dist, other.initial_dist)
            and np.array_equal(self.terminal, other.terminal)
            and self.state_labels == other.state_labels
            and self.action_labels == other.action_labels
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "gamma": self.gamma,
            "initial_dist": self.initial_dist.tolist(),
            "terminal": self.terminal.tolist(),
            "state_labels": list(self.state_labels),
            "action_labels": list(self.action_labels),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MdpSpec":
        return cls(
            num_states=data["num_states"],
            num_actions=data["num_actions"],
            transition=np.asarray(data["transition"], dtype=float),
            reward=np.asarray(data["reward"], dtype=float),
            gamma=data["gamma"],
            initial_dist=np.asarray(data["initial_dist"], dtype=float),
            terminal=np.asarray(data["terminal"], dtype=bool),
            state_labels=tuple(data.get("state_labels", ())),
            action_labels=tuple(data.get("action_labels", ())),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "MdpSpec":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class EvaluationReport:
    return_value: float
    state_values: np.ndarray
    q_values: np.ndarray
    advantages: np.ndarray
    discounted_occupancy: np.ndarray
    bellman_residual: float


def validate_action_probs(mdp: MdpSpec, action_probs) -> np.ndarray:
    pi = np.asarray(action_probs, dtype=float)
    if pi.shape != (mdp.num_states, mdp.num_actions):
        raise ValidationError(
            f"action_probs has shape {pi.shape}, expected {(mdp.num_states, mdp.num_actions)}")
    bad = ~np.isfinite(pi).all(axis=1) | (pi < -ROW_TOL).any(axis=1) | (
        np.abs(pi.sum(axis=1) - 1.0) > ROW_TOL)
    if bad.any():
        s = int(np.flatnonzero(bad)[0])
        raise ValidationError(f"action_probs row for state {s} is not a distribution: {pi[s]}")
    return pi


def policy_transition(mdp: MdpSpec, pi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """State-to-state matrix and expected reward vector under ``pi``."""
    P_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    r_pi = np.einsum("sa,sa->s", pi, mdp.reward)
    return P_pi, r_pi


def _solve(M: np.ndarray, b: np.ndarray) -> np.ndarray:
    x = np.linalg.solve(M, b)
    # one round of iterative refinement keeps residuals near machine precision
    return x + np.linalg.solve(M, b - M @ x)


def _iterate(P_pi: np.ndarray, r_pi: np.ndarray, gamma: float, max_iter: int = 1_000_000):
    V = np.zeros_like(r_pi)
    for _ in range(max_iter):
        V_new = r_pi + gamma * P_pi @ V
        if not np.all(np.isfinite(V_new)):
            raise NumericError("policy evaluation diverged")
        if np.max(np.abs(V_new - V)) <= RESIDUAL_TOL * (1 - gamma):
            return V_new
        V = V_new
    raise NumericError("policy evaluation did not reach the residual tolerance")


def evaluate_policy(mdp: MdpSpec, action_probs) -> EvaluationReport:
    """Exact return, values, advantages and discounted occupancy of ``action_probs``."""
    pi = validate_action_probs(mdp, action_probs)
    P_pi, r_pi = policy_transition(mdp, pi)
    g = mdp.gamma
    M = np.eye(mdp.num_states) - g * P_pi
    if mdp.num_states * mdp.num_actions <= DIRECT_SOLVE_LIMIT:
        V = _solve(M, r_pi)
        occ = _solve(M.T, mdp.initial_dist)
    else:
        V = _iterate(P_pi, r_pi, g)
        occ = _iterate(P_pi.T, mdp.initial_dist, g)
    if not (np.all(np.isfinite(V)) and np.all(np.isfinite(occ))):
        raise NumericError("policy evaluation produced non-finite values")
    residual = float(np.max(np.abs(r_pi + g * P_pi @ V - V)))
    if residual > RESIDUAL_TOL:
        V = V + _iterate(P_pi, r_pi + g * P_pi @ V - V, g)
        residual = float(np.max(np.abs(r_pi + g * P_pi @ V - V)))
        if residual > RESIDUAL_TOL:
            raise NumericError(f"Bellman residual {residual:.3g} above tolerance")
    Q = mdp.reward + g * mdp.transition @ V
    A = Q - V[:, None]
    d = (1.0 - g) * occ
    return EvaluationReport(
        return_value=float(mdp.initial_dist @ V),
        state_values=V,
        q_values=Q,
        advantages=A,
        discounted_occupancy=d,
        bellman_residual=residual,
    )


def greedy_actions(q_values: np.ndarray, maximize: bool = True, tol: float = 1e-9) -> np.ndarray:
    """Best action per state; near-ties go to the lowest action index."""
    q = q_values if maximize else -q_values
    best = q.max(axis=1, keepdims=True)
    return np.argmax(q >= best - tol, axis=1)


def deterministic_table(actions: Iterable[int], num_actions: int) -> np.ndarray:
    actions = np.asarray(list(actions), dtype=int)
    table = np.zeros((len(actions), num_actions))
    table[np.arange(len(actions)), actions] = 1.0
    return table


@dataclass(frozen=True, eq=False)
class OptimalSolution:
    values: np.ndarray
    q_values: np.ndarray
    actions: np.ndarray
    policy: np.ndarray
    return_value: float


def solve_optimal(mdp: MdpSpec, maximize: bool = True, max_iter: int = 10_000) -> OptimalSolution:
    """Optimal (or, with ``maximize=False``, worst) deterministic policy by policy iteration."""
    actions = np.zeros(mdp.num_states, dtype=int)
    for _ in range(max_iter):
        report = evaluate_policy(mdp, deterministic_table(actions, mdp.num_actions))
        q = report.q_values if maximize else -report.q_values
        current = q[np.arange(mdp.num_states), actions]
        best = q.max(axis=1)
        improve = best > current + 1e-12
        if not improve.any():
            break
        actions = np.where(improve, np.argmax(q, axis=1), actions)
    else:
        raise NumericError("policy iteration did not converge")
    final = greedy_actions(report.q_values, maximize=maximize)
    table = deterministic_table(final, mdp.num_actions)
    report = evaluate_policy(mdp, table)
    return OptimalSolution(report.state_values, report.q_values, final, table, report.return_value)


def flip_rewards(mdp: MdpSpec) -> MdpSpec:
    """Negate every reward; adding 0.0 keeps terminal zeros as +0.0."""
    return mdp.replace(reward=-mdp.reward + 0.0)


class Step(NamedTuple):
    state: int
    action: int
    reward: float
    next_state: int
    done: bool


@dataclass(frozen=True)
class TrajectoryBatch:
    episodes: tuple[tuple[Step, ...], ...]
    seed: int

    def discounted_returns(self, gamma: float) -> np.ndarray:
        out = np.empty(len(self.episodes))
        for i, ep in enumerate(self.episodes):
            disc = gamma ** np.arange(len(ep))
            out[i] = float(np.dot(disc, [st.reward for st in ep])) if ep else 0.0
        return out

    def to_csv(self, fh=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["episode", "step", "state", "action", "reward", "next_state", "done"])
        for e, ep in enumerate(self.episodes):
            for t, st in enumerate(ep):
                writer.writerow([e, t, st.state, st.action, repr(float(st.reward)),
                                 st.next_state, int(st.done)])
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text


def sample_trajectories(mdp: MdpSpec, action_probs, episodes: int,
                        horizon: int = DEFAULT_HORIZON, seed: int = 0) -> TrajectoryBatch:
    """Roll out a tabular policy; episodes stop at a terminal state or the horizon.

    Truncated episodes are not bootstrapped.
    """
    if episodes < 1 or horizon < 1:
        raise ValidationError("episodes and horizon must be at least 1")
    pi = validate_action_probs(mdp, action_probs)
    rng = np.random.default_rng(seed)
    S, A = mdp.num_states, mdp.num_actions
    cum_pi = np.cumsum(pi, axis=1)
    cum_P = np.cumsum(mdp.transition, axis=2)
    cum_mu = np.cumsum(mdp.initial_dist)
    out = []
    for _ in range(episodes):
        s = min(int(np.searchsorted(cum_mu, rng.random(), side="right")), S - 1)
        steps = []
        for _t in range(horizon):
            if mdp.terminal[s]:
                break
            a = min(int(np.searchsorted(cum_pi[s], rng.random(), side="right")), A - 1)
            s2 = min(int(np.searchsorted(cum_P[s, a], rng.random(), side="right")), S - 1)
            done = bool(mdp.terminal[s2])
            steps.append(Step(s, a, float(mdp.reward[s, a]), s2, done))
            s = s2
            if done:
                break
        out.append(tuple(steps))
    return TrajectoryBatch(tuple(out), seed)
