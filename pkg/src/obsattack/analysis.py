"""Exact certificates for the attack-space propositions and the
performance bounds of the two-stage attack.

Attacked-policy sets are stored factorised: a set is a union of *components*,
each component a product over states of per-state option sets (action
distributions). Because ``pi_h(.|s)`` depends only on ``h(s)``, every set we
need (H1, H2 over all attack-timing indicators, H3 over a full target set,
and the unrestricted optimum H*) has this shape, which keeps exhaustive
reasoning linear in the number of states instead of exponential.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attacks import (MAD_VARIANTS, Attacker, _argbest, induced_tabular_policy,
                      untargeted_scores)
from .envs import ObservationEmbedding, PerturbationBudget
from .errors import SizeError, UnsupportedOperationError, ValidationError
from .mdp import MdpSpec, evaluate_policy, policy_transition, solve_optimal
from .policy import PROB_FLOOR, Policy, act_probs, kl_divergence, tabulate

CANON_DECIMALS = 9
ENUMERATION_CAP = 10 ** 6
LEMMA_TOL = 1e-8
SPACES = ("H1", "H2", "H3", "H*")


def canonical(p) -> tuple:
    """Hashable key for a distribution, equal for rows within ~1e-9."""
    return tuple(np.round(np.asarray(p, dtype=float), CANON_DECIMALS) + 0.0)


@dataclass(frozen=True, eq=False)
class Component:
    """Product over states of option sets; ``options[s]`` is an (k_s, A) array."""

    options: tuple[np.ndarray, ...]
    neighbors: tuple[tuple[int, ...], ...]
    label: str = ""

    @property
    def size(self) -> int:
        return math.prod(len(o) for o in self.options)

    def keys(self, s: int) -> set:
        return {canonical(p) for p in self.options[s]}

    def contains(self, table: np.ndarray) -> bool:
        return all(canonical(table[s]) in self.keys(s) for s in range(len(self.options)))

    def members(self):
        for choice in itertools.product(*(range(len(o)) for o in self.options)):
            yield np.array([self.options[s][c] for s, c in enumerate(choice)])


def _dedup(rows: Sequence[np.ndarray], nbrs: Sequence[int]):
    seen: dict = {}
    for p, n in zip(rows, nbrs):
        seen.setdefault(canonical(p), (np.asarray(p, dtype=float), int(n)))
    vals = list(seen.values())
    return np.array([v[0] for v in vals]), tuple(v[1] for v in vals)


def make_component(rows_per_state, nbrs_per_state, label="") -> Component:
    opts, nbrs = zip(*(_dedup(r, n) for r, n in zip(rows_per_state, nbrs_per_state)))
    return Component(tuple(opts), tuple(nbrs), label)


@dataclass(frozen=True)
class MinimisationResult:
    values: np.ndarray
    choice: np.ndarray
    table: np.ndarray
    return_value: float


def minimize_over_component(mdp: MdpSpec, comp: Component, max_iter: int = 10_000
                            ) -> MinimisationResult:
    """Min-player policy iteration over per-state option choices.

    Returns the member with the lowest value at every state simultaneously
    (such a member exists because the choice sets are a product).
    """
    S = mdp.num_states
    # expected one-step reward and next-state distribution of each option
    opt_r = [comp.options[s] @ mdp.reward[s] for s in range(S)]
    opt_P = [comp.options[s] @ mdp.transition[s] for s in range(S)]
    choice = np.zeros(S, dtype=int)
    g = mdp.gamma
    for _ in range(max_iter):
        table = np.array([comp.options[s][choice[s]] for s in range(S)])
        V = evaluate_policy(mdp, table).state_values
        improved = False
        for s in range(S):
            q = opt_r[s] + g * opt_P[s] @ V
            best = int(np.argmin(q))
            if q[best] < q[choice[s]] - 1e-12:
                choice[s] = best
                improved = True
        if not improved:
            break
    # canonical witness: lowest option index among near-ties
    for s in range(S):
        q = opt_r[s] + g * opt_P[s] @ V
        choice[s] = int(np.flatnonzero(q <= q.min() + 1e-10)[0])
    table = np.array([comp.options[s][choice[s]] for s in range(S)])
    ev = evaluate_policy(mdp, table)
    return MinimisationResult(ev.state_values, choice, table, ev.return_value)


def fingerprint(mdp: MdpSpec, victim_table: np.ndarray, budget: PerturbationBudget) -> str:
    h = hashlib.sha256()
    for arr in (mdp.transition, mdp.reward, mdp.initial_dist, np.round(victim_table, 12)):
        h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
    h.update(repr((mdp.gamma, budget.epsilon, budget.norm_order, budget.discrete_neighbors)).encode())
    return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class PolicySetCertificate:
    space_tag: str
    components: tuple[Component, ...]
    worst_return: float
    worst_values: np.ndarray
    witness_policy: np.ndarray
    witness_attacker: dict
    provenance: str
    pool: tuple[str, ...] = ()
    full_targets: bool = True

    @property
    def size(self) -> int:
        return sum(c.size for c in self.components)

    def contains(self, table: np.ndarray) -> bool:
        return any(c.contains(table) for c in self.components)

    def enumerated_policies(self, cap: int = ENUMERATION_CAP) -> list[np.ndarray]:
        """Distinct member tables (expanded; raises SizeError above ``cap``)."""
        if self.size > cap:
            raise SizeError(f"{self.space_tag} set has {self.size} members", self.size)
        seen, out = set(), []
        for comp in self.components:
            for m in comp.members():
                key = tuple(canonical(r) for r in m)
                if key not in seen:
                    seen.add(key)
                    out.append(m)
        return out

    def to_dict(self) -> dict:
        return {
            "space_tag": self.space_tag,
            "provenance": self.provenance,
            "pool": list(self.pool),
            "full_targets": self.full_targets,
            "num_components": len(self.components),
            "size": self.size,
            "worst_return": self.worst_return,
            "worst_values": self.worst_values.tolist(),
            "witness_attacker": self.witness_attacker,
            "witness_policy": self.witness_policy.tolist(),
            "components": [
                {"label": c.label,
                 "options": [[[float(x) for x in row] for row in o] for o in c.options],
                 "neighbors": [list(n) for n in c.neighbors]}
                for c in self.components
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def _neighbor_rows(victim: Policy, embedding: ObservationEmbedding, budget: PerturbationBudget):
    table = tabulate(victim, embedding)
    return table, [[table[n] for n in budget.neighbors(s)] for s in range(embedding.num_states)]


def untargeted_choice(victim: Policy, embedding: ObservationEmbedding,
                      budget: PerturbationBudget, variant: str) -> list[int]:
    """Neighbour picked at every state by one untargeted algorithm."""
    out = []
    for s in range(embedding.num_states):
        nbrs = np.array(budget.neighbors(s))
        out.append(int(nbrs[_argbest(untargeted_scores(victim, embedding, s, nbrs, variant), True)]))
    return out


def targeted_choice(victim_table: np.ndarray, budget: PerturbationBudget, state: int,
                    target: np.ndarray, entropy_weight: float = 0.0) -> int:
    nbrs = np.array(budget.neighbors(state))
    obj = np.array([kl_divergence(victim_table[n], target, floor=PROB_FLOOR) for n in nbrs])
    if entropy_weight:
        obj += entropy_weight * np.array([-np.sum(victim_table[n][victim_table[n] > 0] *
                                                  np.log(victim_table[n][victim_table[n] > 0]))
                                          for n in nbrs])
    return int(nbrs[_argbest(obj, False)])


def enumerate_policy_set(mdp: MdpSpec, embedding: ObservationEmbedding, victim: Policy,
                         budget: PerturbationBudget, space_tag: str,
                         attack_algorithm_pool: Sequence[str] = MAD_VARIANTS,
                         targets="full", cap: int = ENUMERATION_CAP) -> PolicySetCertificate:
    """Exhaustive attacked-policy set for one function space in discrete mode.

    ``space_tag`` is one of ``H1``, ``H2``, ``H3``, ``H*``. The untargeted pool
    names MAD variants. ``targets`` is ``"full"`` (every per-state target, the
    premise of the inclusion theorem) or a list of target policy tables.
    """
    if not budget.is_discrete:
        raise UnsupportedOperationError("exact enumeration needs a discrete_set budget")
    if space_tag not in SPACES:
        raise ValidationError(f"unknown space {space_tag!r}; expected one of {SPACES}")
    if embedding.num_states != mdp.num_states:
        raise ValidationError("embedding and MDP disagree on the number of states")
    S = mdp.num_states
    table, nrows = _neighbor_rows(victim, embedding, budget)
    count = sum(len(budget.neighbors(s)) for s in range(S)) * max(1, len(attack_algorithm_pool))
    if count > cap:
        raise SizeError(f"{space_tag} enumeration needs {count} per-state combinations", count)
    comps: list[Component] = []
    if space_tag in ("H1", "H2"):
        for variant in attack_algorithm_pool:
            pick = untargeted_choice(victim, embedding, budget, variant)
            if space_tag == "H1":
                rows = [[table[pick[s]]] for s in range(S)]
                nb = [[pick[s]] for s in range(S)]
            else:
                # every attack indicator: per state, attack or pass through
                rows = [[table[s], table[pick[s]]] for s in range(S)]
                nb = [[s, pick[s]] for s in range(S)]
            comps.append(make_component(rows, nb, f"{space_tag}:{variant}"))
    elif space_tag == "H3" and isinstance(targets, str):
        if targets != "full":
            raise ValidationError(f"unknown target set {targets!r}")
        rows, nb = [], []
        for s in range(S):
            cands = [table[n] for n in budget.neighbors(s)]
            cands += list(np.eye(mdp.num_actions))
            picks = [targeted_choice(table, budget, s, t) for t in cands]
            rows.append([table[n] for n in picks])
            nb.append(picks)
        comps.append(make_component(rows, nb, "H3:full"))
    elif space_tag == "H3":
        for i, target in enumerate(targets):
            target = np.asarray(target, dtype=float)
            picks = [targeted_choice(table, budget, s, target[s]) for s in range(S)]
            comps.append(make_component([[table[n]] for n in picks], [[n] for n in picks],
                                        f"H3:target{i}"))
    else:
        comps.append(make_component(nrows, [budget.neighbors(s) for s in range(S)], "H*"))
    best = None
    for comp in comps:
        res = minimize_over_component(mdp, comp)
        if best is None or res.return_value < best[0].return_value - 1e-12:
            best = (res, comp)
    res, comp = best
    witness = {
        "component": comp.label,
        "neighbor_choice": [int(comp.neighbors[s][res.choice[s]]) for s in range(S)],
    }
    return PolicySetCertificate(
        space_tag=space_tag, components=tuple(comps), worst_return=res.return_value,
        worst_values=res.values, witness_policy=res.table, witness_attacker=witness,
        provenance=fingerprint(mdp, table, budget),
        pool=tuple(attack_algorithm_pool) if space_tag in ("H1", "H2") else (),
        full_targets=not (space_tag == "H3" and not isinstance(targets, str)),
    )


@dataclass(frozen=True)
class InclusionResult:
    holds: bool
    violations: list = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.holds


def _subset(a: PolicySetCertificate, b: PolicySetCertificate, cap: int) -> list:
    violations = []
    for comp in a.components:
        if any(all(comp.keys(s) <= other.keys(s) for s in range(len(comp.options)))
               for other in b.components):
            continue
        if comp.size > cap:
            raise SizeError(f"cannot decide inclusion of a {comp.size}-member component", comp.size)
        for m in comp.members():
            if not b.contains(m):
                violations.append({"from": a.space_tag, "into": b.space_tag,
                                   "component": comp.label, "policy": m.tolist()})
                break
    return violations


def check_inclusion_chain(certs: Sequence[PolicySetCertificate],
                          cap: int = ENUMERATION_CAP) -> InclusionResult:
    """Decide ``pi_H1 <= pi_H2 <= pi_H3`` for certificates of one experiment."""
    if len(certs) != 3:
        raise ValidationError("need exactly three certificates (H1, H2, H3)")
    if len({c.provenance for c in certs}) != 1:
        raise ValidationError("certificates come from different (mdp, victim, budget) triples")
    h1, h2, h3 = certs
    violations = _subset(h1, h2, cap) + _subset(h2, h3, cap)
    return InclusionResult(not violations, violations)


# --- performance bounds -------------------------------------------------------------

@dataclass(frozen=True)
class BoundReport:
    beta0: float
    beta1: float
    C: float
    alpha_hat: float
    alpha_e: float | None
    lemma1_rhs: float
    attacked_return: float
    deceptive_return: float
    worst_return: float
    thm4_threshold: float
    thm4_threshold_derived: float
    lemma1_holds: bool
    thm4_applicable: bool
    thm4_conclusion: bool | None
    lemma2_lhs: float
    lemma2_rhs: float
    lemma2_holds: bool
    pd_bound_rhs: float
    beta1_clamped: bool
    beta1_infinite: bool
    baseline_return: float | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _scaled(c: float, x: float) -> float:
    # C = 0 kills the term even when the divergence is infinite
    return 0.0 if c == 0.0 else c * x


def thm4_thresholds(gamma: float, C: float, alpha_e: float, alpha_hat: float):
    """(printed, derived) beta1 thresholds of the Theorem-4 premise.

    The printed form is used verbatim. The derived form solves the quadratic in
    sqrt(beta1) obtained from the Lemma-1 bound with beta0 <= beta1.
    """
    gap = alpha_e - alpha_hat
    if gap <= 0:
        return -math.inf, -math.inf
    if C == 0.0:
        return math.inf, math.inf
    g1 = 1.0 - gamma
    r2 = math.sqrt(2.0)
    printed = (-r2 * gamma * C + math.sqrt(2 * gamma ** 2 * C ** 2 + 4 * gap * g1 ** 3)) / (2 * g1 * C)
    root = (-r2 * gamma * C + math.sqrt(2 * gamma ** 2 * C ** 2 + 4 * C * gap * g1 ** 3)) / (2 * g1 * C)
    return printed, root * root


def bound_report_from_tables(mdp: MdpSpec, attacked: np.ndarray, deceptive: np.ndarray,
                             baseline_return: float | None = None) -> BoundReport:
    """All Lemma-1 / Theorem-4 quantities from exact dynamic programming.

    ``R(pi^-)`` in the bound is the true minimum return, so
    ``alpha_hat + R(pi^-)`` equals the return of the deceptive table used as
    the attack target.
    """
    pi_h = np.asarray(attacked, dtype=float)
    pi_d = np.asarray(deceptive, dtype=float)
    g = mdp.gamma
    ev_h = evaluate_policy(mdp, pi_h)
    ev_d = evaluate_policy(mdp, pi_d)
    r_min = solve_optimal(mdp, maximize=False).return_value
    alpha_hat = max(ev_d.return_value - r_min, 0.0)

    kls = np.array([kl_divergence(pi_h[s], pi_d[s]) for s in range(mdp.num_states)])
    beta0 = float(kls.max())
    support_gap = (pi_d <= 0) & (pi_h > 0)
    both_zero = (pi_d <= 0) & (pi_h <= 0)
    clamped = bool(np.any((pi_d > 0) & (pi_d < PROB_FLOOR) & (pi_h > 0)))
    ratio = np.where(both_zero, 1.0, pi_h / np.maximum(pi_d, PROB_FLOOR))
    beta1_inf = bool(support_gap.any())
    beta1 = math.inf if beta1_inf else float(np.max(np.abs(ratio - 1.0)))

    exp_adv = np.einsum("sa,sa->s", pi_h, ev_d.advantages)
    C = float(np.max(np.abs(exp_adv)))
    rhs = (alpha_hat + _scaled(C, beta1) / (1 - g)
           + 2 * g * _scaled(C, math.sqrt(beta0 / 2)) / (1 - g) ** 2 + r_min)

    tv = 0.5 * np.sum(np.abs(pi_h - pi_d), axis=1)
    lemma2_lhs = float(ev_d.discounted_occupancy @ tv)
    lemma2_rhs = math.sqrt(beta0 / 2)
    pd_rhs = (float(ev_d.discounted_occupancy @ exp_adv) / (1 - g)
              + 2 * g * C / (1 - g) ** 2 * lemma2_lhs + ev_d.return_value)

    alpha_e = None
    printed = derived = math.nan
    applicable = False
    conclusion = None
    if baseline_return is not None:
        alpha_e = baseline_return - r_min
        printed, derived = thm4_thresholds(g, C, alpha_e, alpha_hat)
        applicable = bool(math.isfinite(beta1) and beta1 < printed)
        if applicable:
            conclusion = bool(ev_h.return_value < baseline_return)
    return BoundReport(
        beta0=beta0, beta1=beta1, C=C, alpha_hat=alpha_hat, alpha_e=alpha_e, lemma1_rhs=rhs,
        attacked_return=ev_h.return_value, deceptive_return=ev_d.return_value,
        worst_return=r_min, thm4_threshold=printed, thm4_threshold_derived=derived,
        lemma1_holds=bool(ev_h.return_value <= rhs + LEMMA_TOL),
        thm4_applicable=applicable, thm4_conclusion=conclusion,
        lemma2_lhs=lemma2_lhs, lemma2_rhs=lemma2_rhs,
        lemma2_holds=bool(lemma2_lhs <= lemma2_rhs + 1e-10),
        pd_bound_rhs=pd_rhs, beta1_clamped=clamped, beta1_infinite=beta1_inf,
        baseline_return=baseline_return,
    )


def compute_bound_report(mdp: MdpSpec, embedding: ObservationEmbedding, victim: Policy,
                         attacker: Attacker, deceptive: Policy,
                         alpha_e_baseline: float | None = None) -> BoundReport:
    attacked = induced_tabular_policy(victim, attacker, embedding)
    return bound_report_from_tables(mdp, attacked, tabulate(deceptive, embedding), alpha_e_baseline)


def performance_difference(mdp: MdpSpec, pi: np.ndarray, pi_ref: np.ndarray) -> dict:
    """Exact gap R(pi) - R(pi_ref) alongside the two-sided trust-region bound."""
    g = mdp.gamma
    ev = evaluate_policy(mdp, pi)
    ev_ref = evaluate_policy(mdp, pi_ref)
    exp_adv = np.einsum("sa,sa->s", pi, ev_ref.advantages)
    eps = float(np.max(np.abs(exp_adv)))
    tv = 0.5 * np.sum(np.abs(np.asarray(pi) - np.asarray(pi_ref)), axis=1)
    first = float(ev_ref.discounted_occupancy @ exp_adv) / (1 - g)
    slack = 2 * g * eps / (1 - g) ** 2 * float(ev_ref.discounted_occupancy @ tv)
    return {
        "gap": ev.return_value - ev_ref.return_value,
        # exact identity uses the occupancy of pi itself
        "identity": float(ev.discounted_occupancy @ exp_adv) / (1 - g),
        "first_order": first,
        "upper": first + slack,
        "lower": first - slack,
    }


def prop1_facts(mdp: MdpSpec, embedding, victim: Policy, budget: PerturbationBudget,
                green_state: int, good_action: int, pool=MAD_VARIANTS) -> dict:
    """Facts behind the weakness of full-timed untargeted attacks."""
    h1 = enumerate_policy_set(mdp, embedding, victim, budget, "H1", pool)
    hs = enumerate_policy_set(mdp, embedding, victim, budget, "H*")
    h1_members = h1.enumerated_policies()
    h1_returns = [evaluate_policy(mdp, m).return_value for m in h1_members]
    # every worst-case member: options at s_g that attain the minimum
    comp = hs.components[0]
    V = hs.worst_values
    q = comp.options[green_state] @ (mdp.reward[green_state] + mdp.gamma * mdp.transition[green_state] @ V)
    optimal_opts = comp.options[green_state][q <= q.min() + 1e-10]
    return {
        "h1": h1,
        "h_star": hs,
        "h1_min_return": float(min(h1_returns)),
        "h_star_return": hs.worst_return,
        "h1_good_action_probs": [float(m[green_state, good_action]) for m in h1_members],
        "h_star_good_action_probs": [float(p[good_action]) for p in optimal_opts],
        "witness_good_action_prob": float(hs.witness_policy[green_state, good_action]),
    }


def prop2_facts(mdp: MdpSpec, embedding, victim: Policy, budget: PerturbationBudget,
                green_state: int, pool=("deterministic",)) -> dict:
    """Facts behind the weakness of strategically-timed untargeted attacks."""
    h2 = enumerate_policy_set(mdp, embedding, victim, budget, "H2", pool)
    hs = enumerate_policy_set(mdp, embedding, victim, budget, "H*")
    h2_min_vg = min(minimize_over_component(mdp, c).values[green_state] for c in h2.components)
    options = sorted({int(np.argmax(p)) for c in h2.components for p in c.options[green_state]})
    return {
        "h2": h2,
        "h_star": hs,
        "h2_min_value_at_green": float(h2_min_vg),
        "h_star_value_at_green": float(hs.worst_values[green_state]),
        "h2_actions_at_green": options,
    }


__all__ = [
    "BoundReport", "Component", "InclusionResult", "PolicySetCertificate",
    "bound_report_from_tables", "check_inclusion_chain", "compute_bound_report",
    "enumerate_policy_set", "minimize_over_component", "performance_difference",
    "prop1_facts", "prop2_facts", "thm4_thresholds",
]
