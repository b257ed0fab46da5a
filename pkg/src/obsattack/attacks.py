"""Observation attacks: the H1/H2/H3 taxonomy, FGSM/PGD, and the two-stage
KL-targeted attack.

An attacker maps an observation ``s`` to ``h(s)`` with ``||h(s) - s||_p <= eps``
(continuous mode) or to the embedding of a state in the discrete neighbour
set ``N(s)`` (discrete mode). The attacked policy is ``pi_h(a|s) = pi(a|h(s))``.
"""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .envs import ObservationEmbedding, PerturbationBudget, norm
from .errors import ConfigurationError, ValidationError
from .mdp import greedy_actions
from .policy import (PROB_FLOOR, FeedforwardPolicy, Policy, act_probs, entropy, input_gradient,
                     kl_divergence, loss_and_logit_grad)

log = logging.getLogger(__name__)

SPACE_TAGS = ("H1_full_untargeted", "H2_strategic_untargeted", "H3_critic_targeted",
              "H3_two_stage", "random", "identity")
MAD_VARIANTS = ("deterministic", "kl", "kl_reverse")
TIMER_RULES = ("preference_gap", "always", "never")
OBS_LOW, OBS_HIGH = 0.0, 1.0
TIE_TOL = 1e-12


@dataclass(frozen=True)
class OptimizerConfig:
    method: str = "pgd"
    iterations: int = 10
    step_size: float = 0.01
    entropy_weight: float = 0.0
    best_iterate_tracking: bool = True
    # random initialisation inside the ball; the clean point is still a candidate
    random_start: bool = False
    # extra descents from uniform points in the ball
    restarts: int = 0

    def __post_init__(self):
        if self.method not in ("fgsm", "pgd"):
            raise ValidationError(f"unknown optimizer {self.method!r}")
        if self.method == "fgsm" and self.iterations != 1:
            object.__setattr__(self, "iterations", 1)
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if self.restarts < 0:
            raise ValidationError("restarts must be >= 0")
        if not self.step_size > 0:
            raise ValidationError("step_size must be > 0")
        if self.entropy_weight < 0:
            raise ValidationError("entropy_weight must be >= 0")


@dataclass(frozen=True)
class StrategicTimer:
    rule: str = "preference_gap"
    threshold: float = 0.5

    def __post_init__(self):
        if self.rule not in TIMER_RULES:
            raise ValidationError(f"unknown timing rule {self.rule!r}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValidationError("threshold must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class Attacker:
    space_tag: str
    budget: PerturbationBudget
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    target_policy: Policy | None = None
    timing_rule: StrategicTimer | None = None
    aux_q: np.ndarray | None = None
    # needed to decode observations in discrete mode and for aux_q lookups
    embedding: ObservationEmbedding | None = None
    mad_variant: str = "deterministic"
    seed: int = 0

    def __post_init__(self):
        if self.space_tag not in SPACE_TAGS:
            raise ConfigurationError(f"unknown space tag {self.space_tag!r}")
        if self.mad_variant not in MAD_VARIANTS:
            raise ConfigurationError(f"unknown MAD variant {self.mad_variant!r}")
        if self.aux_q is not None:
            q = np.array(self.aux_q, dtype=float)
            q.setflags(write=False)
            object.__setattr__(self, "aux_q", q)

    def check(self) -> None:
        """Raise ConfigurationError if fields required by the tag are missing."""
        if self.space_tag == "H3_two_stage" and self.target_policy is None:
            raise ConfigurationError("H3_two_stage needs a target (deceptive) policy")
        if self.space_tag == "H3_critic_targeted":
            if self.aux_q is None:
                raise ConfigurationError("H3_critic_targeted needs aux_q")
            if self.embedding is None:
                raise ConfigurationError("H3_critic_targeted needs an embedding to index aux_q")
        if self.space_tag == "H2_strategic_untargeted" and self.timing_rule is None:
            raise ConfigurationError("H2_strategic_untargeted needs a timing rule")
        if self.budget.is_discrete and self.embedding is None:
            raise ConfigurationError("discrete budgets need an embedding")


def project(x: np.ndarray, center: np.ndarray, budget: PerturbationBudget) -> np.ndarray:
    """Project onto the eps-ball about ``center``, then clip to the observation box."""
    delta = x - center
    eps = budget.epsilon
    if budget.norm_order == math.inf:
        delta = np.clip(delta, -eps, eps)
    else:
        n = float(np.sqrt(np.sum(delta * delta)))
        if n > eps:
            delta = delta * (eps / n) if n > 0 else delta
    return np.clip(center + delta, OBS_LOW, OBS_HIGH)


def project_ball(x, center, epsilon: float, norm_order=2.0) -> np.ndarray:
    """Plain ball projection without the box clip."""
    x = np.asarray(x, dtype=float)
    center = np.asarray(center, dtype=float)
    delta = x - center
    if float(norm_order) == math.inf:
        return center + np.clip(delta, -epsilon, epsilon)
    n = float(np.sqrt(np.sum(delta * delta)))
    return center + (delta * (epsilon / n) if n > epsilon else delta)


def _obs_rng(seed: int, observation: np.ndarray) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF,
                                  zlib.crc32(np.ascontiguousarray(observation).tobytes())])


def sample_in_ball(rng: np.random.Generator, center: np.ndarray, budget: PerturbationBudget):
    d = center.size
    eps = budget.epsilon
    if budget.norm_order == math.inf:
        delta = rng.uniform(-eps, eps, size=d)
    else:
        direction = rng.standard_normal(d)
        direction /= max(float(np.linalg.norm(direction)), 1e-300)
        delta = direction * eps * rng.random() ** (1.0 / d)
    return np.clip(center + delta, OBS_LOW, OBS_HIGH)


LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


def _pgd_run(loss_fn: LossFn, x0: np.ndarray, start: np.ndarray, budget: PerturbationBudget,
             opt: OptimizerConfig):
    """One descent from ``start``; returns (best_x, best_f, final_x, final_f)."""
    d = x0.size
    x = start.copy()
    best_x, best_f = None, math.inf
    f = math.inf
    for _ in range(opt.iterations):
        f, g = loss_fn(x)
        if f < best_f:
            best_f, best_x = f, x.copy()
        gnorm = float(np.sqrt(np.sum(g * g)))
        if gnorm == 0.0:
            log.debug("zero gradient, skipping remaining steps")
            return best_x, best_f, x, f
        if budget.norm_order == math.inf:
            step = opt.step_size * np.sign(g)
        else:
            step = opt.step_size * math.sqrt(d) * g / gnorm
        x = project(x - step, x0, budget)
    f = loss_fn(x)[0]
    if f < best_f:
        best_f, best_x = f, x.copy()
    return best_x, best_f, x, f


def pgd_minimize(loss_fn: LossFn, observation, budget: PerturbationBudget,
                 opt: OptimizerConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Minimise ``loss_fn`` over the eps-ball around ``observation``.

    l2 steps are ``eps' * sqrt(d) * g / ||g||_2``; l_inf steps are
    ``eps' * sign(g)``. Each step is followed by ball projection and the box
    clip. With best-iterate tracking the lowest-loss iterate (the clean point
    included) is returned, so more iterations never give a worse result.
    The first run starts at the clean point unless ``random_start`` is set;
    each of ``opt.restarts`` extra runs starts at a uniform point in the ball.
    """
    x0 = np.asarray(observation, dtype=float)
    if budget.epsilon == 0.0:
        return x0.copy()
    if rng is None:
        rng = _obs_rng(0, x0)
    clean_f = loss_fn(x0)[0]
    best_x, best_f = x0.copy(), clean_f
    final_x, final_f = None, math.inf
    first = sample_in_ball(rng, x0, budget) if opt.random_start else x0
    for k in range(1 + opt.restarts):
        start = first if k == 0 else sample_in_ball(rng, x0, budget)
        bx, bf, fx, ff = _pgd_run(loss_fn, x0, start, budget, opt)
        if bf < best_f:
            best_x, best_f = bx, bf
        if ff < final_f:
            final_x, final_f = fx, ff
    return best_x if opt.best_iterate_tracking else final_x


def _policy_loss(victim: FeedforwardPolicy, kind: str, target, sign: float = 1.0,
                 entropy_weight: float = 0.0) -> LossFn:
    def fn(x):
        b = input_gradient(victim, x, kind, target)
        loss, grad = sign * b.loss, sign * b.grad_wrt_observation
        if entropy_weight:
            e = input_gradient(victim, x, "entropy")
            loss += entropy_weight * e.loss
            grad = grad + entropy_weight * e.grad_wrt_observation
        return loss, grad
    return fn


def mad_loss(victim: FeedforwardPolicy, observation, variant: str = "deterministic") -> LossFn:
    """Negated divergence from the clean action distribution (minimised by PGD)."""
    clean = act_probs(victim, observation)
    if variant == "deterministic":
        return _policy_loss(victim, "neg_log_prob_of_action", int(np.argmax(clean)), -1.0)
    if variant == "kl":
        return _policy_loss(victim, "kl_from_target", clean, -1.0)
    if variant == "kl_reverse":
        return _policy_loss(victim, "kl_to_target", clean, -1.0)
    raise ValidationError(f"unknown MAD variant {variant!r}")


def mad_attack_step(victim: FeedforwardPolicy, observation, budget: PerturbationBudget,
                    opt: OptimizerConfig, variant: str = "deterministic",
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Untargeted attack: push the action distribution away from the clean one.

    ``kl`` ascends KL(pi(.|s) || pi(.|s_k)); ``deterministic`` ascends the
    cross-entropy to the clean argmax action; ``kl_reverse`` flips the KL.
    """
    return pgd_minimize(mad_loss(victim, observation, variant), observation, budget, opt, rng)


def strategic_should_attack(timer: StrategicTimer, victim: Policy, observation) -> bool:
    if timer.rule == "always":
        return True
    if timer.rule == "never":
        return False
    p = act_probs(victim, observation)
    return bool(p.max() - p.min() > timer.threshold)


def worst_q_action(aux_q: np.ndarray, state: int) -> int:
    return int(greedy_actions(np.asarray(aux_q)[state:state + 1], maximize=False)[0])


def critic_attack_step(victim: FeedforwardPolicy, aux_q: np.ndarray, observation,
                       budget: PerturbationBudget, opt: OptimizerConfig,
                       embedding: ObservationEmbedding,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """Targeted step toward the action with the lowest victim Q-value."""
    if aux_q is None:
        raise ConfigurationError("critic attack needs aux_q")
    a = worst_q_action(aux_q, embedding.decode_nearest(observation))
    return pgd_minimize(_policy_loss(victim, "neg_log_prob_of_action", a), observation, budget,
                        opt, rng)


def two_stage_objective(victim: Policy, deceptive: Policy, observation, candidate,
                        entropy_weight: float = 0.0) -> float:
    """KL(pi(.|candidate) || pi^-(.|observation)) + w * H(pi(.|candidate))."""
    p = act_probs(victim, candidate)
    q = act_probs(deceptive, observation)
    val = kl_divergence(p, q, floor=PROB_FLOOR)
    return val + entropy_weight * entropy(p) if entropy_weight else val


def two_stage_attack_step(victim: FeedforwardPolicy, deceptive: Policy, observation,
                          budget: PerturbationBudget, opt: OptimizerConfig,
                          rng: np.random.Generator | None = None) -> np.ndarray:
    """Stage two: PGD toward the deceptive policy's action distribution."""
    target = act_probs(deceptive, observation)
    fn = _policy_loss(victim, "kl_to_target", target, 1.0, opt.entropy_weight)
    return pgd_minimize(fn, observation, budget, opt, rng)


def random_attack_step(observation, budget: PerturbationBudget, seed: int) -> np.ndarray:
    x0 = np.asarray(observation, dtype=float)
    if budget.epsilon == 0.0:
        return x0.copy()
    return sample_in_ball(np.random.default_rng(seed), x0, budget)


# --- discrete mode: exhaustive best response over N(s) ---------------------------

def _argbest(values: np.ndarray, maximize: bool) -> int:
    v = values if maximize else -values
    return int(np.flatnonzero(v >= v.max() - TIE_TOL)[0])


def untargeted_scores(victim: Policy, embedding: ObservationEmbedding, state: int,
                      candidates, variant: str) -> np.ndarray:
    clean = act_probs(victim, embedding.encode(state))
    probs = [act_probs(victim, embedding.encode(n)) for n in candidates]
    if variant == "deterministic":
        a = int(np.argmax(clean))
        return np.array([-math.log(max(p[a], PROB_FLOOR)) for p in probs])
    if variant == "kl":
        return np.array([kl_divergence(clean, p, floor=PROB_FLOOR) for p in probs])
    return np.array([kl_divergence(p, clean, floor=PROB_FLOOR) for p in probs])


def discrete_choice(attacker: Attacker, victim: Policy, state: int) -> int:
    """Neighbour chosen by ``attacker`` at ``state``; ties go to the lowest index."""
    emb = attacker.embedding
    nbrs = np.array(attacker.budget.neighbors(state))
    tag = attacker.space_tag
    if tag == "identity":
        return state
    if tag == "random":
        rng = np.random.default_rng([attacker.seed, state])
        return int(nbrs[rng.integers(nbrs.size)])
    if tag == "H2_strategic_untargeted" and not strategic_should_attack(
            attacker.timing_rule, victim, emb.encode(state)):
        return state
    if tag in ("H1_full_untargeted", "H2_strategic_untargeted"):
        return int(nbrs[_argbest(untargeted_scores(victim, emb, state, nbrs,
                                                   attacker.mad_variant), True)])
    if tag == "H3_critic_targeted":
        a = worst_q_action(attacker.aux_q, state)
        probs = np.array([act_probs(victim, emb.encode(n))[a] for n in nbrs])
        return int(nbrs[_argbest(probs, True)])
    w = attacker.optimizer.entropy_weight
    objective = np.array([two_stage_objective(victim, attacker.target_policy, emb.encode(state),
                                              emb.encode(n), w) for n in nbrs])
    return int(nbrs[_argbest(objective, False)])


def perturb(attacker: Attacker, victim: Policy, observation) -> np.ndarray:
    """``h(observation)``; pure in (attacker, victim, observation)."""
    attacker.check()
    x = np.asarray(observation, dtype=float)
    if x.shape != (victim.input_dim,):
        raise ValidationError(f"observation has shape {x.shape}, victim expects ({victim.input_dim},)")
    tag = attacker.space_tag
    budget = attacker.budget
    if tag == "identity":
        return x.copy()
    if budget.is_discrete:
        state = attacker.embedding.decode_nearest(x)
        return attacker.embedding.encode(discrete_choice(attacker, victim, state))
    if budget.epsilon == 0.0:
        return x.copy()
    if tag == "random":
        return sample_in_ball(_obs_rng(attacker.seed, x), x, budget)
    opt = attacker.optimizer
    rng = _obs_rng(attacker.seed, x)
    if tag == "H3_two_stage":
        return two_stage_attack_step(victim, attacker.target_policy, x, budget, opt, rng)
    if tag == "H3_critic_targeted":
        return critic_attack_step(victim, attacker.aux_q, x, budget, opt, attacker.embedding, rng)
    if tag == "H2_strategic_untargeted" and not strategic_should_attack(
            attacker.timing_rule, victim, x):
        return x.copy()
    return mad_attack_step(victim, x, budget, opt, attacker.mad_variant, rng)


@dataclass(frozen=True, eq=False)
class AttackedPolicy:
    """``pi_h(a|s) = pi(a|h(s))``."""

    victim: Policy
    attacker: Attacker

    @property
    def input_dim(self) -> int:
        return self.victim.input_dim

    @property
    def num_actions(self) -> int:
        return self.victim.num_actions

    def act_probs(self, observation) -> np.ndarray:
        return act_probs(self.victim, perturb(self.attacker, self.victim, observation))


def induced_tabular_policy(victim: Policy, attacker: Attacker, embedding: ObservationEmbedding,
                           states=None) -> np.ndarray:
    """Materialise ``pi_h`` as a table ready for exact evaluation."""
    states = range(embedding.num_states) if states is None else states
    return np.array([act_probs(victim, perturb(attacker, victim, embedding.encode(s)))
                     for s in states])


def perturbation_size(attacker: Attacker, observation, perturbed) -> float:
    return norm(np.asarray(perturbed) - np.asarray(observation), attacker.budget.norm_order)
