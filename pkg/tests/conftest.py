from pathlib import Path

import numpy as np
import pytest

from obsattack.envs import (build_fig3_gridworld, build_fig4_gridworld,
                            discrete_budget_from_radius)
from obsattack.harness import build_deceptive, build_env, build_victim, load_config
from obsattack.mdp import MdpSpec, evaluate_policy, solve_optimal
from obsattack.policy import TabularPolicy, tabulate

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def random_mdp(rng, S=5, A=3, gamma=0.9, n_terminal=1):
    """Dense random MDP; the last ``n_terminal`` states are absorbing."""
    P = rng.random((S, A, S)) ** 3
    P /= P.sum(axis=2, keepdims=True)
    R = rng.normal(size=(S, A))
    term = np.zeros(S, dtype=bool)
    for s in range(S - n_terminal, S):
        term[s] = True
        P[s] = 0.0
        P[s, :, s] = 1.0
        R[s] = 0.0
    mu = rng.random(S)
    mu[term] = 0.0
    mu /= mu.sum()
    return MdpSpec(S, A, P, R, gamma, mu, term)


def random_policy(rng, S, A, sharpness=1.0):
    z = rng.normal(size=(S, A)) * sharpness
    p = np.exp(z - z.max(axis=1, keepdims=True))
    return p / p.sum(axis=1, keepdims=True)


def value_iteration(P, R, gamma, tol=1e-13):
    """Reference optimal values, kept independent of the package solver."""
    V = np.zeros(P.shape[0])
    while True:
        Q = R + gamma * np.einsum("sat,t->sa", P, V)
        V2 = Q.max(axis=1)
        if np.max(np.abs(V2 - V)) < tol:
            return V2, Q
        V = V2


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def fig3():
    mdp, layout, emb = build_fig3_gridworld()
    victim = TabularPolicy.from_probs(solve_optimal(mdp).policy, emb)
    budget = discrete_budget_from_radius(emb, 0.25, np.inf)
    green = layout.state_index()[layout.landmarks["green"]]
    return mdp, layout, emb, victim, budget, green


@pytest.fixture(scope="session", params=["right_down", "up_down", "left_down"])
def fig4(request):
    mdp, layout, emb = build_fig4_gridworld(request.param)
    victim = TabularPolicy.from_probs(solve_optimal(mdp).policy, emb)
    budget = discrete_budget_from_radius(emb, 0.25, np.inf)
    green = layout.state_index()[layout.landmarks["green"]]
    return request.param, mdp, layout, emb, victim, budget, green


@pytest.fixture(scope="session")
def fig3_net():
    """Network victim, deceptive policy and victim Q table from the shipped config."""
    cfg = load_config(CONFIG_DIR / "fig3.json")
    mdp, layout, emb = build_env(cfg.env, cfg.embedding_kind)
    victim = build_victim(cfg.victim, mdp, emb)
    deceptive = build_deceptive(cfg.deceptive, mdp, emb)
    q = evaluate_policy(mdp, tabulate(victim, emb)).q_values
    green = layout.state_index()[layout.landmarks["green"]]
    return cfg, mdp, layout, emb, victim, deceptive, q, green


# acceptance criteria report: one line per criterion at the end of the run
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record(number: int, title: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE[number] = (title, bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
                                    + (f"  [{detail}]" if detail else ""))
