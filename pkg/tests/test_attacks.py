import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from obsattack.attacks import (SPACE_TAGS, AttackedPolicy, Attacker, OptimizerConfig,
                               StrategicTimer, critic_attack_step, discrete_choice,
                               induced_tabular_policy, pgd_minimize, perturb, perturbation_size,
                               project, project_ball, random_attack_step, sample_in_ball,
                               strategic_should_attack, two_stage_attack_step,
                               two_stage_objective, worst_q_action)
from obsattack.envs import RIGHT, UP, PerturbationBudget, discrete_budget_from_radius
from obsattack.errors import ConfigurationError, ValidationError
from obsattack.mdp import evaluate_policy
from obsattack.policy import TabularPolicy, act_probs, tabulate


def linear_loss(w):
    w = np.asarray(w, dtype=float)
    return lambda x: (float(w @ x), w.copy())


def attacker_for(tag, fig3_net, eps, norm=math.inf, **opt):
    cfg, _, _, emb, _, deceptive, q, _ = fig3_net
    budget = PerturbationBudget(eps, norm)
    return Attacker(tag, budget, OptimizerConfig(step_size=max(eps, 1e-3) / 4, **opt),
                    target_policy=deceptive, timing_rule=StrategicTimer(threshold=0.5),
                    aux_q=q, embedding=emb, mad_variant="kl", seed=0)


class TestOptimizerConfig:
    def test_fgsm_forces_one_iteration(self):
        assert OptimizerConfig("fgsm", iterations=10).iterations == 1

    @pytest.mark.parametrize("kw", [dict(method="adam"), dict(iterations=0), dict(step_size=0.0),
                                    dict(entropy_weight=-1.0), dict(restarts=-1)])
    def test_rejects_bad_fields(self, kw):
        with pytest.raises(ValidationError):
            OptimizerConfig(**kw)

    def test_timer_threshold_range(self):
        with pytest.raises(ValidationError):
            StrategicTimer(threshold=1.5)


class TestProjection:
    def test_linf_clips_each_coordinate(self):
        out = project(np.array([0.9, 0.1]), np.array([0.5, 0.5]), PerturbationBudget(0.1))
        assert np.allclose(out, [0.6, 0.4])

    def test_l2_rescales_onto_sphere(self):
        out = project_ball([3.0, 4.0], [0.0, 0.0], 1.0, 2)
        assert np.allclose(out, [0.6, 0.8])

    def test_box_clip(self):
        out = project(np.array([-0.5, 1.5]), np.array([0.05, 0.95]), PerturbationBudget(1.0))
        assert out.tolist() == [0.0, 1.0]

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 10_000), eps=st.floats(0.0, 0.5), order=st.sampled_from([2.0, math.inf]))
    def test_projection_and_sampling_respect_budget(self, seed, eps, order):
        rng = np.random.default_rng(seed)
        c = rng.random(3)
        b = PerturbationBudget(eps, order)
        for x in (project(rng.normal(size=3) * 3, c, b), sample_in_ball(rng, c, b)):
            assert np.linalg.norm(x - c, order) <= eps + 1e-12
            assert np.all((0 <= x) & (x <= 1))


class TestPgd:
    def test_zero_budget_returns_clean_point(self):
        x0 = np.array([0.3, 0.4])
        out = pgd_minimize(linear_loss([1.0, 1.0]), x0, PerturbationBudget(0.0), OptimizerConfig())
        assert np.array_equal(out, x0)

    def test_fgsm_linf_is_signed_step(self):
        x0 = np.array([0.5, 0.5, 0.5])
        opt = OptimizerConfig("fgsm", step_size=0.1)
        out = pgd_minimize(linear_loss([2.0, -0.5, 1.0]), x0, PerturbationBudget(0.1), opt)
        assert np.allclose(out, [0.4, 0.6, 0.4])

    def test_l2_step_follows_normalised_gradient(self):
        x0 = np.array([0.5, 0.5])
        opt = OptimizerConfig("fgsm", step_size=0.1)
        out = pgd_minimize(linear_loss([3.0, 4.0]), x0, PerturbationBudget(0.1, 2), opt)
        # the sqrt(d)-scaled step overshoots and is projected back onto the sphere
        assert np.allclose(out, x0 - 0.1 * np.array([0.6, 0.8]))

    def test_zero_gradient_keeps_clean_point(self):
        x0 = np.array([0.2, 0.7])
        out = pgd_minimize(lambda x: (1.0, np.zeros(2)), x0, PerturbationBudget(0.2),
                           OptimizerConfig(iterations=10))
        assert np.array_equal(out, x0)

    def test_more_iterations_never_worse(self, fig3_net, rng):
        victim, deceptive = fig3_net[4], fig3_net[5]
        b = PerturbationBudget(0.2)
        for _ in range(10):
            x = rng.random(2)
            f = lambda k: two_stage_objective(victim, deceptive, x, two_stage_attack_step(
                victim, deceptive, x, b, OptimizerConfig(iterations=k, step_size=0.05)))
            vals = [f(k) for k in (1, 3, 10)]
            assert vals[0] >= vals[1] - 1e-12 and vals[1] >= vals[2] - 1e-12

    def test_pgd_objective_no_worse_than_fgsm(self, fig3_net, rng):
        victim, deceptive = fig3_net[4], fig3_net[5]
        for _ in range(20):
            x = rng.random(2)
            eps = rng.uniform(0.05, 0.3)
            b = PerturbationBudget(eps)
            fg = two_stage_attack_step(victim, deceptive, x, b, OptimizerConfig("fgsm", step_size=eps / 4))
            pg = two_stage_attack_step(victim, deceptive, x, b,
                                       OptimizerConfig("pgd", 10, eps / 4, restarts=4))
            assert (two_stage_objective(victim, deceptive, x, pg)
                    <= two_stage_objective(victim, deceptive, x, fg) + 1e-12)

    def test_restarts_are_deterministic(self, fig3_net):
        victim, deceptive = fig3_net[4], fig3_net[5]
        a = attacker_for("H3_two_stage", fig3_net, 0.2, restarts=3)
        x = fig3_net[3].encode(3)
        assert np.array_equal(perturb(a, victim, x), perturb(a, victim, x))


class TestAttackSteps:
    def test_worst_q_action_ties_lowest(self):
        q = np.array([[1.0, 0.0, 0.0, 2.0]])
        assert worst_q_action(q, 0) == 1

    def test_critic_raises_probability_of_worst_action(self, fig3_net):
        _, _, _, emb, victim, _, q, green = fig3_net
        x = emb.encode(green)
        a = worst_q_action(q, green)
        out = critic_attack_step(victim, q, x, PerturbationBudget(0.3), OptimizerConfig(step_size=0.075),
                                 emb)
        assert act_probs(victim, out)[a] >= act_probs(victim, x)[a]

    def test_two_stage_steers_into_the_negative_terminal(self, fig3_net):
        # the cell between the terminals: the victim goes up, the attack sends it right
        _, _, layout, emb, victim, _, _, _ = fig3_net
        x = emb.encode(layout.state_index()[(1, 2)])
        att = attacker_for("H3_two_stage", fig3_net, 0.3, iterations=10, restarts=4)
        assert int(np.argmax(act_probs(victim, x))) == UP
        assert int(np.argmax(act_probs(victim, perturb(att, victim, x)))) == RIGHT

    def test_random_attack_seeded(self):
        x = np.array([0.5, 0.5])
        b = PerturbationBudget(0.1)
        assert np.array_equal(random_attack_step(x, b, 3), random_attack_step(x, b, 3))
        assert np.linalg.norm(random_attack_step(x, b, 3) - x, np.inf) <= 0.1

    def test_timer_rules(self, fig3_net):
        victim, x = fig3_net[4], fig3_net[3].encode(0)
        assert strategic_should_attack(StrategicTimer("always"), victim, x)
        assert not strategic_should_attack(StrategicTimer("never"), victim, x)
        p = act_probs(victim, x)
        gap = p.max() - p.min()
        assert strategic_should_attack(StrategicTimer(threshold=max(gap - 0.01, 0)), victim, x)
        assert not strategic_should_attack(StrategicTimer(threshold=min(gap + 0.01, 1)), victim, x)


class TestPerturb:
    @pytest.mark.parametrize("tag", [t for t in SPACE_TAGS])
    @pytest.mark.parametrize("norm", [2.0, math.inf])
    def test_every_attack_stays_in_budget(self, tag, norm, fig3_net):
        emb, victim = fig3_net[3], fig3_net[4]
        att = attacker_for(tag, fig3_net, 0.15, norm)
        for s in range(emb.num_states):
            x = emb.encode(s)
            assert perturbation_size(att, x, perturb(att, victim, x)) <= 0.15 + 1e-12

    def test_identity_and_zero_budget(self, fig3_net):
        emb, victim = fig3_net[3], fig3_net[4]
        x = emb.encode(2)
        assert np.array_equal(perturb(attacker_for("identity", fig3_net, 0.3), victim, x), x)
        assert np.array_equal(perturb(attacker_for("H3_two_stage", fig3_net, 0.0), victim, x), x)

    def test_rejects_wrong_shape(self, fig3_net):
        with pytest.raises(ValidationError, match="shape"):
            perturb(attacker_for("random", fig3_net, 0.1), fig3_net[4], np.zeros(3))

    @pytest.mark.parametrize("tag, missing", [("H3_two_stage", "target_policy"),
                                              ("H3_critic_targeted", "aux_q"),
                                              ("H2_strategic_untargeted", "timing_rule")])
    def test_missing_fields_raise(self, tag, missing, fig3_net):
        att = Attacker(tag, PerturbationBudget(0.1), embedding=fig3_net[3])
        with pytest.raises(ConfigurationError):
            perturb(att, fig3_net[4], fig3_net[3].encode(0))

    def test_unknown_tag(self):
        with pytest.raises(ConfigurationError):
            Attacker("H4", PerturbationBudget(0.1))

    def test_attacked_policy_matches_induced_table(self, fig3_net):
        emb, victim = fig3_net[3], fig3_net[4]
        att = attacker_for("H1_full_untargeted", fig3_net, 0.2)
        table = induced_tabular_policy(victim, att, emb)
        wrapped = AttackedPolicy(victim, att)
        assert np.allclose(tabulate(wrapped, emb), table)


class TestDiscreteMode:
    def test_choices_stay_in_neighbourhood(self, fig3):
        mdp, _, emb, victim, budget, _ = fig3
        deceptive = TabularPolicy.from_probs(np.full((mdp.num_states, 4), 0.25), emb)
        for tag in SPACE_TAGS:
            att = Attacker(tag, budget, target_policy=deceptive, timing_rule=StrategicTimer(),
                           aux_q=evaluate_policy(mdp, victim.table()).q_values, embedding=emb)
            for s in range(emb.num_states):
                assert discrete_choice(att, victim, s) in budget.neighbors(s)

    def test_two_stage_picks_objective_minimiser(self, fig3):
        mdp, _, emb, victim, budget, _ = fig3
        rng = np.random.default_rng(0)
        deceptive = TabularPolicy.from_probs(rng.dirichlet(np.ones(4), mdp.num_states), emb)
        att = Attacker("H3_two_stage", budget, target_policy=deceptive, embedding=emb)
        for s in range(emb.num_states):
            objs = {n: two_stage_objective(victim, deceptive, emb.encode(s), emb.encode(n))
                    for n in budget.neighbors(s)}
            assert objs[discrete_choice(att, victim, s)] == pytest.approx(min(objs.values()))

    def test_discrete_perturb_returns_embedded_point(self, fig3):
        _, _, emb, victim, budget, _ = fig3
        att = Attacker("H1_full_untargeted", budget, embedding=emb)
        out = perturb(att, victim, emb.encode(4))
        assert any(np.array_equal(out, emb.encode(n)) for n in budget.neighbors(4))

    def test_zero_radius_is_identity(self, fig3):
        _, _, emb, victim, _, _ = fig3
        att = Attacker("H1_full_untargeted", discrete_budget_from_radius(emb, 0.0), embedding=emb)
        assert np.array_equal(induced_tabular_policy(victim, att, emb), victim.table())
