import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from obsattack.envs import build_fig3_gridworld
from obsattack.errors import UnsupportedOperationError, ValidationError
from obsattack.policy import (FeedforwardPolicy, TabularPolicy, act_probs, entropy, input_gradient,
                              kl_divergence, load_policy, log_softmax, loss_and_logit_grad,
                              save_policy, softmax, tabulate)

LOSSES = [("kl_to_target", "dist"), ("kl_from_target", "dist"),
          ("neg_log_prob_of_action", 2), ("entropy", None)]


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def target_for(kind, rng, A):
    return rng.dirichlet(np.ones(A)) if kind == "dist" else kind


class TestSoftmax:
    def test_rows_sum_to_one_for_large_logits(self):
        p = softmax(np.array([[1000.0, 0.0, -1000.0], [3.0, 3.0, 3.0]]))
        assert np.allclose(p.sum(axis=1), 1.0)
        assert np.allclose(p[1], 1 / 3)

    def test_neg_inf_logits_give_exact_zero(self):
        p = softmax(np.array([0.0, -np.inf, 1.0]))
        assert p[1] == 0.0 and p.sum() == pytest.approx(1.0)

    def test_log_softmax_matches_log_of_softmax(self, rng):
        z = rng.normal(size=(4, 5))
        assert np.allclose(log_softmax(z), np.log(softmax(z)))

    def test_entropy_and_kl_closed_forms(self):
        assert entropy([0.5, 0.5]) == pytest.approx(np.log(2))
        assert kl_divergence([0.5, 0.5], [1.0, 0.0]) == np.inf
        assert kl_divergence([0.5, 0.5], [1.0, 0.0], floor=1e-12) == pytest.approx(
            0.5 * np.log(0.5) + 0.5 * np.log(0.5 / 1e-12))


class TestTabularPolicy:
    def test_act_probs_decodes_nearest_state(self, fig3):
        _, _, emb, victim, _, _ = fig3
        for s in range(emb.num_states):
            assert np.array_equal(act_probs(victim, emb.encode(s) + 0.05), victim.table()[s])

    def test_temperature_flattens(self, fig3):
        emb = fig3[2]
        pol = TabularPolicy(np.tile([2.0, 1.0, 0.0, -1.0], (emb.num_states, 1)), emb)
        ents = [entropy(pol.with_temperature(t).table()[0]) for t in (0.1, 0.5, 1.0, 5.0)]
        assert ents == sorted(ents)

    def test_rejects_all_neg_inf_row(self, fig3):
        emb = fig3[2]
        z = np.zeros((emb.num_states, 4))
        z[0] = -np.inf
        with pytest.raises(ValidationError, match="finite maximum"):
            TabularPolicy(z, emb)

    def test_not_differentiable(self, fig3):
        _, _, emb, victim, _, _ = fig3
        with pytest.raises(UnsupportedOperationError):
            input_gradient(victim, emb.encode(0), "entropy")


class TestFeedforwardPolicy:
    def test_single_linear_layer_closed_form(self):
        W = np.array([[1.0, -1.0, 0.0], [2.0, 0.0, 1.0]])
        b = np.array([0.1, 0.2, 0.3])
        net = FeedforwardPolicy((W,), (b,), temperature=2.0)
        x = np.array([0.3, 0.7])
        z = (x @ W + b) / 2.0
        expect = np.exp(z) / np.exp(z).sum()
        assert np.allclose(net.act_probs(x), expect, atol=1e-12)

    def test_batch_matches_single(self, rng):
        net = FeedforwardPolicy.init([2, 8, 4], seed=0)
        X = rng.random((6, 2))
        assert np.allclose(net.batch_probs(X), [net.act_probs(x) for x in X])

    def test_rejects_wrong_observation_shape(self):
        net = FeedforwardPolicy.init([2, 4], seed=0)
        with pytest.raises(ValidationError, match="shape"):
            act_probs(net, np.zeros(3))

    def test_rejects_mismatched_layers(self):
        with pytest.raises(ValidationError, match="fan-in"):
            FeedforwardPolicy((np.zeros((2, 3)), np.zeros((4, 2))), (np.zeros(3), np.zeros(2)))

    def test_init_is_seeded(self):
        a = FeedforwardPolicy.init([2, 5, 4], seed=3)
        b = FeedforwardPolicy.init([2, 5, 4], seed=3)
        assert all(np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


class TestGradients:
    @pytest.mark.parametrize("kind, target", LOSSES)
    def test_logit_gradient_matches_finite_differences(self, kind, target, rng):
        for _ in range(5):
            z = rng.normal(size=4) * 2
            t = target_for(target, rng, 4)
            _, g = loss_and_logit_grad(z, kind, t)
            num = numeric_grad(lambda v: loss_and_logit_grad(v, kind, t)[0], z)
            assert np.allclose(g, num, atol=1e-7)

    @pytest.mark.parametrize("kind, target", LOSSES)
    def test_input_gradient_matches_finite_differences(self, kind, target, rng):
        net = FeedforwardPolicy.init([2, 16, 16, 4], seed=1, scale=2.0)
        for _ in range(5):
            x = rng.random(2)
            t = target_for(target, rng, 4)
            b = input_gradient(net, x, kind, t)
            num = numeric_grad(lambda v: input_gradient(net, v, kind, t).loss, x)
            assert np.allclose(b.grad_wrt_observation, num, rtol=1e-5, atol=1e-8)

    def test_parameter_gradient_matches_finite_differences(self, rng):
        net = FeedforwardPolicy.init([2, 5, 3], seed=2)
        x = rng.random(2)
        b = input_gradient(net, x, "neg_log_prob_of_action", 1)
        params = net.parameters()
        for i, p in enumerate(params):
            def f(flat, i=i, p=p):
                ps = list(params)
                ps[i] = flat.reshape(p.shape)
                return input_gradient(net.with_parameters(ps), x, "neg_log_prob_of_action", 1).loss
            num = numeric_grad(f, p.ravel().copy()).reshape(p.shape)
            assert np.allclose(b.grad_wrt_parameters[i], num, atol=1e-7)

    def test_unknown_loss_kind(self):
        with pytest.raises(ValidationError, match="unknown loss"):
            loss_and_logit_grad(np.zeros(3), "hinge")


class TestCheckpoints:
    def test_feedforward_round_trip(self, tmp_path):
        net = FeedforwardPolicy.init([2, 4, 4], seed=5, temperature=0.7)
        save_policy(net, tmp_path / "net.json")
        back = load_policy(tmp_path / "net.json")
        assert back.temperature == 0.7
        assert all(np.array_equal(a, b) for a, b in zip(net.parameters(), back.parameters()))

    def test_tabular_round_trip_keeps_neg_inf(self, tmp_path, fig3):
        _, _, emb, victim, _, _ = fig3
        save_policy(victim, tmp_path / "tab.json")
        back = load_policy(tmp_path / "tab.json")
        assert np.array_equal(back.logits, victim.logits)
        assert np.array_equal(tabulate(back, back.embedding), victim.table())

    def test_rejects_foreign_format(self, tmp_path):
        (tmp_path / "x.json").write_text('{"format": "other"}')
        with pytest.raises(ValidationError, match="format"):
            load_policy(tmp_path / "x.json")

    def test_rejects_truncated_parameters(self, tmp_path):
        net = FeedforwardPolicy.init([2, 3], seed=0)
        save_policy(net, tmp_path / "n.json")
        d = json.loads((tmp_path / "n.json").read_text())
        d["parameters"] = d["parameters"][:-1]
        (tmp_path / "n.json").write_text(json.dumps(d))
        with pytest.raises(ValidationError):
            load_policy(tmp_path / "n.json")


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6))
def test_kl_to_self_is_zero(z):
    p = softmax(np.array(z))
    assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-12)
