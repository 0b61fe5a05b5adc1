import json

import numpy as np
import pytest

from metalab import ValidationError
from metalab.harness.oracles import (finite_diff_gradient, matrix_power_return,
                                     truncated_values, truncated_visitation)
from metalab.policy import softmax_policy
from metalab.tabular_mdp import (TabularMdp, dumps_mdp, expected_total_reward,
                                 expected_total_reward_from_values, init_visitation,
                                 init_visitation_all, loads_mdp, value_functions,
                                 visitation, visitation_bundle)

from conftest import random_mdp, random_policy


def test_values_match_truncated_series(rng):
    for _ in range(10):
        mdp = random_mdp(rng, gamma=0.8)
        pi = random_policy(rng, mdp.n_states, mdp.n_actions)
        vb = value_functions(mdp, pi)
        # gamma^400 ~ 1e-39: the truncated series is exact to machine precision
        np.testing.assert_allclose(vb.v, truncated_values(mdp, pi, 400), atol=1e-13)
        q_ref = (1 - mdp.discount) * mdp.reward + mdp.discount * mdp.transition @ vb.v
        np.testing.assert_allclose(vb.q, q_ref, atol=1e-14)
        np.testing.assert_allclose(np.sum(pi * vb.adv, axis=1), 0.0, atol=1e-14)


def test_visitation_matches_truncated_series(rng):
    for _ in range(10):
        mdp = random_mdp(rng, gamma=0.8)
        pi = random_policy(rng, mdp.n_states, mdp.n_actions)
        nu, sigma = visitation(mdp, pi)
        np.testing.assert_allclose(nu, truncated_visitation(mdp, pi, 400), atol=1e-13)
        np.testing.assert_allclose(sigma.sum(), 1.0, atol=1e-13)
        np.testing.assert_allclose(sigma.sum(axis=1), nu, atol=1e-15)


def test_restarted_visitation(rng):
    mdp = random_mdp(rng, gamma=0.7)
    pi = random_policy(rng, mdp.n_states, mdp.n_actions)
    allv = init_visitation_all(mdp, pi)
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            start = mdp.transition[s, a]
            ref = truncated_visitation(mdp, pi, 300, start)[:, None] * pi
            np.testing.assert_allclose(init_visitation(mdp, pi, s, a), ref, atol=1e-13)
            np.testing.assert_allclose(allv[s, a], ref, atol=1e-13)
    assert visitation_bundle(mdp, pi).sigma_init.shape == (5, 3, 5, 3)


def test_return_three_ways(rng):
    for _ in range(10):
        mdp = random_mdp(rng, gamma=0.85)
        pi = random_policy(rng, mdp.n_states, mdp.n_actions)
        j = expected_total_reward(mdp, pi)
        assert j == pytest.approx(expected_total_reward_from_values(mdp, pi), abs=1e-13)
        assert j == pytest.approx(matrix_power_return(mdp, pi, 400), abs=1e-12)


def test_performance_difference(rng):
    for _ in range(50):
        mdp = random_mdp(rng, gamma=rng.uniform(0.5, 0.95))
        pi = random_policy(rng, mdp.n_states, mdp.n_actions)
        pt = random_policy(rng, mdp.n_states, mdp.n_actions)
        _, sigma_t = visitation(mdp, pt)
        adv = value_functions(mdp, pi).adv
        kappa = 1 / (1 - mdp.discount)
        gap = expected_total_reward(mdp, pt) - expected_total_reward(mdp, pi)
        assert abs(gap - kappa * np.sum(sigma_t * adv)) <= 1e-10


def test_policy_gradient_theorem(rng):
    # d J / d logits = kappa * sigma * A for the tabular softmax policy
    mdp = random_mdp(rng, gamma=0.9)
    logits = rng.normal(size=(mdp.n_states, mdp.n_actions))
    pi = softmax_policy(logits)
    _, sigma = visitation(mdp, pi)
    analytic = sigma * value_functions(mdp, pi).adv / (1 - mdp.discount)
    fd = finite_diff_gradient(lambda z: expected_total_reward(mdp, softmax_policy(z)), logits)
    np.testing.assert_allclose(analytic, fd, atol=1e-8)


def test_tiny_discount_is_one_step(rng):
    mdp = random_mdp(rng).with_discount(1e-12)
    pi = random_policy(rng, mdp.n_states, mdp.n_actions)
    np.testing.assert_allclose(value_functions(mdp, pi).v, np.sum(pi * mdp.reward, axis=1), atol=1e-11)
    nu, _ = visitation(mdp, pi)
    np.testing.assert_allclose(nu, mdp.init_dist, atol=1e-11)


def test_constant_reward(rng):
    mdp = random_mdp(rng)
    mdp = TabularMdp(mdp.transition, np.full((5, 3), 0.3), 0.95, mdp.init_dist)
    vb = value_functions(mdp, random_policy(rng, 5, 3))
    np.testing.assert_allclose(vb.v, 0.3, atol=1e-13)
    np.testing.assert_allclose(vb.adv, 0.0, atol=1e-13)


def test_two_state_closed_form():
    # deterministic swap between two states; reward 1 in state 0 only
    p = np.zeros((2, 1, 2))
    p[0, 0, 1] = p[1, 0, 0] = 1.0
    mdp = TabularMdp(p, np.array([[1.0], [0.0]]), 0.5, np.array([0.5, 0.5]))
    v = value_functions(mdp, np.ones((2, 1))).v
    # V0 = (1-g)(1 + g^2 + g^4 ...) = (1-g)/(1-g^2) = 1/(1+g)
    np.testing.assert_allclose(v, [1 / 1.5, 0.5 / 1.5], atol=1e-15)


def test_json_round_trip(rng):
    mdp = random_mdp(rng)
    text = dumps_mdp(mdp)
    back = loads_mdp(text)
    np.testing.assert_array_equal(back.transition, mdp.transition)
    np.testing.assert_array_equal(back.reward, mdp.reward)
    assert back.discount == mdp.discount
    doc = json.loads(text)
    # row-major nesting: transition[s][a][s']
    assert doc["transition"][1][2][3] == mdp.transition[1, 2, 3]
    doc["extra"] = 1
    with pytest.raises(ValidationError):
        TabularMdp.from_dict(doc)


@pytest.mark.parametrize("change", [
    lambda d: d.update(discount=1.0),
    lambda d: d.update(discount=0.0),
    lambda d: d["transition"][0][0].__setitem__(0, d["transition"][0][0][0] + 1e-9),
    lambda d: d.update(init_dist=[1.0] + [0.0] * 4),
    lambda d: d["reward"][0].__setitem__(0, 2.0),
    lambda d: d.update(n_states=4),
])
def test_validation_errors(rng, change):
    doc = random_mdp(rng).to_dict()
    change(doc)
    with pytest.raises(ValidationError):
        TabularMdp.from_dict(doc)


def test_bad_policy(rng):
    mdp = random_mdp(rng)
    with pytest.raises(ValidationError):
        value_functions(mdp, np.ones((5, 3)))
    with pytest.raises(ValidationError):
        value_functions(mdp, np.ones((4, 3)) / 3)
