import numpy as np
import pytest

from metalab import DegenerateMeasureError, ValidationError
from metalab.harness.generators import RlFamilySpec, generate_mdp_family
from metalab.harness.oracles import projected_gradient_fit
from metalab.meta_rl import MetaRlTaskSet, meta_gradient_direct, meta_objective, solve_all
from metalab.neural_net import init_symmetric
from metalab.policy import FeatureMap
from metalab.rl_audit import (THETA_STAR_LABEL, audit_corollary_5_2, audit_from_comparator,
                              audit_theorem_3_4, best_linear_fit, concentrability, f_omega,
                              f_omega_from_measures, meta_visitations, multistart_ascent,
                              multistart_theta_star, ratio_norm)
from metalab.tabular_mdp import TabularMdp


def family(seed, **kw):
    return generate_mdp_family(RlFamilySpec(**kw), seed)


def test_meta_visitation_marginals(rng):
    tasks = family(0)
    theta = rng.normal(size=tasks.dim)
    mv = meta_visitations(tasks, theta)
    solves, _, _ = solve_all(tasks, theta)
    np.testing.assert_allclose(mv.marginal.sum(axis=(1, 2)), 1.0, atol=1e-13)
    np.testing.assert_allclose(mv.joint.sum(axis=(3, 4)), mv.marginal, atol=1e-15)
    for i, ts in enumerate(solves):
        # the (s, a) marginal of the joint is the adapted policy's visitation
        np.testing.assert_allclose(mv.joint[i].sum(axis=(0, 1)), ts.sigma_adapted, atol=1e-14)
    np.testing.assert_allclose(mv.mixed, mv.marginal.mean(axis=0))


def test_single_task_mixed_equals_marginal(rng):
    tasks = family(1, n_tasks=1)
    mv = meta_visitations(tasks, rng.normal(size=tasks.dim))
    np.testing.assert_array_equal(mv.mixed, mv.marginal[0])


def single_state_tasks(rng, n_tasks=1, A=3, eta=0.4, tau=0.8):
    tasks = [TabularMdp(np.ones((1, A, 1)), rng.uniform(-1, 1, size=(1, A)), 0.9, np.ones(1))
             for _ in range(n_tasks)]
    return MetaRlTaskSet(tasks, FeatureMap(np.eye(A), 1, A), tau, eta)


def test_single_state_meta_visitation_is_main_effect(rng):
    tasks = single_state_tasks(rng)
    theta = rng.normal(size=3)
    solves, _, _ = solve_all(tasks, theta)
    np.testing.assert_allclose(meta_visitations(tasks, theta).marginal[0], solves[0].pi, atol=1e-15)


def test_single_state_f_is_policy_ratio(rng):
    # with one state the restart term vanishes and f = tau * pi*_adapted / pi_adapted
    tasks = single_state_tasks(rng)
    omega, star = rng.normal(size=3), rng.normal(size=3)
    table = f_omega(tasks, omega, star)
    pi_o = solve_all(tasks, omega)[0][0].adapted
    pi_s = solve_all(tasks, star)[0][0].adapted
    np.testing.assert_allclose(table.values, tasks.temperature * pi_s / pi_o, rtol=1e-10)


def test_concentrability_at_least_one(rng):
    for seed in range(5):
        tasks = family(seed, gamma_spread=0.05)
        assert concentrability(tasks, rng.normal(size=tasks.dim)) >= 1.0 - 1e-12
    p = np.array([0.2, 0.8])
    assert ratio_norm(p, p) == pytest.approx(1.0)


def test_numerator_integrates_to_optimality_gap(rng):
    tasks = family(2, gamma_spread=0.05)
    omega, star = rng.normal(size=tasks.dim), rng.normal(size=tasks.dim)
    table = f_omega(tasks, omega, star)
    gap = meta_objective(tasks, star) - meta_objective(tasks, omega)
    assert np.sum(table.mixed * table.numerator) / tasks.n_tasks == pytest.approx(gap, abs=1e-12)
    # the denominator integrates the features to the meta-gradient
    grad = (table.mixed * table.denominator).ravel() @ tasks.features.table / tasks.n_tasks
    np.testing.assert_allclose(grad, meta_gradient_direct(tasks, omega), atol=1e-13)


def test_numerator_with_own_measures_vanishes(rng):
    tasks = family(3)
    omega = rng.normal(size=tasks.dim)
    own = [ts.sigma_adapted for ts in solve_all(tasks, omega)[0]]
    table = f_omega_from_measures(tasks, omega, own)
    assert abs(np.sum(table.mixed * table.numerator)) <= 1e-13


def test_best_linear_fit_matches_projected_gradient(rng):
    for radius in (0.05, 0.5, 50.0):
        F = rng.normal(size=(30, 6))
        y = rng.normal(size=30)
        mu = rng.dirichlet(np.ones(30))
        c = rng.normal(size=6) * 0.1
        fit = best_linear_fit(y, F, mu, radius, c)
        v_ref, res_ref = projected_gradient_fit(y, F, mu, radius, c)
        assert np.linalg.norm(fit.v - c) <= radius * (1 + 1e-9)
        assert fit.residual == pytest.approx(res_ref, abs=1e-8)
        assert fit.residual <= res_ref + 1e-10


def test_best_linear_fit_rank_deficient(rng):
    F = rng.normal(size=(10, 2)) @ rng.normal(size=(2, 5))
    y = F @ rng.normal(size=5) * 0.01
    fit = best_linear_fit(y, F, np.full(10, 0.1), 10.0)
    assert fit.residual <= 1e-12 and fit.multiplier == 0.0
    with pytest.raises(ValidationError):
        best_linear_fit(y, F, np.full(10, 0.1), 0.0)


def test_fit_residual_monotone_in_radius(rng):
    F, y, mu = rng.normal(size=(20, 4)), rng.normal(size=20), np.full(20, 0.05)
    res = [best_linear_fit(y, F, mu, r).residual for r in (0.01, 0.1, 0.3, 1.0, 3.0, 10.0)]
    assert np.all(np.diff(res) <= 1e-12)


def test_audit_at_comparator_is_tight(rng):
    tasks = family(4)
    omega = rng.normal(size=tasks.dim)
    rep = audit_theorem_3_4(tasks, omega, omega, 1.0)
    assert rep.lhs == 0.0 and rep.holds
    assert rep.theta_star_label == THETA_STAR_LABEL


def test_constant_rewards_fully_degenerate(rng):
    base = family(5)
    tasks = base.replace(tasks=[TabularMdp(t.transition, np.full(t.reward.shape, -0.2), t.discount,
                                           t.init_dist) for t in base.tasks])
    rep = audit_theorem_3_4(tasks, rng.normal(size=tasks.dim), rng.normal(size=tasks.dim))
    assert rep.fully_degenerate and len(rep.degenerate_points) == 18
    assert abs(rep.lhs) <= 1e-13 and rep.holds


@pytest.mark.parametrize("seed", range(3))
def test_audit_holds_at_trained_point(seed):
    from metalab.meta_rl import run_meta_rl
    tasks = family(seed, gamma_spread=0.05)
    omega = run_meta_rl(tasks, step_sizes=0.5, iterations=100).theta
    star, val = multistart_theta_star(tasks, n_starts=4, iterations=60, seed=seed)
    assert val >= meta_objective(tasks, omega) - 1e-12
    rep = audit_theorem_3_4(tasks, omega, star, 1.0)
    assert rep.holds and rep.c0 >= 1.0
    assert rep.rhs == pytest.approx(rep.term_stationarity + rep.constant * rep.approx_error
                                    + rep.degenerate_term)
    assert rep.constant >= rep.constant_nominal


def test_multistart_ascent_quadratic():
    target = np.array([1.0, -2.0])
    oracle = lambda th: (-np.sum((th - target) ** 2), -2 * (th - target))
    best, val = multistart_ascent(oracle, lambda th: oracle(th)[0], [np.zeros(2), np.ones(2)], 50, 1.0)
    np.testing.assert_allclose(best, target, atol=1e-8)


def test_neural_audit_matches_linearized_audit():
    """At eta = 0 the network audit equals the linear audit in the features phi_omega."""
    tasks = family(6, width=32, eta=0.0)
    feats = tasks.features
    net = init_symmetric(feats.width, feats.input_dim, 6)
    rng = np.random.default_rng(6)
    omega = net.with_weights(net.w_init + 0.05 * rng.normal(size=net.w.shape))
    star = net.with_weights(net.w_init + 0.05 * rng.normal(size=net.w.shape))
    rep = audit_corollary_5_2(tasks, omega, star, 1.0)
    _, phi_omega = feats.evaluate(omega.w)
    lin = tasks.replace(features=FeatureMap(phi_omega, tasks.n_states, tasks.n_actions))
    energy_star, _ = feats.evaluate(star.w)
    ref = audit_from_comparator(lin, omega.w.ravel(), energy_star, 1.0, w_init=net.w_init)
    for name in ("lhs", "term_stationarity", "approx_error", "rhs", "c0", "degenerate_term"):
        assert getattr(rep, name) == pytest.approx(getattr(ref, name), abs=1e-8), name
    assert rep.holds and rep.stationarity == "init-ball"
    assert rep.linearization_proxy == pytest.approx(32 ** -0.25)


def test_neural_audit_rejects_mismatched_nets():
    tasks = family(7, width=8)
    a = init_symmetric(8, tasks.features.input_dim, 0)
    b = init_symmetric(8, tasks.features.input_dim, 1)
    with pytest.raises(ValidationError):
        audit_corollary_5_2(tasks, a, b, 1.0)
    with pytest.raises(ValidationError):
        audit_corollary_5_2(family(7), a, a, 1.0)


def test_zero_mass_is_reported():
    from metalab.rl_audit import _check_positive
    with pytest.raises(DegenerateMeasureError):
        _check_positive(np.array([[0.5, 0.0]]))


def test_neural_audit_stationarity_conventions():
    from metalab.meta_rl import run_meta_rl
    tasks = family(8, width=16, d=4)
    net = init_symmetric(16, 4, 8)
    omega = net.with_weights(run_meta_rl(tasks, net.w_init.ravel(), 0.05, 40).theta)
    star_w, _ = multistart_theta_star(tasks, 2, 40, seed=8, scale=0.2, center=net.w_init.ravel())
    star = net.with_weights(star_w)
    a = audit_corollary_5_2(tasks, omega, star, 1.0)
    b = audit_corollary_5_2(tasks, omega, star, 1.0, stationarity="unit-ball")
    assert (a.stationarity, b.stationarity) == ("init-ball", "unit-ball")
    assert b.term_stationarity == pytest.approx(b.radius * b.epsilon)
    assert a.lhs == b.lhs and a.holds and b.holds
    # fitted parameters stay in the init ball, so the measured error is finite and small
    assert np.linalg.norm(omega.w.ravel() + a.fit_v - net.w_init.ravel()) <= 1.0 + 1e-9
    assert 0.0 <= a.linearization_measured < 1.0
    with pytest.raises(ValidationError):
        audit_corollary_5_2(tasks, omega, star, 1.0, stationarity="sideways")


def test_concentrability_direct_summation(rng):
    # identical tasks with eta = 0: compare against explicit loops over (s, a)
    tasks = family(9, delta=0.0, eta=0.0)
    theta = rng.normal(size=tasks.dim)
    mv = meta_visitations(tasks, theta)
    solves, _, _ = solve_all(tasks, theta)
    best = 0.0
    for i, ts in enumerate(solves):
        for numer in (ts.sigma_adapted, mv.marginal[i]):
            total = 0.0
            for s in range(tasks.n_states):
                for a in range(tasks.n_actions):
                    total += mv.mixed[s, a] * (numer[s, a] / mv.mixed[s, a]) ** 2
            best = max(best, np.sqrt(total))
    assert concentrability(tasks, theta) == pytest.approx(best, abs=1e-12)
    # one task: the marginal is its own mixture, so its ratio norm is exactly one
    single = family(9, n_tasks=1, eta=0.0)
    mv1 = meta_visitations(single, theta)
    assert ratio_norm(mv1.marginal[0], mv1.mixed) == pytest.approx(1.0, abs=1e-14)


def test_large_radius_matches_least_squares(rng):
    F, y, mu = rng.normal(size=(25, 4)), rng.normal(size=25), rng.dirichlet(np.ones(25))
    sw = np.sqrt(mu)
    v, *_ = np.linalg.lstsq(sw[:, None] * F, sw * y, rcond=None)
    fit = best_linear_fit(y, F, mu, 1e6)
    np.testing.assert_allclose(fit.v, v, atol=1e-10)
    assert fit.residual == pytest.approx(np.sqrt(mu @ (y - F @ v) ** 2), abs=1e-12)


def test_proxy_scaling():
    from metalab.rl_audit import linearization_proxy
    widths = np.array([64, 256, 1024, 4096])
    vals = [linearization_proxy(1.0, m) for m in widths]
    slope = np.polyfit(np.log(widths), np.log(vals), 1)[0]
    assert -0.4 <= slope <= -0.1
