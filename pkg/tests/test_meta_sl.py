import numpy as np
import pytest

from metalab import ValidationError
from metalab.harness.generators import SlFamilySpec, generate_sl_family
from metalab.harness.oracles import finite_diff_gradient, projected_gradient_fit, relative_error
from metalab.meta_sl import (LinearModel, NeuralModel, SlHypothesis, SlTaskSet,
                             audit_corollary_5_3, audit_corollary_a_2, audit_theorem_4_4,
                             dumps_sl_task_set, frechet_derivative_sq, inner_gd_step,
                             kernel_apply, kernel_matrix, loads_sl_task_set, meta_gradient_sl,
                             meta_objective_sl, multistart_theta_star_sl, rho_inner, risk,
                             risk_gradient, run_meta_sl, theta_star_linear)
from metalab.neural_net import feature, forward, init_symmetric


def family(seed, **kw):
    return generate_sl_family(SlFamilySpec(**kw), seed)


def test_risk_examples():
    rho = np.array([0.25, 0.75])
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    tasks = SlTaskSet(x, rho, x, np.array([[-1.0, 1.0], [-1.0, 1.0]]),
                      np.array([[[0.5, 0.5], [0.0, 1.0]]]))
    t = tasks.task(0)
    # x0: labels +-1 equally likely, h = 0 -> loss 1; x1: label 1, h = 0 -> loss 1
    assert risk(t, np.zeros(2)) == pytest.approx(1.0)
    assert risk(t, np.array([0.0, 1.0])) == pytest.approx(0.25)
    np.testing.assert_allclose(t.cond_mean, [0.0, 1.0])


def test_risk_bias_variance(rng):
    tasks = family(0)
    t = tasks.task(1)
    h = rng.normal(size=tasks.n_points)
    var = t.marginal @ (t.cond_second_moment - t.cond_mean ** 2)
    assert risk(t, h) == pytest.approx(t.marginal @ (h - t.cond_mean) ** 2 + var, abs=1e-14)


def test_frechet_directional_derivative(rng):
    tasks = family(1)
    for _ in range(100):
        t = tasks.task(int(rng.integers(tasks.n_tasks)))
        h, g = rng.normal(size=tasks.n_points), rng.normal(size=tasks.n_points)
        eps = 1e-6
        fd = (risk(t, h + eps * g) - risk(t, h - eps * g)) / (2 * eps)
        assert abs(fd - rho_inner(t.marginal, frechet_derivative_sq(t, h), g)) <= 1e-5


def test_convexity_gap_identity(rng):
    tasks = family(2)
    t = tasks.task(0)
    for _ in range(100):
        h1, h2 = rng.normal(size=tasks.n_points), rng.normal(size=tasks.n_points)
        gap = risk(t, h1) - risk(t, h2) - rho_inner(t.marginal, frechet_derivative_sq(t, h2), h1 - h2)
        assert abs(gap - rho_inner(t.marginal, h1 - h2, h1 - h2)) <= 1e-10


def test_derivative_norm_bounded_by_risk(rng):
    tasks = family(3)
    for i in range(tasks.n_tasks):
        t = tasks.task(i)
        h = rng.normal(size=tasks.n_points)
        d = frechet_derivative_sq(t, h)
        assert rho_inner(t.marginal, d, d) <= 4 * risk(t, h) + 1e-14


def test_kernel_symmetric_and_matches_apply(rng):
    tasks = family(4)
    K = kernel_matrix(tasks.features, tasks.marginal, 0.3)
    np.testing.assert_allclose(K, K.T, atol=1e-15)
    v = rng.normal(size=tasks.dim)
    np.testing.assert_allclose(kernel_apply(tasks.features, tasks.marginal, 0.3, v), K @ v, atol=1e-14)


def test_inner_step_gradient(rng):
    tasks = family(5)
    t = tasks.task(0)
    model = LinearModel(tasks.features)
    theta = rng.normal(size=tasks.dim)
    fd = finite_diff_gradient(lambda th: risk(t, model.values(th)), theta)
    np.testing.assert_allclose(risk_gradient(t, theta, model), fd, atol=1e-8)
    np.testing.assert_allclose(inner_gd_step(t, theta, 0.2, tasks.features),
                               theta - 0.2 * risk_gradient(t, theta, model))
    with pytest.raises(ValidationError):
        inner_gd_step(t, theta, -0.1, model)


@pytest.mark.parametrize("seed", range(4))
def test_meta_gradient_finite_differences(seed):
    tasks = family(seed, eta=0.3)
    theta = np.random.default_rng(seed).normal(size=tasks.dim)
    fd = finite_diff_gradient(lambda th: meta_objective_sl(tasks, th), theta)
    assert relative_error(meta_gradient_sl(tasks, theta), fd) <= 1e-6


def test_neural_meta_gradient_finite_differences():
    tasks = family(7, d=4)
    net = init_symmetric(16, 4, 7)
    model = NeuralModel(tasks.domain, net)
    theta = net.w_init.ravel() + 0.2 * np.random.default_rng(7).normal(size=model.dim)
    fd = finite_diff_gradient(lambda th: meta_objective_sl(tasks, th, model), theta, 1e-7)
    assert relative_error(meta_gradient_sl(tasks, theta, model), fd) <= 1e-5


def test_theta_star_is_global_minimum(rng):
    tasks = family(8)
    star = theta_star_linear(tasks)
    assert np.linalg.norm(meta_gradient_sl(tasks, star)) <= 1e-12
    best = meta_objective_sl(tasks, star)
    for _ in range(50):
        assert meta_objective_sl(tasks, star + rng.normal(size=tasks.dim)) >= best
    found, val = multistart_theta_star_sl(tasks, LinearModel(tasks.features), 4, 300, seed=1)
    assert val >= best - 1e-12


def test_descent_is_monotone():
    tasks = family(9)
    state = run_meta_sl(tasks, step_sizes=0.1, iterations=100)
    assert np.all(np.diff(state.objective_history) <= 1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_linear_audits_hold(seed):
    tasks = family(seed)
    omega = run_meta_sl(tasks, step_sizes=0.05, iterations=50).theta
    star = theta_star_linear(tasks)
    for rep in (audit_theorem_4_4(tasks, omega, star), audit_corollary_a_2(tasks, omega, star)):
        assert rep.holds and rep.lhs >= -1e-14
        assert rep.rhs == pytest.approx(rep.term_i + rep.term_ii * rep.term_iii + rep.degenerate_term)


def test_explicit_hessians_match_default(rng):
    tasks = family(10)
    F = tasks.features
    H = np.broadcast_to(2 * np.einsum("xi,xj->xij", F, F)[:, None],
                        (tasks.n_points, tasks.label_values.shape[1], tasks.dim, tasks.dim))
    omega, star = rng.normal(size=tasks.dim), theta_star_linear(tasks)
    a = audit_theorem_4_4(tasks, omega, star)
    b = audit_theorem_4_4(tasks, omega, star, hessians=H)
    assert a.rhs == pytest.approx(b.rhs, abs=1e-12)


def realizable_tasks(n_tasks=3):
    # every task has conditional mean F @ theta0, so theta0 fits all tasks perfectly
    rng = np.random.default_rng(0)
    N, d = 12, 5
    F = rng.normal(size=(N, d))
    F /= np.linalg.norm(F, axis=1, keepdims=True)
    theta0 = rng.normal(size=d) * 0.2
    m = F @ theta0
    probs = np.stack([(1 - m) / 2, (1 + m) / 2], axis=1)
    return SlTaskSet(F, np.full(N, 1 / N), F, np.tile([-1.0, 1.0], (N, 1)),
                     np.broadcast_to(probs, (n_tasks, N, 2)).copy()), theta0


def test_perfect_fit_has_zero_weights():
    tasks, theta0 = realizable_tasks()
    star = theta_star_linear(tasks)
    for rep in (audit_theorem_4_4(tasks, theta0, star), audit_corollary_a_2(tasks, theta0, star)):
        assert rep.weight_norm <= 1e-10
        assert abs(rep.lhs) <= 1e-12 and rep.holds


def test_corollary_5_3_at_eta_zero_is_plain_fit():
    # fewer parameters (24) than points (60) so the fit residual is nonzero
    tasks = family(11, d=4, eta=0.0, n_points=60)
    net = init_symmetric(6, 4, 11)
    rng = np.random.default_rng(11)
    omega = net.with_weights(net.w_init + 0.1 * rng.normal(size=net.w.shape))
    star = net.with_weights(net.w_init + 0.1 * rng.normal(size=net.w.shape))
    rep = audit_corollary_5_3(tasks, omega, star, 1.0)
    rho, means = tasks.marginal, tasks.cond_means
    h, hs = forward(net, tasks.domain, omega.w), forward(net, tasks.domain, star.w)
    deltas = 2 * (h[None] - means)
    w = deltas.mean(axis=0)
    u = (deltas * (h - hs)[None]).mean(axis=0) / w
    phi0 = feature(net, tasks.domain, net.w_init)
    center = (omega.w - net.w_init).ravel()
    v, resid = projected_gradient_fit(u, phi0, rho, 1.0, center)
    assert resid > 1e-3
    assert rep.term_iii == pytest.approx(resid, abs=1e-8)
    lin = -np.mean([rho @ (d * ((feature(net, tasks.domain, omega.w) - phi0) @ v)) for d in deltas])
    assert rep.linearization_term == pytest.approx(lin, abs=1e-8)
    lhs = np.mean([risk(tasks.task(i), h) - risk(tasks.task(i), hs) for i in range(tasks.n_tasks)])
    assert rep.lhs == pytest.approx(lhs, abs=1e-14)
    assert rep.holds


def test_corollary_5_3_notes_and_validation():
    tasks = family(12, d=4)
    net = init_symmetric(8, 4, 0)
    far = net.with_weights(net.w_init + 10.0)
    rep = audit_corollary_5_3(tasks, far, net, 1.0)
    assert rep.notes
    with pytest.raises(ValidationError):
        audit_corollary_5_3(tasks, net, init_symmetric(8, 4, 1), 1.0)


def test_hypothesis_constructors(rng):
    tasks = family(13, d=4)
    theta = rng.normal(size=4)
    np.testing.assert_allclose(SlHypothesis.linear(tasks.features, theta).values, tasks.features @ theta)
    net = init_symmetric(8, 4, 0)
    np.testing.assert_array_equal(SlHypothesis.neural(net, tasks.domain).values, 0.0)


def test_json_round_trip(rng):
    tasks = family(14)
    back = loads_sl_task_set(dumps_sl_task_set(tasks))
    np.testing.assert_allclose(back.cond_means, tasks.cond_means, atol=1e-15)
    theta = rng.normal(size=tasks.dim)
    assert meta_objective_sl(back, theta) == pytest.approx(meta_objective_sl(tasks, theta), abs=1e-14)


def test_validation_errors():
    tasks = family(15)
    with pytest.raises(ValidationError):
        tasks.replace(label_probs=tasks.label_probs * 0.5)
    with pytest.raises(ValidationError):
        tasks.replace(marginal=np.full(tasks.n_points, 2.0 / tasks.n_points))
    with pytest.raises(ValidationError):
        tasks.replace(y_max=0.5)
    doc = tasks.to_dict()
    doc["bogus"] = 0
    with pytest.raises(ValidationError):
        SlTaskSet.from_dict(doc)


def test_corollary_5_3_stationarity_conventions():
    tasks = family(16, d=4)
    net = init_symmetric(32, 4, 16)
    model = NeuralModel(tasks.domain, net)
    omega = net.with_weights(run_meta_sl(tasks, net.w_init.ravel(), 0.05, 60, model=model).theta)
    star = net.with_weights(multistart_theta_star_sl(tasks, model, 2, 60, seed=16, scale=0.1,
                                                     center=net.w_init.ravel())[0])
    init_rep, terms = audit_corollary_5_3(tasks, omega, star, 1.0, return_terms=True)
    unit_rep, unit_terms = audit_corollary_5_3(tasks, omega, star, 1.0, return_terms=True,
                                               stationarity="unit-ball")
    assert init_rep.stationarity == "init-ball" and unit_rep.stationarity == "unit-ball"
    np.testing.assert_allclose(terms.center, (omega.w - net.w_init).ravel())
    np.testing.assert_array_equal(unit_terms.center, 0.0)
    assert unit_rep.term_i == pytest.approx(unit_rep.radius * unit_rep.epsilon)
    assert init_rep.holds and unit_rep.holds
    with pytest.raises(ValidationError):
        audit_corollary_5_3(tasks, omega, star, 1.0, stationarity="sideways")


def test_eta_zero_meta_gradient_is_average_risk_gradient(rng):
    tasks = family(17, eta=0.0)
    model = LinearModel(tasks.features)
    theta = rng.normal(size=tasks.dim)
    avg = np.mean([risk_gradient(tasks.task(i), theta, model) for i in range(tasks.n_tasks)], axis=0)
    np.testing.assert_allclose(meta_gradient_sl(tasks, theta), avg, atol=1e-14)
    np.testing.assert_array_equal(kernel_matrix(tasks.features, tasks.marginal, 0.0), np.eye(tasks.dim))


def test_zero_gradient_start_stays_fixed():
    tasks, theta0 = realizable_tasks()
    state = run_meta_sl(tasks, theta0, 0.1, 5)
    np.testing.assert_allclose(state.theta, theta0, atol=1e-15)
    assert state.epsilon <= 1e-14


def test_both_linear_audits_hold_together(rng):
    tasks = family(18)
    omega, star = rng.normal(size=tasks.dim) * 0.3, theta_star_linear(tasks)
    a, b = audit_theorem_4_4(tasks, omega, star), audit_corollary_a_2(tasks, omega, star)
    assert a.lhs == b.lhs and a.holds and b.holds
