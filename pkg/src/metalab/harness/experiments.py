"""Experiment pipelines behind the CLI; each returns plain rows for CSV output."""
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from ..meta_rl import (loads_task_set, meta_gradient_direct,
                       meta_gradient_refined, meta_objective, run_meta_rl)
from ..meta_sl import (NeuralModel, audit_corollary_5_3, audit_corollary_a_2,
                       audit_theorem_4_4, loads_sl_task_set, meta_gradient_sl,
                       meta_objective_sl, multistart_theta_star_sl, run_meta_sl,
                       theta_star_linear)
from ..neural_net import boundary_flip_perturbation, init_symmetric, linearization_error
from ..rl_audit import (audit_corollary_5_2, audit_theorem_3_4, concentrability,
                        multistart_theta_star)
from .config import ExperimentConfig
from .generators import generate_mdp_family, generate_sl_family, unit_rows
from .oracles import finite_diff_gradient, relative_error

GRADCHECK_TOL = 1e-4

TRAIN_COLUMNS = ["iteration", "objective", "grad_norm", "epsilon"]
AUDIT_RL_COLUMNS = ["seed", "lhs", "epsilon", "radius", "c0", "const", "approx_error", "rhs",
                    "holds", "degenerate_points"]
AUDIT_RL_NEURAL_COLUMNS = AUDIT_RL_COLUMNS + ["linearization_proxy", "linearization_measured"]
AUDIT_SL_COLUMNS = ["seed", "audit", "lhs", "epsilon", "radius", "term_i", "term_ii", "term_iii",
                    "rhs", "holds", "degenerate_points"]
AUDIT_SL_NEURAL_COLUMNS = AUDIT_SL_COLUMNS + ["linearization_term", "linearization_proxy"]
LINERR_COLUMNS = ["width", "seed", "radius", "error"]
C0_SWEEP_COLUMNS = ["seed", "delta", "c0"]
GRADCHECK_COLUMNS = ["instance", "kind", "rel_error", "passed"]


def thread_cap():
    try:
        return max(1, int(os.environ.get("METALAB_THREADS", "1")))
    except ValueError:
        return 1


def ordered_map(fn, items):
    """``map`` over seeds, in parallel when METALAB_THREADS > 1; order is preserved."""
    items = list(items)
    workers = min(thread_cap(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def rl_tasks(cfg, seed):
    if cfg.task_set:
        with open(cfg.task_set) as fh:
            return loads_task_set(fh.read())
    return generate_mdp_family(cfg.rl_spec(), seed)


def sl_tasks(cfg, seed):
    if cfg.task_set:
        with open(cfg.task_set) as fh:
            return loads_sl_task_set(fh.read())
    return generate_sl_family(cfg.sl_spec(), seed)


def linear_theta0(cfg, dim, seed):
    """Zero vector by default; seeded Gaussian of scale ``init_scale`` if positive."""
    if cfg.init_scale > 0:
        return cfg.init_scale * np.random.default_rng([seed, 11]).normal(size=dim)
    return None


def _train_rows(state):
    return [{"iteration": k, "objective": L, "grad_norm": g, "epsilon": g}
            for k, (L, g) in enumerate(zip(state.objective_history, state.grad_norm_history))]


def train_rl(cfg):
    tasks = rl_tasks(cfg, cfg.seed)
    if cfg.neural:
        theta0 = init_symmetric(cfg.m, tasks.features.input_dim, cfg.seed).w_init.ravel()
    else:
        theta0 = linear_theta0(cfg, tasks.dim, cfg.seed)
    state = run_meta_rl(tasks, theta0, cfg.alpha, cfg.T)
    return _train_rows(state), state


def train_sl(cfg):
    tasks = sl_tasks(cfg, cfg.seed)
    model, theta0 = None, linear_theta0(cfg, tasks.dim, cfg.seed)
    if cfg.neural:
        net = init_symmetric(cfg.m, tasks.domain.shape[1], cfg.seed)
        model, theta0 = NeuralModel(tasks.domain, net), net.w_init.ravel()
    state = run_meta_sl(tasks, theta0, cfg.alpha, cfg.T, model=model)
    return _train_rows(state), state


def audit_rl_seed(cfg, seed):
    """One RL audit: omega from the ascent loop, theta* from multi-start ascent."""
    tasks = rl_tasks(cfg, seed)
    if cfg.neural:
        net = init_symmetric(tasks.features.width, tasks.features.input_dim, seed)
        w0 = net.w_init.ravel()
        state = run_meta_rl(tasks, w0, cfg.alpha, cfg.T)
        scale = cfg.star_scale / np.sqrt(tasks.dim)
        star, _ = multistart_theta_star(tasks, cfg.n_starts, cfg.star_iterations, cfg.star_step,
                                        seed, scale, center=w0)
        radius = max(cfg.radius, state.max_distance)
        rep = audit_corollary_5_2(tasks, net.with_weights(state.theta), net.with_weights(star), radius)
    else:
        state = run_meta_rl(tasks, linear_theta0(cfg, tasks.dim, seed), cfg.alpha, cfg.T)
        star, _ = multistart_theta_star(tasks, cfg.n_starts, cfg.star_iterations, cfg.star_step,
                                        seed, cfg.star_scale)
        rep = audit_theorem_3_4(tasks, state.theta, star, cfg.radius)
    row = {"seed": seed, "lhs": rep.lhs, "epsilon": rep.epsilon, "radius": rep.radius,
           "c0": rep.c0, "const": rep.constant, "approx_error": rep.approx_error,
           "rhs": rep.rhs, "holds": rep.holds, "degenerate_points": len(rep.degenerate_points)}
    if cfg.neural:
        row["linearization_proxy"] = rep.linearization_proxy
        row["linearization_measured"] = rep.linearization_measured
    return row, rep


def _sl_row(seed, rep):
    return {"seed": seed, "audit": rep.audit, "lhs": rep.lhs, "epsilon": rep.epsilon,
            "radius": rep.radius, "term_i": rep.term_i, "term_ii": rep.term_ii,
            "term_iii": rep.term_iii, "rhs": rep.rhs, "holds": rep.holds,
            "degenerate_points": rep.degenerate_points,
            "linearization_term": rep.linearization_term,
            "linearization_proxy": rep.linearization_proxy}


def audit_sl_seed(cfg, seed):
    """Linear audits (exact theta*) and, with ``neural``, the network audit."""
    tasks = sl_tasks(cfg, seed)
    state = run_meta_sl(tasks, linear_theta0(cfg, tasks.dim, seed), cfg.alpha, cfg.T)
    star = theta_star_linear(tasks)
    reps = [audit_theorem_4_4(tasks, state.theta, star, cfg.radius),
            audit_corollary_a_2(tasks, state.theta, star, cfg.radius)]
    if cfg.neural:
        net = init_symmetric(cfg.m, tasks.domain.shape[1], seed)
        model = NeuralModel(tasks.domain, net)
        w0 = net.w_init.ravel()
        nstate = run_meta_sl(tasks, w0, cfg.alpha, cfg.T, model=model)
        scale = cfg.star_scale / np.sqrt(model.dim)
        nstar, _ = multistart_theta_star_sl(tasks, model, cfg.n_starts, cfg.star_iterations,
                                            cfg.star_step, seed, scale, center=w0)
        radius = max(cfg.radius, nstate.max_distance)
        reps.append(audit_corollary_5_3(tasks, net.with_weights(nstate.theta),
                                        net.with_weights(nstar), radius))
    return [_sl_row(seed, r) for r in reps], reps


def linerr_point(width, seed, d, n_points, radius, perturbation="adversarial"):
    """Linearization error of one freshly initialized net at one width and seed."""
    rng = np.random.default_rng([seed, width])
    inputs = unit_rows(rng, n_points, d)
    measure = rng.dirichlet(np.ones(n_points))
    net = init_symmetric(width, d, seed)
    if perturbation == "adversarial":
        om0, om1, om2 = boundary_flip_perturbation(net, inputs, measure, radius)
    else:
        def draw():
            z = rng.normal(size=net.w.shape)
            return net.w_init + radius * z / np.linalg.norm(z)
        om0, om1, om2 = draw(), net.w_init, draw()
    return linearization_error(net, inputs, measure, om0, om1, om2, radius)


def linerr_sweep(cfg):
    rows = []
    for width in cfg.widths:
        for k in range(cfg.n_seeds):
            err = linerr_point(width, cfg.seed + k, cfg.d, cfg.n_points, cfg.radius, cfg.perturbation)
            rows.append({"width": width, "seed": cfg.seed + k, "radius": cfg.radius, "error": err})
    return rows, loglog_slope(rows)


def c0_delta_sweep(cfg, deltas=(0.0, 0.05, 0.1, 0.2), n_points=5):
    """Concentrability at random parameters as the task perturbation grows.

    An empirical trend only (larger ``delta`` tends to raise ``C0``); nothing
    here is asserted.
    """
    rows = []
    for k in range(cfg.n_seeds):
        seed = cfg.seed + k
        for delta in deltas:
            cfg_d = ExperimentConfig(**{**cfg.to_dict(), "delta": float(delta)})
            tasks = generate_mdp_family(cfg_d.rl_spec(neural=False), seed)
            rng = np.random.default_rng([seed, 13])
            c0 = max(concentrability(tasks, rng.normal(size=tasks.dim)) for _ in range(n_points))
            rows.append({"seed": seed, "delta": float(delta), "c0": c0})
    return rows


def loglog_slope(rows):
    widths = sorted({r["width"] for r in rows})
    means = [np.mean([r["error"] for r in rows if r["width"] == w]) for w in widths]
    return float(np.polyfit(np.log(widths), np.log(means), 1)[0])


def gradcheck(cfg):
    """Analytic meta-gradients vs. central differences on random instances."""
    rows = []
    for k in range(cfg.n_instances):
        seed = cfg.seed + k
        rng = np.random.default_rng([seed, 7])
        tasks = generate_mdp_family(cfg.rl_spec(neural=False), seed)
        theta = rng.normal(size=tasks.dim)
        g = meta_gradient_direct(tasks, theta)
        fd = finite_diff_gradient(lambda th: meta_objective(tasks, th), theta, 1e-6)
        err = relative_error(g, fd)
        rows.append({"instance": k, "kind": "rl-direct", "rel_error": err,
                     "passed": err <= GRADCHECK_TOL})
        err = relative_error(meta_gradient_refined(tasks, theta), fd)
        rows.append({"instance": k, "kind": "rl-refined", "rel_error": err,
                     "passed": err <= GRADCHECK_TOL})
        sl = generate_sl_family(cfg.sl_spec(), seed)
        theta = rng.normal(size=sl.dim)
        fd = finite_diff_gradient(lambda th: meta_objective_sl(sl, th), theta, 1e-6)
        err = relative_error(meta_gradient_sl(sl, theta), fd)
        rows.append({"instance": k, "kind": "sl", "rel_error": err, "passed": err <= GRADCHECK_TOL})
    return rows
