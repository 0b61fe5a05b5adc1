"""Meta-visitation measures, concentrability and optimality-gap audits for meta-RL.

The audited chain for a stationary-ish point ``omega`` and a comparator
``theta*`` is exact up to one Cauchy-Schwarz step:

    L(theta*) - L(omega) = E_varrho[num / n] = grad L . v + E_varrho[den / n * (f - phi . v)]
                         <= stationarity + |den / n|_varrho * |f - phi . v|_varrho

where ``f = num / den`` is tabulated by :func:`f_omega`. The reported
``constant`` upper-bounds ``|den / n|_varrho`` through the concentrability
constant ``C0``. Points where ``|den|`` vanishes cannot carry ``f``; they are
dropped from the fit and their exact contribution is added as
``degenerate_term``.
"""
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from ._errors import DegenerateMeasureError, ValidationError
from .meta_rl import (NeuralFeatureMap, meta_objective, objective_and_gradient,
                      refined_terms, solve_all, solve_task)

DEGENERATE_TOL = 1e-12
BOUND_SLACK = 1e-9
THETA_STAR_LABEL = "best-found optimum"


class MetaVisitationSet(NamedTuple):
    joint: np.ndarray     # [i, s2, a2, s, a]
    marginal: np.ndarray  # [i, s2, a2]
    mixed: np.ndarray     # [s2, a2]


def _check_positive(mixed):
    bad = mixed <= 0.0
    if np.any(bad):
        s, a = np.argwhere(bad)[0]
        raise DegenerateMeasureError(f"mixed meta-visitation measure has zero mass at ({s}, {a})")


def meta_visitations(tasks, theta):
    """Joint, marginal and task-mixed meta-visitation measures at ``theta``."""
    solves, _, _ = solve_all(tasks, theta)
    joints, margs = [], []
    for ts, t in zip(solves, tasks.tasks):
        rt = refined_terms(ts, t.discount, tasks.temperature, tasks.eta)
        joints.append(rt.joint)
        margs.append(rt.marginal)
    marginal = np.array(margs)
    mixed = marginal.mean(axis=0)
    _check_positive(mixed)
    return MetaVisitationSet(np.array(joints), marginal, mixed)


def ratio_norm(numer, base):
    """``L2(base)`` norm of the density ratio ``numer / base``."""
    return float(np.sqrt(np.sum(numer ** 2 / base)))


class _OmegaTerms(NamedTuple):
    solves: list
    refined: list
    jac: np.ndarray
    mixed: np.ndarray
    value: float
    grad: np.ndarray


def _omega_terms(tasks, omega):
    solves, _, jac = solve_all(tasks, omega)
    refined = [refined_terms(ts, t.discount, tasks.temperature, tasks.eta)
               for ts, t in zip(solves, tasks.tasks)]
    mixed = np.mean([rt.marginal for rt in refined], axis=0)
    _check_positive(mixed)
    grad = np.mean([(rt.marginal * rt.g).reshape(-1) @ jac for rt in refined], axis=0)
    value = float(np.mean([ts.ret for ts in solves]))
    return _OmegaTerms(solves, refined, jac, mixed, value, grad)


def _c0(terms):
    vals = []
    for ts, rt in zip(terms.solves, terms.refined):
        vals.append(ratio_norm(ts.sigma_adapted, terms.mixed))
        vals.append(ratio_norm(rt.marginal, terms.mixed))
    return max(vals)


def concentrability(tasks, theta):
    """Smallest ``C0`` bounding both density-ratio families in ``L2(varrho)``."""
    return _c0(_omega_terms(tasks, theta))


@dataclass
class FOmegaTable:
    values: np.ndarray       # [s, a]; nan at degenerate points
    numerator: np.ndarray    # sum_i kappa_i A_i^{pi_{i,omega}} dsigma*_i / dvarrho
    denominator: np.ndarray  # sum_i g_i dvarsigma_i / dvarrho
    valid: np.ndarray        # bool mask of non-degenerate points
    mixed: np.ndarray

    @property
    def degenerate_points(self) -> List[Tuple[int, int]]:
        return [tuple(int(i) for i in ix) for ix in np.argwhere(~self.valid)]

    @property
    def fully_degenerate(self):
        return not np.any(self.valid)


def _f_table(tasks, terms, comparator_sigmas):
    num = np.zeros_like(terms.mixed)
    den = np.zeros_like(terms.mixed)
    for ts, rt, sig in zip(terms.solves, terms.refined, comparator_sigmas):
        num += ts.kappa * ts.adv_adapted * sig / terms.mixed
        den += rt.g * rt.marginal / terms.mixed
    valid = np.abs(den) >= DEGENERATE_TOL
    values = np.full_like(num, np.nan)
    values[valid] = num[valid] / den[valid]
    return FOmegaTable(values, num, den, valid, terms.mixed)


def _comparator_sigmas(tasks, energy):
    return [solve_task(t, energy, tasks.temperature, tasks.eta, need_init=False)
            for t in tasks.tasks]


def f_omega(tasks, omega, theta_star):
    """Tabulate ``f_omega`` over state-action pairs; degenerate points are flagged."""
    terms = _omega_terms(tasks, omega)
    energy_star, _ = tasks.features.evaluate(theta_star)
    comp = _comparator_sigmas(tasks, energy_star)
    return _f_table(tasks, terms, [c.sigma_adapted for c in comp])


def f_omega_from_measures(tasks, omega, comparator_sigmas):
    """:func:`f_omega` with the comparator visitation measures given directly."""
    return _f_table(tasks, _omega_terms(tasks, omega), comparator_sigmas)


class LinearFit(NamedTuple):
    v: np.ndarray
    residual: float
    multiplier: float  # ridge multiplier of the active ball constraint (0 if inactive)


def best_linear_fit(target, features, measure, radius, center=None):
    """``min_{|v - center| <= radius} |target - features @ v|_{L2(measure)}``.

    Solved through a thin SVD of the weighted design: the minimum-norm
    least-squares step is taken if it is feasible, otherwise the ridge
    multiplier is bisected until the step has norm ``radius`` (the boundary
    solution of the convex trust-region subproblem).
    """
    target = np.asarray(target, dtype=np.float64).ravel()
    features = np.asarray(features, dtype=np.float64)
    measure = np.asarray(measure, dtype=np.float64).ravel()
    if not radius > 0:
        raise ValidationError(f"radius must be positive, got {radius}")
    if features.ndim != 2 or features.shape[0] != target.shape[0] or measure.shape != target.shape:
        raise ValidationError("target, features and measure must agree on the number of points")
    if np.any(measure < 0):
        raise ValidationError("measure must be nonnegative")
    D = features.shape[1]
    c = np.zeros(D) if center is None else np.asarray(center, dtype=np.float64).ravel()
    if target.size == 0:
        return LinearFit(c.copy(), 0.0, 0.0)
    sw = np.sqrt(measure)
    a = sw[:, None] * features
    y = sw * (target - features @ c)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    keep = s > (s[0] if s.size else 0.0) * max(a.shape) * np.finfo(float).eps
    u, s, vt = u[:, keep], s[keep], vt[keep]
    coef = u.T @ y
    z_norm = lambda lam: float(np.linalg.norm(s * coef / (s ** 2 + lam)))
    lam = 0.0
    if s.size and z_norm(0.0) > radius:
        lo, hi = 0.0, float(s[0] * np.linalg.norm(coef) / radius)
        for _ in range(400):
            mid = 0.5 * (lo + hi)
            if z_norm(mid) > radius:
                lo = mid
            else:
                hi = mid
            if radius - z_norm(hi) <= 1e-10 * radius or hi - lo <= 1e-300:
                break
        lam = hi
    z = vt.T @ (s * coef / (s ** 2 + lam)) if s.size else np.zeros(D)
    v = c + z
    resid = float(np.sqrt(measure @ (target - features @ v) ** 2))
    return LinearFit(v, resid, lam)


@dataclass
class BoundReport:
    lhs: float
    term_stationarity: float
    constant: float
    approx_error: float
    rhs: float
    holds: bool
    c0: float
    epsilon: float
    radius: float
    constant_nominal: float = 0.0
    rhs_nominal: float = 0.0
    holds_nominal: bool = True
    weight_norm: float = 0.0
    degenerate_term: float = 0.0
    degenerate_points: List[Tuple[int, int]] = field(default_factory=list)
    fully_degenerate: bool = False
    stationarity: str = "unit-ball"
    theta_star_label: str = THETA_STAR_LABEL
    linearization_proxy: Optional[float] = None
    linearization_measured: Optional[float] = None
    fit_v: Optional[np.ndarray] = None


def audit_from_comparator(tasks, omega, comparator_energy, radius, w_init=None):
    """Core RL audit with the comparator given by its main-effect energy table.

    With ``w_init`` given, stationarity is measured over the ball of radius
    ``radius`` around ``w_init`` and the fit ranges over the same ball
    (shifted to ``v - omega``); otherwise both use the origin-centered ball.
    """
    if not radius > 0:
        raise ValidationError("radius must be positive")
    omega = np.asarray(omega, dtype=np.float64).ravel()
    terms = _omega_terms(tasks, omega)
    comp = _comparator_sigmas(tasks, comparator_energy)
    table = _f_table(tasks, terms, [c.sigma_adapted for c in comp])
    n = tasks.n_tasks
    lhs = float(np.mean([c.ret for c in comp])) - terms.value
    gnorm = float(np.linalg.norm(terms.grad))
    if w_init is None:
        stationarity_term = radius * gnorm
        center = None
        mode = "unit-ball"
    else:
        offset = np.asarray(w_init, dtype=np.float64).ravel() - omega
        stationarity_term = float(terms.grad @ offset) + radius * gnorm
        center = offset
        mode = "init-ball"
    mask = table.valid.ravel()
    mixed = terms.mixed.ravel()
    fit = best_linear_fit(table.values.ravel()[mask], terms.jac[mask], mixed[mask], radius, center)
    flag = ~mask
    pred = terms.jac[flag] @ fit.v
    degenerate_term = float(np.sum(mixed[flag] * (table.numerator.ravel()[flag]
                                                  - table.denominator.ravel()[flag] * pred)) / n)
    weight_norm = float(np.sqrt(np.sum(mixed[mask] * (table.denominator.ravel()[mask] / n) ** 2)))
    c0 = _c0(terms)
    q, tau, eta = tasks.q_max, tasks.temperature, tasks.eta
    gammas = np.array([t.discount for t in tasks.tasks])
    kappas = 1.0 / (1.0 - gammas)
    constant = 2.0 * c0 * q / tau * float(np.mean(kappas * (1.0 + 2.0 * q * eta * gammas * kappas)))
    constant_nominal = 2.0 * c0 * q / tau * (1.0 + 2.0 * q * float(gammas.mean()) * eta)
    rhs = stationarity_term + constant * fit.residual + degenerate_term
    rhs_nominal = stationarity_term + constant_nominal * fit.residual + degenerate_term
    return BoundReport(
        lhs=lhs, term_stationarity=stationarity_term, constant=constant,
        approx_error=fit.residual, rhs=rhs, holds=bool(lhs <= rhs + BOUND_SLACK),
        c0=c0, epsilon=gnorm, radius=float(radius),
        constant_nominal=constant_nominal, rhs_nominal=rhs_nominal,
        holds_nominal=bool(lhs <= rhs_nominal + BOUND_SLACK), weight_norm=weight_norm,
        degenerate_term=degenerate_term, degenerate_points=table.degenerate_points,
        fully_degenerate=table.fully_degenerate, stationarity=mode, fit_v=fit.v,
    )


def audit_theorem_3_4(tasks, omega, theta_star, radius=1.0):
    """Certify ``L(theta*) - L(omega) <= R eps + const * inf_{|v|<=R} |f_omega - phi.v|``."""
    energy_star, _ = tasks.features.evaluate(theta_star)
    return audit_from_comparator(tasks, omega, energy_star, radius)


def linearization_proxy(radius, width):
    return float(radius ** 1.5 * width ** -0.25)


STATIONARITY_MODES = ("init-ball", "unit-ball")


def audit_corollary_5_2(tasks, net_omega, net_theta_star, radius, stationarity="init-ball"):
    """Neural-energy audit over the ball of radius ``radius`` around ``w_init``.

    The infimum over networks in the ball is replaced by its first-order
    surrogate in the feature map ``phi_omega``; the report carries the
    ``R^{3/2} m^{-1/4}`` proxy and the linearization error measured at the
    fitted parameters ``theta = omega + z``. ``stationarity="unit-ball"``
    switches to the origin-centered ball used by the linear audit.
    """
    feats = tasks.features
    if not isinstance(feats, NeuralFeatureMap):
        raise ValidationError("audit_corollary_5_2 needs a task set with a NeuralFeatureMap")
    if net_omega.w.shape != (feats.width, feats.input_dim):
        raise ValidationError("network shape does not match the task set's feature map")
    if not np.array_equal(net_omega.w_init, net_theta_star.w_init):
        raise ValidationError("omega and theta* networks must share the initialization")
    if stationarity not in STATIONARITY_MODES:
        raise ValidationError(f"stationarity must be one of {STATIONARITY_MODES}")
    energy_star, _ = feats.evaluate(net_theta_star.w)
    w_init = net_omega.w_init if stationarity == "init-ball" else None
    rep = audit_from_comparator(tasks, net_omega.w, energy_star, radius, w_init=w_init)
    rep.linearization_proxy = linearization_proxy(radius, feats.width)
    # f(theta) - f(omega) - phi_omega . (theta - omega) = (phi_theta - phi_omega) . theta
    theta = net_omega.w.ravel() + rep.fit_v
    _, phi_omega = feats.evaluate(net_omega.w)
    _, phi_theta = feats.evaluate(theta)
    gap = (phi_theta - phi_omega) @ theta
    mixed = _omega_terms(tasks, net_omega.w).mixed
    rep.linearization_measured = float(np.sqrt(mixed.ravel() @ gap ** 2))
    return rep


def multistart_ascent(oracle, value_fn, starts, iterations=200, step=1.0, maximize=True):
    """Best endpoint of safeguarded gradient runs from each start.

    ``oracle(theta) -> (value, grad)``, ``value_fn(theta) -> value``. A step is
    accepted only if it strictly improves the objective; otherwise it is halved.
    Returns ``(theta, value)`` of the best endpoint.
    """
    sign = 1.0 if maximize else -1.0
    best_theta, best_val = None, -np.inf
    for theta in starts:
        theta = np.array(theta, dtype=np.float64)
        val, grad = oracle(theta)
        alpha = step
        for _ in range(iterations):
            if not np.linalg.norm(grad) > 1e-12:
                break
            accepted = False
            for _ in range(40):
                cand = theta + sign * alpha * grad
                cval = value_fn(cand)
                if np.isfinite(cval) and sign * cval > sign * val:
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                break
            theta = cand
            val, grad = oracle(theta)
            alpha = min(2.0 * alpha, step)
        if sign * val > best_val:
            best_theta, best_val = theta, sign * val
    return best_theta, sign * best_val


def gaussian_starts(dim, n_starts, seed, scale=1.0, center=None):
    rng = np.random.default_rng(seed)
    c = np.zeros(dim) if center is None else np.asarray(center, dtype=np.float64).ravel()
    return [c + scale * rng.normal(size=dim) for _ in range(n_starts)]


def multistart_theta_star(tasks, n_starts=16, iterations=200, step=1.0, seed=0, scale=1.0,
                          center=None):
    """Multi-start ascent surrogate for the global maximizer ("best-found optimum")."""
    starts = gaussian_starts(tasks.dim, n_starts, seed, scale, center)
    return multistart_ascent(lambda th: objective_and_gradient(tasks, th),
                             lambda th: meta_objective(tasks, th), starts, iterations, step)
