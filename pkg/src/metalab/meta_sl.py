"""Meta-supervised learning with a one-step gradient-descent inner loop.

Tasks share a finite domain ``x_1..x_N`` with marginal ``rho`` and differ in
their conditional label distributions, stored densely: ``label_values[x, k]``
is the k-th label value at ``x`` (shared by all tasks) and
``label_probs[i, x, k]`` its probability under task ``i``. Padding entries
carry probability zero for every task.

Loss is squared error throughout, so the Fréchet derivative of a task risk at
``h`` is the table ``2 (h - E[y | x])`` and every expectation is a finite sum.
Hypotheses are linear in a feature table or two-layer ReLU networks (the
second derivative of the network in its parameters is taken to be zero).
"""
import json
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np

from . import _kernels
from ._errors import ValidationError
from .meta_rl import MetaRlState, gradient_iterations
from .neural_net import TwoLayerNet
from .rl_audit import (BOUND_SLACK, DEGENERATE_TOL, THETA_STAR_LABEL, best_linear_fit,
                       gaussian_starts, multistart_ascent)

INPUT_TOL = 1e-12

MetaSlState = MetaRlState


@dataclass(frozen=True)
class SlTask:
    """One task: shared domain and marginal, task-specific label distribution."""

    domain: np.ndarray
    marginal: np.ndarray
    label_values: np.ndarray  # (N, K)
    label_probs: np.ndarray   # (N, K)

    @property
    def cond_mean(self):
        return np.sum(self.label_probs * self.label_values, axis=1)

    @property
    def cond_second_moment(self):
        return np.sum(self.label_probs * self.label_values ** 2, axis=1)


@dataclass(frozen=True, eq=False)
class SlTaskSet:
    domain: np.ndarray
    marginal: np.ndarray
    features: np.ndarray
    label_values: np.ndarray
    label_probs: np.ndarray
    eta: float = 0.1
    y_max: float = 1.0

    def __post_init__(self):
        X = np.array(self.domain, dtype=np.float64)
        rho = np.array(self.marginal, dtype=np.float64)
        F = np.array(self.features, dtype=np.float64)
        Y = np.array(self.label_values, dtype=np.float64)
        Pr = np.array(self.label_probs, dtype=np.float64)
        if X.ndim != 2:
            raise ValidationError("domain must be an (N, p) array")
        N = X.shape[0]
        if np.any(np.linalg.norm(X, axis=1) > 1.0 + INPUT_TOL):
            raise ValidationError("domain points must have norm <= 1")
        if rho.shape != (N,) or np.any(rho <= 0) or abs(rho.sum() - 1.0) > INPUT_TOL:
            raise ValidationError("marginal must be a strictly positive distribution over the domain")
        if F.ndim != 2 or F.shape[0] != N:
            raise ValidationError(f"features must have shape ({N}, d), got {F.shape}")
        if np.any(np.linalg.norm(F, axis=1) > 1.0 + INPUT_TOL):
            raise ValidationError("feature norms must be <= 1")
        if Y.ndim != 2 or Y.shape[0] != N:
            raise ValidationError("label_values must have shape (N, K)")
        if Pr.ndim != 3 or Pr.shape[1:] != Y.shape or Pr.shape[0] < 1:
            raise ValidationError(f"label_probs must have shape (n, {N}, {Y.shape[1]})")
        if np.any(Pr < 0) or np.any(np.abs(Pr.sum(axis=2) - 1.0) > INPUT_TOL):
            raise ValidationError("every conditional label distribution must be a probability vector")
        if np.any(np.abs(Y) > self.y_max + INPUT_TOL):
            raise ValidationError(f"label values exceed y_max={self.y_max}")
        if self.eta < 0:
            raise ValidationError("eta must be nonnegative")
        for name, arr in (("domain", X), ("marginal", rho), ("features", F),
                          ("label_values", Y), ("label_probs", Pr)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"non-finite entries in {name}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "eta", float(self.eta))
        object.__setattr__(self, "y_max", float(self.y_max))

    @property
    def n_tasks(self):
        return self.label_probs.shape[0]

    @property
    def n_points(self):
        return self.domain.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def task(self, i):
        return SlTask(self.domain, self.marginal, self.label_values, self.label_probs[i])

    @property
    def cond_means(self):
        """``E_i[y | x]`` for every task, shape ``(n, N)``."""
        return np.sum(self.label_probs * self.label_values[None], axis=2)

    def replace(self, **changes):
        kw = dict(domain=self.domain, marginal=self.marginal, features=self.features,
                  label_values=self.label_values, label_probs=self.label_probs,
                  eta=self.eta, y_max=self.y_max)
        kw.update(changes)
        return SlTaskSet(**kw)

    def to_dict(self):
        tasks = []
        for i in range(self.n_tasks):
            labels = []
            for x in range(self.n_points):
                keep = self.label_probs[i, x] > 0
                labels.append({"x_index": x,
                               "values": self.label_values[x, keep].tolist(),
                               "probs": self.label_probs[i, x, keep].tolist()})
            tasks.append({"labels": labels})
        return {
            "domain": self.domain.tolist(),
            "marginal": self.marginal.tolist(),
            "tasks": tasks,
            "features": self.features.tolist(),
            "eta": self.eta,
            "y_max": self.y_max,
        }

    @classmethod
    def from_dict(cls, doc):
        known = {"domain", "marginal", "tasks", "features", "eta", "y_max"}
        extra = set(doc) - known
        if extra:
            raise ValidationError(f"unknown SL task-set keys: {sorted(extra)}")
        domain = np.asarray(doc["domain"], dtype=np.float64)
        N = domain.shape[0]
        grids = [set() for _ in range(N)]
        parsed = []
        for t, task in enumerate(doc["tasks"]):
            per_x = {}
            for lab in task["labels"]:
                x = int(lab["x_index"])
                if not 0 <= x < N or x in per_x:
                    raise ValidationError(f"task {t}: bad or repeated x_index {x}")
                if len(lab["values"]) != len(lab["probs"]):
                    raise ValidationError(f"task {t}, x {x}: values/probs length mismatch")
                per_x[x] = (lab["values"], lab["probs"])
                grids[x].update(float(v) for v in lab["values"])
            if len(per_x) != N:
                raise ValidationError(f"task {t} must give labels for all {N} domain points")
            parsed.append(per_x)
        K = max(len(g) for g in grids)
        values = np.zeros((N, K))
        probs = np.zeros((len(parsed), N, K))
        for x in range(N):
            grid = sorted(grids[x])
            values[x, :len(grid)] = grid
            pos = {v: k for k, v in enumerate(grid)}
            for t, per_x in enumerate(parsed):
                for v, p in zip(*per_x[x]):
                    probs[t, x, pos[float(v)]] += p
        return cls(domain, doc["marginal"], doc["features"], values, probs,
                   doc.get("eta", 0.1), doc.get("y_max", 1.0))


def dumps_sl_task_set(tasks):
    return json.dumps(tasks.to_dict())


def loads_sl_task_set(text):
    return SlTaskSet.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# hypothesis classes
# ---------------------------------------------------------------------------

class LinearModel:
    """``h_theta(x) = phi(x) . theta`` over a fixed feature table."""

    def __init__(self, features):
        self.features = np.asarray(features, dtype=np.float64)

    @property
    def dim(self):
        return self.features.shape[1]

    def values(self, theta):
        return self.features @ theta

    def jacobian(self, theta):
        return self.features


class NeuralModel:
    """``h_theta(x) = f(x; theta)`` for a two-layer net; ``theta`` is flattened."""

    def __init__(self, domain, net):
        self.domain = np.asarray(domain, dtype=np.float64)
        self.net = net

    @property
    def dim(self):
        return self.net.n_params

    def _w(self, theta):
        return np.reshape(theta, self.net.w.shape)

    def values(self, theta):
        return _kernels.relu_forward(self._w(theta), self.domain)

    def jacobian(self, theta):
        return _kernels.relu_features(self._w(theta), self.domain)


@dataclass(frozen=True, eq=False)
class SlHypothesis:
    """A hypothesis tabulated over the domain, with the parameters it came from."""

    values: np.ndarray
    kind: str = "table"
    params: Optional[np.ndarray] = None

    @classmethod
    def linear(cls, features, theta):
        theta = np.asarray(theta, dtype=np.float64)
        return cls(np.asarray(features) @ theta, "linear", theta)

    @classmethod
    def neural(cls, net, domain, w=None):
        w = net.w if w is None else np.reshape(w, net.w.shape)
        return cls(_kernels.relu_forward(w, np.asarray(domain, dtype=np.float64)), "neural", w)


def _values(h):
    return h.values if isinstance(h, SlHypothesis) else np.asarray(h, dtype=np.float64)


def risk(task, h):
    """``E_{x ~ rho} E[(h(x) - y)^2 | x]`` as an exact double sum."""
    hv = _values(h)
    sq = (hv[:, None] - task.label_values) ** 2
    return float(task.marginal @ np.sum(task.label_probs * sq, axis=1))


def frechet_derivative_sq(task, h):
    """Functional gradient of the squared-loss risk in ``L2(rho)``: ``2 (h - E[y|x])``."""
    return 2.0 * (_values(h) - task.cond_mean)


def rho_inner(rho, a, b):
    return float(np.sum(rho * a * b))


def _model(tasks, model):
    return LinearModel(tasks.features) if model is None else model


def risk_gradient(task, theta, model):
    delta = frechet_derivative_sq(task, model.values(theta))
    return model.jacobian(theta).T @ (task.marginal * delta)


def inner_gd_step(task, theta, eta, model):
    """``theta - eta * grad_theta R(h_theta)``; ``model`` is a feature table or a model."""
    if eta < 0:
        raise ValidationError("eta must be nonnegative")
    if not hasattr(model, "jacobian"):
        model = LinearModel(model)
    theta = np.asarray(theta, dtype=np.float64)
    return theta - eta * risk_gradient(task, theta, model)


class _SlTerms(NamedTuple):
    adapted: list   # omega_i
    values: list    # h_{omega_i} over the domain
    deltas: list    # Fréchet derivatives at h_{omega_i}
    risks: list
    grad: np.ndarray
    jac: np.ndarray  # Jacobian at theta


def kernel_apply(jac, rho, eta, v):
    """``K v = v - 2 eta E_rho[phi phi^T] v`` without forming the matrix."""
    return v - 2.0 * eta * (jac.T @ (rho * (jac @ v)))


def kernel_matrix(features, rho, eta):
    F = np.asarray(features, dtype=np.float64)
    return np.eye(F.shape[1]) - 2.0 * eta * F.T @ (rho[:, None] * F)


def _sl_terms(tasks, theta, model, eta):
    rho = tasks.marginal
    theta = np.asarray(theta, dtype=np.float64).ravel()
    jac = model.jacobian(theta)
    h = model.values(theta)
    means = tasks.cond_means
    adapted, values, deltas, risks, grads = [], [], [], [], []
    for i in range(tasks.n_tasks):
        task = tasks.task(i)
        om = theta - eta * (jac.T @ (rho * 2.0 * (h - means[i])))
        hv = model.values(om)
        d = 2.0 * (hv - means[i])
        adapted.append(om)
        values.append(hv)
        deltas.append(d)
        risks.append(risk(task, hv))
        grads.append(kernel_apply(jac, rho, eta, model.jacobian(om).T @ (rho * d)))
    return _SlTerms(adapted, values, deltas, risks, np.mean(grads, axis=0), jac)


def meta_objective_sl(tasks, theta, model=None):
    """``L(theta) = mean_i R_i(h_{theta_i})`` with ``theta_i`` the one-step adaptation."""
    return float(np.mean(_sl_terms(tasks, theta, _model(tasks, model), tasks.eta).risks))


def meta_gradient_sl(tasks, theta, model=None):
    return _sl_terms(tasks, theta, _model(tasks, model), tasks.eta).grad


def objective_and_gradient_sl(tasks, theta, model=None):
    t = _sl_terms(tasks, theta, _model(tasks, model), tasks.eta)
    return float(np.mean(t.risks)), t.grad


def run_meta_sl(tasks, theta0=None, step_sizes=1e-3, iterations=500, tol=1e-8, model=None):
    """Gradient descent on the meta-objective (mirror of :func:`run_meta_rl`)."""
    model = _model(tasks, model)
    if theta0 is None:
        theta0 = np.zeros(model.dim)
    return gradient_iterations(lambda th: objective_and_gradient_sl(tasks, th, model),
                               np.ravel(theta0), step_sizes, iterations, -1.0, tol)


def theta_star_linear(tasks):
    """Exact minimizer of the linear meta-objective (a convex quadratic in theta).

    ``theta_i = K theta + 2 eta E_rho[phi m_i]``, so ``L`` is a least-squares
    problem in ``theta``; the minimum-norm solution is returned.
    """
    rho, F, eta = tasks.marginal, tasks.features, tasks.eta
    sw = np.sqrt(rho)
    K = kernel_matrix(F, rho, eta)
    a = sw[:, None] * (F @ K)
    targets = [sw * (m - 2.0 * eta * F @ (F.T @ (rho * m))) for m in tasks.cond_means]
    theta, *_ = np.linalg.lstsq(a, np.mean(targets, axis=0), rcond=None)
    return theta


def multistart_theta_star_sl(tasks, model, n_starts=16, iterations=200, step=1.0, seed=0,
                             scale=1.0, center=None):
    """Multi-start descent surrogate for the global minimizer ("best-found optimum")."""
    starts = gaussian_starts(model.dim, n_starts, seed, scale, center)
    return multistart_ascent(lambda th: objective_and_gradient_sl(tasks, th, model),
                             lambda th: meta_objective_sl(tasks, th, model),
                             starts, iterations, step, maximize=False)


# ---------------------------------------------------------------------------
# audits
# ---------------------------------------------------------------------------

@dataclass
class SlBoundReport:
    """``rhs = term_i + term_ii * term_iii + degenerate_term + linearization_term``."""

    lhs: float
    term_i: float
    term_ii: float
    term_iii: float
    rhs: float
    holds: bool
    epsilon: float
    radius: float
    audit: str = ""
    weight_norm: float = 0.0
    degenerate_term: float = 0.0
    degenerate_points: int = 0
    linearization_term: float = 0.0
    linearization_proxy: Optional[float] = None
    stationarity: str = "unit-ball"
    theta_star_label: str = THETA_STAR_LABEL
    notes: List[str] = field(default_factory=list)


def _finish(rep):
    rep.rhs = rep.term_i + rep.term_ii * rep.term_iii + rep.degenerate_term + rep.linearization_term
    rep.holds = bool(rep.lhs <= rep.rhs + BOUND_SLACK)
    return rep


def curvature_features(tasks, hessians=None):
    """``phi_l(x, y, x') = (I - eta * Hess_l(x, y)) phi(x')`` over label-support pairs.

    ``hessians[x, k]`` is the parameter Hessian of the loss at ``(x, y_k)``;
    the squared-loss default ``2 phi(x) phi(x)^T`` does not depend on ``y``.
    Returns an array of shape ``(N, K, N, d)``.
    """
    F, eta = tasks.features, tasks.eta
    N, K = tasks.label_values.shape
    if hessians is None:
        # (I - 2 eta phi(x) phi(x)^T) phi(x') without forming d x d matrices
        inner = F @ F.T  # [x, x']
        base = F[None, :, :] - 2.0 * eta * inner[:, :, None] * F[:, None, :]
        return np.broadcast_to(base[:, None], (N, K, N, F.shape[1]))
    H = np.asarray(hessians, dtype=np.float64)
    return F[None, None] - eta * np.einsum("xkij,zj->xkzi", H, F)


def audit_theorem_4_4(tasks, omega, theta_star, radius=1.0, hessians=None):
    """Certify ``L(omega) - L(theta*) <= R eps + |w|_{M rho} inf_{|v|<=R} |u - phi_l . v|``."""
    model = LinearModel(tasks.features)
    rho, n = tasks.marginal, tasks.n_tasks
    at = _sl_terms(tasks, omega, model, tasks.eta)
    st = _sl_terms(tasks, theta_star, model, tasks.eta)
    lhs = float(np.mean(at.risks) - np.mean(st.risks))
    eps = float(np.linalg.norm(at.grad))
    deltas = np.array(at.deltas)                         # (n, N')
    diffs = np.array(at.values) - np.array(st.values)
    num = np.mean(deltas * diffs, axis=0)                # (N',)
    pbar = tasks.label_probs.mean(axis=0)                # (N, K)
    support = pbar > 0
    ratio = np.where(support[None], tasks.label_probs / np.where(support, pbar, 1.0)[None], 0.0)
    mass = rho[:, None] * pbar                           # M(x, y)
    w = np.einsum("ixk,iz->xkz", ratio, deltas) / n      # (N, K, N')
    meas = mass[:, :, None] * rho[None, None, :]
    phi_l = curvature_features(tasks, hessians)
    live = support[:, :, None] & np.ones_like(w, dtype=bool)
    valid = live & (np.abs(w) >= DEGENERATE_TOL)
    flag = live & ~valid
    num_b = np.broadcast_to(num[None, None, :], w.shape)
    u = np.where(valid, num_b / np.where(valid, w, 1.0), 0.0)
    fit = best_linear_fit(u[valid], phi_l[valid], meas[valid], radius)
    degenerate = float(np.sum(meas[flag] * (num_b[flag] - w[flag] * (phi_l[flag] @ fit.v))))
    wnorm = float(np.sqrt(np.sum(meas * w ** 2)))
    rep = SlBoundReport(lhs=lhs, term_i=radius * eps, term_ii=wnorm, term_iii=fit.residual,
                        rhs=0.0, holds=False, epsilon=eps, radius=float(radius),
                        audit="theorem_4_4", weight_norm=wnorm, degenerate_term=degenerate,
                        degenerate_points=int(flag.sum()))
    return _finish(rep)


def _avg_risk_root(risks):
    return float(np.mean(np.sqrt(np.maximum(risks, 0.0))))


def audit_corollary_a_2(tasks, omega, theta_star, radius=1.0):
    """Squared-loss specialization: ``R eps + 2 Rbar inf_{|v|<=1} |u - (K phi) . (R v)|_rho``."""
    model = LinearModel(tasks.features)
    rho = tasks.marginal
    at = _sl_terms(tasks, omega, model, tasks.eta)
    st = _sl_terms(tasks, theta_star, model, tasks.eta)
    lhs = float(np.mean(at.risks) - np.mean(st.risks))
    eps = float(np.linalg.norm(at.grad))
    deltas = np.array(at.deltas)
    num = np.mean(deltas * (np.array(at.values) - np.array(st.values)), axis=0)
    w = deltas.mean(axis=0)
    psi = tasks.features @ kernel_matrix(tasks.features, rho, tasks.eta)  # rows K phi(x)
    valid = np.abs(w) >= DEGENERATE_TOL
    u = np.where(valid, num / np.where(valid, w, 1.0), 0.0)
    fit = best_linear_fit(u[valid], psi[valid], rho[valid], radius)
    flag = ~valid
    degenerate = float(np.sum(rho[flag] * (num[flag] - w[flag] * (psi[flag] @ fit.v))))
    rep = SlBoundReport(lhs=lhs, term_i=radius * eps, term_ii=2.0 * _avg_risk_root(at.risks),
                        term_iii=fit.residual, rhs=0.0, holds=False, epsilon=eps,
                        radius=float(radius), audit="corollary_a_2",
                        weight_norm=float(np.sqrt(rho @ w ** 2)), degenerate_term=degenerate,
                        degenerate_points=int(flag.sum()))
    return _finish(rep)


class NeuralSlTerms(NamedTuple):
    u: np.ndarray
    w: np.ndarray
    valid: np.ndarray
    psi: np.ndarray        # rows K_{omega,eta} phi_{w_init}(x)
    center: np.ndarray     # fit-ball center: omega - w_init, or 0 for "unit-ball"
    rbar: float


def proxy_g(radius, eta, y_max):
    return (1.0 + eta) * radius + eta * y_max


def audit_corollary_5_3(tasks, net_omega, net_theta_star, radius, eta=None, return_terms=False,
                        stationarity="init-ball"):
    """Neural audit over ``B_0 = K (omega - B_init) + w_init`` in linearized form.

    Stationarity is ``sup_{v in B_init} grad L . (omega - v)`` by default;
    ``stationarity="unit-ball"`` uses ``sup_{|z| <= R} grad L . z`` instead and
    moves the fit ball to the origin. Either way the chain is exact except
    for the Cauchy-Schwarz step; the gap between ``phi_{omega_i}`` and
    ``phi_{w_init}`` along the fitted direction enters as
    ``linearization_term``, next to the ``G^{3/2} m^{-1/4}`` proxy.
    """
    if not isinstance(net_omega, TwoLayerNet) or not isinstance(net_theta_star, TwoLayerNet):
        raise ValidationError("audit_corollary_5_3 expects TwoLayerNet arguments")
    if not np.array_equal(net_omega.w_init, net_theta_star.w_init):
        raise ValidationError("omega and theta* networks must share the initialization")
    if stationarity not in ("init-ball", "unit-ball"):
        raise ValidationError("stationarity must be 'init-ball' or 'unit-ball'")
    eta = tasks.eta if eta is None else float(eta)
    model = NeuralModel(tasks.domain, net_omega)
    rho = tasks.marginal
    omega = net_omega.w.ravel()
    w_init = net_omega.w_init.ravel()
    at = _sl_terms(tasks, omega, model, eta)
    st = _sl_terms(tasks, net_theta_star.w.ravel(), model, eta)
    lhs = float(np.mean(at.risks) - np.mean(st.risks))
    gnorm = float(np.linalg.norm(at.grad))
    if stationarity == "init-ball":
        center = omega - w_init
    else:
        center = np.zeros_like(omega)
    eps_b = float(at.grad @ center) + radius * gnorm
    deltas = np.array(at.deltas)
    num = np.mean(deltas * (np.array(at.values) - np.array(st.values)), axis=0)
    w = deltas.mean(axis=0)
    phi0 = model.jacobian(w_init)
    jac = at.jac
    psi = phi0 - 2.0 * eta * ((phi0 @ jac.T) * rho[None, :]) @ jac
    valid = np.abs(w) >= DEGENERATE_TOL
    u = np.where(valid, num / np.where(valid, w, 1.0), 0.0)
    fit = best_linear_fit(u[valid], psi[valid], rho[valid], radius, center)
    flag = ~valid
    degenerate = float(np.sum(rho[flag] * (num[flag] - w[flag] * (psi[flag] @ fit.v))))
    kz = kernel_apply(jac, rho, eta, fit.v)
    pert = np.mean([rho @ (d * ((model.jacobian(om) - phi0) @ kz))
                    for d, om in zip(at.deltas, at.adapted)])
    m = net_omega.width
    rbar = _avg_risk_root(at.risks)
    rep = SlBoundReport(lhs=lhs, term_i=eps_b, term_ii=2.0 * rbar, term_iii=fit.residual,
                        rhs=0.0, holds=False, epsilon=gnorm, radius=float(radius),
                        audit="corollary_5_3", weight_norm=float(np.sqrt(rho @ w ** 2)),
                        degenerate_term=degenerate, degenerate_points=int(flag.sum()),
                        linearization_term=-float(pert),
                        linearization_proxy=float(proxy_g(radius, eta, tasks.y_max) ** 1.5 * m ** -0.25),
                        stationarity=stationarity)
    if net_omega.distance_from_init() > radius * (1 + 1e-12):
        rep.notes.append("omega lies outside the init ball")
    rep = _finish(rep)
    if return_terms:
        return rep, NeuralSlTerms(u, w, valid, psi, center, rbar)
    return rep
