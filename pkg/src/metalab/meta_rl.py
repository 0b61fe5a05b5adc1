"""Meta-RL with a KL-proximal inner step: objective, exact meta-gradient, ascent loop.

Each subtask adapts the shared main-effect policy ``pi_theta`` by one closed-form
proximal step, ``pi_i ∝ exp(energy / tau + eta * Q_i^{pi_theta})``, and the
meta-objective is the average post-adaptation return.

Both gradient forms carry the factor ``kappa_i = 1 / (1 - gamma_i)`` that the
normalized value convention requires (the policy-gradient theorem reads
``grad J = kappa * E_sigma[grad log pi * A]`` when ``J = E_zeta[V]`` with
``V`` normalized by ``1 - gamma``).
"""
import json
from dataclasses import dataclass, field
from typing import List, NamedTuple, Sequence, Union

import numpy as np

from . import _kernels
from ._errors import NonFiniteError, ValidationError
from .neural_net import output_signs
from .policy import FeatureMap, check_temperature
from .tabular_mdp import (TabularMdp, init_visitation_all, value_functions,
                          visitation)


class NeuralFeatureMap:
    """Energy ``f((s, a); theta)`` of a width-``m`` two-layer ReLU net.

    ``inputs`` holds one embedding per state-action pair (row-major, norm <= 1);
    ``theta`` is the flattened ``(m, p)`` first-layer weight matrix. The
    Jacobian returned by :meth:`evaluate` is the feature table ``phi_theta``,
    i.e. the almost-everywhere gradient of the energy.
    """

    def __init__(self, inputs, width, n_states, n_actions):
        inputs = np.array(inputs, dtype=np.float64)
        if inputs.ndim != 2 or inputs.shape[0] != n_states * n_actions:
            raise ValidationError(
                f"inputs must have shape ({n_states * n_actions}, p), got {inputs.shape}")
        if np.any(np.linalg.norm(inputs, axis=1) > 1.0 + 1e-12):
            raise ValidationError("state-action embeddings must have norm <= 1")
        if width < 2 or width % 2:
            raise ValidationError(f"width must be even and >= 2, got {width}")
        inputs.setflags(write=False)
        self.inputs = inputs
        self.width = int(width)
        self.n_states = n_states
        self.n_actions = n_actions

    @property
    def input_dim(self):
        return self.inputs.shape[1]

    @property
    def dim(self):
        return self.width * self.input_dim

    @property
    def b(self):
        return output_signs(self.width)

    def evaluate(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.dim:
            raise ValidationError(f"theta must have {self.dim} entries, got {theta.size}")
        w = theta.reshape(self.width, self.input_dim)
        energy = _kernels.relu_forward(w, self.inputs)
        jac = _kernels.relu_features(w, self.inputs)
        return energy.reshape(self.n_states, self.n_actions), jac


@dataclass(frozen=True, eq=False)
class MetaRlTaskSet:
    tasks: Sequence[TabularMdp]
    features: Union[FeatureMap, NeuralFeatureMap]
    temperature: float = 1.0
    eta: float = 0.1
    q_max: float = 1.0

    def __post_init__(self):
        tasks = tuple(self.tasks)
        if not tasks:
            raise ValidationError("need at least one task")
        S, A = tasks[0].n_states, tasks[0].n_actions
        for i, t in enumerate(tasks):
            if (t.n_states, t.n_actions) != (S, A):
                raise ValidationError(f"task {i} has shape {(t.n_states, t.n_actions)}, expected {(S, A)}")
            if np.max(np.abs(t.reward)) > self.q_max + 1e-12:
                raise ValidationError(f"task {i} rewards exceed q_max={self.q_max}")
        if (self.features.n_states, self.features.n_actions) != (S, A):
            raise ValidationError("feature map does not match task state/action counts")
        check_temperature(self.temperature)
        if self.eta < 0:
            raise ValidationError("eta must be nonnegative")
        object.__setattr__(self, "tasks", tasks)

    @property
    def n_tasks(self):
        return len(self.tasks)

    @property
    def n_states(self):
        return self.tasks[0].n_states

    @property
    def n_actions(self):
        return self.tasks[0].n_actions

    @property
    def dim(self):
        return self.features.dim

    def replace(self, **changes):
        kw = dict(tasks=self.tasks, features=self.features, temperature=self.temperature,
                  eta=self.eta, q_max=self.q_max)
        kw.update(changes)
        return MetaRlTaskSet(**kw)

    def to_dict(self):
        doc = {
            "tasks": [t.to_dict() for t in self.tasks],
            "temperature": self.temperature,
            "eta": self.eta,
            "q_max": self.q_max,
        }
        if isinstance(self.features, NeuralFeatureMap):
            doc["features"] = self.features.inputs.tolist()
            doc["width"] = self.features.width
        else:
            doc["features"] = self.features.to_list()
        return doc

    @classmethod
    def from_dict(cls, doc):
        known = {"tasks", "features", "temperature", "eta", "q_max", "width"}
        extra = set(doc) - known
        if extra:
            raise ValidationError(f"unknown task-set keys: {sorted(extra)}")
        tasks = [TabularMdp.from_dict(t) for t in doc["tasks"]]
        if not tasks:
            raise ValidationError("task set has no tasks")
        S, A = tasks[0].n_states, tasks[0].n_actions
        if "width" in doc:
            feats = NeuralFeatureMap(doc["features"], doc["width"], S, A)
        else:
            feats = FeatureMap(doc["features"], S, A)
        return cls(tasks, feats, doc.get("temperature", 1.0), doc.get("eta", 0.1),
                   doc.get("q_max", 1.0))


def dumps_task_set(tasks):
    return json.dumps(tasks.to_dict())


def loads_task_set(text):
    return MetaRlTaskSet.from_dict(json.loads(text))


class TaskSolve(NamedTuple):
    """Exact per-task quantities at one main-effect parameter."""

    kappa: float        # 1 / (1 - gamma_i)
    pi: np.ndarray      # main effect pi_theta
    adv_main: np.ndarray  # A_i^{pi_theta}
    q_main: np.ndarray
    adapted: np.ndarray   # pi_{i,theta}
    adv_adapted: np.ndarray  # A_i^{pi_{i,theta}}
    sigma_adapted: np.ndarray  # sigma_{pi_{i,theta}}
    sigma_init: np.ndarray     # sigma^{(s,a)}_{i,pi_theta}[s, a, s2, a2]
    ret: float                 # J_i(pi_{i,theta})


def solve_task(mdp, energy, temperature, eta, need_init=True):
    logits = energy / temperature
    pi = _kernels.softmax_rows(logits)
    main = value_functions(mdp, pi)
    adapted = _kernels.softmax_rows(logits + eta * main.q)
    vals = value_functions(mdp, adapted)
    _, sigma = visitation(mdp, adapted)
    sig_init = init_visitation_all(mdp, pi) if need_init else None
    return TaskSolve(
        kappa=1.0 / (1.0 - mdp.discount),
        pi=pi,
        adv_main=main.adv,
        q_main=main.q,
        adapted=adapted,
        adv_adapted=vals.adv,
        sigma_adapted=sigma,
        sigma_init=sig_init,
        ret=float(np.sum(sigma * mdp.reward)),
    )


def solve_all(tasks, theta, need_init=True):
    energy, jac = tasks.features.evaluate(theta)
    solves = [solve_task(t, energy, tasks.temperature, tasks.eta, need_init) for t in tasks.tasks]
    return solves, energy, jac


def meta_objective(tasks, theta):
    """``L(theta) = mean_i J_i(pi_{i,theta})``."""
    solves, _, _ = solve_all(tasks, theta, need_init=False)
    return float(np.mean([ts.ret for ts in solves]))


def _direct_task_gradient(ts, jac, gamma, tau, eta):
    S, A = ts.pi.shape
    SA = S * A
    # inner[s, a] = sum_{s2, a2} sigma^{(s,a)}(s2, a2) A^{pi_theta}(s2, a2) phi(s2, a2)
    inner = ts.sigma_init.reshape(SA, SA) @ (ts.adv_main.reshape(SA, 1) * jac)
    h = jac / tau + (eta * gamma * ts.kappa / tau) * inner
    weight = (ts.sigma_adapted * ts.adv_adapted).reshape(SA)
    return ts.kappa * (weight @ h)


def meta_gradient_direct(tasks, theta):
    """Exact meta-gradient as an expectation over the adapted policies' visitations."""
    solves, _, jac = solve_all(tasks, theta)
    grads = [_direct_task_gradient(ts, jac, t.discount, tasks.temperature, tasks.eta)
             for ts, t in zip(solves, tasks.tasks)]
    return np.mean(grads, axis=0)


def objective_and_gradient(tasks, theta):
    solves, _, jac = solve_all(tasks, theta)
    grads = [_direct_task_gradient(ts, jac, t.discount, tasks.temperature, tasks.eta)
             for ts, t in zip(solves, tasks.tasks)]
    return float(np.mean([ts.ret for ts in solves])), np.mean(grads, axis=0)


class RefinedTerms(NamedTuple):
    joint: np.ndarray     # rho[s2, a2, s, a]
    marginal: np.ndarray  # varsigma[s2, a2]
    cond_adv: np.ndarray  # G[s2, a2]: E_rho[A^{pi_{i,theta}}(s, a) | s2, a2]
    g: np.ndarray         # g[s2, a2], the scalar weight of phi(s2, a2)


def refined_terms(ts, gamma, tau, eta):
    S, A = ts.pi.shape
    joint = np.transpose(ts.sigma_init, (2, 3, 0, 1)) * ts.sigma_adapted[None, None, :, :]
    marginal = joint.sum(axis=(2, 3))
    bad = marginal <= 0.0
    if np.any(bad):
        s, a = np.argwhere(bad)[0]
        raise ValidationError(f"meta-visitation measure has zero mass at (s', a') = ({s}, {a})")
    cond_adv = np.einsum("ijsa,sa->ij", joint, ts.adv_adapted) / marginal
    g = ts.kappa * (ts.adv_adapted * ts.sigma_adapted / marginal / tau
                    + (eta * gamma * ts.kappa / tau) * cond_adv * ts.adv_main)
    return RefinedTerms(joint, marginal, cond_adv, g)


def meta_gradient_refined(tasks, theta):
    """Same gradient written as ``mean_i E_{varsigma_i}[g_i * phi]``."""
    solves, _, jac = solve_all(tasks, theta)
    grads = []
    for ts, t in zip(solves, tasks.tasks):
        rt = refined_terms(ts, t.discount, tasks.temperature, tasks.eta)
        grads.append((rt.marginal * rt.g).reshape(-1) @ jac)
    return np.mean(grads, axis=0)


@dataclass
class MetaRlState:
    theta: np.ndarray
    iteration: int = 0
    objective_history: List[float] = field(default_factory=list)
    grad_norm_history: List[float] = field(default_factory=list)
    converged: bool = False
    max_distance: float = 0.0  # largest |theta_l - theta_0| along the trajectory

    @property
    def epsilon(self):
        """Gradient norm at the returned iterate (the stationarity level)."""
        return self.grad_norm_history[-1]


def _step_schedule(step_sizes):
    if callable(step_sizes):
        return step_sizes
    if np.isscalar(step_sizes):
        alpha = float(step_sizes)
        return lambda ell: alpha
    seq = list(step_sizes)
    return lambda ell: seq[min(ell, len(seq) - 1)]


def _check_finite(value, grad, ell):
    if not (np.isfinite(value) and np.all(np.isfinite(grad))):
        raise NonFiniteError(f"non-finite objective/gradient at iteration {ell}: L={value}, "
                             f"|grad| has {np.count_nonzero(~np.isfinite(grad))} bad entries")


def gradient_iterations(oracle, theta0, step_sizes, iterations, sign, tol):
    """Shared loop: ``theta <- theta + sign * alpha_l * grad``; records L and |grad|."""
    if iterations < 1:
        raise ValidationError("iterations must be >= 1")
    alpha = _step_schedule(step_sizes)
    theta = np.array(theta0, dtype=np.float64)
    start = theta.copy()
    state = MetaRlState(theta=theta)
    for ell in range(iterations):
        value, grad = oracle(theta)
        _check_finite(value, grad, ell)
        gnorm = float(np.linalg.norm(grad))
        state.objective_history.append(value)
        state.grad_norm_history.append(gnorm)
        if gnorm < tol:
            state.converged = True
            state.theta = theta
            state.iteration = ell
            return state
        a = alpha(ell)
        if not a > 0:
            raise ValidationError(f"step size must be positive, got {a} at iteration {ell}")
        theta = theta + sign * a * grad
        state.max_distance = max(state.max_distance, float(np.linalg.norm(theta - start)))
    value, grad = oracle(theta)
    _check_finite(value, grad, iterations)
    state.objective_history.append(value)
    state.grad_norm_history.append(float(np.linalg.norm(grad)))
    state.theta = theta
    state.iteration = iterations
    return state


def run_meta_rl(tasks, theta0=None, step_sizes=1e-3, iterations=500, tol=1e-8):
    """Gradient ascent on the meta-objective; stops early once ``|grad| < tol``."""
    if theta0 is None:
        theta0 = np.zeros(tasks.dim)
    return gradient_iterations(lambda th: objective_and_gradient(tasks, th),
                               theta0, step_sizes, iterations, +1.0, tol)
