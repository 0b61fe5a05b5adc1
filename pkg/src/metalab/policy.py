"""Energy-based softmax policies and the closed-form KL-proximal inner step."""
from typing import NamedTuple

import numpy as np

from . import _kernels
from ._errors import ValidationError

NORM_TOL = 1e-12


class FeatureMap:
    """Precomputed features ``phi(s, a)`` stored row-major as an ``(S*A, d)`` table."""

    def __init__(self, table, n_states, n_actions):
        table = np.array(table, dtype=np.float64)
        if table.ndim != 2 or table.shape[0] != n_states * n_actions:
            raise ValidationError(
                f"feature table must have shape ({n_states * n_actions}, d), got {table.shape}")
        if not np.all(np.isfinite(table)):
            raise ValidationError("non-finite feature entries")
        norms = np.linalg.norm(table, axis=1)
        if np.any(norms > 1.0 + NORM_TOL):
            raise ValidationError(f"feature norms must be <= 1 (max {norms.max():.6g})")
        table.setflags(write=False)
        self.table = table
        self.n_states = n_states
        self.n_actions = n_actions

    @property
    def dim(self):
        return self.table.shape[1]

    def evaluate(self, theta):
        """Return ``(energy[S, A], jacobian[S*A, d])`` at ``theta``."""
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise ValidationError(f"theta must have shape ({self.dim},), got {theta.shape}")
        energy = (self.table @ theta).reshape(self.n_states, self.n_actions)
        return energy, self.table

    def to_list(self):
        return self.table.tolist()


def check_temperature(temperature):
    if not temperature > 0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    return float(temperature)


def softmax_policy(energy, temperature=1.0):
    """Row-wise ``softmax(energy / temperature)``."""
    tau = check_temperature(temperature)
    energy = np.asarray(energy, dtype=np.float64)
    if energy.ndim != 2 or not np.all(np.isfinite(energy)):
        raise ValidationError("energy must be a finite (S, A) matrix")
    return _kernels.softmax_rows(energy / tau)


class AdaptedPolicy(NamedTuple):
    probs: np.ndarray
    logits: np.ndarray


def ppo_inner_step(energy, q, eta, temperature=1.0):
    """Maximizer of the KL-proximal objective: logits ``energy / tau + eta * q``.

    ``energy`` is the main-effect energy table, so ``softmax(energy / tau)`` is the
    prior policy. The maximizer is per-state and does not depend on the state
    weighting used in :func:`ppo_objective`.
    """
    tau = check_temperature(temperature)
    if eta < 0:
        raise ValidationError(f"eta must be nonnegative, got {eta}")
    energy = np.asarray(energy, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if energy.shape != q.shape:
        raise ValidationError(f"energy {energy.shape} and q {q.shape} shapes differ")
    logits = energy / tau + eta * q
    return AdaptedPolicy(probs=_kernels.softmax_rows(logits), logits=logits)


def kl_rows(p, q):
    """Per-row ``KL(p || q)``; both arguments must have full support."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if np.any(p <= 0.0) or np.any(q <= 0.0):
        idx = np.argwhere((p <= 0.0) | (q <= 0.0))[0]
        raise ValidationError(f"zero probability at (s, a) = {tuple(int(i) for i in idx)}: KL is infinite")
    return np.sum(p * (np.log(p) - np.log(q)), axis=1)


def ppo_objective(candidate, main_effect, q, eta, nu):
    """``sum_s nu(s) [<q(s, .), pi(.|s)> - KL(pi(.|s) || pi_theta(.|s)) / eta]``."""
    if not eta > 0:
        raise ValidationError(f"eta must be positive, got {eta}")
    candidate = np.asarray(candidate, dtype=np.float64)
    main_effect = np.asarray(main_effect, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    if not (candidate.shape == main_effect.shape == q.shape) or nu.shape != (q.shape[0],):
        raise ValidationError("dimension mismatch in ppo_objective")
    per_state = np.sum(q * candidate, axis=1) - kl_rows(candidate, main_effect) / eta
    return float(nu @ per_state)
