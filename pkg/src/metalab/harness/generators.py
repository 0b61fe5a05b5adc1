"""Seeded task-family generators: a base instance plus per-task delta-perturbations."""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .._errors import ValidationError
from ..meta_rl import MetaRlTaskSet, NeuralFeatureMap
from ..meta_sl import SlTaskSet
from ..policy import FeatureMap
from ..tabular_mdp import TabularMdp


@dataclass(frozen=True)
class RlFamilySpec:
    n_states: int = 6
    n_actions: int = 3
    n_tasks: int = 4
    d: int = 8
    gamma: float = 0.9
    gamma_spread: float = 0.0
    delta: float = 0.1
    eps_mix: float = 0.05
    q_max: float = 1.0
    tau: float = 1.0
    eta: float = 0.1
    width: Optional[int] = None  # set for a neural energy of this width

    def validate(self):
        for name in ("n_states", "n_actions", "n_tasks", "d"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if not 0.0 < self.eps_mix < 1.0:
            raise ValidationError("eps_mix must lie in (0, 1)")
        if self.delta < 0:
            raise ValidationError("delta must be nonnegative")
        lo, hi = self.gamma - self.gamma_spread, self.gamma + self.gamma_spread
        if not (0.0 < lo and hi < 1.0):
            raise ValidationError("gamma +/- gamma_spread must stay inside (0, 1)")


def _mix(rows, eps):
    """Renormalize rows, then mix with the uniform distribution at rate ``eps``."""
    rows = rows / rows.sum(axis=-1, keepdims=True)
    k = rows.shape[-1]
    out = (1.0 - eps) * rows + eps / k
    return out / out.sum(axis=-1, keepdims=True)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_mdp_family(spec, seed):
    """Base MDP with Dirichlet rows and uniform rewards; ``n`` perturbed copies."""
    spec.validate()
    rng = np.random.default_rng(seed)
    S, A, Q = spec.n_states, spec.n_actions, spec.q_max
    base_p = _mix(rng.dirichlet(np.ones(S), size=(S, A)), spec.eps_mix)
    base_r = rng.uniform(-Q, Q, size=(S, A))
    zeta = _mix(rng.dirichlet(np.ones(S)), spec.eps_mix)
    table = unit_rows(rng, S * A, spec.d)
    tasks = []
    for _ in range(spec.n_tasks):
        p = _mix(base_p + spec.delta * rng.uniform(size=base_p.shape), spec.eps_mix)
        r = np.clip(base_r + spec.delta * Q * rng.normal(size=base_r.shape), -Q, Q)
        g = spec.gamma + spec.gamma_spread * rng.uniform(-1.0, 1.0)
        tasks.append(TabularMdp(p, r, g, zeta, Q))
    if spec.width is not None:
        feats = NeuralFeatureMap(table, spec.width, S, A)
    else:
        feats = FeatureMap(table, S, A)
    return MetaRlTaskSet(tasks, feats, spec.tau, spec.eta, Q)


@dataclass(frozen=True)
class SlFamilySpec:
    n_points: int = 20
    d: int = 8
    n_tasks: int = 4
    n_labels: int = 5
    y_max: float = 1.0
    delta: float = 0.1
    label_noise: float = 0.2
    eta: float = 0.1

    def validate(self):
        for name in ("n_points", "d", "n_tasks"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if self.n_labels < 2:
            raise ValidationError("need at least two label values")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValidationError("label_noise must lie in [0, 1)")
        if not self.y_max > 0 or self.delta < 0:
            raise ValidationError("y_max must be positive and delta nonnegative")


def _interp_probs(grid, t):
    """Two-point distribution on ``grid`` with mean ``t`` (grid sorted, t inside)."""
    p = np.zeros(grid.size)
    k = int(np.clip(np.searchsorted(grid, t, side="right") - 1, 0, grid.size - 2))
    lam = (t - grid[k]) / (grid[k + 1] - grid[k])
    p[k] = 1.0 - lam
    p[k + 1] = lam
    return p


def generate_sl_family(spec, seed):
    """Shared domain/marginal; per-task conditional means ``base + delta`` noise.

    Labels live on a symmetric grid in ``[-y_max, y_max]``. Each conditional
    law mixes a two-point law with the uniform law on the grid (weight
    ``label_noise``); since the uniform law has mean 0, the two-point part is
    chosen so that the conditional mean equals the target exactly.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    N, Y, kappa = spec.n_points, spec.y_max, spec.label_noise
    domain = unit_rows(rng, N, spec.d) * rng.uniform(0.5, 1.0, size=(N, 1))
    rho = np.full(N, 1.0 / N)
    base = domain @ rng.normal(size=spec.d) * (0.5 * Y)
    grid = np.linspace(-Y, Y, spec.n_labels)
    cap = (1.0 - kappa) * Y
    probs = np.empty((spec.n_tasks, N, spec.n_labels))
    for i in range(spec.n_tasks):
        means = np.clip(base + spec.delta * Y * rng.uniform(-1.0, 1.0, size=N), -cap, cap)
        for x in range(N):
            two = _interp_probs(grid, means[x] / (1.0 - kappa))
            probs[i, x] = (1.0 - kappa) * two + kappa / spec.n_labels
    probs /= probs.sum(axis=2, keepdims=True)
    return SlTaskSet(domain, rho, domain.copy(), np.tile(grid, (N, 1)), probs, spec.eta, Y)
