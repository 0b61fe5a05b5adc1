"""Finite discounted MDPs with exact value functions and visitation measures.

Conventions: values are (1 - gamma)-normalized, so a constant reward ``c``
yields ``V = c``; visitation measures are normalized probability distributions.
All solves are dense and direct.
"""
import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _kernels
from ._errors import ValidationError

INPUT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """A finite MDP ``(S, A, P, r, gamma, zeta)``.

    ``transition[s, a, s']`` is ``P(s' | s, a)``. ``init_dist`` must be strictly
    positive so that every visitation measure has full support.
    """

    transition: np.ndarray
    reward: np.ndarray
    discount: float
    init_dist: np.ndarray
    q_max: float = 1.0

    def __post_init__(self):
        P = np.array(self.transition, dtype=np.float64)
        r = np.array(self.reward, dtype=np.float64)
        zeta = np.array(self.init_dist, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValidationError(f"transition must have shape (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if S < 1 or A < 1:
            raise ValidationError("need at least one state and one action")
        if r.shape != (S, A):
            raise ValidationError(f"reward must have shape {(S, A)}, got {r.shape}")
        if zeta.shape != (S,):
            raise ValidationError(f"init_dist must have shape {(S,)}, got {zeta.shape}")
        if not (np.all(np.isfinite(P)) and np.all(np.isfinite(r)) and np.all(np.isfinite(zeta))):
            raise ValidationError("non-finite entries in MDP")
        if np.any(P < 0.0):
            raise ValidationError("negative transition probability")
        bad = np.abs(P.sum(axis=2) - 1.0) > INPUT_TOL
        if np.any(bad):
            s, a = np.argwhere(bad)[0]
            raise ValidationError(f"transition[{s}, {a}] sums to {P[s, a].sum()!r}, not 1")
        if abs(zeta.sum() - 1.0) > INPUT_TOL:
            raise ValidationError(f"init_dist sums to {zeta.sum()!r}, not 1")
        if np.any(zeta <= 0.0):
            raise ValidationError("init_dist must be strictly positive")
        gamma = float(self.discount)
        if not 0.0 < gamma < 1.0:
            raise ValidationError(f"discount must lie in (0, 1), got {gamma}")
        if not self.q_max > 0:
            raise ValidationError("q_max must be positive")
        if np.max(np.abs(r)) > self.q_max + INPUT_TOL:
            raise ValidationError(f"|reward| exceeds q_max={self.q_max}")
        for arr in (P, r, zeta):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "init_dist", zeta)
        object.__setattr__(self, "discount", gamma)
        object.__setattr__(self, "q_max", float(self.q_max))

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1]

    def with_discount(self, gamma):
        return TabularMdp(self.transition, self.reward, gamma, self.init_dist, self.q_max)

    def to_dict(self):
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "discount": self.discount,
            "init_dist": self.init_dist.tolist(),
            "reward": self.reward.tolist(),
            "transition": self.transition.tolist(),
            "q_max": self.q_max,
        }

    @classmethod
    def from_dict(cls, doc):
        known = {"n_states", "n_actions", "discount", "init_dist", "reward", "transition", "q_max"}
        extra = set(doc) - known
        if extra:
            raise ValidationError(f"unknown MDP keys: {sorted(extra)}")
        mdp = cls(
            transition=np.asarray(doc["transition"], dtype=np.float64),
            reward=np.asarray(doc["reward"], dtype=np.float64),
            discount=doc["discount"],
            init_dist=np.asarray(doc["init_dist"], dtype=np.float64),
            q_max=doc.get("q_max", 1.0),
        )
        if (mdp.n_states, mdp.n_actions) != (doc["n_states"], doc["n_actions"]):
            raise ValidationError("declared n_states/n_actions disagree with array shapes")
        return mdp


def dumps_mdp(mdp):
    return json.dumps(mdp.to_dict())


def loads_mdp(text):
    return TabularMdp.from_dict(json.loads(text))


class ValueBundle(NamedTuple):
    v: np.ndarray
    q: np.ndarray
    adv: np.ndarray


class VisitationBundle(NamedTuple):
    nu: np.ndarray
    sigma: np.ndarray
    # sigma_init[s, a, s2, a2]: visitation of (s2, a2) when s0 ~ P(. | s, a)
    sigma_init: np.ndarray


def check_policy(mdp, policy, strict_positive=True):
    pi = np.asarray(policy, dtype=np.float64)
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise ValidationError(
            f"policy shape {pi.shape} does not match MDP {(mdp.n_states, mdp.n_actions)}")
    if np.any(np.abs(pi.sum(axis=1) - 1.0) > INPUT_TOL):
        raise ValidationError("policy rows must sum to 1")
    if np.any(pi < 0.0) or (strict_positive and np.any(pi <= 0.0)):
        raise ValidationError("policy must have full support")
    return pi


def _policy_matrices(mdp, pi):
    P_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    r_pi = np.einsum("sa,sa->s", pi, mdp.reward)
    return P_pi, r_pi


def value_functions(mdp, policy):
    """Exact ``V``, ``Q`` and advantage of ``policy`` on ``mdp``."""
    pi = check_policy(mdp, policy, strict_positive=False)
    g = mdp.discount
    P_pi, r_pi = _policy_matrices(mdp, pi)
    v = _kernels.solve(np.eye(mdp.n_states) - g * P_pi, (1.0 - g) * r_pi)
    q = (1.0 - g) * mdp.reward + g * (mdp.transition @ v)
    return ValueBundle(v=v, q=q, adv=q - v[:, None])


def _state_visitation(mdp, pi, starts):
    """Solve ``(I - g P_pi^T) nu = (1 - g) start`` for each column of ``starts``."""
    g = mdp.discount
    P_pi, _ = _policy_matrices(mdp, pi)
    return _kernels.solve(np.eye(mdp.n_states) - g * P_pi.T, (1.0 - g) * starts)


def visitation(mdp, policy):
    """State measure ``nu`` and state-action measure ``sigma = pi * nu``."""
    pi = check_policy(mdp, policy, strict_positive=False)
    nu = _state_visitation(mdp, pi, mdp.init_dist)
    return nu, pi * nu[:, None]


def init_visitation(mdp, policy, s, a):
    """State-action visitation of ``policy`` started from ``s0 ~ P(. | s, a)``."""
    pi = check_policy(mdp, policy, strict_positive=False)
    if not (0 <= s < mdp.n_states and 0 <= a < mdp.n_actions):
        raise ValidationError(f"(s, a) = {(s, a)} out of range")
    nu = _state_visitation(mdp, pi, mdp.transition[s, a])
    return pi * nu[:, None]


def init_visitation_all(mdp, policy):
    """All restarted measures at once, indexed ``[s, a, s2, a2]``."""
    pi = check_policy(mdp, policy, strict_positive=False)
    S, A = pi.shape
    starts = mdp.transition.reshape(S * A, S).T
    nu = _state_visitation(mdp, pi, starts)  # (S2, S*A)
    return (nu.T.reshape(S, A, S, 1) * pi[None, None, :, :])


def visitation_bundle(mdp, policy):
    nu, sigma = visitation(mdp, policy)
    return VisitationBundle(nu=nu, sigma=sigma, sigma_init=init_visitation_all(mdp, policy))


def expected_total_reward(mdp, policy):
    """``J(pi) = E_sigma[r]``; equals ``E_zeta[V]`` (checked in tests)."""
    _, sigma = visitation(mdp, policy)
    return float(np.sum(sigma * mdp.reward))


def expected_total_reward_from_values(mdp, policy):
    return float(mdp.init_dist @ value_functions(mdp, policy).v)
