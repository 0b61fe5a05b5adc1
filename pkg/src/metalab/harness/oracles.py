"""Independent brute-force oracles used to cross-check the closed forms."""
import numpy as np

from .._errors import NonFiniteError, ValidationError


def finite_diff_gradient(objective, point, step=1e-6):
    """Central differences, one coordinate at a time."""
    if not step > 0:
        raise ValidationError("step must be positive")
    x = np.array(point, dtype=np.float64)
    grad = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e.flat[k] = step
        hi, lo = objective(x + e), objective(x - e)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError(f"objective is non-finite near coordinate {k}")
        grad.flat[k] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def _policy_chain(mdp, pi):
    p_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    r_pi = np.einsum("sa,sa->s", pi, mdp.reward)
    return p_pi, r_pi


def truncated_values(mdp, pi, horizon):
    """``V = (1 - g) sum_{t <= horizon} g^t P_pi^t r_pi`` by repeated products."""
    p_pi, r_pi = _policy_chain(mdp, pi)
    g = mdp.discount
    v = np.zeros(mdp.n_states)
    term = r_pi.copy()
    for t in range(horizon + 1):
        v += g ** t * term
        term = p_pi @ term
    return (1.0 - g) * v


def truncated_visitation(mdp, pi, horizon, start=None):
    """``nu = (1 - g) sum_{t <= horizon} g^t (P_pi^T)^t start``."""
    p_pi, _ = _policy_chain(mdp, pi)
    g = mdp.discount
    dist = np.array(mdp.init_dist if start is None else start, dtype=np.float64)
    nu = np.zeros(mdp.n_states)
    for t in range(horizon + 1):
        nu += g ** t * dist
        dist = p_pi.T @ dist
    return (1.0 - g) * nu


def matrix_power_return(mdp, pi, horizon):
    """``J = (1 - g) sum_t g^t zeta^T P_pi^t r_pi`` via explicit matrix powers."""
    p_pi, r_pi = _policy_chain(mdp, pi)
    g = mdp.discount
    total = 0.0
    power = np.eye(mdp.n_states)
    for t in range(horizon + 1):
        total += g ** t * float(mdp.init_dist @ power @ r_pi)
        power = power @ p_pi
    return (1.0 - g) * total


def projected_gradient_fit(target, features, measure, radius, center=None, tol=1e-10,
                           max_iter=200000):
    """Projected gradient descent for the ball-constrained weighted least squares."""
    f = np.asarray(target, dtype=np.float64)
    F = np.asarray(features, dtype=np.float64)
    mu = np.asarray(measure, dtype=np.float64)
    c = np.zeros(F.shape[1]) if center is None else np.asarray(center, dtype=np.float64)
    G = F.T @ (mu[:, None] * F)
    b = F.T @ (mu * f)
    lip = max(np.linalg.eigvalsh(G).max(), 1e-12)
    v = c.copy()

    def project(z):
        dz = z - c
        nz = np.linalg.norm(dz)
        return z if nz <= radius else c + dz * (radius / nz)

    for _ in range(max_iter):
        nxt = project(v - (G @ v - b) / lip)
        if np.linalg.norm(nxt - v) * lip <= tol:
            v = nxt
            break
        v = nxt
    return v, float(np.sqrt(mu @ (f - F @ v) ** 2))


def grid_search_two_action(q_row, prior_row, eta, resolution=1e-3):
    """Maximize ``<q, p> - KL(p || prior) / eta`` over a grid of two-action policies."""
    grid = np.arange(resolution, 1.0, resolution)
    cand = np.stack([grid, 1.0 - grid], axis=1)
    kl = np.sum(cand * (np.log(cand) - np.log(prior_row)[None, :]), axis=1)
    vals = cand @ q_row - kl / eta
    return cand[int(np.argmax(vals))]
