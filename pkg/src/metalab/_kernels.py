"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import from ``METALAB_NUMBA`` (``0``/``false``/
``off`` forces numpy) and can be switched at runtime with :func:`set_backend`.
Both paths implement the same contracts; results agree to rounding but are not
bit-identical across backends.
"""
import os

import numpy as np

try:
    import numba
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False


def _env_wants_numba():
    flag = os.environ.get("METALAB_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------

def _solve_numpy(a, b):
    return np.linalg.solve(a, b)


def _softmax_rows_numpy(z):
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _relu_forward_numpy(w, x):
    # halves evaluated by identical matmuls so that paired rows cancel exactly
    half = w.shape[0] // 2
    pre_u = x @ w[:half].T
    pre_l = x @ w[half:].T
    s_u = np.maximum(pre_u, 0.0).sum(axis=1)
    s_l = np.maximum(pre_l, 0.0).sum(axis=1)
    return (s_u - s_l) / np.sqrt(w.shape[0])


def _relu_features_numpy(w, x):
    m, p = w.shape
    half = m // 2
    act = (x @ w.T) > 0.0
    sign = np.ones(m)
    sign[half:] = -1.0
    coef = act * (sign / np.sqrt(m))[None, :]
    return (coef[:, :, None] * x[:, None, :]).reshape(x.shape[0], m * p)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if NUMBA_AVAILABLE:

    @njit(cache=True)
    def _solve_numba(a, b):
        n = a.shape[0]
        k = b.shape[1]
        lu = a.copy()
        x = b.copy()
        for col in range(n):
            piv = col
            best = abs(lu[col, col])
            for r in range(col + 1, n):
                v = abs(lu[r, col])
                if v > best:
                    best = v
                    piv = r
            if best == 0.0:
                raise ZeroDivisionError("singular matrix")
            if piv != col:
                for c in range(n):
                    tmp = lu[col, c]
                    lu[col, c] = lu[piv, c]
                    lu[piv, c] = tmp
                for c in range(k):
                    tmp = x[col, c]
                    x[col, c] = x[piv, c]
                    x[piv, c] = tmp
            inv = 1.0 / lu[col, col]
            for r in range(col + 1, n):
                f = lu[r, col] * inv
                if f != 0.0:
                    for c in range(col + 1, n):
                        lu[r, c] -= f * lu[col, c]
                    for c in range(k):
                        x[r, c] -= f * x[col, c]
        for c in range(k):
            for r in range(n - 1, -1, -1):
                acc = x[r, c]
                for j in range(r + 1, n):
                    acc -= lu[r, j] * x[j, c]
                x[r, c] = acc / lu[r, r]
        return x

    @njit(cache=True)
    def _softmax_rows_numba(z):
        n, k = z.shape
        out = np.empty_like(z)
        for i in range(n):
            mx = z[i, 0]
            for j in range(1, k):
                if z[i, j] > mx:
                    mx = z[i, j]
            tot = 0.0
            for j in range(k):
                e = np.exp(z[i, j] - mx)
                out[i, j] = e
                tot += e
            for j in range(k):
                out[i, j] /= tot
        return out

    @njit(cache=True)
    def _relu_forward_numba(w, x):
        m, p = w.shape
        half = m // 2
        n = x.shape[0]
        out = np.empty(n)
        scale = 1.0 / np.sqrt(m)
        for i in range(n):
            s_u = 0.0
            s_l = 0.0
            for r in range(half):
                pre = 0.0
                for j in range(p):
                    pre += w[r, j] * x[i, j]
                if pre > 0.0:
                    s_u += pre
            for r in range(half, m):
                pre = 0.0
                for j in range(p):
                    pre += w[r, j] * x[i, j]
                if pre > 0.0:
                    s_l += pre
            out[i] = (s_u - s_l) * scale
        return out

    @njit(cache=True)
    def _relu_features_numba(w, x):
        m, p = w.shape
        half = m // 2
        n = x.shape[0]
        out = np.zeros((n, m * p))
        scale = 1.0 / np.sqrt(m)
        for i in range(n):
            for r in range(m):
                pre = 0.0
                for j in range(p):
                    pre += w[r, j] * x[i, j]
                if pre > 0.0:
                    c = scale if r < half else -scale
                    for j in range(p):
                        out[i, r * p + j] = c * x[i, j]
        return out


_IMPLS = {
    "numpy": {
        "solve": _solve_numpy,
        "softmax_rows": _softmax_rows_numpy,
        "relu_forward": _relu_forward_numpy,
        "relu_features": _relu_features_numpy,
    },
}
if NUMBA_AVAILABLE:
    _IMPLS["numba"] = {
        "solve": _solve_numba,
        "softmax_rows": _softmax_rows_numba,
        "relu_forward": _relu_forward_numba,
        "relu_features": _relu_features_numba,
    }

_active = {}
BACKEND = None


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"`` kernels for all subsequent calls."""
    global BACKEND
    if name not in _IMPLS:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(_IMPLS)}")
    _active.clear()
    _active.update(_IMPLS[name])
    BACKEND = name


def get_impl(backend, name):
    return _IMPLS[backend][name]


set_backend("numba" if (NUMBA_AVAILABLE and _env_wants_numba()) else "numpy")


def solve(a, b):
    """Solve ``a @ x = b`` for square ``a``; ``b`` may be a vector or matrix."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    vec = b.ndim == 1
    bm = np.ascontiguousarray(b.reshape(-1, 1) if vec else b)
    x = _active["solve"](a, bm)
    return x[:, 0] if vec else x


def softmax_rows(z):
    return _active["softmax_rows"](np.ascontiguousarray(z, dtype=np.float64))


def relu_forward(w, x):
    return _active["relu_forward"](np.ascontiguousarray(w, dtype=np.float64),
                                   np.ascontiguousarray(x, dtype=np.float64))


def relu_features(w, x):
    return _active["relu_features"](np.ascontiguousarray(w, dtype=np.float64),
                                    np.ascontiguousarray(x, dtype=np.float64))
