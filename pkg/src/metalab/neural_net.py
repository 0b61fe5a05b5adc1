"""Two-layer ReLU networks with symmetric initialization.

``f(x; W) = m^{-1/2} sum_r b_r relu(w_r . x)`` with ``b_r = +1`` on the first
half of the neurons and ``-1`` on the second. The symmetric initialization
duplicates the first-half weights into the second half, so ``f(x; W_init) = 0``
exactly: both halves are evaluated by identical code on identical numbers.
The second layer ``b`` is fixed; parameters are the ``(m, d)`` matrix ``W``.
"""
import json
import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels
from ._errors import ValidationError


def output_signs(m):
    b = np.ones(m)
    b[m // 2:] = -1.0
    return b


@dataclass(frozen=True, eq=False)
class TwoLayerNet:
    w: np.ndarray
    w_init: np.ndarray

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64)
        w0 = np.array(self.w_init, dtype=np.float64)
        if w.ndim != 2 or w.shape != w0.shape:
            raise ValidationError(f"w {w.shape} and w_init {w0.shape} must be equal (m, d) arrays")
        m = w.shape[0]
        if m < 2 or m % 2:
            raise ValidationError(f"width must be even and >= 2, got {m}")
        if not np.array_equal(w0[: m // 2], w0[m // 2:]):
            raise ValidationError("w_init is not symmetric: first and second halves differ")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(w0))):
            raise ValidationError("non-finite weights")
        w.setflags(write=False)
        w0.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "w_init", w0)

    @property
    def width(self):
        return self.w.shape[0]

    @property
    def input_dim(self):
        return self.w.shape[1]

    @property
    def b(self):
        return output_signs(self.width)

    @property
    def n_params(self):
        return self.w.size

    def with_weights(self, w):
        """Same initialization, new current weights (flat or ``(m, d)``)."""
        return TwoLayerNet(np.reshape(w, self.w.shape), self.w_init)

    def distance_from_init(self):
        return float(np.linalg.norm(self.w - self.w_init))

    def to_dict(self):
        return {"b": self.b.tolist(), "w": self.w.tolist(), "w_init": self.w_init.tolist()}

    @classmethod
    def from_dict(cls, doc):
        if set(doc) == {"m", "d", "seed"}:
            return init_symmetric(doc["m"], doc["d"], doc["seed"])
        if set(doc) != {"b", "w", "w_init"}:
            raise ValidationError(f"unrecognized network document keys: {sorted(doc)}")
        net = cls(np.asarray(doc["w"], dtype=np.float64), np.asarray(doc["w_init"], dtype=np.float64))
        if not np.array_equal(np.asarray(doc["b"], dtype=np.float64), net.b):
            raise ValidationError("b must be +1 on the first half and -1 on the second")
        return net


def init_symmetric(m, d, seed):
    """Paired Gaussian init: ``[W]_r = [W]_{r + m/2} ~ N(0, I_d / d)``."""
    if m < 2 or m % 2:
        raise ValidationError(f"width must be even and >= 2, got {m}")
    if d < 1:
        raise ValidationError("input dimension must be positive")
    rng = np.random.default_rng(seed)
    half = rng.normal(scale=1.0 / np.sqrt(d), size=(m // 2, d))
    w0 = np.vstack([half, half])
    return TwoLayerNet(w0.copy(), w0)


def _as_inputs(net, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x.reshape(1, -1) if single else x
    if x2.shape[1] != net.input_dim:
        raise ValidationError(f"inputs must have {net.input_dim} columns, got {x2.shape[1]}")
    return x2, single


def forward(net, x, w=None):
    """``f(x; W)`` for one input or a batch of rows; ``w`` overrides the net's weights."""
    x2, single = _as_inputs(net, x)
    w = net.w if w is None else np.reshape(w, net.w.shape)
    out = _kernels.relu_forward(w, x2)
    return float(out[0]) if single else out


def feature(net, x, w=None):
    """Feature map ``phi_W(x)`` flattened to length ``m * d`` (one row per input).

    Block ``r`` is ``b_r / sqrt(m) * x * 1{w_r . x > 0}``; the strict inequality
    puts the subgradient at the kink to zero.
    """
    x2, single = _as_inputs(net, x)
    w = net.w if w is None else np.reshape(w, net.w.shape)
    out = _kernels.relu_features(w, x2)
    return out[0] if single else out


def linearization_error(net, inputs, measure, omega0, omega1, omega2, radius=None):
    """``|| phi_{w0}(x) . w2 - phi_{w1}(x) . w2 ||^2`` in ``L2(measure)`` over the inputs.

    If ``radius`` is given, parameters farther than ``radius`` from ``w_init``
    trigger a warning; the value is still computed.
    """
    measure = np.asarray(measure, dtype=np.float64)
    x2, _ = _as_inputs(net, inputs)
    if measure.shape != (x2.shape[0],):
        raise ValidationError("measure must have one weight per input")
    if radius is not None:
        for name, om in (("omega0", omega0), ("omega1", omega1), ("omega2", omega2)):
            dist = np.linalg.norm(np.reshape(om, net.w.shape) - net.w_init)
            if dist > radius * (1 + 1e-12):
                warnings.warn(f"{name} lies {dist:.4g} from w_init, outside radius {radius}")
    w2 = np.ravel(omega2)
    diff = feature(net, x2, omega0) @ w2 - feature(net, x2, omega1) @ w2
    return float(measure @ diff ** 2)


def boundary_flip_perturbation(net, inputs, measure, radius):
    """Worst-case-seeking parameters for probing the linearization error.

    At the heaviest input ``x*``, neurons are sorted by ``|w_r . x*|`` and
    reflected (``w_r -> w_r - 2 (w_r . x*) x* / |x*|^2``) in that order while
    the total displacement stays within ``radius``; this flips as many
    activations at ``x*`` as the budget allows. ``omega2`` then spends the
    same budget coherently on the flipped neurons so their contributions add
    up. Returns ``(omega0, omega1, omega2)`` with ``omega1 = w_init``.
    """
    x2, _ = _as_inputs(net, inputs)
    measure = np.asarray(measure, dtype=np.float64)
    x = x2[int(np.argmax(measure))]
    xx = float(x @ x)
    if xx == 0.0:
        raise ValidationError("heaviest input is zero; no activation can be flipped")
    w0 = net.w_init
    pre = w0 @ x
    order = np.argsort(np.abs(pre), kind="stable")
    cost = 4.0 * pre[order] ** 2 / xx  # squared length of each reflection
    k = int(np.searchsorted(np.cumsum(cost), radius ** 2, side="right"))
    chosen = order[:k]
    delta = np.zeros_like(w0)
    delta[chosen] = -2.0 * np.outer(pre[chosen], x) / xx
    omega2 = w0.copy()
    if k:
        # +1 where the neuron turns on after the flip, -1 where it turns off
        flip = np.where(pre[chosen] <= 0.0, 1.0, -1.0)
        coef = net.b[chosen] * flip * radius / np.sqrt(k)
        omega2[chosen] += coef[:, None] * x[None, :] / np.sqrt(xx)
    return w0 + delta, w0.copy(), omega2


def dumps_net(net):
    return json.dumps(net.to_dict())


def loads_net(text):
    return TwoLayerNet.from_dict(json.loads(text))
