"""Strictly parsed experiment configuration (unknown keys are errors)."""
import json
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Union

from .._errors import ValidationError
from .generators import RlFamilySpec, SlFamilySpec

MODES = ("train-rl", "train-sl", "audit-rl", "audit-sl", "nn-linerr", "gradcheck")


@dataclass
class ExperimentConfig:
    mode: Optional[str] = None
    seed: int = 0
    # instance sizes
    n_states: int = 6
    n_actions: int = 3
    n_tasks: int = 4
    d: int = 8
    m: int = 256
    n_points: int = 20
    n_labels: int = 5
    # hyperparameters
    tau: float = 1.0
    eta: float = 0.1
    alpha: Union[float, List[float]] = 1e-3  # constant, or one step size per iteration
    T: int = 500
    radius: float = 1.0
    init_scale: float = 0.0  # > 0: Gaussian theta_0 of this scale for linear models
    eps_mix: float = 0.05
    delta: float = 0.1
    gamma: float = 0.9
    gamma_spread: float = 0.0
    q_max: float = 1.0
    y_max: float = 1.0
    label_noise: float = 0.2
    # audits and sweeps
    neural: bool = False
    n_seeds: int = 20
    n_starts: int = 16
    star_iterations: int = 200
    star_step: float = 1.0
    star_scale: float = 1.0
    widths: List[int] = field(default_factory=lambda: [64, 256, 1024, 4096])
    perturbation: str = "adversarial"
    n_instances: int = 20
    task_set: Optional[str] = None

    def validate(self):
        if self.mode is not None and self.mode not in MODES:
            raise ValidationError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not 0 <= self.seed < 2 ** 64:
            raise ValidationError("seed must be a 64-bit nonnegative integer")
        for name in ("n_states", "n_actions", "n_tasks", "d", "m", "n_points", "n_labels",
                     "T", "n_seeds", "n_starts", "star_iterations", "n_instances"):
            val = getattr(self, name)
            if not isinstance(val, int) or isinstance(val, bool) or val < 1:
                raise ValidationError(f"{name} must be a positive integer, got {val!r}")
        for name in ("tau", "radius", "q_max", "y_max", "star_step", "star_scale"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        steps = self.alpha if isinstance(self.alpha, list) else [self.alpha]
        if not steps or not all(isinstance(a, (int, float)) and not isinstance(a, bool) and a > 0
                                for a in steps):
            raise ValidationError("alpha must be a positive number or a nonempty list of them")
        if self.eta < 0 or self.delta < 0 or self.gamma_spread < 0 or self.init_scale < 0:
            raise ValidationError("eta, delta, gamma_spread and init_scale must be nonnegative")
        if not 0.0 < self.eps_mix < 1.0:
            raise ValidationError("eps_mix must lie in (0, 1)")
        if not 0.0 < self.gamma < 1.0:
            raise ValidationError("gamma must lie in (0, 1)")
        if self.m % 2 or any(w % 2 or w < 2 for w in self.widths):
            raise ValidationError("network widths must be even")
        if self.perturbation not in ("adversarial", "random"):
            raise ValidationError("perturbation must be 'adversarial' or 'random'")
        return self

    @classmethod
    def from_dict(cls, doc, mode=None):
        if not isinstance(doc, dict):
            raise ValidationError("config must be a JSON object")
        names = {f.name for f in fields(cls)}
        extra = sorted(set(doc) - names)
        if extra:
            raise ValidationError(f"unknown config keys: {extra}")
        cfg = cls(**doc)
        if mode is not None:
            if cfg.mode is not None and cfg.mode != mode:
                raise ValidationError(f"config is for mode {cfg.mode!r}, not {mode!r}")
            cfg.mode = mode
        return cfg.validate()

    def to_dict(self):
        return asdict(self)

    def rl_spec(self, neural=None):
        neural = self.neural if neural is None else neural
        return RlFamilySpec(n_states=self.n_states, n_actions=self.n_actions,
                            n_tasks=self.n_tasks, d=self.d, gamma=self.gamma,
                            gamma_spread=self.gamma_spread, delta=self.delta,
                            eps_mix=self.eps_mix, q_max=self.q_max, tau=self.tau,
                            eta=self.eta, width=self.m if neural else None)

    def sl_spec(self):
        return SlFamilySpec(n_points=self.n_points, d=self.d, n_tasks=self.n_tasks,
                            n_labels=self.n_labels, y_max=self.y_max, delta=self.delta,
                            label_noise=self.label_noise, eta=self.eta)


def load_config(path, mode=None):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    try:
        return ExperimentConfig.from_dict(doc, mode)
    except TypeError as exc:
        raise ValidationError(str(exc)) from exc
