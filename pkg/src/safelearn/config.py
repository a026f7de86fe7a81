"""Flat JSON experiment configuration.

Every key of :class:`ExperimentConfig` may appear at the top level of the
document; anything else is rejected so typos fail loudly.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass

from .flatness import Gains, Lissajous
from .gp import KernelHyper
from .quad import G0, PlantConfig

EXPERIMENTS = ("tracking", "barrier-learning", "example1")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "tracking"
    seed: int = 0
    out: str = "out"
    dt: float = 0.01
    horizon: float = 60.0

    # plant
    nominal_mass: float = 1.0
    mass_ratio: float = 1.4
    gravity: float = G0
    wind_accel: tuple = (-0.1 * G0, 0.0, 0.0)
    drag_coeff: float = 0.0
    thrust_box: tuple | None = None
    rate_box: tuple = (4.0, 4.0, 4.0)

    # controller
    kp: float = 4.0
    kd: float = 3.0
    kp_bar: float = 0.5
    poles: tuple = (-2.0, -2.5, -3.0)
    use_pole_placement: bool = True

    # GP, shared hyperparameters across channels
    signal_variance: float = 1.0
    length_scales: tuple | None = None
    noise_variance: float = 1e-4
    measurement_noise: float = 0.01
    gp_budget: int = 300
    gp_features: str = "q_prime"
    k_delta: float = 2.0

    # tracking reference
    ref_center: tuple = (0.0, 0.0, -1.0)
    ref_amplitude: tuple = (1.0, 1.0, 0.3)
    ref_period: tuple = (12.0, 6.0, 12.0)
    ref_phase: tuple = (0.0, 0.0, math.pi / 2)

    # barrier learning
    gamma: float = 1.0
    tau: float = 0.02
    tau_aspect: float = 2.5
    mu_init: float = 6.3
    mu_lo: float = 0.3
    mu_tol: float = 1e-3
    epsilon: float = 1e-3
    patience: int = 3
    max_iterations: int = 200
    goto_duration: float = 2.0
    sample_every: int = 10
    disturbances: tuple = ()
    oracle_residual: bool = False
    fi_runs: int = 100
    fi_steps: int = 10000

    # example 1
    ex1_trajectories: int = 500
    ex1_horizon: float = 20.0
    ex1_dt: float = 0.01
    ex1_resolution: float = 0.01
    ex1_start_margin: float = 0.02

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                object.__setattr__(self, f.name, tuple(tuple(x) if isinstance(x, list) else x for x in v))
        try:
            self._validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def _validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if not (self.dt > 0 and self.horizon > 0):
            raise ConfigError("dt and horizon must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.gp_features not in ("q", "q_prime"):
            raise ConfigError("gp_features must be 'q' or 'q_prime'")
        if self.gp_budget < 1:
            raise ConfigError("gp_budget must be at least 1")
        if self.k_delta < 0 or self.measurement_noise < 0:
            raise ConfigError("k_delta and measurement_noise must be non-negative")
        if not (self.gamma > 0 and self.tau > 0 and self.tau_aspect > 0):
            raise ConfigError("gamma, tau and tau_aspect must be positive")
        if not 0 < self.mu_lo < self.mu_init:
            raise ConfigError("need 0 < mu_lo < mu_init")
        if self.max_iterations < 0 or self.patience < 1 or self.sample_every < 1:
            raise ConfigError("max_iterations >= 0, patience >= 1 and sample_every >= 1 required")
        if not (self.goto_duration > 0 and self.epsilon >= 0 and self.mu_tol > 0):
            raise ConfigError("goto_duration and mu_tol must be positive, epsilon non-negative")
        for name in ("ref_center", "ref_amplitude", "ref_period", "ref_phase", "wind_accel", "rate_box"):
            if len(getattr(self, name)) != 3:
                raise ConfigError(f"{name} needs three entries")
        if min(self.ref_period) <= 0:
            raise ConfigError("ref_period entries must be positive")
        for d in self.disturbances:
            if len(d) != 2:
                raise ConfigError("disturbances are [time, vz_impulse] pairs")
        # building these runs their own checks
        self.plant()
        self.gains()
        if self.length_scales is not None:
            self.kernel(len(self.length_scales))

    def plant(self) -> PlantConfig:
        return PlantConfig(
            nominal_mass=self.nominal_mass,
            mass_ratio=self.mass_ratio,
            gravity=self.gravity,
            wind_accel=tuple(self.wind_accel),
            drag_coeff=self.drag_coeff,
            thrust_box=None if self.thrust_box is None else tuple(self.thrust_box),
            rate_box=tuple(self.rate_box),
        )

    def gains(self) -> Gains:
        return Gains.from_poles(list(self.poles), kp=self.kp, kd=self.kd, kp_bar=self.kp_bar)

    def kernel(self, dim: int, default_scales=None) -> KernelHyper:
        scales = self.length_scales if self.length_scales is not None else default_scales
        if scales is None or len(scales) != dim:
            raise ConfigError(f"length_scales must have {dim} entries")
        return KernelHyper(self.signal_variance, tuple(scales), self.noise_variance)

    def reference(self) -> Lissajous:
        return Lissajous(
            tuple(self.ref_center), tuple(self.ref_amplitude), tuple(self.ref_period), tuple(self.ref_phase)
        )

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = _plain(v)
        return out

    def digest(self) -> str:
        """Git-style blob hash of the canonical JSON config."""
        body = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def from_dict(doc: dict, **overrides) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    merged = {**doc, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        return ExperimentConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load(path, **overrides) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(doc, **overrides)
