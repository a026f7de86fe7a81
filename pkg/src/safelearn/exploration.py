"""Safe exploration in vertical flight: the learn-and-expand loop.

The barrier family is :class:`QuadEllipsoid`; its certified (z, vz) region is
grown by shrinking ``mu`` as a GP of the vertical residual becomes more
confident.  The thrust gain is taken as identified (the model uses the plant
mass), and the only learned channel is the vertical acceleration over
features ``(z, vz)``.  Horizontal wind is zeroed for this experiment: at level
attitude thrust has no authority over the lateral terms of the barrier, so a
single-constraint filter could not reject it.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .barrier import (
    BarrierCertificate,
    CoverageSet,
    GpResidual,
    OracleResidual,
    QuadAffine,
    QuadEllipsoid,
    SafetyProblem,
    StateGrid,
    adaptive_cover,
    expand_certificate,
    margin_terms,
    next_target,
    safe_filter,
)
from .config import ExperimentConfig
from .emit import RunRecord
from .flatness import FlatRef, Quintic
from .gp import GpModel, admit, empty_model
from .qp import QpStatus
from .quad import RESIDUAL_CHANNELS, PlantConfig, integrate_step, true_derivative
from .tracking import FlatnessController

log = logging.getLogger(__name__)

IX_Z, IX_VZ = 2, 5
BARRIER_FEATURES = (IX_Z, IX_VZ)
BARRIER_LENGTH_SCALES = (0.3, 0.5)
TUBE_TOL = 1e-9


class CertificateAbort(RuntimeError):
    """The initial certificate does not verify under the initial model."""


@dataclass(frozen=True)
class BarrierSetup:
    cfg: ExperimentConfig
    plant: PlantConfig
    family: QuadEllipsoid
    model: QuadAffine
    controller: FlatnessController
    offset: np.ndarray

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "BarrierSetup":
        plant = dataclasses.replace(cfg.plant(), wind_accel=(0.0, 0.0, cfg.wind_accel[2]))
        offset = np.zeros(9)
        return cls(
            cfg,
            plant,
            QuadEllipsoid(),
            QuadAffine(plant.true_mass, plant.gravity),
            FlatnessController(cfg.gains(), plant.true_mass, plant.gravity),
            offset,
        )

    def initial_cert(self) -> BarrierCertificate:
        return BarrierCertificate(self.family, self.cfg.mu_init, self.cfg.gamma)

    def base_grid(self, scale: float = 1.0) -> StateGrid:
        """Box lattice over (z, vz) wide enough for every mu >= mu_lo."""
        zlo, zhi = self.family.z_extent()
        vmax = self.family.vz_extent(self.cfg.mu_lo)
        s = self.cfg.tau * scale
        return StateGrid.box(
            BARRIER_FEATURES, (zlo, -vmax), (zhi, vmax), (s, s * self.cfg.tau_aspect), np.zeros(9)
        )

    def grid_builder(self, scale: float = 1.0) -> Callable[[BarrierCertificate], StateGrid]:
        base = self.base_grid(scale)
        return base.restrict

    def empty_gp(self) -> GpModel:
        hyper = self.cfg.kernel(len(BARRIER_FEATURES), BARRIER_LENGTH_SCALES)
        return empty_model(hyper, self.cfg.gp_budget)

    def residual(self, gp: GpModel | None):
        if self.cfg.oracle_residual or gp is None:
            return OracleResidual(self.true_residual_fn())
        return GpResidual({IX_VZ: gp}, BARRIER_FEATURES, self.offset)

    def problem(self, residual) -> SafetyProblem:
        return SafetyProblem(
            self.model, residual, self.cfg.k_delta, self.plant.control_lo, self.plant.control_hi
        )

    def true_residual_fn(self):
        """State-only mismatch between plant and model: wind and drag."""
        wind = np.asarray(self.plant.wind_accel)
        c = self.plant.drag_coeff

        def fn(X):
            X = np.atleast_2d(X)
            R = np.zeros_like(X, dtype=float)
            V = X[:, 3:6]
            R[:, 3:6] = wind - c * np.abs(V) * V
            return R

        return fn

    def true_derivative(self, q, u):
        return true_derivative(q, u, self.plant)


def _vertical_ref(traj: Quintic, t: float, a_lo: float, a_hi: float) -> FlatRef:
    """Reference on the z axis; acceleration clipped to what thrust can deliver."""
    p, v, a, j = traj(t)
    if not a_lo <= a <= a_hi:
        a, j = min(max(a, a_lo), a_hi), 0.0
    return FlatRef((0.0, 0.0, p), (0.0, 0.0, v), (0.0, 0.0, a), (0.0, 0.0, j))


def in_tube(setup: BarrierSetup, prediction, q, truth_fn=None) -> bool:
    """Whether the true residual at ``q`` lies in the k_delta confidence tube."""
    truth = (truth_fn or setup.true_residual_fn())(q)[0]
    mean, std = prediction
    return bool(np.all(np.abs(truth - mean[0]) <= setup.cfg.k_delta * std[0] + TUBE_TOL))


def _measure(setup: BarrierSetup, q, u, rng) -> float:
    """Noisy vertical-acceleration residual minus the known offset."""
    qdot = setup.true_derivative(q, u)
    model_qdot = setup.model.f(q)[0] + setup.model.g(q)[0] @ u
    y = qdot[IX_VZ] - model_qdot[IX_VZ] - setup.offset[IX_VZ]
    return float(y + setup.cfg.measurement_noise * rng.standard_normal())


EXPLORE_COLUMNS = (
    "iteration", "t", "x", "y", "z", "vz",
    "f_hat", "f", "wx", "wy", "wz",
    "h", "margin", "mu", "gp_mean_vz", "gp_std_vz", "gp_points",
    "in_tube", "event",
)


@dataclass
class ExplorationResult:
    cert: BarrierCertificate
    mu_trace: list
    record: RunRecord
    coverage: CoverageSet | None
    gp: GpModel | None
    iterations: int
    expansions: int
    events: list = field(default_factory=list)


def goto(setup, cert, q, target, gp, rng, rec: RunRecord | None, iteration: int, t0: float, learn: bool,
         duration: float | None = None):
    """Fly from ``q`` towards ``target`` (a (z, vz) pair) under the safety filter.

    Returns ``(q, gp, t, stats)`` where stats counts steps, tube violations,
    infeasible filter events and the lowest ``h`` on in-tube steps.
    """
    cfg = setup.cfg
    dt = cfg.dt
    T = cfg.goto_duration if duration is None else duration
    steps = max(1, int(round(T / dt)))
    traj = Quintic.fit(q[IX_Z], q[IX_VZ], 0.0, target[0], target[1], 0.0, T)
    residual = setup.residual(gp)
    prob = setup.problem(residual)
    truth_fn = setup.true_residual_fn()
    g = setup.plant.gravity
    a_lo = g + setup.plant.thrust_box[0] / setup.plant.true_mass
    a_hi = 0.9 * g
    kicks = {int(round(tk / dt)): dv for tk, dv in cfg.disturbances}
    stats = {"steps": 0, "tube_violations": 0, "infeasible": 0, "min_h": math.inf}
    for k in range(steps):
        t = t0 + k * dt
        event = ""
        if kicks and int(round(t / dt)) in kicks:
            q = q.copy()
            q[IX_VZ] += kicks[int(round(t / dt))]
            event = "disturbance"
        pred = mean, std = residual.predict(q)
        corr = mean[0][list(RESIDUAL_CHANNELS)]
        u_hat = setup.controller(q, _vertical_ref(traj, k * dt, a_lo, a_hi), corr)
        fr = safe_filter(u_hat, cert, q, prob, pred)
        if fr.status is QpStatus.INFEASIBLE:
            stats["infeasible"] += 1
            event = "infeasible"
        tube_ok = in_tube(setup, pred, q, truth_fn)
        h = fr.h
        stats["steps"] += 1
        if tube_ok:
            stats["min_h"] = min(stats["min_h"], h)
        else:
            stats["tube_violations"] += 1
        if rec is not None:
            G = float(margin_terms(cert, q, prob)[0][0])
            rec.append(
                iteration, t, q[0], q[1], q[IX_Z], q[IX_VZ],
                u_hat[0], *fr.u,
                h, G, cert.mu, mean[0][IX_VZ], std[0][IX_VZ], 0 if gp is None else gp.size,
                tube_ok, event,
            )
        q_next = integrate_step(q, fr.u, dt, setup.true_derivative)
        if learn and gp is not None and ((k + 1) % cfg.sample_every == 0 or k == steps - 1):
            gp = admit(gp, q[list(BARRIER_FEATURES)], _measure(setup, q, fr.u, rng))
            residual = setup.residual(gp)
            prob = setup.problem(residual)
        q = q_next
    return q, gp, t0 + steps * dt, stats


def run_algorithm1(cfg: ExperimentConfig) -> ExplorationResult:
    """Explore the most uncertain certified state, learn, expand; repeat."""
    setup = BarrierSetup.from_config(cfg)
    rng = np.random.default_rng(cfg.seed)
    gp = None if cfg.oracle_residual else setup.empty_gp()
    cert = setup.initial_cert()
    builder = setup.grid_builder()
    cov = adaptive_cover(cert, builder(cert), setup.problem(setup.residual(gp)))
    if not cov.certified:
        raise CertificateAbort(
            f"initial certificate mu={cert.mu} fails verification "
            f"(gamma={cert.gamma}, k_delta={cfg.k_delta}, tau={cfg.tau})"
        )
    rec = RunRecord("barrier_learning", EXPLORE_COLUMNS)
    q = np.zeros(9)
    q[IX_Z] = setup.family.z_center
    mu_trace = [cert.mu]
    events = []
    t, stall, expansions, it = 0.0, 0, 0, 0
    for it in range(1, cfg.max_iterations + 1):
        residual = setup.residual(gp)
        target = next_target(residual, cert, builder(cert))
        target = (target[IX_Z], target[IX_VZ])
        q, gp, t, stats = goto(setup, cert, q, target, gp, rng, rec, it, t, learn=True)
        if stats["infeasible"]:
            events.append({"iteration": it, "event": "infeasible", "count": stats["infeasible"]})
        res = expand_certificate(
            cert, builder, setup.problem(setup.residual(gp)), (cfg.mu_lo, cert.mu), cfg.mu_tol
        )
        if res.regressed:
            events.append({"iteration": it, "event": "regressed", "mu": cert.mu})
        else:
            cov = res.coverage
        mu_prev = cert.mu
        cert = res.cert
        if cert.mu < mu_prev:
            expansions += 1
        mu_trace.append(cert.mu)
        growth = math.sqrt(mu_prev / cert.mu) - 1.0
        log.info("iteration %d: mu %.4f -> %.4f (volume growth %.4g)", it, mu_prev, cert.mu, growth)
        stall = stall + 1 if growth <= cfg.epsilon else 0
        if stall >= cfg.patience:
            break
    return ExplorationResult(cert, mu_trace, rec, cov, gp, it, expansions, events)


def random_interior(setup: BarrierSetup, cert, rng, margin: float = 0.05) -> tuple[float, float]:
    """Uniform (z, vz) with ``h >= margin`` by rejection."""
    zlo, zhi = setup.family.z_extent()
    v = setup.family.vz_extent(cert.mu)
    q = np.zeros(9)
    while True:
        q[IX_Z] = rng.uniform(zlo, zhi)
        q[IX_VZ] = rng.uniform(-v, v)
        if cert.h(q)[0] >= margin:
            return q[IX_Z], q[IX_VZ]


def aggressive_target(setup: BarrierSetup, cert, rng, overshoot: float = 1.5) -> tuple[float, float]:
    """Uniform (z, vz) in a box ``overshoot`` times the safe set's extent."""
    zc = setup.family.z_center
    a = math.sqrt(setup.family.z_axis_sq) * overshoot
    v = setup.family.vz_extent(cert.mu) * overshoot
    return rng.uniform(zc - a, zc + a), rng.uniform(-v, v)


def invariance_run(setup: BarrierSetup, cert, gp, seed: int, steps: int) -> dict:
    """Closed loop from a random interior start, chasing random targets.

    Targets are drawn partly outside the safe set so the nominal controller
    keeps pushing against the filter.  The GP is frozen.  Returns the lowest
    ``h`` over in-tube steps and the number of tube violations.
    """
    rng = np.random.default_rng(seed)
    q = np.zeros(9)
    q[IX_Z], q[IX_VZ] = random_interior(setup, cert, rng)
    total = {"steps": 0, "tube_violations": 0, "infeasible": 0, "min_h": math.inf}
    t = 0.0
    while total["steps"] < steps:
        target = aggressive_target(setup, cert, rng)
        left = (steps - total["steps"]) * setup.cfg.dt
        dur = min(0.5 * setup.cfg.goto_duration, left)
        q, _, t, st = goto(setup, cert, q, target, gp, rng, None, 0, t, learn=False, duration=dur)
        for k in ("steps", "tube_violations", "infeasible"):
            total[k] += st[k]
        total["min_h"] = min(total["min_h"], st["min_h"])
    return total
