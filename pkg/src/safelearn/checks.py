"""Quick invariant suites behind ``safelearn verify``.

Each check returns a :class:`CheckResult`; the full-size versions live in the
test suite.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .barrier import adaptive_cover, margin_terms, verify_grid
from .config import ExperimentConfig
from .example1 import containment, sample_starts, simulate
from .flatness import Lissajous, feedforward, flat_to_attitude
from .gp import KernelHyper, add_points, empty_model, fit_batch, remove_points
from .qp import FilterQp, kkt_residual, solve
from .quad import PlantConfig, nominal_derivative


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def check_gp_recursive(seed: int = 0, ops: int = 60) -> CheckResult:
    rng = np.random.default_rng(seed)
    hyper = KernelHyper(1.0, (0.7, 0.9, 1.1), 1e-2)
    model = empty_model(hyper, 300)
    worst = 0.0
    for _ in range(ops):
        if model.size > 5 and rng.random() < 0.4:
            idx = rng.choice(model.size, size=int(rng.integers(1, 4)), replace=False)
            model = remove_points(model, idx)
        else:
            m = int(rng.integers(1, 6))
            model = add_points(model, rng.normal(size=(m, 3)), rng.normal(size=m))
        if model.size:
            ref = fit_batch(model.inputs, model.targets, hyper, model.budget)
            worst = max(worst, float(np.max(np.abs(ref.inv - model.inv))))
    return CheckResult("gp-recursive-exactness", worst <= 1e-6, f"max |inv - batch| = {worst:.2e}")


def check_qp_kkt(seed: int = 0, n: int = 500) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        m = int(rng.integers(1, 5))
        lo = -rng.uniform(0.1, 2.0, m)
        hi = rng.uniform(0.1, 2.0, m)
        p = FilterQp(rng.normal(size=m) * 2, rng.normal(size=m), float(rng.normal()), lo, hi)
        u, status = solve(p)
        if status.value == "optimal":
            worst = max(worst, kkt_residual(p, u))
    return CheckResult("qp-kkt", worst <= 1e-8, f"max KKT violation = {worst:.2e}")


def check_flatness_inversion(samples: int = 200) -> CheckResult:
    plant = PlantConfig(mass_ratio=1.0, wind_accel=(0.0, 0.0, 0.0))
    path = Lissajous()
    worst = 0.0
    for t in np.linspace(0.0, 12.0, samples):
        ref = path.ref(t)
        theta, phi = flat_to_attitude(ref)
        q = np.zeros(9)
        q[0:3], q[3:6], q[6], q[7] = ref.r, ref.v, theta, phi
        u = feedforward(ref, plant.nominal_mass)
        acc = nominal_derivative(q, u, plant)[3:6]
        worst = max(worst, float(np.max(np.abs(acc - ref.a))))
    return CheckResult("flatness-inversion", worst <= 1e-6, f"max |acc - a_d| = {worst:.2e}")


def check_lattice_soundness(cfg: ExperimentConfig, scale: float = 1.0) -> CheckResult:
    from .exploration import BarrierSetup

    setup = BarrierSetup.from_config(cfg)
    cert = setup.initial_cert()
    prob = setup.problem(setup.residual(setup.empty_gp()))
    res = verify_grid(cert, setup.grid_builder(scale)(cert), prob)
    fine = setup.grid_builder(scale / 10)(cert)
    G, _ = margin_terms(cert, fine.inside_points, prob)
    ok = (not res.passed) or G.min() >= -1e-9
    return CheckResult(
        f"lattice-soundness(tau x{scale:g})",
        ok,
        f"coarse pass={res.passed}, min fine raw margin = {G.min():.3e} over {len(fine)} points",
    )


def check_cover(cfg: ExperimentConfig) -> CheckResult:
    from .exploration import BarrierSetup

    setup = BarrierSetup.from_config(cfg)
    cert = setup.initial_cert()
    prob = setup.problem(setup.residual(setup.empty_gp()))
    grid = setup.grid_builder()(cert)
    cov = adaptive_cover(cert, grid, prob)
    frac = float(cov.covers(grid.points).mean())
    return CheckResult(
        "cover-audit",
        frac == 1.0 and cov.certified,
        f"{len(cov)} samples for {cov.grid_count} grid points, covered {100 * frac:.1f}%",
    )


def check_example1(cfg: ExperimentConfig) -> CheckResult:
    c = containment(cfg.ex1_resolution)
    rng = np.random.default_rng(cfg.seed)
    min_h, _, _ = simulate(sample_starts(100, cfg.ex1_start_margin, rng), cfg.ex1_horizon, cfg.ex1_dt)
    ok = c.contained and c.growth >= 0.10 and min_h.min() >= -1e-3
    return CheckResult(
        "example1-certificate",
        ok,
        f"V*<=1 cells outside h*>=0: {c.lyapunov_outside_barrier}, growth {100 * c.growth:.1f}%, "
        f"min h over 100 trajectories {min_h.min():.4f}",
    )


def run_all(cfg: ExperimentConfig) -> list[CheckResult]:
    suites: list[Callable[[], CheckResult]] = [
        check_gp_recursive,
        check_qp_kkt,
        check_flatness_inversion,
        lambda: check_lattice_soundness(cfg, 1.0),
        lambda: check_lattice_soundness(cfg, 0.5),
        lambda: check_cover(cfg),
        lambda: check_example1(cfg),
    ]
    return [s() for s in suites]
