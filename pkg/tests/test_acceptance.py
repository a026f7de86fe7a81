"""End-to-end acceptance checks, one test per criterion.

Each test records a ``PASS``/``FAIL criterion N: ...`` line that is printed in
the pytest terminal summary and echoed to stdout.
"""
import itertools
import time
import timeit

import numpy as np
import pytest

from conftest import CRITERIA
from safelearn import cli
from safelearn.barrier import adaptive_cover, certify, expand_certificate, margin_terms, verify_grid
from safelearn.config import from_dict
from safelearn.example1 import containment, sample_starts, simulate
from safelearn.exploration import BarrierSetup, invariance_run, run_algorithm1
from safelearn.flatness import Lissajous, feedforward, flat_to_attitude
from safelearn.gp import KernelHyper, add_points, empty_model, fit_batch, remove_points
from safelearn.qp import FilterQp, QpStatus, max_over_box, solve
from safelearn.quad import PlantConfig, nominal_derivative
from safelearn.tracking import run_tracking, timing_summary

pytestmark = pytest.mark.acceptance


def record(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    CRITERIA[n] = line
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def barrier_cfg():
    return from_dict({"experiment": "barrier-learning"})


@pytest.fixture(scope="module")
def algorithm1(barrier_cfg):
    return run_algorithm1(barrier_cfg)


@pytest.fixture(scope="module")
def tracking_runs():
    return run_tracking(from_dict({"experiment": "tracking"}))


# -- 1 -----------------------------------------------------------------------


def test_criterion_1_recursive_gp(tracking_runs):
    rng = np.random.default_rng(1)
    worst, longest, biggest = 0.0, 0, 0
    for seq in range(20):
        dim = int(rng.integers(1, 7))
        hyper = KernelHyper(float(rng.uniform(0.5, 2.0)), tuple(rng.uniform(0.5, 2.0, dim)), 1e-2)
        model = empty_model(hyper, 300)
        n_ops = int(rng.integers(50, 201))
        longest = max(longest, n_ops)
        for _ in range(n_ops):
            room = 300 - model.size
            if model.size > 5 and (room == 0 or rng.random() < 0.35):
                k = int(rng.integers(1, min(5, model.size - 1) + 1))
                model = remove_points(model, rng.choice(model.size, size=k, replace=False))
            else:
                m = int(rng.integers(1, min(5, room) + 1))
                model = add_points(model, rng.normal(size=(m, dim)) * 2, rng.normal(size=m))
            biggest = max(biggest, model.size)
            ref = fit_batch(model.inputs, model.targets, hyper, 300)
            worst = max(worst, float(np.max(np.abs(ref.inv - model.inv))))

    hyper = KernelHyper(1.0, (1.0,) * 6, 1e-2)
    X = rng.normal(size=(300, 6))
    y = rng.normal(size=300)
    base = fit_batch(X[:299], y[:299], hyper, 300)
    t_add = min(timeit.repeat(lambda: add_points(base, X[299:], y[299:]), number=20, repeat=5)) / 20
    t_fit = min(timeit.repeat(lambda: fit_batch(X, y, hyper, 300), number=20, repeat=5)) / 20
    speedup = t_fit / t_add

    timing = timing_summary(tracking_runs[2])
    drift = timing["second_half_mean_ms"] / timing["first_half_mean_ms"]
    ok = worst <= 1e-6 and speedup >= 5.0 and drift <= 1.5
    record(
        1,
        ok,
        f"max |inv - batch| = {worst:.2e} over 20 sequences (<= {longest} ops, N <= {biggest}); "
        f"add at N=300 {speedup:.1f}x faster than rebuild; per-step GP time "
        f"{timing['first_half_mean_ms']:.2f} -> {timing['second_half_mean_ms']:.2f} ms (first/second half)",
    )


# -- 2 -----------------------------------------------------------------------


def active_set_oracle(p):
    """Best feasible point over every bound/halfspace active pattern."""
    m = p.u_hat.size
    best = np.inf
    for pattern in itertools.product((-1, 0, 1), repeat=m):
        pat = np.array(pattern)
        base = np.where(pat < 0, p.lo, np.where(pat > 0, p.hi, p.u_hat))
        cands = [base]
        free = pat == 0
        af = p.a[free]
        if af @ af > 0:
            u = base.copy()
            u[free] += (p.b - p.a @ base) * af / (af @ af)
            cands.append(u)
        for u in cands:
            if np.all(u >= p.lo - 1e-12) and np.all(u <= p.hi + 1e-12) and p.a @ u >= p.b - 1e-12:
                best = min(best, float(np.sum((u - p.u_hat) ** 2)))
    return best


def test_criterion_2_qp_optimality():
    rng = np.random.default_rng(2)
    problems = []
    for _ in range(10_000):
        m = int(rng.integers(1, 5))
        lo = -rng.uniform(0.1, 2.0, m)
        hi = rng.uniform(0.1, 2.0, m)
        a = rng.normal(size=m)
        b = max_over_box(a, lo, hi) - rng.uniform(0.0, 3.0)
        problems.append(FilterQp(rng.normal(size=m) * 2, a, float(b), lo, hi))
    t0 = time.perf_counter()
    sols = [solve(p) for p in problems]
    elapsed = time.perf_counter() - t0
    feas, gap = 0.0, 0.0
    for p, (u, status) in zip(problems, sols):
        assert status is QpStatus.OPTIMAL
        feas = max(feas, p.b - p.a @ u, float(np.max(p.lo - u)), float(np.max(u - p.hi)))
        gap = max(gap, abs(float(np.sum((u - p.u_hat) ** 2)) - active_set_oracle(p)))
    ok = feas <= 1e-9 and gap <= 1e-6 and elapsed < 5.0
    record(2, ok, f"10000 instances: worst infeasibility {feas:.1e}, objective gap {gap:.1e}, solve time {elapsed:.2f} s")


# -- 3 -----------------------------------------------------------------------


def test_criterion_3_lattice_soundness_and_cover(barrier_cfg, algorithm1):
    setup = BarrierSetup.from_config(barrier_cfg)
    cases = [("initial, empty GP", setup.initial_cert(), setup.empty_gp())]
    learned = setup.problem(setup.residual(algorithm1.gp))
    parts, ok = [], True
    for scale in (1.0, 0.5):
        grid_builder = setup.grid_builder(scale)
        expanded = expand_certificate(setup.initial_cert(), grid_builder, learned, (barrier_cfg.mu_lo, 6.3)).cert
        for label, cert, gp in cases + [(f"expanded mu={expanded.mu:.3f}, learned GP", expanded, algorithm1.gp)]:
            prob = setup.problem(setup.residual(gp))
            grid = grid_builder(cert)
            passed = verify_grid(cert, grid, prob).passed
            fine = setup.grid_builder(scale / 10)(cert)
            raw = float(margin_terms(cert, fine.inside_points, prob)[0].min())
            covered = float(adaptive_cover(cert, grid, prob).covers(grid.points).mean())
            ok &= passed and raw >= 0.0 and covered == 1.0
            parts.append(f"tau x{scale:g} {label}: pass={passed}, fine min {raw:.2e}, cover {100 * covered:.0f}%")
    record(3, ok, "; ".join(parts))


# -- 4 -----------------------------------------------------------------------


def test_criterion_4_forward_invariance(barrier_cfg, algorithm1):
    setup = BarrierSetup.from_config(barrier_cfg)
    t0 = time.perf_counter()
    runs = [invariance_run(setup, algorithm1.cert, algorithm1.gp, 1000 + i, 10_000) for i in range(100)]
    elapsed = time.perf_counter() - t0
    steps = sum(r["steps"] for r in runs)
    tube = sum(r["tube_violations"] for r in runs)
    min_h = min(r["min_h"] for r in runs)
    rate = tube / steps
    ok = min_h >= -1e-3 and rate < 0.05 and elapsed <= 600
    record(
        4,
        ok,
        f"100 runs x 10^4 steps at mu={algorithm1.cert.mu:.3f}: min in-tube h = {min_h:.4f}, "
        f"tube violations {100 * rate:.2f}% of steps, {elapsed:.0f} s",
    )


# -- 5 -----------------------------------------------------------------------


def test_criterion_5_expansion(barrier_cfg, algorithm1):
    mu = np.array(algorithm1.mu_trace)
    monotone = bool(np.all(np.diff(mu) <= 0))
    oracle_cfg = barrier_cfg.replace(oracle_residual=True)
    oracle = run_algorithm1(oracle_cfg)
    setup = BarrierSetup.from_config(oracle_cfg)
    prob = setup.problem(setup.residual(None))
    grid_builder = setup.grid_builder()
    cert = setup.initial_cert()
    scan = np.round(np.arange(oracle_cfg.mu_lo, oracle_cfg.mu_init + 1e-9, 1e-3), 6)
    ok_scan = np.array([certify(cert.with_mu(m), grid_builder, prob).certified for m in scan])
    best = float(scan[np.argmax(ok_scan)])
    diff = abs(oracle.cert.mu - best)
    ok = monotone and mu[0] == 6.3 and mu[-1] < 2.0 and diff <= 1e-3
    record(
        5,
        ok,
        f"mu trace {mu[0]:.2f} -> {mu[-1]:.4f} over {algorithm1.iterations} iterations (monotone={monotone}); "
        f"oracle mu {oracle.cert.mu:.4f} vs exhaustive 1e-3 scan {best:.3f} (|diff| {diff:.1e})",
    )


# -- 6 -----------------------------------------------------------------------


def test_criterion_6_tracking(tracking_runs):
    with_gp, without, _ = tracking_runs
    ratio = with_gp.summary["rms_ratio"]
    record(
        6,
        ratio <= 0.5,
        f"final-half RMS error {with_gp.summary['rms_final_half']:.4f} m with GP vs "
        f"{without.summary['rms_final_half']:.4f} m without (ratio {ratio:.3f})",
    )


# -- 7 -----------------------------------------------------------------------


def test_criterion_7_example1():
    cont = containment(0.01)
    rng = np.random.default_rng(0)
    min_h, _, _ = simulate(sample_starts(500, 0.02, rng), 20.0, 0.01)
    worst = float(min_h.min())
    ok = cont.contained and cont.growth >= 0.10 and worst >= -1e-3
    record(
        7,
        ok,
        f"{cont.lyapunov_outside_barrier} cells with V*<=1 lie outside h*>=0 "
        f"({cont.lyapunov_cells} vs {cont.barrier_cells} cells, growth {100 * cont.growth:.1f}%); "
        f"min h* over 500 trajectories {worst:.4f}",
    )


# -- 8 -----------------------------------------------------------------------


def test_criterion_8_flatness_inversion():
    plant = PlantConfig(mass_ratio=1.0, wind_accel=(0.0, 0.0, 0.0))
    path = Lissajous()
    worst = 0.0
    ts = np.arange(0.0, 60.0, 0.01)
    for t in ts:
        ref = path.ref(t)
        theta, phi = flat_to_attitude(ref)
        q = np.zeros(9)
        q[0:3], q[3:6], q[6], q[7] = ref.r, ref.v, theta, phi
        acc = nominal_derivative(q, feedforward(ref, plant.nominal_mass), plant)[3:6]
        worst = max(worst, float(np.max(np.abs(acc - ref.a))))
    record(8, worst <= 1e-6, f"max |r_ddot - r_ddot_d| = {worst:.1e} over {len(ts)} samples")


# -- 9 -----------------------------------------------------------------------


DETERMINISM_CONFIGS = {
    "tracking": '{"experiment": "tracking", "horizon": 5.0}',
    "barrier-learning": '{"experiment": "barrier-learning"}',
    "example1": '{"experiment": "example1", "ex1_trajectories": 50, "ex1_horizon": 5.0}',
}


def test_criterion_9_determinism(tmp_path):
    mismatched, compared = [], 0
    for name, doc in DETERMINISM_CONFIGS.items():
        cfg = tmp_path / f"{name}.json"
        cfg.write_text(doc)
        dirs = [tmp_path / f"{name}-{rep}" for rep in range(2)]
        for out in dirs:
            assert cli.main([name, "--config", str(cfg), "--out", str(out), "--seed", "3", "--no-figures"]) == 0
        for csv in sorted(dirs[0].glob("*.csv")):
            compared += 1
            if csv.read_bytes() != (dirs[1] / csv.name).read_bytes():
                mismatched.append(f"{name}/{csv.name}")
    record(9, not mismatched and compared > 0, f"{compared} CSVs compared across repeated seeded runs, {len(mismatched)} differ")
