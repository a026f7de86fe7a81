"""Command line entry point: ``safelearn <experiment> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path


from .config import ConfigError, ExperimentConfig, from_dict, load
from .emit import RunRecord, emit

EXIT_OK, EXIT_FAILED, EXIT_ABORT, EXIT_CONFIG = 0, 1, 2, 3

log = logging.getLogger("safelearn")


def _config(args, experiment: str) -> ExperimentConfig:
    overrides = {"seed": args.seed, "out": args.out, "tau": args.tau, "k_delta": args.kdelta}
    if args.config:
        cfg = load(args.config, **overrides)
        if cfg.experiment != experiment:
            cfg = cfg.replace(experiment=experiment)
        return cfg
    return from_dict({"experiment": experiment}, **overrides)


def _report(paths) -> None:
    for p in paths:
        print(f"wrote {p}")


def cmd_tracking(cfg: ExperimentConfig, figures: bool) -> int:
    from .tracking import run_tracking, timing_summary

    with_gp, without, times = run_tracking(cfg)
    timing = timing_summary(times)
    paths = emit([with_gp, without], cfg.out, cfg, {"gp_timing": timing})
    if figures:
        from .plotting import plot_tracking

        paths += plot_tracking(with_gp, without, cfg.out)
    print(f"rms_final_half_gp={with_gp.summary['rms_final_half']:.6f}")
    print(f"rms_final_half_nominal={without.summary['rms_final_half']:.6f}")
    print(f"rms_ratio={with_gp.summary['rms_ratio']:.4f}")
    print(f"gp_step_mean_ms={timing['mean_ms']:.3f}")
    _report(paths)
    return EXIT_OK


def cmd_barrier(cfg: ExperimentConfig, figures: bool, invariance: bool) -> int:
    from .exploration import BarrierSetup, CertificateAbort, invariance_run, run_algorithm1

    try:
        res = run_algorithm1(cfg)
    except CertificateAbort as exc:
        print(f"certificate abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    mu = RunRecord("mu_trace", ("iteration", "mu"))
    for i, m in enumerate(res.mu_trace):
        mu.append(i, m)
    records = [res.record, mu]
    res.record.summary.update(
        {"mu_initial": res.mu_trace[0], "mu_final": res.cert.mu, "iterations": res.iterations,
         "expansions": res.expansions}
    )
    if invariance:
        setup = BarrierSetup.from_config(cfg)
        inv = RunRecord("invariance", ("run", "steps", "min_h", "tube_violations", "infeasible"))
        for r in range(cfg.fi_runs):
            st = invariance_run(setup, res.cert, res.gp, cfg.seed * 1000 + r, cfg.fi_steps)
            inv.append(r, st["steps"], st["min_h"], st["tube_violations"], st["infeasible"])
        inv.summary["min_h"] = float(inv.column("min_h").min())
        inv.summary["tube_violation_rate"] = float(inv.column("tube_violations").sum() / inv.column("steps").sum())
        records.append(inv)
        print(f"invariance_min_h={inv.summary['min_h']:.6f}")
    paths = emit(records, cfg.out, cfg, {"certificate": res.cert.to_dict(), "events": res.events})
    if res.coverage is not None:
        cp = Path(cfg.out) / "coverage.csv"
        res.coverage.to_csv(cp)
        paths.append(cp)
    if figures:
        from .plotting import plot_barrier

        paths += plot_barrier(res, res.cert.family, cfg.out)
    print(f"mu_initial={res.mu_trace[0]:.4f}")
    print(f"mu_final={res.cert.mu:.4f}")
    print(f"iterations={res.iterations}")
    _report(paths)
    return EXIT_OK


def cmd_example1(cfg: ExperimentConfig, figures: bool) -> int:
    from .example1 import run_example1

    traj, minh, cont = run_example1(cfg)
    paths = emit([traj, minh], cfg.out, cfg)
    if figures:
        from .plotting import plot_example1

        paths += plot_example1(traj, cfg.out, cfg.ex1_resolution)
    for k in ("lyapunov_cells", "barrier_cells", "lyapunov_outside_barrier", "min_h"):
        print(f"{k}={traj.summary[k]}")
    _report(paths)
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig) -> int:
    from .checks import run_all

    results = run_all(cfg)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safelearn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("tracking", "trajectory tracking with and without GP correction"),
        ("barrier-learning", "safe exploration with barrier-certificate expansion"),
        ("example1", "evaluate the published 2D Lyapunov/barrier estimates"),
        ("verify", "run quick invariant checks"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--seed", type=int, help="random seed (overrides config)")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--tau", type=float, help="grid spacing in z (overrides config)")
        p.add_argument("--kdelta", type=float, help="confidence multiplier (overrides config)")
        p.add_argument("--no-figures", action="store_true", help="skip PNG figures")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "barrier-learning":
            p.add_argument("--invariance", action="store_true",
                           help="also run the forward-invariance exploration suite")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    experiment = "barrier-learning" if args.command == "verify" else args.command
    try:
        cfg = _config(args, experiment)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    t0 = time.perf_counter()
    if args.command == "tracking":
        code = cmd_tracking(cfg, not args.no_figures)
    elif args.command == "barrier-learning":
        code = cmd_barrier(cfg, not args.no_figures, args.invariance)
    elif args.command == "example1":
        code = cmd_example1(cfg, not args.no_figures)
    else:
        code = cmd_verify(cfg)
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
