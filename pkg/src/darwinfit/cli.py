"""Command-line driver.

    darwinfit run <scenario.json> --out <dir> [--dt s] [--scheme name] [--snap-every k] [--seed n]
    darwinfit verify <operators|conservation|convergence|oracle> [--seed n]

Exit codes: 0 success, 1 failed verification check, 2 scenario error,
3 solver failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .darwin import SCHEMES, StepperConfig
from .linsolve import BACKEND, SingularMatrixError, SolverError
from .output import DiagnosticsWriter, write_manifest, write_vtk
from .scenario import Scenario, ScenarioError, load_scenario
from .verify import SUITES, run_suite

log = logging.getLogger("darwinfit")

EXIT_OK, EXIT_CHECK, EXIT_SCENARIO, EXIT_SOLVER, EXIT_IO = 0, 1, 2, 3, 4


@dataclass(frozen=True)
class RunConfig:
    scenario: Path
    out: Path
    snap_every: int | None = None
    snapshot_times: tuple[float, ...] | None = None
    overrides: dict = field(default_factory=dict)
    seed: int = 0
    timing: bool = True

    def __post_init__(self):
        if self.snap_every is not None and self.snap_every < 1:
            raise ValueError("snapshot cadence must be >= 1")
        known = {f for f in StepperConfig.__dataclass_fields__} | {"steps"}
        bad = set(self.overrides) - known
        if bad:
            raise ValueError(f"unknown overrides {sorted(bad)}")


def _apply_overrides(sc: Scenario, overrides: dict) -> Scenario:
    ov = {k: v for k, v in overrides.items() if v is not None}
    steps = ov.pop("steps", None)
    if "dt" in ov and steps is None:
        # keep the simulated span when only the step size changes
        steps = max(1, int(round(sc.steps * sc.stepper.dt / ov["dt"])))
    try:
        stepper = replace(sc.stepper, **ov)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"override rejected: {exc}") from None
    return replace(sc, stepper=stepper, steps=sc.steps if steps is None else int(steps))


def _snapshot_steps(sc: Scenario, snap_every: int, times) -> dict[int, str]:
    dt = sc.stepper.dt
    wanted = {}
    if snap_every:
        for n in range(snap_every, sc.steps + 1, snap_every):
            wanted[n] = "cadence"
    for t in times:
        n = int(round(t / dt))
        if 1 <= n <= sc.steps:
            wanted[n] = "time"
    return wanted


def run(cfg: RunConfig) -> int:
    try:
        sc = load_scenario(cfg.scenario)
    except OSError as exc:
        print(f"error: cannot read scenario: {exc}", file=sys.stderr)
        return EXIT_IO
    except ScenarioError as exc:
        print(f"error: invalid scenario: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    try:
        sc = _apply_overrides(sc, cfg.overrides)
        problem = sc.build()
    except ScenarioError as exc:
        print(f"error: invalid scenario: {exc}", file=sys.stderr)
        return EXIT_SCENARIO

    snap_every = sc.output.snap_every if cfg.snap_every is None else cfg.snap_every
    times = sc.output.snapshot_times if cfg.snapshot_times is None else cfg.snapshot_times
    snaps = _snapshot_steps(sc, snap_every, times)

    out = Path(cfg.out)
    try:
        (out / "snapshots").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_IO

    try:
        stepper = problem.stepper()
    except (SolverError, SingularMatrixError) as exc:
        print(f"error: solver setup failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER

    op = stepper.op
    manifest = {
        "version": __version__,
        "backend": BACKEND,
        "scenario": sc.to_dict(),
        "scheme": problem.config.scheme,
        "config": asdict(problem.config),
        "steps": sc.steps,
        "seed": cfg.seed,
        "grid": {"node_counts": list(problem.grid.node_counts), "nodes": problem.grid.n_nodes,
                 "edges": problem.grid.n_edges, "faces": problem.grid.n_faces,
                 "cells": problem.grid.n_cells},
        "dofs": {"a": op.n_a, "phi": op.n_phi, "fixed_nodes": int(op.fx.size)},
        "snapshots": [],
        "status": "running",
    }
    status, code = "ok", EXIT_OK
    pool = ThreadPoolExecutor(max_workers=1)
    pending = []
    try:
        write_manifest(out / "manifest.json", manifest)
        with DiagnosticsWriter(out / "diagnostics.csv") as diag:
            x = stepper.initial_state(0.0)
            for n in range(1, sc.steps + 1):
                y = stepper.step(x)
                f = stepper.fields(y, x)
                w_e, w_m = stepper.energies(y, x)
                info = y.info if cfg.timing else replace(y.info, wall_s=0.0)
                diag.write(n, y.t, w_e, w_m, info)
                if n in snaps:
                    path = out / "snapshots" / f"snap_{n:06d}.vtk"
                    # fields are fresh arrays, so the writer can run beside the next step
                    pending.append(pool.submit(write_vtk, path, problem.grid, f, y.t, sc.name))
                    manifest["snapshots"].append({"step": n, "t": y.t, "file": str(path.relative_to(out)),
                                                  "reason": snaps[n]})
                x = y
        for p in pending:
            p.result()
    except (SolverError, SingularMatrixError) as exc:
        print(f"error: solver failure at step {n}: {exc}", file=sys.stderr)
        status, code = f"solver failure: {exc}", EXIT_SOLVER
    except OSError as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        status, code = f"io failure: {exc}", EXIT_IO
    finally:
        pool.shutdown(wait=True)
    manifest["status"] = status
    try:
        write_manifest(out / "manifest.json", manifest)
    except OSError as exc:
        print(f"error: cannot write manifest: {exc}", file=sys.stderr)
        return EXIT_IO
    return code


def verify(suite: str, seed: int = 0) -> int:
    report = run_suite(suite, seed=seed)
    print(json.dumps(report, indent=2, default=_json_default))
    return EXIT_OK if report["passed"] else EXIT_CHECK


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="darwinfit", description="Darwin quasistatic transient field solver")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario")
    r.add_argument("scenario", type=Path)
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--dt", type=float)
    r.add_argument("--steps", type=int)
    r.add_argument("--scheme", choices=SCHEMES)
    r.add_argument("--solver", choices=("cg", "direct"))
    r.add_argument("--eqs-tol", type=float)
    r.add_argument("--mqs-tol", type=float)
    r.add_argument("--preconditioner")
    r.add_argument("--snap-every", type=int)
    r.add_argument("--snap-at", type=float, nargs="+", metavar="T", help="snapshot times (s)")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--no-timing", action="store_true", help="write wall_s as 0 for bitwise-stable output")

    v = sub.add_parser("verify", help="run a built-in verification suite")
    v.add_argument("suite", choices=SUITES)
    v.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "verify":
        return verify(args.suite, args.seed)
    overrides = {"dt": args.dt, "steps": args.steps, "scheme": args.scheme, "solver": args.solver,
                 "eqs_tol": args.eqs_tol, "mqs_tol": args.mqs_tol, "preconditioner": args.preconditioner}
    try:
        cfg = RunConfig(args.scenario, args.out, args.snap_every,
                        tuple(args.snap_at) if args.snap_at else None,
                        {k: v for k, v in overrides.items() if v is not None}, args.seed,
                        timing=not args.no_timing)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    start = time.perf_counter()
    code = run(cfg)
    log.info("finished in %.2f s with exit code %d", time.perf_counter() - start, code)
    return code


if __name__ == "__main__":
    sys.exit(main())
