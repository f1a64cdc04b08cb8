"""Time the preconditioned CG kernel on the compiled and NumPy backends.

    python benchmarks/bench_cg.py [--n 24] [--repeat 3]

Solves the EQS and MQS systems of a conducting brick of n^3 cells with both
backends and reports the best wall time, the iteration count and the
agreement of the two solutions. The EQS system is a Laplacian and needs many
iterations; the MQS one is dominated by its conductance term at this step.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from darwinfit.linsolve import BACKEND, cg_solve
from darwinfit.scenario import parse_scenario
from darwinfit.verify import conducting_brick_scenario


def bench(n: int, repeat: int, preconditioner: str) -> None:
    op = parse_scenario(conducting_brick_scenario(n=n)).build().stepper().op
    for label, A in (("EQS", op.A_eqs), ("MQS", op.A_mqs)):
        _bench_system(label, A, repeat, preconditioner)


def _bench_system(label, A, repeat, preconditioner) -> None:
    b = A @ np.random.default_rng(0).standard_normal(A.shape[0])
    backends = ["python"] + (["cython"] if BACKEND == "cython" else [])
    xs = {}
    print(f"{label} system: {A.shape[0]} unknowns, {A.data.size} nonzeros, preconditioner {preconditioner}")
    for name in backends:
        best = np.inf
        for _ in range(repeat):
            t0 = time.perf_counter()
            x, rep = cg_solve(A, b, tol=1e-10, preconditioner=preconditioner, backend=name)
            best = min(best, time.perf_counter() - t0)
        xs[name] = x
        print(f"{name:>7}: {best * 1e3:9.2f} ms  {rep.iterations:5d} iterations  rel residual {rep.residual:.2e}")
    if len(xs) == 2:
        d = np.abs(xs["python"] - xs["cython"]).max() / np.abs(xs["python"]).max()
        print(f"max relative difference between backends: {d:.2e}")
    else:
        print("compiled backend not built; only the NumPy path was timed")


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=24)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--preconditioner", default="jacobi", choices=("none", "jacobi", "ssor"))
    args = p.parse_args()
    bench(args.n, args.repeat, args.preconditioner)


if __name__ == "__main__":
    main()
