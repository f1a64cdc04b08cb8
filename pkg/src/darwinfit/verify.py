"""Built-in verification suites and the small benchmark problems they use.

Each suite returns a JSON-serialisable report::

    {"suite": name, "passed": bool, "checks": [{"name", "passed", "value", "limit"}, ...]}
"""
from __future__ import annotations

import math
import time
from dataclasses import replace

import numpy as np

import scipy.linalg as sla

from .darwin import (DarwinOperators, SimState, StepperConfig, advance_gauss_seidel,
                     advance_two_step)
from .grid import EntityIndex, StaggeredGrid
from .hodge import EPS0
from .linsolve import SingularMatrixError, SparseMatrix
from .operators import build_incidence
from .scenario import Problem, parse_scenario

SUITES = ("operators", "conservation", "convergence", "oracle")


# ------------------------------------------------------------------ problems
def _box(lo, hi):
    return {"min": list(map(float, lo)), "max": list(map(float, hi))}


def _cell_boxes(cells, h, values, key):
    """One material box per cell with the given per-cell values (x fastest)."""
    nx, ny, nz = cells
    out = []
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                v = values[i + nx * (j + ny * k)]
                out.append({"name": f"c{i}{j}{k}", "box": _box((i * h, j * h, k * h),
                                                             ((i + 1) * h, (j + 1) * h, (k + 1) * h)),
                            **v})
    return out


def mixed_scenario(n: int = 3, seed: int = 0, h: float = 0.01, f: float = 1e8,
                   steps: int = 100, solver: str = "direct", phi_outer: str = "ground",
                   dt_per_period: int = 40) -> dict:
    """Random per-cell materials, one wall electrode and one interior coil.

    Roughly a third of the cells insulate, but every interior node keeps at
    least one conducting neighbour, so the MQS block stays non-singular.
    """
    rng = np.random.default_rng(seed)
    ncell = n ** 3
    while True:
        insul = rng.random(ncell) < 0.35
        ins3 = insul.reshape((n, n, n), order="F")
        # interior node (i, j, k) touches cells i-1..i, j-1..j, k-1..k
        if not any(ins3[i - 1:i + 1, j - 1:j + 1, k - 1:k + 1].all()
                   for i in range(1, n) for j in range(1, n) for k in range(1, n)):
            break
    vals = []
    for c in range(ncell):
        vals.append({"kappa": 0.0 if insul[c] else float(10 ** rng.uniform(4, 6)),
                     "eps_r": float(rng.uniform(1, 4)), "mu_r": float(rng.uniform(1, 3))})
    L = n * h
    return {
        "schema": 1, "name": f"mixed-{n}-{seed}",
        "domain": _box((0, 0, 0), (L, L, L)), "cells": [n, n, n],
        "materials": _cell_boxes((n, n, n), h, vals, None),
        "electrodes": [{"name": "pad", "box": _box((0, 0, 0), (0, h, h)), "waveform": "drive"}],
        "coils": [{"name": "loop", "normal": "z", "box": _box((h, h, h), (2 * h, 2 * h, h)),
                   "waveform": "drive", "current": 1.0}],
        "waveforms": {"drive": {"kind": "ramped_sine", "amplitude": 1.0, "frequency": f,
                                "ramp_periods": 2}},
        "excitation": "both",
        "boundary": {"phi_outer": phi_outer},
        "stepper": {"dt": 1.0 / (f * dt_per_period), "steps": steps, "solver": solver},
    }


def conducting_brick_scenario(n: int = 4, h: float = 0.01, kappa: float = 1e6, f: float = 1e8,
                              steps: int = 50, scheme: str = "two_step", solver: str = "cg",
                              dt_per_period: int = 40) -> dict:
    """Fully conducting box with grounded PEC walls, driven by an interior loop."""
    L = n * h
    lo, hi = (1 * h, 1 * h, 2 * h), ((n - 1) * h, (n - 1) * h, 2 * h)
    return {
        "schema": 1, "name": f"brick-{n}",
        "domain": _box((0, 0, 0), (L, L, L)), "cells": [n, n, n],
        "background": {"kappa": kappa, "eps_r": 1.0, "mu_r": 1.0},
        "coils": [{"name": "loop", "normal": "z", "box": _box(lo, hi), "waveform": "drive"}],
        "waveforms": {"drive": {"kind": "ramped_sine", "amplitude": 1.0, "frequency": f,
                                "ramp_periods": 2}},
        "excitation": "current",
        "boundary": {"phi_outer": "ground"},
        "stepper": {"dt": 1.0 / (f * dt_per_period), "steps": steps, "scheme": scheme,
                    "solver": solver},
    }


def gs_scenarios(n: int = 4, h: float = 0.01) -> dict[str, dict]:
    """EQS-dominated, MQS-dominated and mixed problems for the sweep test."""
    L = n * h
    f = 1e8
    drive = {"drive": {"kind": "ramped_sine", "amplitude": 1.0, "frequency": f, "ramp_periods": 2}}
    plates = [{"name": "hot", "box": _box((0, 0, 0), (0, L, L)), "waveform": "drive"},
              {"name": "cold", "box": _box((L, 0, 0), (L, L, L)), "waveform": "drive", "scale": 0.0}]
    stepper = {"dt": 1.0 / (40 * f), "steps": 20, "solver": "direct", "scheme": "gauss_seidel",
               "gs_max_sweeps": 5, "gs_sweep_tol": 1e-10}
    core = _box((h, h, h), (L - h, L - h, L - h))
    eqs = {"schema": 1, "name": "eqs-dominated", "domain": _box((0, 0, 0), (L, L, L)),
           "cells": [n, n, n], "background": {"eps_r": 4.0},
           "materials": [{"name": "lossy", "box": core, "kappa": 1e-3, "eps_r": 10.0}],
           "electrodes": plates, "waveforms": drive, "excitation": "voltage",
           "boundary": {"phi_outer": "natural"}, "stepper": stepper}
    mqs = conducting_brick_scenario(n, h, kappa=1e7, steps=20, scheme="gauss_seidel", solver="direct")
    mqs["stepper"].update(gs_max_sweeps=5, gs_sweep_tol=1e-10)
    mqs["name"] = "mqs-dominated"
    mixed = {"schema": 1, "name": "mixed", "domain": _box((0, 0, 0), (L, L, L)),
             "cells": [n, n, n],
             "materials": [{"name": "bar", "box": _box((0, h, h), (L, 2 * h, 2 * h)), "kappa": 1e5},
                           {"name": "slab", "box": _box((h, 2 * h, h), (L - h, L - h, L - h)),
                            "kappa": 3e2, "eps_r": 6.0}],
             "electrodes": plates, "waveforms": drive, "excitation": "voltage",
             "boundary": {"phi_outer": "ground"}, "stepper": stepper}
    return {"eqs": eqs, "mqs": mqs, "mixed": mixed}


def capacitor_scenario(n: int = 10, L: float = 1e-2, eps_r=(2.0, 5.0), kappa=(1e-6, 4e-6),
                       voltage: float = 1.0, steps_per_tau: int = 200, n_tau: float = 3.0) -> dict:
    """Two lossy dielectric layers between full-face plates, DC step at t = 0+.

    Natural walls keep the potential one-dimensional, so the interface node
    plane obeys the two-state series RC ODE exactly in space.
    """
    h = L / n
    d1 = (n // 2) * h
    t = layered_tau(eps_r, kappa, (d1, L - d1))
    dt = t / steps_per_tau
    return {
        "schema": 1, "name": "two-layer-capacitor",
        "domain": _box((0, 0, 0), (L, 2 * h, 2 * h)), "cells": [n, 2, 2],
        "materials": [{"name": "layer1", "box": _box((0, 0, 0), (d1, 2 * h, 2 * h)),
                       "eps_r": eps_r[0], "kappa": kappa[0]},
                      {"name": "layer2", "box": _box((d1, 0, 0), (L, 2 * h, 2 * h)),
                       "eps_r": eps_r[1], "kappa": kappa[1]}],
        "electrodes": [{"name": "hot", "box": _box((0, 0, 0), (0, 2 * h, 2 * h)), "waveform": "dc"},
                       {"name": "cold", "box": _box((L, 0, 0), (L, 2 * h, 2 * h)), "waveform": "dc",
                        "scale": 0.0}],
        "waveforms": {"dc": {"kind": "step", "amplitude": voltage, "t0": 0.0}},
        "excitation": "voltage",
        "boundary": {"phi_outer": "natural"},
        "stepper": {"dt": dt, "steps": int(round(n_tau * steps_per_tau)), "solver": "direct"},
    }


def layered_tau(eps_r, kappa, d) -> float:
    c = sum(EPS0 * e / di for e, di in zip(eps_r, d))
    g = sum(k / di for k, di in zip(kappa, d))
    return c / g


def capacitor_decay(doc: dict | None = None, probes=(1.0, 2.0, 3.0)) -> dict:
    """Normalised interface relaxation ``(phi - phi_inf)/(phi_0+ - phi_inf)`` vs ``exp(-t/tau)``."""
    doc = doc or capacitor_scenario()
    sc = parse_scenario(doc)
    prob = sc.build()
    st = prob.stepper()
    m1, m2 = sc.materials
    d1 = m1.box.hi[0] - m1.box.lo[0]
    d2 = m2.box.hi[0] - m2.box.lo[0]
    c1, c2 = EPS0 * m1.eps_r / d1, EPS0 * m2.eps_r / d2
    g1, g2 = m1.kappa / d1, m2.kappa / d2
    v = sc.waveforms["dc"].amplitude
    tau = (c1 + c2) / (g1 + g2)
    phi0, phi_inf = v * c1 / (c1 + c2), v * g1 / (g1 + g2)
    grid = prob.grid
    i = int(np.argmin(np.abs(grid.node_coords[0] - d1)))
    plane = np.array([grid.flat_index(EntityIndex("node", (i, j, k))) for j in range(grid.node_counts[1])
                      for k in range(grid.node_counts[2])])
    rows = np.searchsorted(st.op.fn, plane)
    x = st.initial_state(0.0)
    ts, vals = [], []
    for _ in range(sc.steps):
        x = st.step(x)
        ts.append(x.t)
        vals.append(float(x.phi[rows].mean()))
    ts, vals = np.array(ts), np.array(vals)
    norm = (vals - phi_inf) / (phi0 - phi_inf)
    out = {"tau": tau, "phi0": phi0, "phi_inf": phi_inf, "probes": []}
    for p in probes:
        k = int(np.argmin(np.abs(ts - p * tau)))
        exact = math.exp(-ts[k] / tau)
        out["probes"].append({"t_over_tau": ts[k] / tau, "simulated": norm[k], "exact": exact,
                              "rel_err": abs(norm[k] - exact) / exact})
    return out


def eddy_decay(n: int = 4, h: float = 0.01, kappa: float = 1e6, dt_lambda: float = 0.01,
               n_over_lambda: float = 8.0, seed: int = 0) -> dict:
    """Free decay of a random eddy pattern in a fully conducting brick.

    The measured rate is the log-slope of ``|b|`` over the final eighth of the
    run; the reference is the smallest nonzero generalized eigenvalue of the
    curl-curl and conductivity matrices on the free edges.
    """
    doc = conducting_brick_scenario(n, h, kappa=kappa)
    doc.pop("coils")
    doc["excitation"] = "none"
    sc = parse_scenario(doc)
    prob = sc.build()
    op0 = prob.stepper().op
    K = op0.K_curl.csr.toarray()
    Mk = prob.hodge.M_kappa[op0.fe]
    lam = sla.eigh(K, np.diag(Mk), eigvals_only=True)
    lam_min = float(lam[lam > 1e-8 * lam.max()].min())
    dt = dt_lambda / lam_min
    cfg = replace(prob.config, dt=dt, solver="direct")
    st = prob.stepper(cfg)
    rng = np.random.default_rng(seed)
    x = SimState(rng.standard_normal(st.op.n_a), np.zeros(st.op.n_phi), 0.0, 0,
                 np.zeros(st.op.fx.size))
    steps = int(round(n_over_lambda / dt_lambda))
    norms = []
    for _ in range(steps):
        x = st.step(x)
        norms.append(np.linalg.norm(st.op.ops.C @ st.op.expand_a(x.a)))
    tail = np.arange(steps - steps // 8, steps)
    slope = np.polyfit(tail * dt, np.log(np.array(norms)[tail]), 1)[0]
    rate = -float(slope)
    return {"lambda_min": lam_min, "rate": rate, "rel_err": abs(rate - lam_min) / lam_min,
            "dt": dt, "steps": steps}


def rayleigh_probe(A, n_vectors: int = 1000, seed: int = 0) -> float:
    """Smallest ``x^T A x / (|x|^2 |A|_2)`` over random ``x`` (``|A|_2`` bounded by the inf-norm)."""
    csr = A.csr if isinstance(A, SparseMatrix) else A
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((csr.shape[0], n_vectors))
    q = np.einsum("ij,ij->j", X, csr @ X) / np.einsum("ij,ij->j", X, X)
    norm = float(abs(csr).sum(axis=1).max())
    return float(q.min()) / norm


def probe_systems(problem: Problem, n_vectors: int = 1000, seed: int = 0) -> dict:
    """Symmetry and Rayleigh probes of both subsystem matrices plus the coupled one."""
    op = problem.stepper(replace(problem.config, scheme="two_step")).op
    mono = SparseMatrix.from_any(op.monolithic, check=False)
    return {"eqs_symmetric": op.A_eqs.probe_symmetry(seed=seed),
            "mqs_symmetric": op.A_mqs.probe_symmetry(seed=seed),
            "eqs_rayleigh": rayleigh_probe(op.A_eqs, n_vectors, seed),
            "mqs_rayleigh": rayleigh_probe(op.A_mqs, n_vectors, seed),
            "monolithic_symmetric": mono.probe_symmetry(seed=seed)}


def probe_scenarios(seed: int = 0) -> dict[str, dict]:
    docs = {"mixed": mixed_scenario(3, seed), "brick": conducting_brick_scenario(),
            "capacitor": capacitor_scenario()}
    docs.update({f"gs-{k}": v for k, v in gs_scenarios().items()})
    return docs


def local_maxima(w) -> np.ndarray:
    """Indices of interior samples strictly above the left and not below the right neighbour."""
    w = np.asarray(w)
    i = np.arange(1, w.size - 1)
    return i[(w[i] > w[i - 1]) & (w[i] >= w[i + 1])]


def energy_exchange(t, w_e, w_m, t_start: float) -> dict:
    """Peak interleaving of the electric and magnetic energy after ``t_start``.

    ``interleaved`` is true when the merged, time-sorted peak sequence
    strictly alternates between W_e and W_m peaks (coincident peaks do not
    count as alternating); ``wm_at_we_peaks`` is the largest
    W_m at a W_e peak over the largest W_m of the window.
    """
    t, w_e, w_m = map(np.asarray, (t, w_e, w_m))
    keep = t >= t_start
    t, w_e, w_m = t[keep], w_e[keep], w_m[keep]
    pe, pm = local_maxima(w_e), local_maxima(w_m)
    merged = sorted([(i, "e") for i in pe] + [(i, "m") for i in pm])
    labels = [lab for _, lab in merged]
    inter = (len(pe) >= 2 and len(pm) >= 2 and not set(pe) & set(pm)
             and all(a != b for a, b in zip(labels, labels[1:])))
    ratio = float(w_m[pe].max() / w_m.max()) if pe.size and w_m.max() > 0 else float("inf")
    return {"we_peaks": t[pe].tolist(), "wm_peaks": t[pm].tolist(), "interleaved": bool(inter),
            "wm_at_we_peaks": ratio}


def random_state(problem: Problem, seed: int = 0, t: float = 0.0, scale: float = 1e-9) -> SimState:
    rng = np.random.default_rng(seed)
    op = problem.stepper().op
    return SimState(scale * rng.standard_normal(op.n_a), rng.standard_normal(op.n_phi), t, 0,
                    np.asarray(problem.source(t).phi_fixed))


def random_grid(rng: np.random.Generator, max_nodes: int = 12) -> StaggeredGrid:
    counts = tuple(int(c) for c in rng.integers(2, max_nodes + 1, size=3))
    spacings = tuple(rng.uniform(0.1, 2.0, size=c - 1) for c in counts)
    return StaggeredGrid(counts, spacings, tuple(rng.uniform(-1, 1, size=3)))


# -------------------------------------------------------------------- suites
def _check(name, passed, value=None, limit=None) -> dict:
    return {"name": name, "passed": bool(passed), "value": value, "limit": limit}


def _report(suite, checks, start) -> dict:
    return {"suite": suite, "passed": all(c["passed"] for c in checks), "checks": checks,
            "wall_s": time.perf_counter() - start}


def suite_operators(seed: int = 0, n_grids: int = 50) -> dict:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst_cg = worst_dc = worst_g1 = 0
    grids = [StaggeredGrid.uniform((n, n, n)) for n in range(1, 12)]
    grids += [random_grid(rng) for _ in range(n_grids)]
    for g in grids:
        ops = build_incidence(g)
        worst_cg = max(worst_cg, int(abs(ops.C @ ops.G).max()))
        worst_dc = max(worst_dc, int(abs(ops.D @ ops.C).max()))
        worst_g1 = max(worst_g1, int(abs(ops.G @ np.ones(g.n_nodes, dtype=np.int64)).max()))
    checks = [_check("max|C G|", worst_cg == 0, worst_cg, 0),
              _check("max|D C|", worst_dc == 0, worst_dc, 0),
              _check("max|G 1|", worst_g1 == 0, worst_g1, 0),
              _check("grids", True, len(grids))]
    return _report("operators", checks, start)


def conservation_run(problem: Problem, state: SimState, steps: int) -> tuple[float, float]:
    """Largest residual and largest residual-to-bound ratio over ``steps`` two-step advances."""
    st = problem.stepper()
    worst = ratio = 0.0
    for _ in range(steps):
        state = advance_two_step(state, st.op, st.source, replace(st.config, check_conservation=False))
        scale = st.op.GtMk_cons_norm * float(np.abs(state.a).max())
        tol = st.config.conservation_tol
        worst = max(worst, state.info.div_residual)
        ratio = max(ratio, state.info.div_residual / (tol * scale) if scale > 0 else 0.0)
    return worst, ratio


def suite_conservation(seed: int = 0, steps: int = 100) -> dict:
    start = time.perf_counter()
    checks = []
    for solver, factor in (("direct", 1.0), ("cg", 10.0)):
        prob = parse_scenario(mixed_scenario(3, seed, solver=solver, steps=steps)).build()
        worst, ratio = conservation_run(prob, random_state(prob, seed), steps)
        checks.append(_check(f"{solver}: residual / (tol * scale)", ratio <= factor, ratio, factor))
        checks.append(_check(f"{solver}: max residual", True, worst))
    return _report("conservation", checks, start)


def _trajectory(problem: Problem, dt: float, t_end: float, scheme: str, every: float):
    """phi and b at multiples of ``every`` for one time step size."""
    cfg = replace(problem.config, dt=dt, scheme=scheme, solver="direct")
    st = problem.stepper(cfg)
    x = st.initial_state(0.0)
    n_total = int(round(t_end / dt))
    stride = int(round(every / dt))
    out = []
    for n in range(1, n_total + 1):
        x = st.step(x)
        if n % stride == 0:
            out.append(np.concatenate([x.phi, st.op.ops.C @ st.op.expand_a(x.a)]))
    return np.array(out)


def convergence_study(problem: Problem, dt: float, t_end: float, scheme: str = "two_step",
                      ref_factor: int = 64) -> dict:
    """Errors of ``scheme`` at dt, dt/2, dt/4 against a monolithic dt/ref_factor run."""
    ref = _trajectory(problem, dt / ref_factor, t_end, "monolithic", dt)
    errs = []
    for k in (1, 2, 4):
        traj = _trajectory(problem, dt / k, t_end, scheme, dt)
        # normalise phi and b separately so neither block dominates
        n_phi = problem.stepper().op.n_phi
        e_phi = np.abs(traj[:, :n_phi] - ref[:, :n_phi]).max() / np.abs(ref[:, :n_phi]).max()
        e_b = np.abs(traj[:, n_phi:] - ref[:, n_phi:]).max() / np.abs(ref[:, n_phi:]).max()
        errs.append(max(e_phi, e_b))
    orders = [math.log2(errs[0] / errs[1]), math.log2(errs[1] / errs[2])]
    return {"errors": errs, "orders": orders}


def convergence_problem(seed: int = 0) -> Problem:
    doc = mixed_scenario(4, seed, solver="direct", phi_outer="ground", f=1e8)
    doc["stepper"]["kappa_reg"] = 1e-3
    return parse_scenario(doc).build()


def suite_convergence(seed: int = 0) -> dict:
    start = time.perf_counter()
    prob = convergence_problem(seed)
    f = 1e8
    res = convergence_study(prob, dt=1 / (20 * f), t_end=1.5 / f)
    checks = [_check(f"order {i}", 0.8 <= o <= 1.2, o, [0.8, 1.2]) for i, o in enumerate(res["orders"])]
    checks.append(_check("errors", res["errors"][0] > res["errors"][1] > res["errors"][2], res["errors"]))
    return _report("convergence", checks, start)


def two_step_vs_monolithic(steps: int = 50) -> float:
    """Largest per-step relative difference of b between the two schemes."""
    base = parse_scenario(conducting_brick_scenario(steps=steps)).build()
    two = base.stepper(replace(base.config, scheme="two_step", solver="cg"))
    mono = base.stepper(replace(base.config, scheme="monolithic"))
    x2 = two.initial_state()
    xm = mono.initial_state()
    worst = 0.0
    for _ in range(steps):
        x2, xm = two.step(x2), mono.step(xm)
        b2 = two.op.ops.C @ two.op.expand_a(x2.a)
        bm = mono.op.ops.C @ mono.op.expand_a(xm.a)
        worst = max(worst, np.linalg.norm(b2 - bm) / np.linalg.norm(bm))
    return worst


def monolithic_is_singular_without_reg(seed: int = 0) -> bool:
    """Insulating region without regularization must make the oracle fail."""
    doc = gs_scenarios()["mixed"]
    doc["stepper"] = {**doc["stepper"], "scheme": "monolithic", "kappa_reg": 0.0}
    prob = parse_scenario(doc).build()
    try:
        prob.stepper()
    except SingularMatrixError:
        return True
    return False


def gs_sweep_increments(doc: dict, steps: int = 20) -> tuple[int, float]:
    """Largest sweep count and largest sweep-2 increment over a Gauss-Seidel run."""
    prob = parse_scenario(doc).build()
    st = prob.stepper()
    x = st.initial_state()
    sweeps_max, inc_max = 0, 0.0
    for _ in range(steps):
        x, sweeps = advance_gauss_seidel(x, st.op, st.source, st.config)
        incs = x.info.sweep_increments
        sweeps_max = max(sweeps_max, sweeps)
        if len(incs) > 1:
            inc_max = max(inc_max, incs[1])
    return sweeps_max, inc_max


def suite_oracle(seed: int = 0) -> dict:
    start = time.perf_counter()
    diff = two_step_vs_monolithic()
    checks = [_check("two-step vs monolithic |db|/|b|", diff <= 1e-6, diff, 1e-6),
              _check("capacitor relaxation rel err",
                     max(p["rel_err"] for p in capacitor_decay()["probes"]) <= 0.02, None, 0.02),
              _check("unregularized insulator is singular", monolithic_is_singular_without_reg(seed))]
    for name, doc in probe_scenarios(seed).items():
        pr = probe_systems(parse_scenario(doc).build(), seed=seed)
        ok = (pr["eqs_symmetric"] and pr["mqs_symmetric"] and not pr["monolithic_symmetric"]
              and min(pr["eqs_rayleigh"], pr["mqs_rayleigh"]) >= -1e-12)
        checks.append(_check(f"probes {name}", ok, pr))
    for name, doc in gs_scenarios().items():
        sweeps, inc = gs_sweep_increments(doc, steps=10)
        checks.append(_check(f"gauss-seidel {name}: sweeps", sweeps <= 2, sweeps, 2))
        checks.append(_check(f"gauss-seidel {name}: sweep-2 increment", inc <= 1e-10, inc, 1e-10))
    return _report("oracle", checks, start)


def run_suite(name: str, seed: int = 0) -> dict:
    fn = {"operators": suite_operators, "conservation": suite_conservation,
          "convergence": suite_convergence, "oracle": suite_oracle}.get(name)
    if fn is None:
        raise ValueError(f"unknown suite {name!r}; expected one of {SUITES}")
    return fn(seed=seed)
