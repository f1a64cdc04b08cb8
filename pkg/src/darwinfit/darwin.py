"""Discrete Darwin model: assembly and time stepping.

Unknowns are the line integrals ``a`` of the magnetic vector potential on the
free (non-PEC) edges and the nodal electric potentials ``phi`` on the free
(non-Dirichlet) nodes.  With implicit Euler steps of size ``dt`` and
``M_sigma = M_kappa + M_eps / dt`` the coupled system is::

    [C^T M_nu C + M_kappa/dt   M_sigma G  ] [a  ]    1  [M_kappa      M_eps G    ] [a  ]     [j_s    ]
    [G^T M_kappa/dt            G^T M_sigma G] [phi]  = -- [G^T M_kappa  G^T M_eps G] [phi]   + [G^T j_s]
                                       (n+1)        dt                             (n)          (n+1)

The two-step scheme solves the electro-quasistatic block for ``phi`` and
then the magneto-quasistatic block for ``a``; see :func:`advance_two_step`.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Protocol, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .grid import StaggeredGrid
from .hodge import HodgeMatrices, combine_sigma
from .linsolve import (DenseLU, SingularMatrixError, SolveReport, SolverError, SparseMatrix,
                       cg_solve)
from .operators import IncidenceOperators, conservation_nodes

log = logging.getLogger(__name__)

SCHEMES = ("two_step", "gauss_seidel", "monolithic")


class ConservationError(SolverError):
    """Discrete divergence identity violated beyond its solver-tolerance bound."""


@dataclass(frozen=True)
class StepperConfig:
    dt: float
    scheme: str = "two_step"
    solver: str = "cg"  # "cg" or "direct" (dense, for verification)
    eqs_tol: float = 1e-10
    mqs_tol: float = 1e-10
    max_iter: int | None = None
    preconditioner: str = "jacobi"
    omega: float = 1.5
    extrapolation: str = "previous"  # CG initial guess: previous step or zero
    gs_max_sweeps: int = 10
    gs_sweep_tol: float = 1e-8
    kappa_reg: float | None = None  # monolithic only; None picks the default rule
    check_conservation: bool = True
    mqs_mass_reg: float = 0.0  # fallback (1/dt)*kappa on every free edge
    equilibrate: bool = True  # CG on the diagonally scaled system
    project_kernel: bool = True  # project CG right-hand sides onto the range
    kernel_tol: float = 1e-6  # largest null-space share of a right-hand side before aborting

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.solver not in ("cg", "direct"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.extrapolation not in ("previous", "zero"):
            raise ValueError(f"unknown extrapolation {self.extrapolation!r}")
        for name in ("eqs_tol", "mqs_tol"):
            tol = getattr(self, name)
            if not 0 < tol < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {tol}")
        if self.gs_max_sweeps < 1:
            raise ValueError("gs_max_sweeps must be >= 1")

    @property
    def conservation_tol(self) -> float:
        return 1e-12 if self.solver == "direct" else self.mqs_tol


@dataclass(frozen=True)
class StepInfo:
    eqs_iters: int = 0
    eqs_res: float = 0.0
    mqs_iters: int = 0
    mqs_res: float = 0.0
    div_residual: float = 0.0
    div_bound: float = 0.0
    sweeps: int = 1
    wall_s: float = 0.0
    sweep_increments: tuple[float, ...] = ()  # max(|dphi|/|phi|, |da|/|a|) per sweep


@dataclass(frozen=True, eq=False)
class SimState:
    """Free DOFs at time ``t`` plus the Dirichlet potentials imposed then."""

    a: np.ndarray
    phi: np.ndarray
    t: float
    n: int = 0
    phi_fixed: np.ndarray = field(default_factory=lambda: np.zeros(0))
    info: StepInfo | None = None

    def __post_init__(self):
        for name in ("a", "phi", "phi_fixed"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"state vector {name!r} has non-finite entries")
            object.__setattr__(self, name, arr)


@dataclass(frozen=True, eq=False)
class SourceTerms:
    """Full-length edge currents (A) and the Dirichlet node potentials (V)."""

    j_s: np.ndarray
    phi_fixed: np.ndarray


class Source(Protocol):
    def __call__(self, t: float) -> SourceTerms: ...


class ZeroSource:
    def __init__(self, n_edges: int, n_fixed: int):
        self.n_edges, self.n_fixed = n_edges, n_fixed

    def __call__(self, t: float) -> SourceTerms:
        return SourceTerms(np.zeros(self.n_edges), np.zeros(self.n_fixed))


class FunctionSource:
    """Separable source ``j(t) = j_shape * f(t)``, ``phi_fixed(t) = p_shape * g(t)``."""

    def __init__(self, j_shape, j_wave: Callable[[float], float], p_shape, p_wave: Callable[[float], float]):
        self.j_shape = np.asarray(j_shape, dtype=float)
        self.p_shape = np.asarray(p_shape, dtype=float)
        self.j_wave, self.p_wave = j_wave, p_wave

    def __call__(self, t: float) -> SourceTerms:
        return SourceTerms(self.j_shape * self.j_wave(t), self.p_shape * self.p_wave(t))


def _diag(v) -> sp.dia_matrix:
    return sp.diags(np.asarray(v, dtype=float))


def mqs_kernel_basis(grid: StaggeredGrid, ops: IncidenceOperators, hodge: HodgeMatrices) -> sp.csr_matrix:
    """Basis of the null space of ``C^T M_nu C + M_kappa / dt`` on the free edges.

    A null vector is a gradient ``G psi`` that vanishes on masked edges (they
    carry no unknown) and on conducting edges.  So ``psi`` is constant on each
    cluster of nodes linked by masked or conducting edges, and the clusters'
    indicator gradients, less one for the global constant, span the kernel.
    """
    tails, heads = grid.edge_endpoints()
    link = ops.pec_edge_mask | (hodge.M_kappa > 0)
    adj = sp.coo_matrix((np.ones(int(link.sum())), (tails[link], heads[link])),
                        shape=(grid.n_nodes, grid.n_nodes))
    n_comp, label = connected_components(adj, directed=False)
    if n_comp < 2:
        return sp.csr_matrix((ops.free_edges.size, 0))
    P = sp.csr_matrix((np.ones(grid.n_nodes), (np.arange(grid.n_nodes), label)), shape=(grid.n_nodes, n_comp))
    keep = np.setdiff1d(np.arange(n_comp), [np.bincount(label).argmax()])
    V = (ops.G.astype(float).tocsr()[ops.free_edges] @ P[:, keep]).tocsr()
    V.eliminate_zeros()
    return V


class Subsystem:
    """Symmetric positive semi-definite block with a known null-space basis ``V``.

    Right-hand sides are projected onto the range, orthogonally in the
    ``diag(A)`` metric (the metric of the equilibrated CG).  In exact
    arithmetic the two-step right-hand sides need no projection; in floating
    point the EQS residual leaks into the MQS null space and CG on an
    inconsistent semi-definite system eventually breaks down.  Direct solves
    use LU on ``A + D V (V^T D V)^-1 V^T D``, which is non-singular and agrees
    with ``A`` on the range, so the null-space part of the initial iterate is
    kept as CG keeps it.
    """

    def __init__(self, A: SparseMatrix, V: sp.csr_matrix):
        self.A, self.V = A, V.tocsr()
        self.d = A.diag

    @property
    def n_kernel(self) -> int:
        return self.V.shape[1]

    @cached_property
    def gram(self) -> SparseMatrix:
        return SparseMatrix.from_any((self.V.T @ _diag(self.d) @ self.V).tocsr(), symmetric=True)

    def project(self, b, tol: float = 1e-14) -> np.ndarray:
        if not self.n_kernel:
            return b
        g = self.V.T @ b
        if not np.any(g):
            return b
        if self.n_kernel <= 2000:
            c = self._gram_lu.solve(g, rtol=1e-8)
        else:
            c, rep = cg_solve(self.gram, g, tol=tol, preconditioner="jacobi")
            if not rep.converged and rep.residual > 1e-10:
                raise SolverError(f"null-space projection did not converge: residual {rep.residual:.3e}")
        return b - self.d * (self.V @ c)

    @cached_property
    def _gram_lu(self) -> DenseLU:
        return DenseLU(self.gram)

    @cached_property
    def lu(self) -> DenseLU:
        A = self.A.csr.toarray()
        if self.n_kernel:
            DV = (self.d[:, None] * self.V.toarray())
            A = A + DV @ np.linalg.solve(self.gram.csr.toarray(), DV.T)
        return DenseLU(A)

    def solve(self, b, x0, tol: float, config: "StepperConfig",
              terms: Sequence[np.ndarray] = ()) -> tuple[np.ndarray, SolveReport]:
        """Solve ``A x = b`` starting from ``x0``.

        ``terms`` are the summands of ``b``; their sizes set the reference for
        the null-space leak check, since ``b`` itself can be pure rounding
        noise once its terms cancel.
        """
        if config.extrapolation == "zero":
            x0 = np.zeros_like(x0)
        A = self.A
        # solve for the update x - x0 so the tolerance is relative to what is
        # left to solve, not to terms that nearly cancel in b
        ax0 = A @ x0
        r0 = b - ax0
        if self.n_kernel and (config.project_kernel or config.solver == "direct"):
            r0p = self.project(r0)
            s = 1.0 / np.sqrt(self.d)
            ref = max(np.linalg.norm(s * b), np.linalg.norm(s * r0), np.linalg.norm(s * ax0),
                      *(np.linalg.norm(s * t) for t in terms))
            leak = np.linalg.norm(s * (r0 - r0p)) / ref if ref > 0 else 0.0
            if leak > config.kernel_tol:
                raise SolverError(f"right-hand side has a null-space share of {leak:.3e}; "
                                  "the subsystems are inconsistent")
            r0 = r0p
        start = time.perf_counter()
        if config.solver == "direct":
            dx = self.lu.solve(r0, rtol=1e-10) if np.any(r0) else np.zeros_like(r0)
            x = x0 + dx
            r = b - A @ x
            if self.n_kernel:
                r = self.project(r)
            nb = np.linalg.norm(b)
            rel = float(np.linalg.norm(r) / nb) if nb > 0 else float(np.linalg.norm(r))
            return x, SolveReport(1, rel, True, time.perf_counter() - start)
        if config.equilibrate:
            # the diagonal spans many decades next to conductors; scaling makes
            # the stopping test weigh every row alike
            As, s = A.equilibrated
            y, rep = cg_solve(As, s * r0, tol=tol, max_iter=config.max_iter,
                              preconditioner=config.preconditioner, omega=config.omega)
            x = x0 + s * y
        else:
            dx, rep = cg_solve(A, r0, tol=tol, max_iter=config.max_iter,
                               preconditioner=config.preconditioner, omega=config.omega)
            x = x0 + dx
        if not rep.converged:
            raise SolverError(f"CG did not converge ({rep.status}): residual {rep.residual:.3e} "
                              f"after {rep.iterations} iterations")
        return x, rep


class DarwinOperators:
    """All matrices of the discrete Darwin system for one time step size."""

    def __init__(self, grid: StaggeredGrid, ops: IncidenceOperators, hodge: HodgeMatrices, dt: float,
                 mass_reg: float = 0.0):
        if hodge.M_sigma is None or hodge.dt != dt:
            hodge = combine_sigma(hodge, dt)
        if ops.G.shape != (grid.n_edges, grid.n_nodes) or ops.C.shape != (grid.n_faces, grid.n_edges):
            raise ValueError("incidence operators do not match the grid")
        if (hodge.M_kappa.size, hodge.M_nu.size) != (grid.n_edges, grid.n_faces):
            raise ValueError("Hodge matrices do not match the grid")
        self.grid, self.ops, self.hodge, self.dt = grid, ops, hodge, float(dt)
        self.fe = ops.free_edges
        self.fn = ops.free_nodes
        self.fx = ops.fixed_nodes
        cons = conservation_nodes(grid, ops)
        self.cons_rows = np.searchsorted(self.fn, cons)

        G = ops.G.astype(float).tocsr()
        C = ops.C.astype(float).tocsr()
        self.G = G
        Gf = G[self.fe]  # free edges x all nodes
        self.K_curl = SparseMatrix.from_any(
            (C[:, self.fe].T @ _diag(hodge.M_nu) @ C[:, self.fe]).tocsr(), symmetric=True)

        Leqs = (G.T @ _diag(hodge.M_sigma) @ G).tocsr()
        Leps = (G.T @ _diag(hodge.M_eps) @ G).tocsr()
        self.A_eqs = SparseMatrix.from_any(Leqs[self.fn][:, self.fn], symmetric=True)
        self.A_eqs_fixed = Leqs[self.fn][:, self.fx].tocsr()
        self.L_eps_rows = Leps[self.fn].tocsr()  # free rows, all columns
        self.L_eps_full = Leps

        mk = hodge.M_kappa[self.fe]
        mass = mk / dt + (mass_reg * grid.edge_dual_areas[self.fe] / grid.edge_lengths[self.fe] / dt
                          if mass_reg > 0 else 0.0)
        self.A_mqs = SparseMatrix.from_any((self.K_curl.csr + _diag(mass)).tocsr(), symmetric=True)
        self.MsG = (_diag(hodge.M_sigma[self.fe]) @ Gf).tocsr()
        self.MeG = (_diag(hodge.M_eps[self.fe]) @ Gf).tocsr()
        self.MkG = (_diag(mk) @ Gf).tocsr()
        self.GtMk = (Gf.T @ _diag(mk)).tocsr()[self.fn]  # free nodes x free edges
        self.GtMk_cons = self.GtMk[self.cons_rows]
        self.GtMk_cons_norm = float(abs(self.GtMk_cons).sum(axis=1).max()) if self.cons_rows.size else 0.0
        self.Leqs_cons_norm = (float(abs(Leqs[self.fn[self.cons_rows]]).sum(axis=1).max())
                               if self.cons_rows.size else 0.0)

        self.mqs = Subsystem(self.A_mqs, mqs_kernel_basis(grid, ops, hodge) if mass_reg <= 0
                             else sp.csr_matrix((self.n_a, 0)))
        self.eqs = Subsystem(self.A_eqs, sp.csr_matrix(np.ones((self.n_phi, 1))) if not self.fx.size
                             else sp.csr_matrix((self.n_phi, 0)))

    # ------------------------------------------------------------ bookkeeping
    @property
    def n_a(self) -> int:
        return self.fe.size

    @property
    def n_phi(self) -> int:
        return self.fn.size

    def expand_a(self, a_free) -> np.ndarray:
        out = np.zeros(self.grid.n_edges)
        out[self.fe] = a_free
        return out

    def expand_phi(self, phi_free, phi_fixed) -> np.ndarray:
        out = np.zeros(self.grid.n_nodes)
        out[self.fn] = phi_free
        out[self.fx] = phi_fixed
        return out

    def zero_state(self, t: float = 0.0) -> SimState:
        return SimState(np.zeros(self.n_a), np.zeros(self.n_phi), t, 0, np.zeros(self.fx.size))

    def conservation_residual(self, a_next, a_prev) -> float:
        if not self.cons_rows.size:
            return 0.0
        return float(np.abs(self.GtMk_cons @ (a_next - a_prev)).max())

    # ---------------------------------------------------------- coupled form
    @cached_property
    def monolithic(self) -> sp.csr_matrix:
        """System matrix of the implicit Euler step, free DOFs only."""
        return sp.bmat([
            [self.A_mqs.csr, self.MsG[:, self.fn]],
            [self.GtMk / self.dt, self.A_eqs.csr],
        ], format="csr")

    @cached_property
    def monolithic_mass(self) -> sp.csr_matrix:
        """Right-hand-side block acting on the previous state (full phi columns)."""
        mk = _diag(self.hodge.M_kappa[self.fe])
        return sp.bmat([
            [mk, self.MeG],
            [self.GtMk, self.L_eps_rows],
        ], format="csr") / self.dt

    def monolithic_rhs(self, prev: SimState, src: SourceTerms) -> np.ndarray:
        prev_full = np.concatenate([prev.a, self.expand_phi(prev.phi, prev.phi_fixed)])
        js = src.j_s
        rhs = self.monolithic_mass @ prev_full
        rhs[: self.n_a] += js[self.fe] - self.MsG[:, self.fx] @ src.phi_fixed
        rhs[self.n_a:] += (self.G.T @ js)[self.fn] - self.A_eqs_fixed @ src.phi_fixed
        return rhs


def assemble_darwin(grid: StaggeredGrid, ops: IncidenceOperators, hodge: HodgeMatrices,
                    dt: float, mass_reg: float = 0.0) -> DarwinOperators:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return DarwinOperators(grid, ops, hodge, dt, mass_reg)


# ----------------------------------------------------------------- sub-steps
def eqs_terms(state: SimState, op: DarwinOperators, src: SourceTerms, coupling=None) -> list[np.ndarray]:
    phi_full = op.expand_phi(state.phi, state.phi_fixed)
    terms = [(op.G.T @ src.j_s)[op.fn], (op.L_eps_rows @ phi_full) / op.dt,
             -(op.A_eqs_fixed @ src.phi_fixed)]
    if coupling is not None:
        terms.append(-coupling)
    return terms


def eqs_rhs(state: SimState, op: DarwinOperators, src: SourceTerms, coupling=None) -> np.ndarray:
    t = eqs_terms(state, op, src, coupling)
    rhs = t[0] + t[1]
    for extra in t[2:]:
        rhs += extra
    return rhs


def eqs_step(state: SimState, op: DarwinOperators, src: SourceTerms, config: StepperConfig,
             coupling=None, x0=None) -> tuple[np.ndarray, SolveReport]:
    """Electro-quasistatic solve ``G^T M_sigma G phi = G^T j_s + G^T M_eps G phi_n / dt``.

    ``coupling`` is the extra ``G^T M_kappa (a_m - a_n) / dt`` term of a block
    Gauss-Seidel sweep; the two-step scheme passes none.
    """
    terms = eqs_terms(state, op, src, coupling)
    rhs = terms[0] + terms[1]
    for extra in terms[2:]:
        rhs += extra
    return op.eqs.solve(rhs, state.phi if x0 is None else x0, config.eqs_tol, config, terms)


def mqs_terms(state: SimState, op: DarwinOperators, src: SourceTerms, phi_next_full) -> list[np.ndarray]:
    phi_prev_full = op.expand_phi(state.phi, state.phi_fixed)
    mk = op.hodge.M_kappa[op.fe]
    return [src.j_s[op.fe], mk * state.a / op.dt, -(op.MsG @ phi_next_full),
            (op.MeG @ phi_prev_full) / op.dt]


def mqs_rhs(state: SimState, op: DarwinOperators, src: SourceTerms, phi_next_full) -> np.ndarray:
    j, m, s, e = mqs_terms(state, op, src, phi_next_full)
    return j + m + s + e


def mqs_step(state: SimState, op: DarwinOperators, src: SourceTerms, phi_next_full,
             config: StepperConfig, x0=None) -> tuple[np.ndarray, SolveReport]:
    """Magneto-quasistatic solve ``(C^T M_nu C + M_kappa/dt) a = ...`` warm-started at ``a_n``."""
    terms = mqs_terms(state, op, src, phi_next_full)
    j, m, s, e = terms
    return op.mqs.solve(j + m + s + e, state.a if x0 is None else x0, config.mqs_tol, config, terms)


def conservation_scale(op: DarwinOperators, a_next, phi_scale: float = 0.0) -> float:
    """Size of the terms the divergence residual is measured against.

    ``|G^T M_kappa| |a|`` alone; with ``phi_scale`` (the largest potential of
    the step) the EQS term ``dt |G^T M_sigma G| |phi|`` is added, because the
    EQS residual enters the identity as well and dominates when the
    conductivity is small.
    """
    scale = op.GtMk_cons_norm * float(np.abs(a_next).max(initial=0.0))
    return scale + op.dt * op.Leqs_cons_norm * phi_scale


def _check_conservation(op: DarwinOperators, a_next, a_prev, config: StepperConfig,
                        phi_scale: float = 0.0) -> tuple[float, float]:
    res = op.conservation_residual(a_next, a_prev)
    bound = 10.0 * config.conservation_tol * conservation_scale(op, a_next, phi_scale)
    if config.check_conservation and res > bound:
        raise ConservationError(
            f"divergence residual {res:.3e} exceeds bound {bound:.3e}; tighten the solver tolerances")
    return res, bound


# ------------------------------------------------------------------ steppers
def advance_two_step(state: SimState, op: DarwinOperators, source: Source,
                     config: StepperConfig) -> SimState:
    """One step of the two-step scheme: EQS solve for phi, then MQS solve for a."""
    start = time.perf_counter()
    t_next = state.t + op.dt
    src = source(t_next)
    phi, rep_e = eqs_step(state, op, src, config)
    phi_full = op.expand_phi(phi, src.phi_fixed)
    a, rep_m = mqs_step(state, op, src, phi_full, config)
    res, bound = _check_conservation(op, a, state.a, config, _phi_scale(phi_full, state))
    info = StepInfo(rep_e.iterations, rep_e.residual, rep_m.iterations, rep_m.residual,
                    res, bound, 1, time.perf_counter() - start)
    return SimState(a, phi, t_next, state.n + 1, src.phi_fixed, info)


def advance_eqs(state: SimState, op: DarwinOperators, source: Source, config: StepperConfig) -> SimState:
    """Pure electro-quasistatic step; ``a`` is carried along unchanged."""
    start = time.perf_counter()
    t_next = state.t + op.dt
    src = source(t_next)
    phi, rep = eqs_step(state, op, src, config)
    info = StepInfo(rep.iterations, rep.residual, 0, 0.0, 0.0, 0.0, 1, time.perf_counter() - start)
    return SimState(state.a, phi, t_next, state.n + 1, src.phi_fixed, info)


def _phi_scale(phi_next_full, state: SimState) -> float:
    return max(float(np.abs(phi_next_full).max(initial=0.0)), float(np.abs(state.phi).max(initial=0.0)),
               float(np.abs(state.phi_fixed).max(initial=0.0)))


def _rms(v) -> float:
    return float(np.sqrt(np.mean(np.square(v)))) if np.size(v) else 0.0


def _rel_increment(new, old, floor: float = 0.0) -> float:
    """RMS increment over ``max(rms(new), floor)``.

    ``floor`` keeps a vector whose exact value is zero (phi under a pure
    coil drive, say) from turning rounding noise into an O(1) increment.
    """
    d = _rms(new - old)
    if d == 0:
        return 0.0
    n = max(_rms(new), floor)
    return d / n if n > 0 else np.inf


def advance_gauss_seidel(state: SimState, op: DarwinOperators, source: Source,
                         config: StepperConfig) -> tuple[SimState, int]:
    """Block Gauss-Seidel sweeps on the coupled implicit Euler system.

    Each sweep solves the EQS block with the coupling term from the latest
    ``a`` and then the MQS block.  Sweeping stops once both relative
    increments fall below ``gs_sweep_tol``.
    """
    start = time.perf_counter()
    t_next = state.t + op.dt
    src = source(t_next)
    a_m, phi_m = state.a.copy(), state.phi.copy()
    it_e = it_m = 0
    rep_e = rep_m = None
    sweeps = 0
    converged = False
    increments = []
    for sweeps in range(1, config.gs_max_sweeps + 1):
        coupling = op.GtMk @ (a_m - state.a) / op.dt
        phi_new, rep_e = eqs_step(state, op, src, config, coupling=coupling, x0=phi_m)
        a_new, rep_m = mqs_step(state, op, src, op.expand_phi(phi_new, src.phi_fixed), config, x0=a_m)
        it_e += rep_e.iterations
        it_m += rep_m.iterations
        # each potential is floored by the voltage scale of the other
        v_rem = _rms(a_new - state.a) / op.dt
        v_irr = _rms(op.G[op.fe] @ op.expand_phi(phi_new, src.phi_fixed))
        d_phi = _rel_increment(phi_new, phi_m, v_rem)
        d_a = _rel_increment(a_new, a_m, op.dt * v_irr)
        log.debug("sweep %d: |dphi|/|phi|=%.3e |da|/|a|=%.3e", sweeps, d_phi, d_a)
        a_m, phi_m = a_new, phi_new
        increments.append(max(d_phi, d_a))
        if max(d_phi, d_a) <= config.gs_sweep_tol:
            converged = True
            break
    if not converged and config.gs_max_sweeps > 1:
        raise SolverError(f"Gauss-Seidel did not converge in {config.gs_max_sweeps} sweeps")
    res, bound = _check_conservation(op, a_m, state.a, config,
                                     _phi_scale(op.expand_phi(phi_m, src.phi_fixed), state))
    info = StepInfo(it_e, rep_e.residual, it_m, rep_m.residual, res, bound, sweeps,
                    time.perf_counter() - start, tuple(increments))
    return SimState(a_m, phi_m, t_next, state.n + 1, src.phi_fixed, info), sweeps


class MonolithicOracle:
    """Dense direct solver for the coupled implicit Euler system.

    The continuity block row at a node whose incident edges are all free is
    ``G^T`` applied to the Ampere block row (``G^T C^T = 0``), so the coupled
    matrix is rank deficient by the number of such nodes whatever the
    conductivity.  The oracle replaces exactly those rows by the gauge
    ``G^T M_kappa (a - a_n) = 0`` that the two-step scheme satisfies, which
    leaves every row of the coupled system satisfied and makes the square
    system non-singular once ``M_kappa`` is positive on all free edges.
    Without Dirichlet nodes the potential floats; one further continuity row
    (the sum of all of them vanishes) is swapped for ``sum(phi) = sum(phi_n)``.
    """

    def __init__(self, op: DarwinOperators):
        self.op = op
        na = op.n_a
        self.gauge_rows = na + op.cons_rows
        M = op.monolithic.tolil(copy=True)
        gauge = (op.GtMk_cons / op.dt).tocsr()
        for k, row in enumerate(self.gauge_rows):
            lo, hi = gauge.indptr[k], gauge.indptr[k + 1]
            M.rows[row] = list(gauge.indices[lo:hi])
            M.data[row] = list(gauge.data[lo:hi])
        self.pin_row = None
        if op.fx.size == 0:
            others = np.setdiff1d(np.arange(na, na + op.n_phi), self.gauge_rows)
            self.pin_row = int(others[-1]) if others.size else int(self.gauge_rows[-1])
            M.rows[self.pin_row] = list(range(na, na + op.n_phi))
            M.data[self.pin_row] = [1.0] * op.n_phi
        self.closed = M.tocsr()
        self.lu = DenseLU(self.closed)

    def solve(self, prev: SimState, src: SourceTerms) -> np.ndarray:
        op = self.op
        rhs = op.monolithic_rhs(prev, src)
        rhs[self.gauge_rows] = op.GtMk_cons @ prev.a / op.dt
        if self.pin_row is not None:
            rhs[self.pin_row] = prev.phi.sum()
        x = self.lu.solve(rhs)
        full_res = np.linalg.norm(op.monolithic @ x - op.monolithic_rhs(prev, src))
        scale = np.linalg.norm(op.monolithic_rhs(prev, src)) + np.linalg.norm(op.monolithic @ x)
        if full_res > 1e-9 * max(scale, np.finfo(float).tiny):
            raise SingularMatrixError(f"coupled system residual {full_res / scale:.3e} after solve")
        return x


def advance_monolithic(state: SimState, op: DarwinOperators, source: Source, config: StepperConfig,
                       oracle: MonolithicOracle | None = None) -> SimState:
    """One implicit Euler step of the full coupled system by dense LU.

    ``op`` should be assembled from regularized conductivities when parts of
    the domain are insulating; otherwise the factorization reports the
    singularity.
    """
    start = time.perf_counter()
    oracle = oracle or MonolithicOracle(op)
    t_next = state.t + op.dt
    src = source(t_next)
    x = oracle.solve(state, src)
    a, phi = x[: op.n_a], x[op.n_a:]
    res = op.conservation_residual(a, state.a)
    info = StepInfo(1, 0.0, 1, 0.0, res, 0.0, 1, time.perf_counter() - start)
    return SimState(a, phi, t_next, state.n + 1, src.phi_fixed, info)


# ------------------------------------------------------------------- fields
@dataclass(frozen=True, eq=False)
class Fields:
    e: np.ndarray       # edge voltages (V)
    b: np.ndarray       # face fluxes (Wb)
    e_irr: np.ndarray   # -G phi
    e_rem: np.ndarray   # -(a_{n+1} - a_n) / dt


def reconstruct_fields(state: SimState, prev: SimState, op: DarwinOperators, dt: float | None = None) -> Fields:
    dt = op.dt if dt is None else dt
    if state.a.shape != prev.a.shape or state.phi.shape != prev.phi.shape:
        raise ValueError("states belong to different discretizations")
    if not np.isclose(state.t - prev.t, dt, rtol=1e-9, atol=0.0):
        raise ValueError(f"states are {state.t - prev.t} s apart, expected dt={dt}")
    a1, a0 = op.expand_a(state.a), op.expand_a(prev.a)
    e_irr = -(op.G @ op.expand_phi(state.phi, state.phi_fixed))
    e_rem = -(a1 - a0) / dt
    b = op.ops.C @ a1
    return Fields(e_irr + e_rem, b, e_irr, e_rem)


def energies(e_edges, b_faces, hodge: HodgeMatrices) -> tuple[float, float]:
    """Electric and magnetic energy (J) from edge voltages and face fluxes."""
    w_e = 0.5 * float(np.dot(e_edges, hodge.M_eps * e_edges))
    w_m = 0.5 * float(np.dot(b_faces, hodge.M_nu * b_faces))
    return w_e, w_m


# ------------------------------------------------------------------ driver
def static_initial_state(op: DarwinOperators, source: Source, t0: float, config: StepperConfig) -> SimState:
    """Electrostatic potential for the drive at ``t0``; ``a`` starts at zero."""
    src = source(t0)
    A = SparseMatrix.from_any(op.L_eps_full[op.fn][:, op.fn], symmetric=True)
    rhs = -(op.L_eps_full[op.fn][:, op.fx] @ src.phi_fixed)
    phi, _ = Subsystem(A, op.eqs.V).solve(rhs, np.zeros(op.n_phi), config.eqs_tol, config)
    return SimState(np.zeros(op.n_a), phi, t0, 0, src.phi_fixed)


class DarwinStepper:
    """Owns the assembled operators for one scheme and advances states."""

    def __init__(self, grid: StaggeredGrid, ops: IncidenceOperators, hodge: HodgeMatrices,
                 config: StepperConfig, source: Source | None = None):
        from .hodge import regularize_kappa
        self.grid, self.ops, self.config = grid, ops, config
        self.hodge = combine_sigma(hodge, config.dt)
        self.op = DarwinOperators(grid, ops, self.hodge, config.dt, mass_reg=config.mqs_mass_reg)
        self.source = source or ZeroSource(grid.n_edges, ops.fixed_nodes.size)
        self.oracle = None
        if config.scheme == "monolithic":
            kreg = config.kappa_reg
            if kreg is None:
                kreg = _default_reg_from_hodge(self.hodge, grid)
            self.mono_hodge = regularize_kappa(self.hodge, grid, kreg)
            self.mono_op = DarwinOperators(grid, ops, self.mono_hodge, config.dt)
            self.oracle = MonolithicOracle(self.mono_op)

    def initial_state(self, t0: float = 0.0) -> SimState:
        return static_initial_state(self.op, self.source, t0, self.config)

    def step(self, state: SimState) -> SimState:
        scheme = self.config.scheme
        if scheme == "two_step":
            return advance_two_step(state, self.op, self.source, self.config)
        if scheme == "gauss_seidel":
            return advance_gauss_seidel(state, self.op, self.source, self.config)[0]
        return advance_monolithic(state, self.mono_op, self.source, self.config, self.oracle)

    def fields(self, state: SimState, prev: SimState) -> Fields:
        return reconstruct_fields(state, prev, self.op)

    def energies(self, state: SimState, prev: SimState) -> tuple[float, float]:
        f = self.fields(state, prev)
        return energies(f.e, f.b, self.hodge)


def _default_reg_from_hodge(hodge: HodgeMatrices, grid: StaggeredGrid) -> float:
    # conductivity recovered per edge from M_kappa; zeros mark insulating edges
    kappa_edge = hodge.M_kappa * grid.edge_lengths / grid.edge_dual_areas
    if kappa_edge.min() == 0 and kappa_edge.max() > 0:
        return 1e-6 * float(kappa_edge.max())
    return 0.0
