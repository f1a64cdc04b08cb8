from dataclasses import replace

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given
from hypothesis import strategies as st

from darwinfit.darwin import (ConservationError, DarwinOperators, FunctionSource, MonolithicOracle,
                              SimState, StepperConfig, ZeroSource, _check_conservation, advance_eqs,
                              advance_gauss_seidel, advance_monolithic, advance_two_step,
                              assemble_darwin, energies, eqs_step, mqs_kernel_basis, mqs_step,
                              reconstruct_fields)
from darwinfit.grid import StaggeredGrid, build_grid
from darwinfit.hodge import EPS0, MaterialField, assemble_hodge, combine_sigma
from darwinfit.linsolve import SingularMatrixError, SolverError
from darwinfit.operators import apply_boundary_masks, build_incidence
from darwinfit.scenario import parse_scenario
from darwinfit.verify import conducting_brick_scenario, mixed_scenario, random_state


def box(lo, hi):
    return {"min": list(lo), "max": list(hi)}


def plates_doc(n=4, L=0.04, kappa=0.0, eps_r=1.0, wave=None, steps=5, **stepper):
    return {
        "schema": 1, "name": "plates", "domain": box((0, 0, 0), (L, L, L)), "cells": [n, n, n],
        "background": {"kappa": kappa, "eps_r": eps_r},
        "electrodes": [{"name": "hot", "box": box((0, 0, 0), (0, L, L)), "waveform": "v"},
                       {"name": "cold", "box": box((L, 0, 0), (L, L, L)), "waveform": "v", "scale": 0}],
        "waveforms": {"v": wave or {"kind": "step", "amplitude": 1.0, "t0": 0.0}},
        "excitation": "voltage", "boundary": {"phi_outer": "natural"},
        "stepper": {"dt": 1e-9, "steps": steps, **stepper},
    }


def uniform_setup(cells=(2, 2, 2), h=0.1, kappa=0.0, dt=1e-9, electrodes=(), ground=False):
    g = StaggeredGrid.uniform(cells, h=h)
    ops = apply_boundary_masks(build_incidence(g), g, electrodes, ground_outer=ground)
    H = combine_sigma(assemble_hodge(g, MaterialField.uniform(g, kappa=kappa, eps=EPS0)), dt)
    return g, ops, H


# ---------------------------------------------------------------- assembly
def test_unrestricted_eqs_matrix_annihilates_constants():
    g = StaggeredGrid.uniform((1, 1, 1), h=0.1)
    ops = apply_boundary_masks(build_incidence(g), g, pec_outer=False)
    H = assemble_hodge(g, MaterialField.uniform(g, kappa=1.0))
    op = assemble_darwin(g, ops, H, 1e-3)
    assert op.A_eqs.shape == (8, 8)
    assert np.allclose(op.A_eqs.csr @ np.ones(8), 0, atol=1e-12 * abs(op.A_eqs.csr).max())


def test_assemble_rejects_mismatch_and_bad_dt():
    g, ops, H = uniform_setup()
    g2 = StaggeredGrid.uniform((3, 2, 2))
    with pytest.raises(ValueError):
        assemble_darwin(g2, ops, H, 1e-9)
    with pytest.raises(ValueError):
        assemble_darwin(g, ops, H, 0.0)


@given(st.integers(0, 2 ** 31))
def test_subsystems_exactly_symmetric(seed):
    rng = np.random.default_rng(seed)
    counts = tuple(int(c) for c in rng.integers(2, 5, 3))
    g = build_grid(counts, [rng.uniform(0.5, 2, c - 1) for c in counts])
    n = g.n_cells
    mat = MaterialField(rng.uniform(1, 3, n), rng.choice([0.0, 1.0, 7.0], n), rng.uniform(1, 2, n))
    ops = apply_boundary_masks(build_incidence(g), g, ground_outer=bool(rng.integers(2)))
    op = assemble_darwin(g, ops, assemble_hodge(g, mat), float(rng.uniform(0.1, 1)))
    for A in (op.A_eqs.csr, op.A_mqs.csr):
        assert (A - A.T).count_nonzero() == 0


def test_monolithic_blocks():
    g, ops, H = uniform_setup(kappa=3.0, dt=0.5)
    op = DarwinOperators(g, ops, H, 0.5)
    M = op.monolithic.toarray()
    na = op.n_a
    assert np.array_equal(M[:na, :na], op.A_mqs.csr.toarray())
    assert np.array_equal(M[:na, na:], op.MsG[:, op.fn].toarray())
    assert np.allclose(M[na:, :na], op.GtMk.toarray() / 0.5, rtol=1e-15, atol=0)
    assert np.array_equal(M[na:, na:], op.A_eqs.csr.toarray())


def test_monolithic_without_conductivity_detected():
    g, ops, H = uniform_setup(kappa=0.0)
    with pytest.raises(SingularMatrixError):
        MonolithicOracle(DarwinOperators(g, ops, H, 1e-9))


@pytest.mark.parametrize("doc", [conducting_brick_scenario(3, kappa=0.0),
                                 plates_doc(3, kappa=0.0), mixed_scenario(3, seed=2)])
def test_mqs_kernel_basis_spans_null_space(doc):
    prob = parse_scenario(doc).build()
    op = prob.stepper().op
    V = mqs_kernel_basis(prob.grid, prob.ops, prob.hodge).toarray()
    A = op.A_mqs.csr.toarray()
    assert np.abs(A @ V).max(initial=0) <= 1e-12 * np.abs(A).max()
    w = np.linalg.eigvalsh(A)
    assert np.sum(w < 1e-10 * w.max()) == V.shape[1]


# ---------------------------------------------------------------- sub-steps
def test_plates_give_linear_potential():
    prob = parse_scenario(plates_doc()).build()
    st_ = prob.stepper(replace(prob.config, eqs_tol=1e-13))
    x = st_.step(st_.initial_state(0.0))
    phi = st_.op.expand_phi(x.phi, x.phi_fixed)
    xs = np.tile(prob.grid.node_coords[0], prob.grid.node_counts[1] * prob.grid.node_counts[2])
    assert np.abs(phi - (1 - xs / 0.04)).max() <= 1e-10


def test_zero_drive_gives_zero_potential():
    prob = parse_scenario(plates_doc(wave={"kind": "step", "amplitude": 0.0})).build()
    st_ = prob.stepper()
    x = st_.initial_state()
    phi, _ = eqs_step(x, st_.op, st_.source(1e-9), st_.config)
    assert not phi.any()
    a, _ = mqs_step(x, st_.op, st_.source(1e-9), st_.op.expand_phi(phi, x.phi_fixed), st_.config)
    assert not a.any()


def test_magnetostatic_limit():
    # insulating space, steady loop current: the MQS step is the magnetostatic solve
    doc = conducting_brick_scenario(4, kappa=0.0)
    doc["waveforms"]["drive"] = {"kind": "step", "amplitude": 2.0}
    for solver in ("direct", "cg"):
        doc["stepper"]["solver"] = solver
        prob = parse_scenario(doc).build()
        st_ = prob.stepper()
        op = st_.op
        x = st_.step(st_.initial_state())
        js = prob.source(x.t).j_s[op.fe]
        K = op.K_curl.csr.toarray()
        a_ref = sla.lstsq(K, js)[0]
        C = prob.ops.C
        b, b_ref = C @ op.expand_a(x.a), C @ op.expand_a(a_ref)
        assert np.linalg.norm(b - b_ref) <= 1e-8 * np.linalg.norm(b_ref)
        assert not x.phi.any()


def test_subsystem_leak_check():
    prob = parse_scenario(conducting_brick_scenario(3, kappa=0.0)).build()
    op = prob.stepper().op
    assert op.mqs.n_kernel == 8
    b = np.asarray(op.mqs.V.sum(axis=1)).ravel()
    with pytest.raises(SolverError):
        op.mqs.solve(b, np.zeros(op.n_a), 1e-10, prob.config)


# ----------------------------------------------------------------- steppers
@pytest.mark.parametrize("scheme", ["two_step", "gauss_seidel", "monolithic"])
def test_zero_in_zero_out(scheme):
    prob = parse_scenario(conducting_brick_scenario(3, scheme=scheme, solver="direct")).build()
    st_ = prob.stepper()
    zero = ZeroSource(prob.grid.n_edges, prob.ops.fixed_nodes.size)
    st_.source = zero
    x = st_.op.zero_state()
    for _ in range(3):
        x = st_.step(x)
        assert not x.a.any() and not x.phi.any()
    if scheme == "gauss_seidel":
        _, sweeps = advance_gauss_seidel(st_.op.zero_state(), st_.op, zero, st_.config)
        assert sweeps == 1


def test_exact_conservation_with_random_state():
    prob = parse_scenario(mixed_scenario(3, seed=5, solver="direct")).build()
    st_ = prob.stepper()
    x = random_state(prob, seed=5)
    for _ in range(10):
        y = advance_two_step(x, st_.op, st_.source, st_.config)
        lhs = st_.op.GtMk_cons @ y.a
        rhs = st_.op.GtMk_cons @ x.a
        assert np.abs(lhs - rhs).max() <= 1e-12 * st_.op.GtMk_cons_norm * np.abs(y.a).max()
        x = y


def test_conservation_violation_aborts():
    prob = parse_scenario(mixed_scenario(3, seed=1, solver="cg")).build()
    st_ = prob.stepper()
    x = random_state(prob, seed=1)
    y = st_.step(x)
    assert y.info.div_residual <= y.info.div_bound
    bad = y.a + 1e-3 * np.abs(y.a).max() * np.random.default_rng(0).standard_normal(y.a.size)
    with pytest.raises(ConservationError):
        _check_conservation(st_.op, bad, x.a, st_.config)
    res, _ = _check_conservation(st_.op, bad, x.a, replace(st_.config, check_conservation=False))
    assert res > 0


def test_eqs_limit_equivalence_bitwise():
    prob = parse_scenario(plates_doc(eps_r=3.0, wave={"kind": "ramped_sine", "frequency": 1e8},
                                     steps=20)).build()
    st_ = prob.stepper()
    x2 = xe = st_.initial_state()
    for _ in range(20):
        x2 = advance_two_step(x2, st_.op, st_.source, st_.config)
        xe = advance_eqs(xe, st_.op, st_.source, st_.config)
        assert np.array_equal(x2.phi, xe.phi)


@pytest.mark.parametrize("doc", [mixed_scenario(3, seed=4, solver="cg"),
                                 conducting_brick_scenario(3, solver="cg")])
def test_single_sweep_equals_two_step(doc):
    prob = parse_scenario(doc).build()
    cfg = replace(prob.config, scheme="gauss_seidel", gs_max_sweeps=1)
    st_ = prob.stepper(cfg)
    xg = x2 = st_.initial_state()
    for _ in range(10):
        xg, sweeps = advance_gauss_seidel(xg, st_.op, st_.source, cfg)
        x2 = advance_two_step(x2, st_.op, st_.source, cfg)
        assert sweeps == 1
        assert np.array_equal(xg.a, x2.a) and np.array_equal(xg.phi, x2.phi)


def test_gauss_seidel_with_cg_second_sweep_small():
    doc = mixed_scenario(3, seed=3, solver="cg")
    doc["stepper"].update(scheme="gauss_seidel", gs_max_sweeps=3, gs_sweep_tol=1e-8)
    prob = parse_scenario(doc).build()
    st_ = prob.stepper()
    x = st_.initial_state()
    for _ in range(20):
        x, sweeps = advance_gauss_seidel(x, st_.op, st_.source, st_.config)
        assert sweeps <= 2
        if len(x.info.sweep_increments) > 1:
            assert x.info.sweep_increments[1] <= 10 * st_.config.mqs_tol * 100


def test_monolithic_matches_two_step_in_conductor():
    base = parse_scenario(conducting_brick_scenario(3, steps=10, solver="direct")).build()
    two = base.stepper()
    mono = base.stepper(replace(base.config, scheme="monolithic"))
    x2, xm = two.initial_state(), mono.initial_state()
    for _ in range(10):
        x2, xm = two.step(x2), mono.step(xm)
    C = base.ops.C
    b2, bm = C @ two.op.expand_a(x2.a), C @ mono.op.expand_a(xm.a)
    assert np.linalg.norm(b2 - bm) <= 1e-6 * np.linalg.norm(bm)


def test_monolithic_singular_with_insulator_unregularized():
    doc = mixed_scenario(3, seed=0)
    doc["stepper"].update(scheme="monolithic", kappa_reg=0.0)
    # two cells insulate completely around an interior node -> M_kappa singular
    with pytest.raises(SingularMatrixError):
        parse_scenario(plates_doc(kappa=0.0, scheme="monolithic", kappa_reg=0.0,
                                  solver="direct")).build().stepper()


def test_monolithic_oracle_satisfies_coupled_system():
    prob = parse_scenario(mixed_scenario(3, seed=6)).build()
    cfg = replace(prob.config, scheme="monolithic", kappa_reg=1.0)
    st_ = prob.stepper(cfg)
    x = random_state(prob, seed=6)
    src = st_.source(x.t + cfg.dt)
    y = advance_monolithic(x, st_.mono_op, st_.source, cfg, st_.oracle)
    full = np.concatenate([y.a, y.phi])
    r = st_.mono_op.monolithic @ full - st_.mono_op.monolithic_rhs(x, src)
    assert np.linalg.norm(r) <= 1e-9 * np.linalg.norm(st_.mono_op.monolithic_rhs(x, src))


# ------------------------------------------------------------------- fields
def test_static_ramp_field_is_uniform():
    prob = parse_scenario(plates_doc()).build()
    st_ = prob.stepper(replace(prob.config, eqs_tol=1e-13))
    x = [st_.initial_state()]
    for _ in range(3):
        x.append(st_.step(x[-1]))
    f = st_.fields(x[3], x[2])
    g = prob.grid
    ex = f.e[g.block("edge-x")] / g.edge_lengths[g.block("edge-x")]
    assert np.allclose(ex, 1 / 0.04, rtol=1e-9)
    assert np.abs(f.e[g.block("edge-y")]).max() < 1e-10 and np.abs(f.e[g.block("edge-z")]).max() < 1e-10
    # without conductors the vector potential settles one step after the drive
    assert np.abs(f.e_rem).max() <= 1e-9 * np.abs(f.e).max()


def test_parallel_plate_energy():
    prob = parse_scenario(plates_doc(eps_r=2.5)).build()
    st_ = prob.stepper(replace(prob.config, eqs_tol=1e-14))
    x0 = st_.initial_state()
    x1 = st_.step(x0)
    f = st_.fields(x1, x0)
    w_e, _ = energies(-(st_.op.G @ st_.op.expand_phi(x1.phi, x1.phi_fixed)), f.b, st_.hodge)
    E = 1 / 0.04
    assert w_e == pytest.approx(0.5 * 2.5 * EPS0 * E ** 2 * 0.04 ** 3, rel=1e-10)
    assert energies(np.zeros_like(f.e), np.zeros_like(f.b), st_.hodge) == (0.0, 0.0)


def test_remainder_field_when_phi_zero():
    prob = parse_scenario(conducting_brick_scenario(3, kappa=0.0)).build()
    st_ = prob.stepper()
    x0 = st_.initial_state()
    x1 = st_.step(x0)
    assert not x1.phi.any()
    f = st_.fields(x1, x0)
    assert np.array_equal(f.e, f.e_rem)


def test_flux_divergence_free():
    g = StaggeredGrid.uniform((3, 3, 3))
    ops = build_incidence(g)
    rng = np.random.default_rng(0)
    a_int = rng.integers(-1000, 1000, g.n_edges).astype(float)
    assert not (ops.D @ (ops.C @ a_int)).any()
    a = rng.standard_normal(g.n_edges)
    b = ops.C @ a
    assert np.abs(ops.D @ b).max() <= 8 * np.finfo(float).eps * np.abs(a).max()


def test_reconstruct_rejects_mismatched_pair():
    prob = parse_scenario(plates_doc()).build()
    st_ = prob.stepper()
    x0 = st_.initial_state()
    x1 = st_.step(x0)
    with pytest.raises(ValueError):
        reconstruct_fields(x0, x0, st_.op)
    bad = SimState(np.zeros(3), x1.phi, x1.t)
    with pytest.raises(ValueError):
        reconstruct_fields(bad, x0, st_.op)


# --------------------------------------------------------------- validation
@pytest.mark.parametrize("kw", [dict(dt=0.0), dict(dt=1.0, scheme="rk4"), dict(dt=1.0, solver="lu"),
                                dict(dt=1.0, eqs_tol=1.0), dict(dt=1.0, mqs_tol=0.0),
                                dict(dt=1.0, gs_max_sweeps=0), dict(dt=1.0, extrapolation="linear")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        StepperConfig(**kw)


def test_state_rejects_non_finite():
    with pytest.raises(ValueError):
        SimState(np.array([np.inf]), np.zeros(1), 0.0)


def test_function_source():
    src = FunctionSource(np.ones(3), lambda t: 2 * t, np.ones(2), lambda t: -t)
    s = src(0.5)
    assert np.array_equal(s.j_s, np.ones(3)) and np.array_equal(s.phi_fixed, -0.5 * np.ones(2))
