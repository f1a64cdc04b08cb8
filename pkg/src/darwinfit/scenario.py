"""Scenario documents: geometry, materials, drives and solver settings.

A scenario is a JSON object with ``"schema": 1``; see ``docs/scenario-schema.md``.
Box coordinates snap to the nearest grid plane at parse time, so the
canonical form written by :meth:`Scenario.to_dict` parses back unchanged.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any

import numpy as np

from .darwin import DarwinStepper, SourceTerms, StepperConfig
from .grid import StaggeredGrid
from .hodge import EPS0, MU0, HodgeMatrices, MaterialField, assemble_hodge, default_kappa_reg
from .operators import GROUND, Electrode, IncidenceOperators, apply_boundary_masks, build_incidence

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
AXES = "xyz"
EXCITATIONS = ("voltage", "current", "both", "none")


class ScenarioError(ValueError):
    pass


# ---------------------------------------------------------------- waveforms
def ramped_sine(t: float, amplitude: float, f: float, ramp_periods: float = 2.0) -> float:
    """Sine of frequency ``f`` under a raised-cosine ramp lasting ``ramp_periods`` periods."""
    if t <= 0:
        return 0.0
    t_ramp = ramp_periods / f
    r = 0.5 * (1.0 - math.cos(math.pi * t / t_ramp)) if t < t_ramp else 1.0
    return r * amplitude * math.sin(2.0 * math.pi * f * t)


@dataclass(frozen=True)
class Waveform:
    kind: str
    amplitude: float = 1.0
    frequency: float | None = None
    ramp_periods: float = 2.0
    t0: float = 0.0
    t: tuple[float, ...] = ()
    v: tuple[float, ...] = ()

    def __call__(self, t: float) -> float:
        if self.kind == "ramped_sine":
            return ramped_sine(t, self.amplitude, self.frequency, self.ramp_periods)
        if self.kind == "step":
            return self.amplitude if t > self.t0 else 0.0
        return self.amplitude * float(np.interp(t, self.t, self.v))

    @classmethod
    def from_dict(cls, name: str, d: dict) -> "Waveform":
        kind = _require(d, "kind", f"waveform {name!r}")
        amp = float(d.get("amplitude", 1.0))
        if kind == "ramped_sine":
            f = float(_require(d, "frequency", f"waveform {name!r}"))
            rp = float(d.get("ramp_periods", 2.0))
            if f <= 0 or rp < 0:
                raise ScenarioError(f"waveform {name!r}: frequency must be > 0 and ramp_periods >= 0")
            return cls(kind, amp, f, rp)
        if kind == "step":
            return cls(kind, amp, t0=float(d.get("t0", 0.0)))
        if kind == "table":
            ts = tuple(float(x) for x in _require(d, "t", f"waveform {name!r}"))
            vs = tuple(float(x) for x in _require(d, "v", f"waveform {name!r}"))
            if len(ts) != len(vs) or len(ts) < 1 or any(b <= a for a, b in zip(ts, ts[1:])):
                raise ScenarioError(f"waveform {name!r}: table needs equal-length t/v with increasing t")
            return cls(kind, amp, t=ts, v=vs)
        raise ScenarioError(f"waveform {name!r}: unknown kind {kind!r}")

    def to_dict(self) -> dict:
        if self.kind == "ramped_sine":
            return {"kind": self.kind, "amplitude": self.amplitude, "frequency": self.frequency,
                    "ramp_periods": self.ramp_periods}
        if self.kind == "step":
            return {"kind": self.kind, "amplitude": self.amplitude, "t0": self.t0}
        return {"kind": self.kind, "amplitude": self.amplitude, "t": list(self.t), "v": list(self.v)}


# ------------------------------------------------------------------ geometry
@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {"min": list(self.lo), "max": list(self.hi)}


@dataclass(frozen=True)
class MaterialSpec:
    name: str
    box: Box
    mu_r: float = 1.0
    kappa: float = 0.0
    eps_r: float = 1.0


@dataclass(frozen=True)
class ElectrodeSpec:
    name: str
    box: Box
    waveform: str
    scale: float = 1.0


@dataclass(frozen=True)
class CoilSpec:
    name: str
    box: Box
    normal: str
    waveform: str
    current: float = 1.0


@dataclass(frozen=True)
class OutputSpec:
    snap_every: int = 0
    snapshot_times: tuple[float, ...] = ()


def _require(d: dict, key: str, where: str):
    if not isinstance(d, dict):
        raise ScenarioError(f"{where}: expected an object")
    if key not in d:
        raise ScenarioError(f"{where}: missing field {key!r}")
    return d[key]


def _vec3(v, where: str) -> tuple[float, float, float]:
    if not isinstance(v, (list, tuple)) or len(v) != 3:
        raise ScenarioError(f"{where}: expected three numbers")
    try:
        return tuple(float(x) for x in v)
    except (TypeError, ValueError):
        raise ScenarioError(f"{where}: expected three numbers") from None


def _snap(grid: StaggeredGrid, box: dict, where: str, allow_flat: bool) -> Box:
    lo = _vec3(_require(box, "min", where), f"{where}.min")
    hi = _vec3(_require(box, "max", where), f"{where}.max")
    slo, shi = [], []
    for axis, (a, b, x) in enumerate(zip(lo, hi, grid.node_coords)):
        ext = x[-1] - x[0]
        tol = 1e-9 * ext
        if b < a:
            raise ScenarioError(f"{where}: min exceeds max along {AXES[axis]}")
        if a < x[0] - tol or b > x[-1] + tol:
            raise ScenarioError(f"{where}: box lies outside the domain along {AXES[axis]}")
        ia, ib = int(np.argmin(np.abs(x - a))), int(np.argmin(np.abs(x - b)))
        if ia == ib and b - a > tol and not allow_flat:
            raise ScenarioError(f"{where}: box collapses onto one grid plane along {AXES[axis]}")
        if ia == ib and b - a > tol:
            raise ScenarioError(f"{where}: distinct planes {a} and {b} snap to the same grid plane")
        slo.append(float(x[ia]))
        shi.append(float(x[ib]))
    return Box(tuple(slo), tuple(shi))


def _edge_index(grid: StaggeredGrid, axis: int, ijk) -> int:
    from .grid import EntityIndex
    return grid.flat_index(EntityIndex(("edge-x", "edge-y", "edge-z")[axis], tuple(int(v) for v in ijk)))


def coil_edge_currents(grid: StaggeredGrid, coil: CoilSpec) -> np.ndarray:
    """Unit-scaled edge currents of a rectangular loop (right-handed about the normal)."""
    n = AXES.index(coil.normal)
    u, v = (n + 1) % 3, (n + 2) % 3
    idx = []
    for axis in range(3):
        x = grid.node_coords[axis]
        idx.append((int(np.argmin(np.abs(x - coil.box.lo[axis]))),
                    int(np.argmin(np.abs(x - coil.box.hi[axis])))))
    k = idx[n][0]
    (u0, u1), (v0, v1) = idx[u], idx[v]
    j = np.zeros(grid.n_edges)

    def put(axis, fixed, run, sign):
        for r in range(*run):
            ijk = [0, 0, 0]
            ijk[n] = k
            ijk[axis] = r
            other = v if axis == u else u
            ijk[other] = fixed
            j[_edge_index(grid, axis, ijk)] += sign

    put(u, v0, (u0, u1), +1.0)
    put(v, u1, (v0, v1), +1.0)
    put(u, v1, (u0, u1), -1.0)
    put(v, u0, (v0, v1), -1.0)
    return j * coil.current


# ------------------------------------------------------------------ scenario
@dataclass(frozen=True)
class Scenario:
    name: str
    domain: Box
    spacings: tuple[tuple[float, ...], tuple[float, ...], tuple[float, ...]]
    background: MaterialSpec
    materials: tuple[MaterialSpec, ...]
    electrodes: tuple[ElectrodeSpec, ...]
    coils: tuple[CoilSpec, ...]
    waveforms: dict[str, Waveform]
    excitation: str
    phi_outer: str
    stepper: StepperConfig
    steps: int
    output: OutputSpec = field(default_factory=OutputSpec)

    @property
    def grid(self) -> StaggeredGrid:
        return StaggeredGrid(tuple(len(h) + 1 for h in self.spacings), self.spacings, self.domain.lo)

    def to_dict(self) -> dict:
        st = {f.name: getattr(self.stepper, f.name) for f in fields(StepperConfig)}
        return {
            "schema": SCHEMA_VERSION,
            "name": self.name,
            "domain": self.domain.to_dict(),
            "spacings": {a: list(h) for a, h in zip(AXES, self.spacings)},
            "background": {"mu_r": self.background.mu_r, "kappa": self.background.kappa,
                           "eps_r": self.background.eps_r},
            "materials": [{"name": m.name, "box": m.box.to_dict(), "mu_r": m.mu_r, "kappa": m.kappa,
                           "eps_r": m.eps_r} for m in self.materials],
            "electrodes": [{"name": e.name, "box": e.box.to_dict(), "waveform": e.waveform,
                            "scale": e.scale} for e in self.electrodes],
            "coils": [{"name": c.name, "box": c.box.to_dict(), "normal": c.normal,
                       "waveform": c.waveform, "current": c.current} for c in self.coils],
            "waveforms": {k: w.to_dict() for k, w in sorted(self.waveforms.items())},
            "excitation": self.excitation,
            "boundary": {"phi_outer": self.phi_outer, "a_outer": "pec"},
            "stepper": {**st, "steps": self.steps},
            "output": {"snap_every": self.output.snap_every,
                       "snapshot_times": list(self.output.snapshot_times)},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def with_overrides(self, **kw) -> "Scenario":
        steps = kw.pop("steps", None)
        stepper = replace(self.stepper, **{k: v for k, v in kw.items() if v is not None})
        out = replace(self, stepper=stepper)
        if steps is not None:
            out = replace(out, steps=int(steps))
        return out

    def build(self) -> "Problem":
        return build_problem(self)


def _material(d: dict, where: str, box: Box | None, name: str) -> MaterialSpec:
    if "mu_r" in d and "nu" in d:
        raise ScenarioError(f"{where}: give either mu_r or nu, not both")
    if "nu" in d:
        mu_r = 1.0 / (float(d["nu"]) * MU0) if float(d["nu"]) > 0 else -1.0
    else:
        mu_r = float(d.get("mu_r", 1.0))
    kappa = float(d.get("kappa", 0.0))
    eps_r = float(d.get("eps_r", 1.0))
    if not mu_r > 0:
        raise ScenarioError(f"{where}: permeability must be positive")
    if not eps_r > 0:
        raise ScenarioError(f"{where}: eps_r must be positive")
    if kappa < 0 or not math.isfinite(kappa):
        raise ScenarioError(f"{where}: kappa must be a finite non-negative number")
    return MaterialSpec(name, box, mu_r, kappa, eps_r)


_STEPPER_KEYS = {f.name for f in fields(StepperConfig)}


def parse_scenario(text: str | dict) -> Scenario:
    """Parse and validate a scenario document (JSON text or an already-loaded dict)."""
    if isinstance(text, str):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"invalid JSON: {exc}") from None
    else:
        doc = text
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be a JSON object")
    if doc.get("schema") != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported schema {doc.get('schema')!r}; expected {SCHEMA_VERSION}")

    dom = _require(doc, "domain", "scenario")
    lo = _vec3(_require(dom, "min", "domain"), "domain.min")
    hi = _vec3(_require(dom, "max", "domain"), "domain.max")
    if any(b <= a for a, b in zip(lo, hi)):
        raise ScenarioError("domain: max must exceed min on every axis")
    if "spacings" in doc:
        sp_doc = doc["spacings"]
        spacings = tuple(tuple(float(h) for h in _require(sp_doc, a, "spacings")) for a in AXES)
        for a, h, l0, l1 in zip(AXES, spacings, lo, hi):
            if not h or any(x <= 0 for x in h):
                raise ScenarioError(f"spacings.{a}: must be a non-empty list of positive numbers")
            if not math.isclose(sum(h), l1 - l0, rel_tol=1e-9):
                raise ScenarioError(f"spacings.{a}: sum {sum(h)} does not match the domain length {l1 - l0}")
    else:
        cells = _require(doc, "cells", "scenario")
        if not isinstance(cells, list) or len(cells) != 3 or any(int(c) != c or c < 1 for c in cells):
            raise ScenarioError("cells: expected three positive integers")
        spacings = tuple(tuple([(b - a) / int(c)] * int(c)) for a, b, c in zip(lo, hi, cells))
    grid = StaggeredGrid(tuple(len(h) + 1 for h in spacings), spacings, lo)
    domain = Box(tuple(grid.node_coords[i][0] for i in range(3)), tuple(grid.node_coords[i][-1] for i in range(3)))

    background = _material(doc.get("background", {}), "background", None, "background")

    waveforms = {}
    for name, wd in (doc.get("waveforms") or {}).items():
        waveforms[name] = Waveform.from_dict(name, wd)

    materials = []
    for k, md in enumerate(doc.get("materials", [])):
        name = md.get("name", f"material{k}")
        where = f"material {name!r}"
        box = _snap(grid, _require(md, "box", where), where, allow_flat=False)
        materials.append(_material(md, where, box, name))

    electrodes = []
    for k, ed in enumerate(doc.get("electrodes", [])):
        name = ed.get("name", f"electrode{k}")
        where = f"electrode {name!r}"
        box = _snap(grid, _require(ed, "box", where), where, allow_flat=True)
        wf = _require(ed, "waveform", where)
        if wf not in waveforms:
            raise ScenarioError(f"{where}: unknown waveform {wf!r}")
        electrodes.append(ElectrodeSpec(name, box, wf, float(ed.get("scale", 1.0))))

    coils = []
    for k, cd in enumerate(doc.get("coils", [])):
        name = cd.get("name", f"coil{k}")
        where = f"coil {name!r}"
        normal = _require(cd, "normal", where)
        if normal not in AXES:
            raise ScenarioError(f"{where}: normal must be one of x, y, z")
        box = _snap(grid, _require(cd, "box", where), where, allow_flat=True)
        n = AXES.index(normal)
        if box.lo[n] != box.hi[n]:
            raise ScenarioError(f"{where}: loop box must be flat along its normal {normal}")
        if any(box.lo[a] == box.hi[a] for a in range(3) if a != n):
            raise ScenarioError(f"{where}: loop rectangle is degenerate after snapping")
        wf = _require(cd, "waveform", where)
        if wf not in waveforms:
            raise ScenarioError(f"{where}: unknown waveform {wf!r}")
        coils.append(CoilSpec(name, box, normal, wf, float(cd.get("current", 1.0))))

    excitation = _require(doc, "excitation", "scenario")
    if excitation not in EXCITATIONS:
        raise ScenarioError(f"excitation must be one of {EXCITATIONS}")
    if excitation in ("voltage", "both") and not electrodes:
        raise ScenarioError("voltage excitation needs at least one electrode")
    if excitation in ("current", "both") and not coils:
        raise ScenarioError("current excitation needs at least one coil")
    if excitation == "voltage" and coils:
        raise ScenarioError("coils present but excitation is 'voltage'; use 'both'")
    if excitation == "current" and electrodes:
        raise ScenarioError("electrodes present but excitation is 'current'; use 'both'")
    if excitation == "none" and (coils or electrodes):
        raise ScenarioError("excitation 'none' (free decay) allows no electrodes or coils")

    bd = doc.get("boundary", {})
    phi_outer = bd.get("phi_outer", "natural")
    if phi_outer not in ("natural", "ground"):
        raise ScenarioError("boundary.phi_outer must be 'natural' or 'ground'")
    if bd.get("a_outer", "pec") != "pec":
        raise ScenarioError("boundary.a_outer supports only 'pec'")

    sd = dict(_require(doc, "stepper", "scenario"))
    steps = sd.pop("steps", None)
    t_end = sd.pop("t_end", None)
    unknown = set(sd) - _STEPPER_KEYS
    if unknown:
        raise ScenarioError(f"stepper: unknown fields {sorted(unknown)}")
    try:
        stepper = StepperConfig(**sd)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"stepper: {exc}") from None
    if steps is None and t_end is None:
        raise ScenarioError("stepper: give 'steps' or 't_end'")
    if steps is None:
        steps = int(round(float(t_end) / stepper.dt))
    if int(steps) != steps or steps < 1:
        raise ScenarioError("stepper.steps must be a positive integer")

    od = doc.get("output", {})
    snap_every = od.get("snap_every", 0)
    if int(snap_every) != snap_every or snap_every < 0:
        raise ScenarioError("output.snap_every must be a non-negative integer")
    output = OutputSpec(int(snap_every), tuple(float(t) for t in od.get("snapshot_times", [])))

    return Scenario(
        name=str(doc.get("name", "scenario")), domain=domain, spacings=spacings,
        background=background, materials=tuple(materials), electrodes=tuple(electrodes),
        coils=tuple(coils), waveforms=waveforms, excitation=excitation, phi_outer=phi_outer,
        stepper=stepper, steps=int(steps), output=output)


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        return parse_scenario(fh.read())


# ------------------------------------------------------------------ assembly
def material_field(scenario: Scenario, grid: StaggeredGrid) -> MaterialField:
    n = grid.n_cells
    mu = np.full(n, scenario.background.mu_r)
    kappa = np.full(n, scenario.background.kappa)
    eps = np.full(n, scenario.background.eps_r)
    cx, cy, cz = grid.cell_centers
    for m in scenario.materials:
        ins = [(c > lo) & (c < hi) for c, lo, hi in zip((cx, cy, cz), m.box.lo, m.box.hi)]
        mask = (ins[0][:, None, None] & ins[1][None, :, None] & ins[2][None, None, :]).ravel(order="F")
        mu[mask], kappa[mask], eps[mask] = m.mu_r, m.kappa, m.eps_r
    return MaterialField(1.0 / (MU0 * mu), kappa, EPS0 * eps)


class ScenarioSource:
    """Coil currents and electrode potentials of a scenario as a function of time."""

    def __init__(self, scenario: Scenario, grid: StaggeredGrid, ops: IncidenceOperators):
        self.waveforms = scenario.waveforms
        self.coils = [(c.waveform, coil_edge_currents(grid, c)) for c in scenario.coils]
        owner = ops.node_owner[ops.fixed_nodes]
        self.fixed_terms = []
        for idx, el in enumerate(scenario.electrodes):
            self.fixed_terms.append((el.waveform, el.scale * (owner == idx)))
        self.n_edges, self.n_fixed = grid.n_edges, owner.size
        assert np.all((owner >= 0) | (owner == GROUND))

    def __call__(self, t: float) -> SourceTerms:
        j = np.zeros(self.n_edges)
        for wf, shape in self.coils:
            j += self.waveforms[wf](t) * shape
        p = np.zeros(self.n_fixed)
        for wf, shape in self.fixed_terms:
            p += self.waveforms[wf](t) * shape
        return SourceTerms(j, p)


@dataclass(eq=False)
class Problem:
    scenario: Scenario
    grid: StaggeredGrid
    material: MaterialField
    ops: IncidenceOperators
    hodge: HodgeMatrices
    source: ScenarioSource
    config: StepperConfig

    def stepper(self, config: StepperConfig | None = None) -> DarwinStepper:
        return DarwinStepper(self.grid, self.ops, self.hodge, config or self.config, self.source)


def build_problem(scenario: Scenario) -> Problem:
    grid = scenario.grid
    material = material_field(scenario, grid)
    electrodes = [Electrode(e.name, e.box.lo, e.box.hi, (e.waveform, e.scale)) for e in scenario.electrodes]
    try:
        ops = apply_boundary_masks(build_incidence(grid), grid, electrodes,
                                   ground_outer=scenario.phi_outer == "ground")
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None
    for c in scenario.coils:
        j = coil_edge_currents(grid, c)
        if np.any(ops.pec_edge_mask[j != 0]):
            raise ScenarioError(f"coil {c.name!r} runs along a PEC wall or an electrode")
    hodge = assemble_hodge(grid, material)
    config = scenario.stepper
    if config.scheme == "monolithic" and config.kappa_reg is None:
        config = replace(config, kappa_reg=default_kappa_reg(material))
    if scenario.phi_outer == "natural":
        tails, heads = grid.edge_endpoints()
        bnd = grid.boundary_nodes & ~ops.dirichlet_node_mask
        normal = ~ops.pec_edge_mask & (bnd[tails] ^ bnd[heads])
        if np.any(hodge.M_kappa[normal] > 0):
            log.warning("conductor touches a natural-potential wall; the discrete divergence "
                        "identity holds on interior nodes only")
    return Problem(scenario, grid, material, ops, hodge, ScenarioSource(scenario, grid, ops), config)


def build_source(scenario: Scenario, grid: StaggeredGrid, ops: IncidenceOperators, t: float):
    """Edge current vector (A) and Dirichlet potentials (V) at time ``t``."""
    src = ScenarioSource(scenario, grid, ops)(t)
    return src.j_s, src.phi_fixed
