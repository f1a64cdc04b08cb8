"""Diagonal material (Hodge) matrices of the staggered grid.

Edge matrices map edge voltages to currents through the dual faces::

    M[e] = sum_c (quarter dual area of e inside cell c) * value_c / length(e)

which is the area-weighted mean of the up to four cells touching the edge
times ``dual_area / length``.  The face matrix maps face fluxes to magnetic
voltages along the dual edges, with the two half cells in series::

    M_nu[f] = sum_c (half dual length of f inside cell c) * nu_c / area(f)
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .grid import StaggeredGrid

MU0 = 4e-7 * np.pi
EPS0 = 8.8541878128e-12


class MaterialError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MaterialField:
    """Per-cell reluctivity (m/H), conductivity (S/m) and permittivity (F/m)."""

    nu: np.ndarray
    kappa: np.ndarray
    eps: np.ndarray

    def __post_init__(self):
        for name in ("nu", "kappa", "eps"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        if not (self.nu.size == self.kappa.size == self.eps.size):
            raise MaterialError("material arrays differ in length")
        if np.any(~np.isfinite(self.nu)) or np.any(self.nu <= 0):
            raise MaterialError("reluctivity must be strictly positive")
        if np.any(~np.isfinite(self.eps)) or np.any(self.eps <= 0):
            raise MaterialError("permittivity must be strictly positive")
        if np.any(~np.isfinite(self.kappa)) or np.any(self.kappa < 0):
            raise MaterialError("conductivity must be non-negative")

    @classmethod
    def uniform(cls, grid: StaggeredGrid, nu=1 / MU0, kappa=0.0, eps=EPS0) -> "MaterialField":
        n = grid.n_cells
        return cls(np.full(n, float(nu)), np.full(n, float(kappa)), np.full(n, float(eps)))


@dataclass(frozen=True, eq=False)
class HodgeMatrices:
    """Diagonals of M_nu (faces), M_kappa, M_eps and M_sigma (edges)."""

    M_nu: np.ndarray
    M_kappa: np.ndarray
    M_eps: np.ndarray
    M_sigma: np.ndarray | None = None
    dt: float | None = None
    kappa_reg: float = 0.0


def _edge_weighted_sum(grid: StaggeredGrid, cell_values: np.ndarray) -> np.ndarray:
    """Sum over touching cells of quarter dual area times the cell value."""
    ncx, ncy, ncz = grid.cell_counts
    v = cell_values.reshape((ncx, ncy, ncz), order="F")
    half = [0.5 * h for h in grid.spacings]
    out = []
    for axis in range(3):
        t1, t2 = [a for a in range(3) if a != axis]
        # weight each cell by the two transverse half widths
        w = v * half[t1].reshape([-1 if a == t1 else 1 for a in range(3)]) \
              * half[t2].reshape([-1 if a == t2 else 1 for a in range(3)])
        pad = [(0, 0)] * 3
        pad[t1] = (1, 1)
        pad[t2] = (1, 1)
        wp = np.pad(w, pad)
        acc = 0.0
        for s1 in (0, 1):
            for s2 in (0, 1):
                sl = [slice(None)] * 3
                sl[t1] = slice(s1, s1 + v.shape[t1] + 1)
                sl[t2] = slice(s2, s2 + v.shape[t2] + 1)
                acc = acc + wp[tuple(sl)]
        out.append(acc.ravel(order="F"))
    return np.concatenate(out)


def _face_series_sum(grid: StaggeredGrid, cell_values: np.ndarray) -> np.ndarray:
    """Sum over the two cells beside a face of half length times the cell value."""
    ncx, ncy, ncz = grid.cell_counts
    v = cell_values.reshape((ncx, ncy, ncz), order="F")
    out = []
    for axis in range(3):
        h = 0.5 * grid.spacings[axis]
        w = v * h.reshape([-1 if a == axis else 1 for a in range(3)])
        pad = [(0, 0)] * 3
        pad[axis] = (1, 1)
        wp = np.pad(w, pad)
        sl0 = [slice(None)] * 3
        sl1 = [slice(None)] * 3
        sl0[axis] = slice(0, v.shape[axis] + 1)
        sl1[axis] = slice(1, v.shape[axis] + 2)
        out.append((wp[tuple(sl0)] + wp[tuple(sl1)]).ravel(order="F"))
    return np.concatenate(out)


def assemble_hodge(grid: StaggeredGrid, material: MaterialField) -> HodgeMatrices:
    if material.nu.size != grid.n_cells:
        raise MaterialError(f"material field has {material.nu.size} cells, grid has {grid.n_cells}")
    length = grid.edge_lengths
    M_kappa = _edge_weighted_sum(grid, material.kappa) / length
    M_eps = _edge_weighted_sum(grid, material.eps) / length
    M_nu = _face_series_sum(grid, material.nu) / grid.face_areas
    return HodgeMatrices(M_nu=M_nu, M_kappa=M_kappa, M_eps=M_eps)


def combine_sigma(hodge: HodgeMatrices, dt: float) -> HodgeMatrices:
    if not dt > 0:
        raise ValueError(f"time step must be positive, got {dt}")
    return replace(hodge, M_sigma=hodge.M_kappa + hodge.M_eps / dt, dt=float(dt))


def regularize_kappa(hodge: HodgeMatrices, grid: StaggeredGrid, kappa_reg: float) -> HodgeMatrices:
    """Raise M_kappa to the floor of a uniform non-physical conductivity."""
    if kappa_reg < 0:
        raise ValueError("regularization conductivity must be non-negative")
    if kappa_reg == 0:
        return hodge
    floor = kappa_reg * grid.edge_dual_areas / grid.edge_lengths
    out = replace(hodge, M_kappa=np.maximum(hodge.M_kappa, floor), kappa_reg=float(kappa_reg))
    if hodge.dt is not None:
        out = combine_sigma(out, hodge.dt)
    return out


def default_kappa_reg(material: MaterialField) -> float:
    """1e-6 of the largest conductivity when some cell is insulating, else 0."""
    if material.kappa.size and material.kappa.min() == 0 and material.kappa.max() > 0:
        return 1e-6 * float(material.kappa.max())
    return 0.0
