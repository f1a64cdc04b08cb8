"""Integer incidence matrices (gradient, curl, divergence) and boundary masks."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Hashable, Sequence

import numpy as np
import scipy.sparse as sp

from .grid import StaggeredGrid

GROUND = -2
FREE = -1


class BoundaryError(ValueError):
    pass


def _ddx(n: int) -> sp.csr_matrix:
    """(n-1) x n forward difference."""
    return sp.diags([-np.ones(n - 1, dtype=np.int64), np.ones(n - 1, dtype=np.int64)], [0, 1],
                    shape=(n - 1, n), format="csr", dtype=np.int64)


def _eye(n: int) -> sp.csr_matrix:
    return sp.identity(n, dtype=np.int64, format="csr")


def _kron3(a, b, c) -> sp.csr_matrix:
    # x-fastest ordering: the last factor acts on the x index
    return sp.kron(a, sp.kron(b, c, format="csr"), format="csr")


@dataclass(frozen=True)
class Electrode:
    """Box of nodes held at a prescribed potential.

    ``drive`` identifies the applied potential; two electrodes sharing nodes
    must carry equal drives.
    """

    name: str
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    drive: Hashable = None


@dataclass(frozen=True, eq=False)
class IncidenceOperators:
    G: sp.csr_matrix
    C: sp.csr_matrix
    D: sp.csr_matrix
    pec_edge_mask: np.ndarray
    dirichlet_node_mask: np.ndarray
    # per node: FREE, GROUND, or the index of the owning electrode
    node_owner: np.ndarray = field(default=None)
    electrodes: tuple[Electrode, ...] = ()

    @property
    def free_edges(self) -> np.ndarray:
        return np.flatnonzero(~self.pec_edge_mask)

    @property
    def free_nodes(self) -> np.ndarray:
        return np.flatnonzero(~self.dirichlet_node_mask)

    @property
    def fixed_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.dirichlet_node_mask)


def build_incidence(grid: StaggeredGrid) -> IncidenceOperators:
    nx, ny, nz = grid.node_counts
    Dx, Dy, Dz = _ddx(nx), _ddx(ny), _ddx(nz)
    Ix, Iy, Iz = _eye(nx), _eye(ny), _eye(nz)
    Ixm, Iym, Izm = _eye(nx - 1), _eye(ny - 1), _eye(nz - 1)

    G = sp.vstack([
        _kron3(Iz, Iy, Dx),
        _kron3(Iz, Dy, Ix),
        _kron3(Dz, Iy, Ix),
    ], format="csr")

    zero = lambda r, c: sp.csr_matrix((r, c), dtype=np.int64)  # noqa: E731
    ne = [grid.count(k) for k in ("edge-x", "edge-y", "edge-z")]
    nf = [grid.count(k) for k in ("face-x", "face-y", "face-z")]
    # x-faces: d(a_z)/dy - d(a_y)/dz
    Cxy = -_kron3(Dz, Iym, Ix)
    Cxz = _kron3(Izm, Dy, Ix)
    # y-faces: d(a_x)/dz - d(a_z)/dx
    Cyx = _kron3(Dz, Iy, Ixm)
    Cyz = -_kron3(Izm, Iy, Dx)
    # z-faces: d(a_y)/dx - d(a_x)/dy
    Czx = -_kron3(Iz, Dy, Ixm)
    Czy = _kron3(Iz, Iym, Dx)
    C = sp.bmat([
        [zero(nf[0], ne[0]), Cxy, Cxz],
        [Cyx, zero(nf[1], ne[1]), Cyz],
        [Czx, Czy, zero(nf[2], ne[2])],
    ], format="csr", dtype=np.int64)

    D = sp.hstack([
        _kron3(Izm, Iym, Dx),
        _kron3(Izm, Dy, Ixm),
        _kron3(Dz, Iym, Ixm),
    ], format="csr")

    for m in (G, C, D):
        m.sort_indices()
        m.eliminate_zeros()
    return IncidenceOperators(
        G=G, C=C, D=D,
        pec_edge_mask=np.zeros(grid.n_edges, dtype=bool),
        dirichlet_node_mask=np.zeros(grid.n_nodes, dtype=bool),
        node_owner=np.full(grid.n_nodes, FREE, dtype=np.int64),
    )


def boundary_tangential_edges(grid: StaggeredGrid) -> np.ndarray:
    """Edges lying in the outer box surface (both end nodes on the same wall)."""
    tails, heads = grid.edge_endpoints()
    nx, ny, nz = grid.node_counts
    mask = np.zeros(grid.n_edges, dtype=bool)
    for axis, n in enumerate((nx, ny, nz)):
        for side in (0, n - 1):
            on = _node_plane_mask(grid, axis, side)
            mask |= on[tails] & on[heads]
    return mask


def _node_plane_mask(grid: StaggeredGrid, axis: int, index: int) -> np.ndarray:
    shape = grid.node_counts
    m = np.zeros(shape, dtype=bool)
    sl = [slice(None)] * 3
    sl[axis] = index
    m[tuple(sl)] = True
    return m.ravel(order="F")


def nodes_in_box(grid: StaggeredGrid, lo, hi, rtol: float = 1e-9) -> np.ndarray:
    masks = []
    for x, a, b, (x0, x1) in zip(grid.node_coords, lo, hi, grid.extent):
        tol = rtol * (x1 - x0)
        masks.append((x >= a - tol) & (x <= b + tol))
    mx, my, mz = masks
    return (mx[:, None, None] & my[None, :, None] & mz[None, None, :]).ravel(order="F")


def apply_boundary_masks(
    ops: IncidenceOperators,
    grid: StaggeredGrid,
    electrodes: Sequence[Electrode] = (),
    pec_outer: bool = True,
    ground_outer: bool = False,
) -> IncidenceOperators:
    """Mask PEC edges and Dirichlet nodes.

    Edges in the outer surface are PEC when ``pec_outer``.  Every electrode is
    an equipotential conductor: its nodes become Dirichlet and edges joining
    two of its nodes are masked as well.  Electrodes must reach the outer
    surface, since an isolated driven electrode has no return path for its
    current.  With ``ground_outer`` the remaining surface nodes are held at
    0 V, which makes the restricted curl and gradient satisfy ``C G = 0`` on
    every free node.
    """
    tails, heads = grid.edge_endpoints()
    pec = boundary_tangential_edges(grid) if pec_outer else np.zeros(grid.n_edges, dtype=bool)
    owner = np.full(grid.n_nodes, FREE, dtype=np.int64)
    drives = {}
    bnodes = grid.boundary_nodes
    for idx, el in enumerate(electrodes):
        inside = nodes_in_box(grid, el.lo, el.hi)
        if not inside.any():
            raise BoundaryError(f"electrode {el.name!r} does not contain any grid node")
        if not (inside & bnodes).any():
            raise BoundaryError(f"electrode {el.name!r} does not reach the outer boundary")
        clash = inside & (owner >= 0)
        for other in np.unique(owner[clash]):
            if drives[int(other)] != el.drive:
                raise BoundaryError(
                    f"electrodes {electrodes[int(other)].name!r} and {el.name!r} overlap "
                    "with different potentials")
        owner[inside & (owner == FREE)] = idx
        drives[idx] = el.drive
        pec |= inside[tails] & inside[heads]
    if ground_outer:
        owner[bnodes & (owner == FREE)] = GROUND
    return replace(ops, pec_edge_mask=pec, dirichlet_node_mask=owner != FREE,
                   node_owner=owner, electrodes=tuple(electrodes))


def conservation_nodes(grid: StaggeredGrid, ops: IncidenceOperators) -> np.ndarray:
    """Free nodes none of whose incident edges is masked.

    These are exactly the rows on which the restricted operators satisfy
    ``G^T C^T = 0``, so the discrete divergence identity of the two-step
    scheme holds there.
    """
    tails, heads = grid.edge_endpoints()
    touched = np.zeros(grid.n_nodes, dtype=bool)
    touched[tails[ops.pec_edge_mask]] = True
    touched[heads[ops.pec_edge_mask]] = True
    return np.flatnonzero(~ops.dirichlet_node_mask & ~touched)
