"""Staggered Cartesian primal/dual grid.

Entities of every kind are numbered lexicographically with x fastest,
``flat = i + ni * (j + nj * k)``, using the per-kind dimensions returned by
:meth:`StaggeredGrid.shape_of`.  Global edge numbers stack the x-, y- and
z-edge blocks in that order; faces do the same with the face normal.

The dual grid is the midpoint construction: dual nodes sit at cell centres
and dual cells of boundary entities are clipped to the box.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

NODE = "node"
EDGE_KINDS = ("edge-x", "edge-y", "edge-z")
FACE_KINDS = ("face-x", "face-y", "face-z")
CELL = "cell"
KINDS = (NODE, *EDGE_KINDS, *FACE_KINDS, CELL)


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class EntityIndex:
    kind: str
    ijk: tuple[int, int, int]


def _dual_lengths(h: np.ndarray) -> np.ndarray:
    # half-spacing sums; the two end nodes keep only their inner half cell
    d = np.zeros(h.size + 1)
    d[:-1] += 0.5 * h
    d[1:] += 0.5 * h
    return d


def _fortran(a: np.ndarray) -> np.ndarray:
    return np.asarray(a).ravel(order="F")


@dataclass(frozen=True, eq=False)
class StaggeredGrid:
    """Tensor-product grid with precomputed primal and dual measures."""

    node_counts: tuple[int, int, int]
    spacings: tuple[np.ndarray, np.ndarray, np.ndarray]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    _offsets: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        counts = tuple(int(n) for n in self.node_counts)
        if len(counts) != 3 or any(n < 2 for n in counts):
            raise GridError(f"node counts must be three integers >= 2, got {self.node_counts}")
        hs = []
        for axis, (n, h) in enumerate(zip(counts, self.spacings)):
            h = np.array(h, dtype=float).reshape(-1)
            if h.size != n - 1:
                raise GridError(f"axis {axis}: expected {n - 1} spacings, got {h.size}")
            if not np.all(np.isfinite(h)) or np.any(h <= 0):
                raise GridError(f"axis {axis}: spacings must be finite and strictly positive")
            h.setflags(write=False)
            hs.append(h)
        object.__setattr__(self, "node_counts", counts)
        object.__setattr__(self, "spacings", tuple(hs))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

        offsets = {}
        for group in (EDGE_KINDS, FACE_KINDS):
            start = 0
            for kind in group:
                offsets[kind] = start
                start += int(np.prod(self.shape_of(kind)))
        offsets[NODE] = offsets[CELL] = 0
        object.__setattr__(self, "_offsets", offsets)

    @classmethod
    def uniform(cls, cells, h=1.0, origin=(0.0, 0.0, 0.0)) -> "StaggeredGrid":
        cells = tuple(int(c) for c in cells)
        hh = np.broadcast_to(np.asarray(h, dtype=float), (3,))
        return cls(tuple(c + 1 for c in cells), tuple(np.full(c, hv) for c, hv in zip(cells, hh)), origin)

    # ------------------------------------------------------------------ shapes
    def shape_of(self, kind: str) -> tuple[int, int, int]:
        nx, ny, nz = self.node_counts
        shapes = {
            NODE: (nx, ny, nz),
            "edge-x": (nx - 1, ny, nz),
            "edge-y": (nx, ny - 1, nz),
            "edge-z": (nx, ny, nz - 1),
            "face-x": (nx, ny - 1, nz - 1),
            "face-y": (nx - 1, ny, nz - 1),
            "face-z": (nx - 1, ny - 1, nz),
            CELL: (nx - 1, ny - 1, nz - 1),
        }
        try:
            return shapes[kind]
        except KeyError:
            raise GridError(f"unknown entity kind {kind!r}") from None

    def count(self, kind: str) -> int:
        return int(np.prod(self.shape_of(kind)))

    @property
    def n_nodes(self) -> int:
        return self.count(NODE)

    @property
    def n_edges(self) -> int:
        return sum(self.count(k) for k in EDGE_KINDS)

    @property
    def n_faces(self) -> int:
        return sum(self.count(k) for k in FACE_KINDS)

    @property
    def n_cells(self) -> int:
        return self.count(CELL)

    @property
    def cell_counts(self) -> tuple[int, int, int]:
        return self.shape_of(CELL)

    @property
    def is_uniform(self) -> bool:
        return all(np.allclose(h, h[0], rtol=1e-12, atol=0.0) for h in self.spacings)

    # ---------------------------------------------------------------- indexing
    def flat_index(self, entity: EntityIndex) -> int:
        """Global flat index (edges and faces include their block offset)."""
        ni, nj, nk = self.shape_of(entity.kind)
        i, j, k = entity.ijk
        if not (0 <= i < ni and 0 <= j < nj and 0 <= k < nk):
            raise GridError(f"{entity.kind} index {entity.ijk} out of range {(ni, nj, nk)}")
        return self._offsets[entity.kind] + i + ni * (j + nj * k)

    def entity(self, group: str, flat: int) -> EntityIndex:
        """Inverse of :meth:`flat_index`; ``group`` is node, edge, face or cell."""
        kinds = {"node": (NODE,), "edge": EDGE_KINDS, "face": FACE_KINDS, "cell": (CELL,)}[group]
        rest = int(flat)
        for kind in kinds:
            n = self.count(kind)
            if 0 <= rest < n:
                ni, nj, _ = self.shape_of(kind)
                return EntityIndex(kind, (rest % ni, (rest // ni) % nj, rest // (ni * nj)))
            rest -= n
        raise GridError(f"flat {group} index {flat} out of range")

    def block(self, kind: str) -> slice:
        start = self._offsets[kind]
        return slice(start, start + self.count(kind))

    # -------------------------------------------------------------- coordinates
    @cached_property
    def node_coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(o + np.concatenate([[0.0], np.cumsum(h)]) for o, h in zip(self.origin, self.spacings))

    @cached_property
    def cell_centers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(0.5 * (x[1:] + x[:-1]) for x in self.node_coords)

    @cached_property
    def dual_lengths_1d(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(_dual_lengths(h) for h in self.spacings)

    @property
    def extent(self) -> tuple[tuple[float, float], ...]:
        return tuple((x[0], x[-1]) for x in self.node_coords)

    # ---------------------------------------------------------------- measures
    def _outer(self, a, b, c) -> np.ndarray:
        return _fortran(np.multiply.outer(np.multiply.outer(a, b), c))

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        hx, hy, hz = self.spacings
        nx, ny, nz = self.node_counts
        return np.concatenate([
            self._outer(hx, np.ones(ny), np.ones(nz)),
            self._outer(np.ones(nx), hy, np.ones(nz)),
            self._outer(np.ones(nx), np.ones(ny), hz),
        ])

    @cached_property
    def edge_dual_areas(self) -> np.ndarray:
        dx, dy, dz = self.dual_lengths_1d
        hx, hy, hz = self.spacings
        return np.concatenate([
            self._outer(np.ones_like(hx), dy, dz),
            self._outer(dx, np.ones_like(hy), dz),
            self._outer(dx, dy, np.ones_like(hz)),
        ])

    @cached_property
    def face_areas(self) -> np.ndarray:
        hx, hy, hz = self.spacings
        nx, ny, nz = self.node_counts
        return np.concatenate([
            self._outer(np.ones(nx), hy, hz),
            self._outer(hx, np.ones(ny), hz),
            self._outer(hx, hy, np.ones(nz)),
        ])

    @cached_property
    def face_dual_lengths(self) -> np.ndarray:
        dx, dy, dz = self.dual_lengths_1d
        hx, hy, hz = self.spacings
        return np.concatenate([
            self._outer(dx, np.ones_like(hy), np.ones_like(hz)),
            self._outer(np.ones_like(hx), dy, np.ones_like(hz)),
            self._outer(np.ones_like(hx), np.ones_like(hy), dz),
        ])

    @cached_property
    def node_dual_volumes(self) -> np.ndarray:
        return self._outer(*self.dual_lengths_1d)

    @cached_property
    def cell_volumes(self) -> np.ndarray:
        return self._outer(*self.spacings)

    @property
    def volume(self) -> float:
        return float(np.prod([h.sum() for h in self.spacings]))

    def dual_measure(self, entity: EntityIndex) -> float:
        """Dual length of a face, dual area of an edge or dual volume of a node."""
        flat = self.flat_index(entity)
        if entity.kind in FACE_KINDS:
            return float(self.face_dual_lengths[flat])
        if entity.kind in EDGE_KINDS:
            return float(self.edge_dual_areas[flat])
        if entity.kind == NODE:
            return float(self.node_dual_volumes[flat])
        raise GridError(f"no dual measure defined for {entity.kind!r}")

    # --------------------------------------------------------------- topology
    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        """Boolean mask of nodes on the outer box surface."""
        masks = []
        for n in self.node_counts:
            m = np.zeros(n, dtype=bool)
            m[[0, -1]] = True
            masks.append(m)
        mx, my, mz = masks
        full = mx[:, None, None] | my[None, :, None] | mz[None, None, :]
        return _fortran(full)

    def edge_endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        """Tail and head node of every edge (edges point along +axis)."""
        nx, ny, nz = self.node_counts
        idx = np.arange(self.n_nodes).reshape((nx, ny, nz), order="F")
        tails, heads = [], []
        for axis in range(3):
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[axis] = slice(0, -1)
            hi[axis] = slice(1, None)
            tails.append(_fortran(idx[tuple(lo)]))
            heads.append(_fortran(idx[tuple(hi)]))
        return np.concatenate(tails), np.concatenate(heads)


def build_grid(node_counts, spacings, origin=(0.0, 0.0, 0.0)) -> StaggeredGrid:
    return StaggeredGrid(tuple(node_counts), tuple(spacings), tuple(origin))


def dual_measures(grid: StaggeredGrid, entity: EntityIndex) -> float:
    return grid.dual_measure(entity)
