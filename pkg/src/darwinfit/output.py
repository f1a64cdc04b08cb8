"""Snapshot, diagnostics and manifest writers."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .darwin import Fields, StepInfo
from .grid import StaggeredGrid

CSV_COLUMNS = ("step", "t", "W_e", "W_m", "div_residual", "eqs_iters", "eqs_res",
               "mqs_iters", "mqs_res", "wall_s")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def _edge_block(grid: StaggeredGrid, values, axis: int) -> np.ndarray:
    kind = ("edge-x", "edge-y", "edge-z")[axis]
    return values[grid.block(kind)].reshape(grid.shape_of(kind), order="F")


def _face_block(grid: StaggeredGrid, values, axis: int) -> np.ndarray:
    kind = ("face-x", "face-y", "face-z")[axis]
    return values[grid.block(kind)].reshape(grid.shape_of(kind), order="F")


def cell_vectors(grid: StaggeredGrid, e_edges, b_faces) -> tuple[np.ndarray, np.ndarray]:
    """Cell-centred E (V/m) and B (T), shape (3, nx-1, ny-1, nz-1).

    E components average the four parallel edges of a cell, B components the
    two opposite faces.
    """
    ex = np.asarray(e_edges) / grid.edge_lengths
    bx = np.asarray(b_faces) / grid.face_areas
    E, B = [], []
    for axis in range(3):
        v = np.moveaxis(_edge_block(grid, ex, axis), axis, 0)
        E.append(np.moveaxis(0.25 * (v[:, :-1, :-1] + v[:, 1:, :-1] + v[:, :-1, 1:] + v[:, 1:, 1:]), 0, axis))
        f = np.moveaxis(_face_block(grid, bx, axis), axis, 0)
        B.append(np.moveaxis(0.5 * (f[:-1] + f[1:]), 0, axis))
    return np.stack(E), np.stack(B)


def write_vtk(path, grid: StaggeredGrid, fields: Fields, t: float, title: str = "darwinfit") -> Path:
    """Legacy ASCII VTK with cell scalars |E| and |B|.

    Uniform grids are written as STRUCTURED_POINTS, graded ones as
    RECTILINEAR_GRID (structured points cannot carry variable spacing).
    """
    E, B = cell_vectors(grid, fields.e, fields.b)
    emag = np.sqrt((E ** 2).sum(axis=0)).ravel(order="F")
    bmag = np.sqrt((B ** 2).sum(axis=0)).ravel(order="F")
    nx, ny, nz = grid.node_counts
    lines = ["# vtk DataFile Version 3.0", f"{title} t={_fmt(t)}", "ASCII"]
    if grid.is_uniform:
        h = [s[0] for s in grid.spacings]
        lines += ["DATASET STRUCTURED_POINTS", f"DIMENSIONS {nx} {ny} {nz}",
                  "ORIGIN " + " ".join(_fmt(o) for o in grid.origin),
                  "SPACING " + " ".join(_fmt(v) for v in h)]
    else:
        lines += ["DATASET RECTILINEAR_GRID", f"DIMENSIONS {nx} {ny} {nz}"]
        for name, x in zip("XYZ", grid.node_coords):
            lines.append(f"{name}_COORDINATES {x.size} double")
            lines.append(" ".join(_fmt(v) for v in x))
    lines.append(f"CELL_DATA {grid.n_cells}")
    for name, data in (("E_mag", emag), ("B_mag", bmag)):
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [" ".join(_fmt(v) for v in data[i:i + 6]) for i in range(0, data.size, 6)]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_vtk_scalars(path) -> dict[str, np.ndarray]:
    """Read back the cell scalars of a file written by :func:`write_vtk`."""
    out, name, buf, n = {}, None, [], 0
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "CELL_DATA":
            n = int(tok[1])
        elif tok[0] == "SCALARS":
            name, buf = tok[1], []
        elif tok[0] == "LOOKUP_TABLE":
            continue
        elif name is not None:
            buf.extend(float(v) for v in tok)
            if len(buf) == n:
                out[name] = np.array(buf)
                name = None
    return out


class DiagnosticsWriter:
    """CSV trace with a fixed column order and 17 significant digits."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(CSV_COLUMNS)

    def write(self, step: int, t: float, w_e: float, w_m: float, info: StepInfo):
        row = (step, t, w_e, w_m, info.div_residual, info.eqs_iters, info.eqs_res,
               info.mqs_iters, info.mqs_res, info.wall_s)
        self._w.writerow([_fmt(v) for v in row])

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_diagnostics(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return {c: np.array([float(r[c]) for r in rows]) for c in CSV_COLUMNS}


def write_manifest(path, manifest: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
