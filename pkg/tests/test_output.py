import json

import numpy as np
import pytest

from darwinfit.darwin import Fields, StepInfo
from darwinfit.grid import StaggeredGrid, build_grid
from darwinfit.operators import build_incidence
from darwinfit.output import (CSV_COLUMNS, DiagnosticsWriter, cell_vectors, read_diagnostics,
                              read_vtk_scalars, write_manifest, write_vtk)


def test_cell_vectors_uniform_field():
    g = StaggeredGrid.uniform((2, 3, 4), h=0.5)
    e = np.zeros(g.n_edges)
    e[g.block("edge-y")] = 2.0 * g.edge_lengths[g.block("edge-y")]
    b = np.zeros(g.n_faces)
    b[g.block("face-z")] = 3.0 * g.face_areas[g.block("face-z")]
    E, B = cell_vectors(g, e, b)
    assert E.shape == (3, 2, 3, 4)
    assert np.allclose(E[1], 2.0) and not E[0].any() and not E[2].any()
    assert np.allclose(B[2], 3.0) and not B[0].any()


@pytest.mark.parametrize("graded", [False, True])
def test_vtk_round_trip(tmp_path, graded):
    if graded:
        g = build_grid((3, 4, 2), [np.array([0.1, 0.3]), np.array([0.2, 0.2, 0.5]), np.array([1.0])])
    else:
        g = StaggeredGrid.uniform((2, 3, 1), h=0.25)
    rng = np.random.default_rng(0)
    e, b = rng.standard_normal(g.n_edges), build_incidence(g).C @ rng.standard_normal(g.n_edges)
    f = Fields(e, b, e, np.zeros_like(e))
    path = write_vtk(tmp_path / "s.vtk", g, f, 1.5e-9, "demo")
    text = path.read_text().splitlines()
    assert text[0] == "# vtk DataFile Version 3.0" and text[2] == "ASCII"
    assert text[3] == ("DATASET RECTILINEAR_GRID" if graded else "DATASET STRUCTURED_POINTS")
    data = read_vtk_scalars(path)
    E, B = cell_vectors(g, e, b)
    assert np.array_equal(data["E_mag"], np.sqrt((E ** 2).sum(0)).ravel(order="F"))
    assert np.array_equal(data["B_mag"], np.sqrt((B ** 2).sum(0)).ravel(order="F"))


def test_csv_full_precision(tmp_path):
    vals = [(1, 0.1, 1 / 3, np.pi * 1e-20, StepInfo(5, 1e-11, 7, 2e-11, 1.234e-25, 0, 1, 0.01))]
    with DiagnosticsWriter(tmp_path / "d.csv") as w:
        for step, t, we, wm, info in vals:
            w.write(step, t, we, wm, info)
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    d = read_diagnostics(tmp_path / "d.csv")
    assert d["W_e"][0] == 1 / 3 and d["W_m"][0] == np.pi * 1e-20 and d["t"][0] == 0.1
    assert d["eqs_iters"][0] == 5 and d["div_residual"][0] == 1.234e-25


def test_manifest_is_sorted_json(tmp_path):
    p = write_manifest(tmp_path / "m.json", {"b": 1, "a": [1, 2]})
    assert json.loads(p.read_text()) == {"a": [1, 2], "b": 1}
    assert p.read_text().index('"a"') < p.read_text().index('"b"')
