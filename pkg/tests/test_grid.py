import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from darwinfit.grid import (CELL, EDGE_KINDS, FACE_KINDS, KINDS, NODE, EntityIndex, GridError,
                            StaggeredGrid, build_grid, dual_measures)


@st.composite
def grids(draw, max_nodes=7):
    counts = [draw(st.integers(2, max_nodes)) for _ in range(3)]
    spacings = [np.array(draw(st.lists(st.floats(0.05, 3.0), min_size=c - 1, max_size=c - 1)))
                for c in counts]
    origin = tuple(draw(st.floats(-5, 5)) for _ in range(3))
    return build_grid(counts, spacings, origin)


def counts(g):
    return g.n_nodes, g.n_edges, g.n_faces, g.n_cells


def test_single_cube_counts():
    assert counts(StaggeredGrid.uniform((1, 1, 1))) == (8, 12, 6, 1)


def test_two_cell_brick_counts():
    g = build_grid((3, 2, 2), [np.ones(2), np.ones(1), np.ones(1)])
    assert counts(g) == (12, 20, 11, 2)


@pytest.mark.parametrize("bad", [
    dict(node_counts=(2, 2, 2), spacings=[np.zeros(1), np.ones(1), np.ones(1)]),
    dict(node_counts=(2, 2, 2), spacings=[-np.ones(1), np.ones(1), np.ones(1)]),
    dict(node_counts=(1, 2, 2), spacings=[np.ones(0), np.ones(1), np.ones(1)]),
    dict(node_counts=(3, 2, 2), spacings=[np.ones(1), np.ones(1), np.ones(1)]),
])
def test_rejects_bad_input(bad):
    with pytest.raises(GridError):
        build_grid(**bad)


def test_uniform_dual_areas():
    h = 0.5
    g = StaggeredGrid.uniform((4, 4, 4), h=h)
    interior = EntityIndex("edge-x", (1, 2, 2))
    assert dual_measures(g, interior) == pytest.approx(h * h, rel=1e-15)
    on_face = EntityIndex("edge-x", (1, 0, 2))
    assert dual_measures(g, on_face) == pytest.approx(h * h / 2, rel=1e-15)
    corner = EntityIndex("edge-x", (1, 0, 0))
    assert dual_measures(g, corner) == pytest.approx(h * h / 4, rel=1e-15)


def test_graded_dual_area():
    h1, h2, h = 0.3, 0.7, 0.4
    g = build_grid((3, 3, 3), [np.array([h, h]), np.array([h1, h2]), np.array([h, h])])
    # x-edge at y-node 1 (between h1 and h2) and z-node 1 (between h and h)
    e = EntityIndex("edge-x", (0, 1, 1))
    assert dual_measures(g, e) == pytest.approx(h * (h1 + h2) / 2, rel=1e-14)


def test_dual_measure_rejects_cells():
    g = StaggeredGrid.uniform((2, 2, 2))
    with pytest.raises(GridError):
        dual_measures(g, EntityIndex(CELL, (0, 0, 0)))
    with pytest.raises(GridError):
        g.flat_index(EntityIndex("edge-x", (2, 0, 0)))


def test_block_ordering_x_fastest():
    g = StaggeredGrid.uniform((2, 3, 4))
    assert g.flat_index(EntityIndex(NODE, (1, 0, 0))) == 1
    assert g.flat_index(EntityIndex(NODE, (0, 1, 0))) == 3
    assert g.flat_index(EntityIndex("edge-y", (0, 0, 0))) == g.count("edge-x")
    assert g.flat_index(EntityIndex("face-z", (0, 0, 0))) == g.count("face-x") + g.count("face-y")


@given(grids())
def test_euler_relation(g):
    n, e, f, c = counts(g)
    assert n - e + f - c == 1


@given(grids())
def test_dual_volumes_sum_to_box(g):
    assert g.node_dual_volumes.sum() == pytest.approx(g.volume, rel=1e-12)
    assert g.cell_volumes.sum() == pytest.approx(g.volume, rel=1e-12)


@given(grids())
def test_measures_positive(g):
    for m in (g.edge_lengths, g.edge_dual_areas, g.face_areas, g.face_dual_lengths,
              g.node_dual_volumes, g.cell_volumes):
        assert np.all(m > 0)


@given(grids(max_nodes=5))
def test_flat_index_round_trip(g):
    groups = {NODE: "node", CELL: "cell", **{k: "edge" for k in EDGE_KINDS},
              **{k: "face" for k in FACE_KINDS}}
    for kind in KINDS:
        ni, nj, nk = g.shape_of(kind)
        for k in range(nk):
            for j in range(nj):
                for i in range(ni):
                    ent = EntityIndex(kind, (i, j, k))
                    assert g.entity(groups[kind], g.flat_index(ent)) == ent


def test_grid_is_immutable():
    g = StaggeredGrid.uniform((2, 2, 2))
    with pytest.raises(Exception):
        g.node_counts = (3, 3, 3)
