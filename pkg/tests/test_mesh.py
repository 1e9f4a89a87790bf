import math
import warnings

import numpy as np
import pytest

from proxgal.mesh import (
    MeshError,
    SimplicialMesh,
    export_mesh,
    import_mesh,
    mesh_size,
    refine_uniform,
    structured_rectangle,
)
from proxgal.problems.meshes import available_meshes, packaged_mesh

TWO_CELL_TEXT = """vi-mesh 1
# unit square split along the main diagonal
vertices 4
0 0
1 0
0 1
1 1
cells 2
0 1 3
0 3 2
boundary 4
0 1 bottom
1 3 right
2 3 top
0 2 left
"""


def test_counts_two_by_two():
    m = structured_rectangle(2, 2, ((-1.0, 1.0), (-1.0, 1.0)))
    assert (m.n_vertices, m.n_cells, len(m.boundary_facets)) == (9, 8, 8)


def test_minimal_mesh():
    m = structured_rectangle(1, 1)
    assert (m.n_vertices, m.n_cells) == (4, 2)


@pytest.mark.parametrize("diagonal", ["right", "left"])
def test_size_of_reference_square_mesh(diagonal):
    m = structured_rectangle(32, 32, ((-1.0, 1.0), (-1.0, 1.0)), diagonal)
    assert m.mesh_size() == pytest.approx(math.sqrt(2) / 16, rel=1e-14)
    # the axis step of this mesh is 1/16
    assert np.diff(np.unique(m.vertices[:, 0]))[0] == pytest.approx(1 / 16)


def test_unit_right_triangle_size():
    m = SimplicialMesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]),
                       {(0, 1): "a", (1, 2): "a", (2, 0): "a"})
    assert mesh_size(m) == pytest.approx(math.sqrt(2))


def test_refine_counts_area_and_size():
    m = structured_rectangle(1, 1)
    r = refine_uniform(m)
    assert r.n_cells == 8
    assert r.areas.sum() == pytest.approx(m.areas.sum(), rel=1e-12)
    assert r.mesh_size() == pytest.approx(m.mesh_size() / 2)


def test_four_refinements_reach_finest_level():
    m = structured_rectangle(32, 32, ((-1.0, 1.0), (-1.0, 1.0)))
    for _ in range(4):
        m = refine_uniform(m)
    assert m.mesh_size() == pytest.approx(math.sqrt(2) / 16 / 16, rel=1e-12)
    assert m.areas.sum() == pytest.approx(4.0, rel=1e-12)


def test_refinement_keeps_tags():
    m = refine_uniform(structured_rectangle(2, 3))
    assert m.tags() == ["bottom", "left", "right", "top"]
    assert m.facet_lengths[m.facets_with_tag("left")].sum() == pytest.approx(1.0)


def test_import_matches_builder():
    m = import_mesh(TWO_CELL_TEXT)
    ref = structured_rectangle(1, 1)
    np.testing.assert_array_equal(m.vertices, ref.vertices)
    np.testing.assert_array_equal(m.cells, ref.cells)
    assert list(m.facet_tags) == list(ref.facet_tags)


def test_export_import_round_trip():
    m = refine_uniform(structured_rectangle(2, 1, ((0.0, 3.0), (-1.0, 0.5))))
    back = import_mesh(export_mesh(m))
    np.testing.assert_array_equal(back.vertices, m.vertices)
    np.testing.assert_array_equal(back.cells, m.cells)
    assert list(back.facet_tags) == list(m.facet_tags)


def test_clockwise_cell_is_repaired_with_warning():
    text = TWO_CELL_TEXT.replace("0 3 2\n", "0 2 3\n")
    with pytest.warns(UserWarning, match="reoriented"):
        m = import_mesh(text)
    assert np.all(m.areas > 0)


def test_untagged_boundary_facet_is_rejected():
    text = TWO_CELL_TEXT.replace("boundary 4", "boundary 3").replace("0 2 left\n", "")
    with pytest.raises(MeshError, match="facet"):
        import_mesh(text)


def test_degenerate_cell_is_rejected():
    text = TWO_CELL_TEXT.replace("1 1\ncells", "0.5 0\ncells")
    with pytest.raises(MeshError, match="cell"):
        import_mesh(text)


def test_nonconforming_connectivity_is_rejected():
    vertices = np.array([[0, 0], [1, 0], [0, 1], [1, 1], [0.5, 0.5]], float)
    cells = np.array([[0, 1, 3], [0, 3, 2], [0, 1, 4]])
    with pytest.raises(MeshError):
        SimplicialMesh(vertices, cells, {})


def test_missing_header():
    with pytest.raises(MeshError, match="header"):
        import_mesh("vertices 0\n")


@pytest.mark.parametrize("name", available_meshes())
def test_packaged_meshes_are_valid(name):
    m = packaged_mesh(name)
    m.validate()
    # one hole each: V - E + T = 0
    assert m.euler_characteristic() == 0
    assert np.all(m.areas > 0)


def test_euler_relation_structured():
    for nx, ny in [(1, 1), (3, 2), (5, 7)]:
        m = structured_rectangle(nx, ny)
        assert m.euler_characteristic() == 1


def test_interior_facets_traversed_oppositely():
    m = refine_uniform(structured_rectangle(3, 3, diagonal="left"))
    for f in m.interior_facets:
        a, b = m.facets[f]
        dirs = []
        for t in m.facet_cells[f]:
            cell = list(m.cells[t])
            i = cell.index(a)
            dirs.append(cell[(i + 1) % 3] == b)
        assert dirs[0] != dirs[1]


def test_locate_points():
    m = structured_rectangle(4, 4)
    pts = np.array([[0.1, 0.1], [0.99, 0.5], [2.0, 2.0]])
    cells = m.locate(pts)
    assert cells[2] == -1
    for p, c in zip(pts[:2], cells[:2]):
        v = m.vertices[m.cells[c]]
        lam = np.linalg.solve(np.vstack([v.T, np.ones(3)]), np.append(p, 1.0))
        assert np.all(lam >= -1e-12)


def test_mesh_is_immutable():
    m = structured_rectangle(1, 1)
    with pytest.raises(ValueError):
        m.vertices[0, 0] = 5.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert m.n_cells == 2
