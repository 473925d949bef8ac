import numpy as np
import pytest

from entrofv.mesh import (DIRICHLET, NEUMANN, BOTTOM, LEFT, RIGHT, TOP,
                          BoundarySpec, Mesh, MeshError, MeshFormatError,
                          Segment, UnsupportedGeometryError, load_mesh,
                          reference_mesh, refine, save_mesh, validate)


def test_reference_cell_counts(toy_boundary):
    assert reference_mesh(0, toy_boundary).n_cells == 56
    assert reference_mesh(3, toy_boundary).n_cells == 3584


def test_reference_level_guard(toy_boundary):
    with pytest.raises(MeshError, match="refusing level"):
        reference_mesh(9, toy_boundary)
    with pytest.raises(ValueError):
        reference_mesh(-1, toy_boundary)


def test_refine_matches_reference(toy_boundary, mesh0):
    m = mesh0
    for _ in range(2):
        m = refine(m)
    ref = reference_mesh(2, toy_boundary)
    assert m.n_cells == ref.n_cells == 896
    np.testing.assert_allclose(m.cell_area, ref.cell_area, rtol=1e-12)
    np.testing.assert_allclose(m.cell_center, ref.cell_center, atol=1e-12)
    np.testing.assert_array_equal(m.edge_cells, ref.edge_cells)
    np.testing.assert_array_equal(m.edge_tag, ref.edge_tag)
    np.testing.assert_allclose(m.edge_d, ref.edge_d, rtol=1e-12)


def test_refine_preserves_shape_constants(mesh0):
    fine = refine(mesh0)
    assert fine.n_cells == 4 * mesh0.n_cells
    assert fine.xi == pytest.approx(mesh0.xi, rel=1e-12)
    assert fine.cell_area.sum() == pytest.approx(1.0, abs=1e-12)
    # largest diameter halves: max edge length is a proxy on this family
    assert fine.edge_length.max() == pytest.approx(mesh0.edge_length.max() / 2, rel=1e-12)


def test_refine_preserves_boundary_tags(toy_boundary):
    mesh = reference_mesh(1, toy_boundary)
    mids = mesh.geometry.edge_midpoint
    on_left = np.abs(mids[:, 0]) < 1e-12
    assert np.all(mesh.edge_tag[on_left] == DIRICHLET)
    on_top = np.abs(mids[:, 1] - 1.0) < 1e-12
    assert np.all(mesh.edge_tag[on_top] == NEUMANN)


def test_refine_needs_geometry(mesh0):
    loaded = load_mesh(save_mesh(mesh0))
    with pytest.raises(UnsupportedGeometryError):
        refine(loaded)


def test_validate_reference_meshes_admissible(mesh0, mesh1):
    assert validate(mesh0).ok
    assert validate(mesh1).ok


def test_validate_flags_displaced_center(mesh0):
    centers = mesh0.cell_center.copy()
    centers[7] += (0.01, 0.013)
    bad = Mesh(cell_area=mesh0.cell_area.copy(), cell_center=centers,
               edge_length=mesh0.edge_length.copy(), edge_d=mesh0.edge_d.copy(),
               edge_cells=mesh0.edge_cells.copy(), edge_dcell=mesh0.edge_dcell.copy(),
               edge_tag=mesh0.edge_tag.copy(), xi=mesh0.xi,
               domain_measure=1.0, geometry=mesh0.geometry)
    report = validate(bad)
    assert not report.ok
    assert any(v.hypothesis == "H2" for v in report.violations)


def test_validate_flags_all_neumann():
    bnd = BoundarySpec(dirichlet=(), neumann=(LEFT, RIGHT, TOP, BOTTOM))
    report = validate(reference_mesh(0, bnd))
    assert any(v.hypothesis == "H1" for v in report.violations)


def test_cell_edges_lookup(two_cell_mesh):
    left = two_cell_mesh.cell_edges(0)
    assert set(left.tolist()) == {0, 1, 3, 5}
    right = two_cell_mesh.cell_edges(1)
    assert set(right.tolist()) == {0, 2, 4, 6}


def test_report_rendering(mesh0):
    assert str(validate(mesh0)) == "admissible"
    bnd = BoundarySpec(dirichlet=(), neumann=(LEFT, RIGHT, TOP, BOTTOM))
    report = validate(reference_mesh(0, bnd))
    assert "H1" in str(report)


def test_validate_two_cell(two_cell_mesh):
    assert validate(two_cell_mesh).ok
    assert np.all(two_cell_mesh.tau > 0)
    np.testing.assert_allclose(two_cell_mesh.tau[:3], [2.0, 4.0, 4.0])


def test_boundary_spec_rejects_overlap_and_gap():
    overlap = BoundarySpec(dirichlet=(LEFT,), neumann=(LEFT, RIGHT, TOP, BOTTOM))
    with pytest.raises(MeshError, match="both"):
        reference_mesh(0, overlap)
    gap = BoundarySpec(dirichlet=(LEFT,), neumann=(TOP, BOTTOM))
    with pytest.raises(MeshError, match="matches no"):
        reference_mesh(0, gap)


def test_segment_membership():
    seg = Segment(1, 1.0, 0.0, 0.25)
    assert seg.contains(np.array([0.1, 1.0]))
    assert not seg.contains(np.array([0.3, 1.0]))
    assert not seg.contains(np.array([0.1, 0.9]))


def test_save_load_round_trip(mesh0):
    text = save_mesh(mesh0)
    back = load_mesh(text)
    np.testing.assert_allclose(back.cell_area, mesh0.cell_area, rtol=1e-15)
    np.testing.assert_allclose(back.cell_center, mesh0.cell_center, atol=1e-15)
    np.testing.assert_allclose(back.edge_length, mesh0.edge_length, rtol=1e-15)
    np.testing.assert_allclose(back.edge_d, mesh0.edge_d, rtol=1e-15)
    nonnan = ~np.isnan(mesh0.edge_dcell)
    np.testing.assert_allclose(back.edge_dcell[nonnan], mesh0.edge_dcell[nonnan],
                               rtol=1e-15)
    np.testing.assert_array_equal(back.edge_cells, mesh0.edge_cells)
    np.testing.assert_array_equal(back.edge_tag, mesh0.edge_tag)
    assert back.xi == mesh0.xi
    assert validate(back).ok
    # byte-for-byte stable serialization
    assert save_mesh(back) == text


def test_load_rejects_missing_cell_reference():
    text = ("tpfa 1\n"
            "cells 1\n"
            "0 1.0 0.5 0.5\n"
            "edges 1\n"
            "0 1.0 0.5 D 3 0.5\n"
            "xi 1.0\n")
    with pytest.raises(MeshFormatError, match="edge 0 references missing cell 3"):
        load_mesh(text)


def test_load_rejects_empty_and_garbage():
    with pytest.raises(MeshFormatError):
        load_mesh("")
    with pytest.raises(MeshFormatError, match="header"):
        load_mesh("bogus 7\n")


def test_load_rejects_inconsistent_incidence():
    text = ("tpfa 1\n"
            "cells 2\n"
            "0 0.5 0.25 0.5\n"
            "1 0.5 0.75 0.5\n"
            "edges 1\n"
            "0 1.0 0.5 I 0 0.25\n"
            "xi 0.5\n")
    with pytest.raises(MeshFormatError, match="inconsistent"):
        load_mesh(text)


def test_validate_flags_overstated_regularity(mesh0):
    # a stored regularity constant larger than the true minimum ratio is a
    # violation detectable from the graph alone
    text = save_mesh(mesh0)
    inflated = text.replace(f"xi {mesh0.xi:.17g}", "xi 0.9")
    report = validate(load_mesh(inflated))
    assert any(v.hypothesis == "H3" for v in report.violations)


def test_comments_and_blank_lines_ignored(mesh0):
    text = save_mesh(mesh0)
    noisy = "# generated mesh\n\n" + text.replace("edges", "# incidence\nedges", 1)
    assert load_mesh(noisy).n_cells == mesh0.n_cells
