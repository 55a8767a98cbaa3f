import numpy as np
import pytest

from zenerwave.mesh import (Mesh, MeshError, build_facets, load_mesh,
                            refine_uniform, save_mesh, unit_square_mesh)


def test_unit_square_counts():
    # 2x2 cells: 9 vertices, 8 triangles, hand-counted skeleton:
    # 8 boundary edges, (3*8 - 8)/2 = 8 interior facets
    mesh = unit_square_mesh(2)
    assert mesh.num_vertices == 9
    assert mesh.num_elements == 8
    facets = build_facets(mesh)
    assert facets.num_boundary == 8
    assert facets.num_interior == 8


def test_interior_facet_count_formula():
    for n in (1, 2, 3, 5):
        mesh = unit_square_mesh(n)
        facets = build_facets(mesh)
        assert facets.num_interior == (3 * mesh.num_elements - facets.num_boundary) // 2


def test_areas_positive_and_sum_to_one():
    mesh = unit_square_mesh(4)
    areas = mesh.signed_areas()
    assert np.all(areas > 0)
    assert abs(areas.sum() - 1.0) < 1e-14


def test_mesh_size_is_max_diameter():
    mesh = unit_square_mesh(4)
    # structured cells of side 1/4, hypotenuse sqrt(2)/4
    assert abs(mesh.h - np.sqrt(2.0) / 4.0) < 1e-14


def test_refine_quadruples_elements_and_halves_h():
    mesh = unit_square_mesh(2)
    fine = refine_uniform(mesh)
    assert fine.num_elements == 32
    # 9 original vertices plus one midpoint per edge (16 edges)
    assert fine.num_vertices == 25
    assert abs(fine.h - 0.5 * mesh.h) < 1e-14
    facets = build_facets(fine)
    assert facets.num_boundary == 16
    assert facets.num_interior == (3 * 32 - 16) // 2


def test_refine_preserves_subdomains_and_markers():
    mesh = unit_square_mesh(2, interface_x=0.5)
    fine = refine_uniform(mesh)
    # tags are inherited: children keep the parent's side of the interface
    cx = fine.centroids()[:, 0]
    assert np.all(fine.subdomain[cx < 0.5] == 1)
    assert np.all(fine.subdomain[cx > 0.5] == 2)
    facets = build_facets(fine)
    assert np.all(facets.boundary_markers == 0)
    assert len(fine.boundary_markers) == 16


def test_interface_subdomain_split():
    mesh = unit_square_mesh(2, interface_x=0.5)
    assert np.count_nonzero(mesh.subdomain == 1) == 4
    assert np.count_nonzero(mesh.subdomain == 2) == 4
    with pytest.raises(MeshError):
        unit_square_mesh(3, interface_x=0.5)


def test_normals_unit_and_outward():
    mesh = unit_square_mesh(3)
    facets = build_facets(mesh)
    for normals in (facets.interior_normals, facets.boundary_normals):
        lengths = np.linalg.norm(normals, axis=1)
        assert np.all(np.abs(lengths - 1.0) < 1e-12)
    # outward check: normal dotted with (midpoint - centroid) positive
    mids = facets.facet_midpoints(boundary=True)
    cent = mesh.centroids()[facets.boundary_elems]
    dots = np.einsum("ij,ij->i", facets.boundary_normals, mids - cent)
    assert np.all(dots > 0)


def test_roundtrip_identical(tmp_path):
    mesh = unit_square_mesh(3, interface_x=1.0 / 3.0)
    path = tmp_path / "m.txt"
    save_mesh(mesh, path)
    back = load_mesh(path)
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.elements, mesh.elements)
    assert np.array_equal(back.subdomain, mesh.subdomain)
    assert back.boundary_markers == mesh.boundary_markers


def test_load_rejects_bad_header(tmp_path):
    path = tmp_path / "m.txt"
    path.write_text("3\n0 0\n1 0\n0 1\n0 1 2 1\n")
    with pytest.raises(MeshError):
        load_mesh(path)


def test_load_rejects_truncated_file(tmp_path):
    path = tmp_path / "m.txt"
    path.write_text("4 2\n0 0\n1 0\n0 1\n1 1\n0 1 2 1\n")
    with pytest.raises(MeshError):
        load_mesh(path)


def test_load_rejects_out_of_range_index(tmp_path):
    path = tmp_path / "m.txt"
    path.write_text("3 1\n0 0\n1 0\n0 1\n0 1 5 1\n")
    with pytest.raises(MeshError):
        load_mesh(path)


def test_inverted_element_rejected():
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(MeshError):
        Mesh(verts, np.array([[0, 2, 1]]))  # clockwise


def test_half_edge_sharing_rejected():
    # vertex 3 sits in the middle of element 0's bottom edge
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0],
                      [0.5, 0.0], [0.5, -1.0]])
    elems = np.array([[0, 1, 2], [0, 4, 3]])
    with pytest.raises(MeshError):
        Mesh(verts, elems)


def test_markers_survive_load(tmp_path):
    path = tmp_path / "m.txt"
    path.write_text("3 1\n0 0\n1 0\n0 1\n0 1 2 1\n0 1 7\n")
    mesh = load_mesh(path)
    facets = build_facets(mesh)
    row = np.where((facets.boundary_vertices == (0, 1)).all(axis=1))[0][0]
    assert facets.boundary_markers[row] == 7
    # unmarked edges default to 0 (Dirichlet)
    assert sorted(facets.boundary_markers) == [0, 0, 7]


def test_facet_orientation_flags():
    mesh = unit_square_mesh(2)
    facets = build_facets(mesh)
    # both sides of an interior facet must disagree on direction matching
    # only when their local edges run oppositely; verify via coordinates
    verts = mesh.vertices
    from zenerwave.mesh import EDGE_VERTICES
    for f in range(facets.num_interior):
        v0, v1 = facets.interior_vertices[f]
        for side in range(2):
            e = facets.interior_elems[f, side]
            loc = facets.interior_local[f, side]
            a, b = EDGE_VERTICES[loc]
            tail = mesh.elements[e, a]
            head = mesh.elements[e, b]
            if facets.interior_flip[f, side]:
                assert (tail, head) == (v1, v0)
            else:
                assert (tail, head) == (v0, v1)
